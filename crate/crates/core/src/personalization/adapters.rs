use crate::diffusion::ToyDenoiser;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::{self, Stream};

/// Models exposing the attention weight matrices adapters attach to.
pub trait Adaptable {
    fn adapter_targets(&mut self) -> Vec<(String, &mut Linear)>;
}

impl Adaptable for ToyDenoiser {
    fn adapter_targets(&mut self) -> Vec<(String, &mut Linear)> {
        self.attention_layers_mut()
    }
}

/// Attaches a rank-`rank` adapter with `B = 0` to every attention matrix.
/// Nothing is attached unless every target accepts the rank. Returns the
/// target names.
pub fn attach_adapters<M: Adaptable + ?Sized>(model: &mut M, rank: usize, seed: u64) -> Result<Vec<String>> {
    if rank == 0 {
        return Err(Error::invalid("adapter rank must be at least 1"));
    }
    let mut targets = model.adapter_targets();
    for (name, layer) in &targets {
        let (m, n) = (layer.outputs(), layer.inputs());
        if rank > m.min(n) {
            return Err(Error::invalid(format!(
                "rank {rank} exceeds min dimension of {name} ({m}x{n})"
            )));
        }
        if layer.adapter.is_some() {
            return Err(Error::state(format!("{name} already carries an adapter")));
        }
    }
    let mut rng = rng::stream(seed, Stream::Init, 1);
    let mut names = Vec::with_capacity(targets.len());
    for (name, layer) in targets.iter_mut() {
        layer.attach(name, rank, &mut rng)?;
        names.push(name.clone());
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Denoiser, ToyDenoiserConfig};
    use ndarray::Array2;

    #[test]
    fn attachment_preserves_outputs() {
        let mut m = ToyDenoiser::new(ToyDenoiserConfig::new(4, 100, 1)).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(r, c)| (r * 4 + c) as f32 * 0.1 - 1.0);
        let c = Array2::from_shape_fn((5, 16), |(r, c)| ((r + c) as f32).cos());
        let t = [1, 20, 40, 60, 99];
        let before = m.predict(x.view(), &t, c.view());
        let names = attach_adapters(&mut m, 10, 0).unwrap();
        assert_eq!(names.len(), 6);
        let after = m.predict(x.view(), &t, c.view());
        let diff = (&after - &before).mapv(f32::abs).fold(0.0f32, |a, b| a.max(*b));
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn rank_ten_on_square_hidden_matrix() {
        let mut m = ToyDenoiser::new(ToyDenoiserConfig::new(4, 100, 1)).unwrap();
        attach_adapters(&mut m, 10, 0).unwrap();
        let (_, layer) = m
            .adapter_targets()
            .into_iter()
            .find(|(n, _)| n == "blocks.0.attn.query")
            .unwrap();
        assert_eq!((layer.outputs(), layer.inputs()), (64, 64));
        assert_eq!(layer.adapter.as_ref().unwrap().param_count(), 64 * 10 + 64 * 10);
    }

    #[test]
    fn oversized_rank_names_the_matrix() {
        let mut m = ToyDenoiser::new(ToyDenoiserConfig::new(4, 100, 1)).unwrap();
        let err = attach_adapters(&mut m, 17, 0).unwrap_err().to_string();
        assert!(err.contains("blocks.0.attn.context"), "{err}");
        assert!(!m.has_adapters());
        assert!(attach_adapters(&mut m, 0, 0).is_err());
    }
}
