use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use super::SoftLabel;
use crate::error::{Error, Result};
use crate::rng::Rng;

fn check_batch(images: &[Array1<f32>], labels: &[SoftLabel], alpha: f64) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::invalid("one label is required per image"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha {alpha} must be positive")));
    }
    Ok(())
}

fn partners(len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    perm
}

/// Mixup with `λ ~ Beta(α, α)` shared across the batch and partners from a
/// random permutation. Batches of one are returned unchanged.
pub fn mixup(images: &mut [Array1<f32>], labels: &mut [SoftLabel], alpha: f64, rng: &mut Rng) -> Result<f64> {
    check_batch(images, labels, alpha)?;
    if images.len() < 2 {
        return Ok(1.0);
    }
    let lambda = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?.sample(rng);
    let perm = partners(images.len(), rng);
    mixup_with(images, labels, lambda, &perm)?;
    Ok(lambda)
}

/// `x_a ← λ·x_a + (1−λ)·x_perm[a]`, labels alike.
pub fn mixup_with(images: &mut [Array1<f32>], labels: &mut [SoftLabel], lambda: f64, perm: &[usize]) -> Result<()> {
    if perm.len() != images.len() || labels.len() != images.len() {
        return Err(Error::invalid("permutation, images and labels must have equal length"));
    }
    let (src_x, src_y) = (images.to_vec(), labels.to_vec());
    let l = lambda as f32;
    for (a, &b) in perm.iter().enumerate() {
        images[a] = &src_x[a] * l + &src_x[b] * (1.0 - l);
        labels[a] = src_y[a].blend(&src_y[b], lambda)?;
    }
    Ok(())
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.y1.saturating_sub(self.y0) * self.x1.saturating_sub(self.x0)
    }

    /// Box of side ratio `√(1−λ)` centred at a uniform pixel, clipped to the image.
    pub fn sample(height: usize, width: usize, lambda: f64, rng: &mut Rng) -> Self {
        let ratio = (1.0 - lambda).max(0.0).sqrt();
        let (ch, cw) = ((height as f64 * ratio) as usize, (width as f64 * ratio) as usize);
        let (cy, cx) = (rng.random_range(0..height), rng.random_range(0..width));
        CutBox {
            y0: cy.saturating_sub(ch / 2),
            y1: (cy + ch / 2 + ch % 2).min(height),
            x0: cx.saturating_sub(cw / 2),
            x1: (cx + cw / 2 + cw % 2).min(width),
        }
    }
}

/// CutMix over `[C, H, W]` images. Returns the box used.
pub fn cutmix(
    images: &mut [Array1<f32>],
    labels: &mut [SoftLabel],
    shape: [usize; 3],
    alpha: f64,
    rng: &mut Rng,
) -> Result<CutBox> {
    check_batch(images, labels, alpha)?;
    let empty = CutBox { y0: 0, y1: 0, x0: 0, x1: 0 };
    if images.len() < 2 {
        return Ok(empty);
    }
    let lambda = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?.sample(rng);
    let cut = CutBox::sample(shape[1], shape[2], lambda, rng);
    let perm = partners(images.len(), rng);
    cutmix_with_box(images, labels, shape, cut, &perm)?;
    Ok(cut)
}

/// Pastes `cut` from each partner into each image; the partner's label
/// weight is the box's share of the image area.
pub fn cutmix_with_box(
    images: &mut [Array1<f32>],
    labels: &mut [SoftLabel],
    shape: [usize; 3],
    cut: CutBox,
    perm: &[usize],
) -> Result<()> {
    let [channels, height, width] = shape;
    if perm.len() != images.len() || labels.len() != images.len() {
        return Err(Error::invalid("permutation, images and labels must have equal length"));
    }
    if cut.y1 > height || cut.x1 > width || cut.y0 > cut.y1 || cut.x0 > cut.x1 {
        return Err(Error::invalid(format!("box {cut:?} does not fit a {height}x{width} image")));
    }
    if images.iter().any(|x| x.len() != channels * height * width) {
        return Err(Error::invalid("image size does not match the declared shape"));
    }
    let pasted = cut.area() as f64 / (height * width) as f64;
    let (src_x, src_y) = (images.to_vec(), labels.to_vec());
    for (a, &b) in perm.iter().enumerate() {
        for ch in 0..channels {
            for y in cut.y0..cut.y1 {
                for x in cut.x0..cut.x1 {
                    let i = (ch * height + y) * width + x;
                    images[a][i] = src_x[b][i];
                }
            }
        }
        labels[a] = src_y[a].blend(&src_y[b], 1.0 - pasted)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::ClassId;
    use crate::rng::seeded;
    use ndarray::array;

    fn one_hot(i: usize, n: usize) -> SoftLabel {
        SoftLabel::one_hot(ClassId::from_zero_based(i), n).unwrap()
    }

    #[test]
    fn mixup_lambda_one_is_identity() {
        let mut x = vec![array![1.0f32, 2.0], array![3.0, 4.0]];
        let mut y = vec![one_hot(0, 2), one_hot(1, 2)];
        let (x0, y0) = (x.clone(), y.clone());
        mixup_with(&mut x, &mut y, 1.0, &[1, 0]).unwrap();
        assert_eq!((x, y), (x0, y0));
    }

    #[test]
    fn mixup_half_blends_labels() {
        let mut x = vec![array![0.0f32, 2.0], array![2.0, 0.0]];
        let mut y = vec![one_hot(0, 2), one_hot(1, 2)];
        mixup_with(&mut x, &mut y, 0.5, &[1, 0]).unwrap();
        assert_eq!(y[0].probs(), &[0.5, 0.5]);
        assert_eq!(x[0], array![1.0, 1.0]);
    }

    #[test]
    fn single_item_batches_are_untouched() {
        let mut x = vec![array![1.0f32]];
        let mut y = vec![one_hot(0, 2)];
        mixup(&mut x, &mut y, 0.2, &mut seeded(0)).unwrap();
        assert_eq!(x[0], array![1.0]);
        cutmix(&mut x, &mut y, [1, 1, 1], 1.0, &mut seeded(0)).unwrap();
        assert_eq!(y[0], one_hot(0, 2));
        assert!(mixup(&mut x, &mut y, 0.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn random_mixup_keeps_simplex() {
        let mut rng = seeded(5);
        for _ in 0..50 {
            let mut x: Vec<_> = (0..6).map(|i| array![i as f32]).collect();
            let mut y: Vec<_> = (0..6).map(|i| one_hot(i % 4, 4)).collect();
            mixup(&mut x, &mut y, 0.4, &mut rng).unwrap();
            for l in &y {
                assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quarter_box_gives_quarter_weight() {
        let mut x = vec![Array1::zeros(16), Array1::ones(16)];
        let mut y = vec![one_hot(0, 2), one_hot(1, 2)];
        let cut = CutBox { y0: 0, y1: 2, x0: 0, x1: 2 };
        cutmix_with_box(&mut x, &mut y, [1, 4, 4], cut, &[1, 0]).unwrap();
        assert_eq!(y[0].probs(), &[0.75, 0.25]);
        assert_eq!(x[0].sum(), 4.0);
    }

    #[test]
    fn empty_box_is_identity() {
        let mut x = vec![Array1::zeros(16), Array1::ones(16)];
        let mut y = vec![one_hot(0, 2), one_hot(1, 2)];
        let (x0, y0) = (x.clone(), y.clone());
        let cut = CutBox { y0: 2, y1: 2, x0: 1, x1: 3 };
        cutmix_with_box(&mut x, &mut y, [1, 4, 4], cut, &[1, 0]).unwrap();
        assert_eq!((x, y), (x0, y0));
    }

    #[test]
    fn pasted_pixel_share_matches_label_weight() {
        let mut rng = seeded(11);
        let (h, w) = (7, 9);
        for _ in 0..200 {
            let mut x = vec![Array1::zeros(2 * h * w), Array1::ones(2 * h * w)];
            let mut y = vec![one_hot(0, 2), one_hot(1, 2)];
            cutmix(&mut x, &mut y, [2, h, w], 1.0, &mut rng).unwrap();
            for (img, lab) in x.iter().zip(&y) {
                // Pixels that differ from the original image came from the partner.
                let own = if lab.probs()[0] >= lab.probs()[1] { 0.0 } else { 1.0 };
                let foreign = img.iter().filter(|v| **v != own).count() as f64 / (2 * h * w) as f64;
                let partner = lab.probs()[0].min(lab.probs()[1]);
                let weight = if own == 0.0 { lab.probs()[1] } else { lab.probs()[0] };
                assert!((foreign - weight).abs() <= 1.0 / (h * w) as f64, "{foreign} vs {weight} ({partner})");
            }
        }
    }
}
