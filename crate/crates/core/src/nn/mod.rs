//! Minimal single-precision building blocks for the bundled toy backend:
//! dense layers with optional low-rank residuals, activations, and Adam.

mod linear;
mod lora;
mod optim;
mod param;

pub use linear::{silu, silu_backward, Linear, LinearCache};
pub use lora::LowRankAdapter;
pub use optim::{Adam, AdamConfig};
pub use param::{Param, Parameterized};

use sha2::{Digest, Sha256};

/// Hash of every parameter value matching `filter`, in visiting order.
pub fn checksum<M: Parameterized + ?Sized>(model: &M, filter: impl Fn(&str) -> bool) -> String {
    let mut hasher = Sha256::new();
    for (name, p) in model.params() {
        if !filter(&name) {
            continue;
        }
        hasher.update(name.as_bytes());
        for v in p.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
