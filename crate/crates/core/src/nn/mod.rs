//! Minimal tensors with tape-based reverse-mode differentiation, plus the
//! optimizer, weight averaging and checkpoint plumbing shared by the
//! denoiser and the detector.
//!
//! All arithmetic is `f64`; checkpoints store `f32`.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile};
pub use optim::{adamw_step, ema_update, AdamWConfig, EmaState, OptState};
pub use params::{Init, ParamSet};
pub use tape::{Bound, Tape, Var};
pub use tensor::Tensor;

/// Sinusoidal embedding of integer timesteps: `[sin(t·f_i), cos(t·f_i)]`
/// with `f_i = 10000^(-i/half)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        data.extend(row);
    }
    Tensor::from_vec(vec![timesteps.len(), dim], data)
}
