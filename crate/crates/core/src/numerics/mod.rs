//! Dense `f64` tensors, a reverse-mode tape, and Adam.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Per-channel mean over the spatial extent: `[h, w, c] -> [1, 1, c]`.
pub fn average_pool_spatial(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "average pool expects [h, w, c], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[h * w, c])?;
    let mean = tape.mean_axis(flat, 0)?;
    tape.reshape(mean, &[1, 1, c])
}

#[cfg(test)]
mod tests;
