//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar node sweeps the record once in reverse.
//! Primitives cover what the classifiers, attacks and the learned maximizer
//! need: matmul, 2-D convolution, max pooling, relu/tanh, elementwise
//! arithmetic and clamping, `sign` (zero backward), and fused softmax
//! cross-entropy / KL divergence / clipped margin losses.

mod kernels;
mod ops;
mod tape;

pub use ops::sign_value;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A loss value together with named gradients.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub loss: f64,
    pub grads: Vec<(String, Tensor)>,
}

impl GradBundle {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        if !self.loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        for (name, g) in &self.grads {
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        Ok(())
    }
}

/// Central finite differences: `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference probe at coordinate {i}"
            )));
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}
