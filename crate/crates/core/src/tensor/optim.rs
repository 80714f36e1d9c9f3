use super::Tensor;
use crate::error::{Error, Result};

/// `param − lr·grad`.
pub fn sgd_update(param: &Tensor, grad: &Tensor, lr: f32) -> Result<Tensor> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "sgd_update",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    let data = param
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&w, &g)| w - lr * g)
        .collect();
    Ok(Tensor::from_parts(param.shape().to_vec(), data))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

/// Plain stochastic gradient descent with optional global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub clip: Option<f64>,
}

impl Sgd {
    pub fn new(lr: f32) -> Self {
        Sgd {
            lr,
            clip: Some(5.0),
        }
    }

    pub fn without_clipping(lr: f32) -> Self {
        Sgd { lr, clip: None }
    }

    /// Clips `grads` (if configured) and applies one update to every param.
    pub fn step(&self, params: &mut [&mut Tensor], grads: &mut [Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "sgd",
                format!("{} params but {} grads", params.len(), grads.len()),
            ));
        }
        if let Some(max) = self.clip {
            clip_global_norm(grads, max);
        }
        for (p, g) in params.iter_mut().zip(grads.iter()) {
            **p = sgd_update(p, g, self.lr)?;
        }
        Ok(())
    }
}
