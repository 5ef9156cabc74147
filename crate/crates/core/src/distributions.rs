//! Diagonal Gaussian densities used for the base and the factored-out latents.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// `0.5 * ln(2 pi)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Tensor,
    /// `sigma = exp(log_std)`, so sigma is positive by construction.
    pub log_std: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(Error::shape("DiagGaussian", mean.shape(), log_std.shape()));
        }
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        DiagGaussian {
            mean: Tensor::zeros(shape.clone()),
            log_std: Tensor::zeros(shape),
        }
    }

    /// Sum over entries of the log-density.
    pub fn log_prob(&self, x: &Tensor) -> Result<f64> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape("log_prob", self.mean.shape(), x.shape()));
        }
        Ok(x.data()
            .iter()
            .zip(self.mean.data())
            .zip(self.log_std.data())
            .map(|((&x, &mu), &ls)| {
                let z = (x - mu) * (-ls).exp();
                -0.5 * z * z - ls - HALF_LOG_2PI
            })
            .sum())
    }

    /// `mu + sigma * eps` with `eps ~ N(0, 1)`.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let mut out = self.mean.clone();
        for (o, &ls) in out.data_mut().iter_mut().zip(self.log_std.data()) {
            let eps: f64 = rng.sample(StandardNormal);
            *o += ls.exp() * eps;
        }
        out
    }

    pub fn mean_of(&self) -> &Tensor {
        &self.mean
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.data().iter().map(|ls| ls + 0.5 + HALF_LOG_2PI).sum()
    }
}

/// Per-sample diagonal Gaussian log-density on the tape, shape `[N]`.
///
/// `mean` and `log_std` must match `x` exactly; callers broadcast over the
/// batch axis beforehand.
pub fn log_prob_var<'t>(x: Var<'t>, mean: Var<'t>, log_std: Var<'t>) -> Result<Var<'t>> {
    let z = x.sub(mean)?.mul(log_std.neg().exp())?;
    z.square()
        .scale(-0.5)
        .sub(log_std)?
        .offset(-HALF_LOG_2PI)
        .sum_per_sample()
}

/// Log-density of a univariate normal, used as an independent scalar reference.
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    let pdf = (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt());
    pdf.ln()
}
