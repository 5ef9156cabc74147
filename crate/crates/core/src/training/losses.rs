//! Training objectives: dequantized NLL, latent-noise, auto-encoder and
//! image-noise losses, and their weighted total.
//!
//! Distance losses are L2 norms per image, averaged over the batch.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::flow::{Bound, FlowModel, Mode};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Number of 8-bit intensity levels; pixels map to the model range by `/ 256`.
pub const PIXEL_LEVELS: f64 = 256.0;

/// Add `U[0, 1)` noise to integer pixels (or nothing when `rng` is `None`)
/// and map to the model range `[0, 1)`.
pub fn dequantize(pixels: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
    if let Some(i) = pixels
        .data()
        .iter()
        .position(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0)
    {
        return Err(Error::Domain {
            op: "dequantize",
            detail: format!("pixel {i} = {} is not an integer in [0, 255]", pixels.data()[i]),
        });
    }
    Ok(match rng {
        Some(rng) => {
            let mut out = pixels.clone();
            for v in out.data_mut() {
                *v = (*v + rng.random::<f64>()) / PIXEL_LEVELS;
            }
            out
        }
        None => pixels.map(|v| v / PIXEL_LEVELS),
    })
}

/// Bits per dimension of a per-image NLL (nats) measured in the model range.
pub fn bits_per_dim(nll: f64, dims: usize) -> f64 {
    nll / (dims as f64 * std::f64::consts::LN_2) + PIXEL_LEVELS.log2()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub beta_ln: f64,
    pub beta_ae: f64,
    pub beta_in: f64,
}

/// Noise realizations for the stochastic loss terms.
#[derive(Clone, Debug, Default)]
pub struct LossNoise {
    /// One tensor per latent level, `u_0` first.
    pub latent: Option<Vec<Tensor>>,
    /// Model-range image perturbation.
    pub image: Option<Tensor>,
}

fn uniform(shape: Vec<usize>, half_width: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| (2.0 * rng.random::<f64>() - 1.0) * half_width)
}

/// `xi ~ U(-a, a)` for every latent entry of an `n`-image batch.
pub fn latent_noise(model: &FlowModel, n: usize, half_width: f64, rng: &mut Rng) -> Vec<Tensor> {
    model
        .latent_shapes()
        .iter()
        .map(|&[c, h, w]| uniform(vec![n, c, h, w], half_width, rng))
        .collect()
}

/// `eta ~ U(-a, a)` per pixel, `a` in pixel units, returned in model units.
pub fn image_noise(shape: &[usize], half_width_pixels: f64, rng: &mut Rng) -> Tensor {
    uniform(shape.to_vec(), half_width_pixels / PIXEL_LEVELS, rng)
}

fn per_sample_norm<'t>(diff: Var<'t>) -> Result<Var<'t>> {
    diff.square().sum_per_sample()?.sqrt()
}

fn check_finite(what: &'static str, v: &Var<'_>) -> Result<()> {
    match v.value().data().iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Mean over the batch of `-log p(x)`.
pub fn loss_nll<'t>(model: &FlowModel, p: &Bound<'t>, x: Var<'t>, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    let enc = model.encode_var(p, x, mode)?;
    check_finite("log_prob", &enc.log_prob)?;
    Ok(enc.log_prob.mean().neg())
}

/// `|| T(T^-1(x) + xi) - x ||_2` with one noise tensor per latent level.
pub fn loss_latent_noise<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    x: Var<'t>,
    xi: &[Tensor],
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let enc = model.encode_var(p, x, mode)?;
    latent_noise_term(model, p, x, &enc.latents, xi, mode)
}

fn latent_noise_term<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    x: Var<'t>,
    latents: &[Var<'t>],
    xi: &[Tensor],
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    if xi.len() != latents.len() {
        return Err(Error::InvalidShape {
            op: "latent noise",
            detail: format!("{} noise tensors for {} latents", xi.len(), latents.len()),
        });
    }
    let tape = x.tape();
    let noisy = latents
        .iter()
        .zip(xi)
        .map(|(&u, n)| u.add(tape.constant(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    let dec = model.decode_stack_var(p, &noisy, mode)?;
    Ok(per_sample_norm(dec.x.sub(x)?)?.mean())
}

/// `|| mean_decode(u_0(x)) - x ||_2`; identically zero for single-level models.
pub fn loss_autoencoder<'t>(model: &FlowModel, p: &Bound<'t>, x: Var<'t>, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    if model.levels.len() == 1 {
        return Ok(x.tape().constant(Tensor::scalar(0.0)));
    }
    let enc = model.encode_var(p, x, mode)?;
    autoencoder_term(model, p, x, enc.latents[0], mode)
}

fn autoencoder_term<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    x: Var<'t>,
    u0: Var<'t>,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let dec = model.mean_decode_var(p, u0, mode)?;
    Ok(per_sample_norm(dec.x.sub(x)?)?.mean())
}

/// `|| T^-1(x) - T^-1(x + eta) ||_2` over the full latent stack.
pub fn loss_image_noise<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    x: Var<'t>,
    eta: &Tensor,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let enc = model.encode_var(p, x, mode)?;
    image_noise_term(model, p, x, &enc.latents, eta, mode)
}

fn image_noise_term<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    x: Var<'t>,
    latents: &[Var<'t>],
    eta: &Tensor,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let noisy = model.encode_var(p, x.add(x.tape().constant(eta.clone()))?, mode)?;
    let mut sq: Option<Var<'t>> = None;
    for (&a, &b) in latents.iter().zip(&noisy.latents) {
        let s = a.sub(b)?.square().sum_per_sample()?;
        sq = Some(match sq {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    let sq = sq.ok_or_else(|| Error::Contract("model has no latents".into()))?;
    Ok(sq.sqrt()?.mean())
}

/// All loss components of one evaluation.
pub struct LossTerms<'t> {
    pub nll: Var<'t>,
    pub l_ln: Option<Var<'t>>,
    pub l_ae: Option<Var<'t>>,
    pub l_in: Option<Var<'t>>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn values(&self) -> [f64; 5] {
        let v = |t: &Option<Var>| t.map_or(0.0, |t| t.item());
        [
            self.nll.item(),
            v(&self.l_ln),
            v(&self.l_ae),
            v(&self.l_in),
            self.total.item(),
        ]
    }
}

/// `L_nll + beta_ln L_ln + beta_ae L_ae + beta_in L_in`, sharing one encode.
/// Terms with zero weight are not evaluated.
pub fn total_loss<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    x: Var<'t>,
    weights: LossWeights,
    noise: &LossNoise,
    mode: &mut Mode<'_>,
) -> Result<LossTerms<'t>> {
    let enc = model.encode_var(p, x, mode)?;
    check_finite("log_prob", &enc.log_prob)?;
    let nll = enc.log_prob.mean().neg();
    let mut total = nll;
    let l_ln = if weights.beta_ln > 0.0 {
        let xi = noise
            .latent
            .as_ref()
            .ok_or_else(|| Error::Contract("latent-noise loss needs latent noise".into()))?;
        let t = latent_noise_term(model, p, x, &enc.latents, xi, mode)?;
        total = total.add(t.scale(weights.beta_ln))?;
        Some(t)
    } else {
        None
    };
    let l_ae = if weights.beta_ae > 0.0 && model.levels.len() > 1 {
        let t = autoencoder_term(model, p, x, enc.latents[0], mode)?;
        total = total.add(t.scale(weights.beta_ae))?;
        Some(t)
    } else {
        None
    };
    let l_in = if weights.beta_in > 0.0 {
        let eta = noise
            .image
            .as_ref()
            .ok_or_else(|| Error::Contract("image-noise loss needs image noise".into()))?;
        let t = image_noise_term(model, p, x, &enc.latents, eta, mode)?;
        total = total.add(t.scale(weights.beta_in))?;
        Some(t)
    } else {
        None
    };
    check_finite("total loss", &total)?;
    Ok(LossTerms {
        nll,
        l_ln,
        l_ae,
        l_in,
        total,
    })
}
