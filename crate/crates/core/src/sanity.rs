//! Self-checks of the core invariants, run by the `sanity` subcommand.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::flow::{EncoderKind, FlowConfig, FlowModel};
use crate::io::{checkpoint, psnr};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;
use crate::tiler;
use crate::training::TrainConfig;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn small_config(levels: usize, steps: usize, channels: usize, size: usize) -> FlowConfig {
    FlowConfig {
        levels,
        steps,
        c_inter: 8,
        blocks: 1,
        channels,
        height: size,
        width: size,
        encoder: EncoderKind::Conv3,
        base_learn_std: true,
    }
}

/// Add `scale`-sized Gaussian noise to every parameter so that zero-initialized
/// layers stop being identities.
pub fn perturb(model: &mut FlowModel, scale: f64, rng: &mut Rng) {
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn random_input(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

fn invertibility() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for (i, levels) in (1..=3).enumerate() {
        for steps in [1, 2] {
            let mut rng = stream(7, &[i as u64, steps as u64]);
            let mut model = FlowModel::new(small_config(levels, steps, 1, 8), i as u64)?;
            perturb(&mut model, 0.05, &mut rng);
            let x = random_input(vec![2, 1, 8, 8], &mut rng);
            let (z, _) = model.encode(&x)?;
            worst = worst.max(model.decode(&z)?.max_abs_diff(&x));
        }
    }
    Ok((worst < 1e-8, format!("max |T^-1(T(x)) - x| = {worst:.2e}")))
}

/// Analytic log-det against a finite-difference Jacobian of a single-level model.
fn log_det() -> Result<(bool, String)> {
    let mut rng = stream(8, &[]);
    let mut model = FlowModel::new(small_config(1, 2, 1, 4), 3)?;
    perturb(&mut model, 0.1, &mut rng);
    let x = random_input(vec![1, 1, 4, 4], &mut rng);
    let (z, lp) = model.encode(&x)?;
    let analytic = lp[0] - model.base().log_prob(&z.latents[0])?;
    let d = x.len();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[j] += h;
        xm.data_mut()[j] -= h;
        let (zp, zm) = (&model.encode(&xp)?.0.latents[0], &model.encode(&xm)?.0.latents[0]);
        for i in 0..d {
            jac[(i, j)] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
        }
    }
    let dense = jac.determinant().abs().ln();
    let rel = (analytic - dense).abs() / dense.abs().max(1e-12);
    Ok((
        rel < 1e-6,
        format!("analytic {analytic:.9}, dense {dense:.9}, rel err {rel:.2e}"),
    ))
}

/// Identity-initialized flow reduces to a standard Gaussian on squeezed inputs.
fn gaussian_reduction() -> Result<(bool, String)> {
    let mut model = FlowModel::new(small_config(1, 2, 1, 8), 0)?;
    let x = random_input(vec![1, 1, 8, 8], &mut stream(9, &[]));
    // Identity 1x1 convolutions; couplings and actnorm are identities at init.
    for level in model.levels.clone() {
        for step in &level.steps {
            let c = step.invconv.channels;
            let eye = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
            model.params.set(step.invconv.weight, eye)?;
        }
    }
    let lp = model.log_prob(&x)?[0];
    let closed = -0.5
        * x.data()
            .iter()
            .map(|v| v * v + (2.0 * std::f64::consts::PI).ln())
            .sum::<f64>();
    let err = (lp - closed).abs();
    Ok((err < 1e-9, format!("|log p - closed form| = {err:.2e}")))
}

fn tiler_partition() -> Result<(bool, String)> {
    let mut checked = 0;
    for h in (16..=200).step_by(23) {
        for w in (16..=200).step_by(29) {
            let grid = tiler::plan(h, w, 32, 4)?;
            let mut count = vec![0u8; h * w];
            for t in &grid.tiles {
                for y in t.core.y..t.core.y + t.core.h {
                    for x in t.core.x..t.core.x + t.core.w {
                        count[y * w + x] += 1;
                    }
                }
            }
            if count.iter().any(|&c| c != 1) {
                return Ok((false, format!("cores do not partition {h}x{w}")));
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} image sizes partitioned exactly")))
}

fn checkpoint_roundtrip() -> Result<(bool, String)> {
    let mut config = TrainConfig::sprites();
    config.flow = small_config(2, 1, 1, 8);
    let mut model = FlowModel::new(config.flow.clone(), 1)?;
    perturb(&mut model, 0.1, &mut stream(10, &[]));
    let ck = checkpoint::Checkpoint {
        config,
        step: 17,
        model,
        adam: None,
    };
    let bytes = checkpoint::to_bytes(&ck);
    let back = checkpoint::from_bytes(&bytes)?;
    let exact = back.model.params == ck.model.params && checkpoint::to_bytes(&back) == bytes;
    Ok((exact, format!("{} bytes, bit-exact = {exact}", bytes.len())))
}

fn psnr_closed_form() -> Result<(bool, String)> {
    let a = Tensor::full(vec![1, 1, 8, 8], 100.0);
    let b = Tensor::full(vec![1, 1, 8, 8], 110.0);
    let v = psnr(&a, &b, 255.0)?;
    Ok(((v - 28.13).abs() < 0.01, format!("{v:.4} dB")))
}

type CheckFn = fn() -> Result<(bool, String)>;

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 6] = [
        ("invertibility", invertibility),
        ("log-det", log_det),
        ("gaussian-reduction", gaussian_reduction),
        ("tiler-partition", tiler_partition),
        ("checkpoint-roundtrip", checkpoint_roundtrip),
        ("psnr", psnr_closed_form),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
