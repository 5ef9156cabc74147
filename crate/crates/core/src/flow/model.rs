//! Multi-scale flow: levels of squeeze, K flow steps and a factor-out split.
//!
//! Latents are numbered from the deepest level: `u_0` is what remains after
//! the last level, `u_{L-1}` is factored out by the first (finest) level.

use super::layers::{squeeze, ActNorm, AffineCoupling, ContextEncoder, Direction, InvConv1x1, Mode};
use super::params::{Bound, ParamId, ParamStore};
use crate::distributions::{log_prob_var, DiagGaussian};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Single zero-initialized 3x3 conv.
    Conv3,
    /// Five 3x3 convs behind a dropout layer.
    Deep,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Conv3 => "conv3",
            EncoderKind::Deep => "deep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv3" => Ok(EncoderKind::Conv3),
            "deep" => Ok(EncoderKind::Deep),
            _ => Err(Error::Param(format!(
                "unknown encoder kind '{s}' (expected conv3 or deep)"
            ))),
        }
    }
}

pub const DEEP_ENCODER_LAYERS: usize = 5;
pub const DEEP_ENCODER_DROPOUT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub levels: usize,
    pub steps: usize,
    pub c_inter: usize,
    /// Residual blocks per coupling conditioner.
    pub blocks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderKind,
    /// Learn the base standard deviation; otherwise it stays fixed at 1.
    pub base_learn_std: bool,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("levels", self.levels),
            ("steps", self.steps),
            ("c_inter", self.c_inter),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be positive")));
            }
        }
        if self.levels > 16 {
            return Err(Error::Param(format!("levels = {} is too deep", self.levels)));
        }
        let f = 1usize << self.levels;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Param(format!(
                "{}x{} is not divisible by 2^{} = {f}",
                self.height, self.width, self.levels
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `(C, H, W)` of every latent, `u_0` first.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        let (mut c, mut h, mut w) = (self.channels, self.height, self.width);
        let mut fine_first = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            c *= 4;
            h /= 2;
            w /= 2;
            if level + 1 < self.levels {
                c /= 2;
            }
            fine_first.push([c, h, w]);
        }
        fine_first.reverse();
        fine_first
    }
}

#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1,
    pub coupling: AffineCoupling,
}

#[derive(Clone, Debug)]
pub struct Level {
    pub steps: Vec<FlowStep>,
    /// Context encoder of the factor-out; absent on the last level.
    pub split: Option<ContextEncoder>,
}

/// Latents `u_0 .. u_{L-1}`, each of shape `(N, C_i, H_i, W_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub latents: Vec<Tensor>,
}

impl LatentStack {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.latents.iter().map(Tensor::len).sum()
    }

    pub fn max_abs_diff(&self, other: &LatentStack) -> f64 {
        self.latents
            .iter()
            .zip(&other.latents)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Result of an encode on the tape.
pub struct Encoded<'t> {
    /// `u_0` first.
    pub latents: Vec<Var<'t>>,
    /// Per-sample `log p(x)`, shape `[N]`.
    pub log_prob: Var<'t>,
}

/// Result of a decode on the tape.
pub struct Decoded<'t> {
    pub x: Var<'t>,
    /// Per-sample `log p(x)` of the decoded image, shape `[N]`.
    pub log_prob: Var<'t>,
    /// Latents that were used, `u_0` first (including filled-in ones).
    pub latents: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub params: ParamStore,
    pub levels: Vec<Level>,
    pub base_mean: ParamId,
    pub base_log_std: ParamId,
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[purpose::INIT]);
        let mut params = ParamStore::new();
        let mut levels = Vec::with_capacity(config.levels);
        let mut c = config.channels;
        for l in 0..config.levels {
            c *= 4;
            let steps = (0..config.steps)
                .map(|k| {
                    let name = format!("level{l}.step{k}");
                    Ok(FlowStep {
                        actnorm: ActNorm::new(&mut params, &format!("{name}.actnorm"), c),
                        invconv: InvConv1x1::new(&mut params, &format!("{name}.invconv"), c, &mut rng),
                        coupling: AffineCoupling::new(
                            &mut params,
                            &format!("{name}.coupling"),
                            c,
                            config.c_inter,
                            config.blocks,
                            &mut rng,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let split = if l + 1 < config.levels {
                c /= 2;
                let name = format!("level{l}.split");
                Some(match config.encoder {
                    EncoderKind::Conv3 => ContextEncoder::single(&mut params, &name, c, &mut rng),
                    EncoderKind::Deep => ContextEncoder::deep(
                        &mut params,
                        &name,
                        c,
                        config.c_inter,
                        DEEP_ENCODER_LAYERS,
                        DEEP_ENCODER_DROPOUT,
                        &mut rng,
                    ),
                })
            } else {
                None
            };
            levels.push(Level { steps, split });
        }
        let [c0, h0, w0] = config.latent_shapes()[0];
        let base_shape = vec![1, c0, h0, w0];
        let base_mean = params.add("base.mean", Tensor::zeros(base_shape.clone()), true);
        let base_log_std = params.add("base.log_std", Tensor::zeros(base_shape), config.base_learn_std);
        Ok(FlowModel {
            config,
            params,
            levels,
            base_mean,
            base_log_std,
        })
    }

    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        self.config.latent_shapes()
    }

    pub fn actnorms(&self) -> impl Iterator<Item = &ActNorm> {
        self.levels.iter().flat_map(|l| l.steps.iter().map(|s| &s.actnorm))
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorms().all(|a| a.initialized)
    }

    pub fn set_initialized(&mut self, flag: bool) {
        for level in &mut self.levels {
            for step in &mut level.steps {
                step.actnorm.initialized = flag;
            }
        }
    }

    pub fn base(&self) -> DiagGaussian {
        DiagGaussian {
            mean: self.params.get(self.base_mean).clone(),
            log_std: self.params.get(self.base_log_std).clone(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        let expected = [c.channels, c.height, c.width];
        if shape.len() != 4 || shape[1..] != expected {
            let f = 1usize << c.levels;
            return Err(Error::InvalidShape {
                op: "flow input",
                detail: format!(
                    "expected (N, {}, {}, {}), got {:?}; pad images so height and width are multiples of {f}",
                    c.channels, c.height, c.width, shape
                ),
            });
        }
        Ok(shape[0])
    }

    fn check_latents(&self, shapes: &[Vec<usize>]) -> Result<usize> {
        let expected = self.latent_shapes();
        if shapes.len() != expected.len() {
            return Err(Error::InvalidShape {
                op: "latent stack",
                detail: format!("expected {} levels, got {}", expected.len(), shapes.len()),
            });
        }
        let n = shapes[0].first().copied().unwrap_or(0);
        for (i, (s, e)) in shapes.iter().zip(&expected).enumerate() {
            if s.len() != 4 || s[0] != n || s[1..] != e[..] {
                return Err(Error::InvalidShape {
                    op: "latent stack",
                    detail: format!("u_{i}: expected (N, {}, {}, {}), got {:?}", e[0], e[1], e[2], s),
                });
            }
        }
        Ok(n)
    }

    fn base_log_prob<'t>(&self, p: &Bound<'t>, u0: Var<'t>, n: usize) -> Result<Var<'t>> {
        let mean = p[self.base_mean].expand_batch(n)?;
        let log_std = p[self.base_log_std].expand_batch(n)?;
        log_prob_var(u0, mean, log_std)
    }

    fn step_apply<'t>(
        step: &FlowStep,
        p: &Bound<'t>,
        h: Var<'t>,
        dir: Direction,
        logdet: &mut Var<'t>,
    ) -> Result<Var<'t>> {
        let layers: [&dyn Fn(Var<'t>) -> Result<(Var<'t>, Var<'t>)>; 3] = [
            &|h| step.actnorm.apply(p, h, dir),
            &|h| step.invconv.apply(p, h, dir),
            &|h| step.coupling.apply(p, h, dir),
        ];
        let mut h = h;
        let order: &[usize] = match dir {
            Direction::Forward => &[0, 1, 2],
            Direction::Inverse => &[2, 1, 0],
        };
        for &i in order {
            let (y, ld) = layers[i](h)?;
            *logdet = logdet.add(ld)?;
            h = y;
        }
        Ok(h)
    }

    /// Data towards latents, with the exact log-likelihood.
    pub fn encode_var<'t>(&self, p: &Bound<'t>, x: Var<'t>, mode: &mut Mode<'_>) -> Result<Encoded<'t>> {
        let n = self.check_input(&x.shape())?;
        let tape = x.tape();
        let mut total = tape.constant(Tensor::zeros(vec![n]));
        let mut fine_first = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for level in &self.levels {
            h = squeeze(h, Direction::Forward)?;
            for step in &level.steps {
                h = Self::step_apply(step, p, h, Direction::Forward, &mut total)?;
            }
            if let Some(enc) = &level.split {
                let c = h.value().nchw()?.1 / 2;
                let keep = h.slice_channels(0, c)?;
                let u = h.slice_channels(c, c)?;
                let (mu, log_std) = enc.predict(p, keep, mode)?;
                total = total.add(log_prob_var(u, mu, log_std)?)?;
                fine_first.push(u);
                h = keep;
            }
        }
        total = total.add(self.base_log_prob(p, h, n)?)?;
        fine_first.push(h);
        fine_first.reverse();
        Ok(Encoded {
            latents: fine_first,
            log_prob: total,
        })
    }

    /// Latents towards data. `u_0` is given; every other latent `u_i` is
    /// produced by `fill(i, mu_i, log_std_i)` once its conditional is known.
    pub fn decode_var<'t, F>(&self, p: &Bound<'t>, u0: Var<'t>, mut fill: F, mode: &mut Mode<'_>) -> Result<Decoded<'t>>
    where
        F: FnMut(usize, Var<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        let shapes = self.latent_shapes();
        let s0 = u0.shape();
        if s0.len() != 4 || s0[1..] != shapes[0][..] {
            return Err(Error::InvalidShape {
                op: "decode",
                detail: format!(
                    "u_0: expected (N, {}, {}, {}), got {:?}",
                    shapes[0][0], shapes[0][1], shapes[0][2], s0
                ),
            });
        }
        let n = s0[0];
        let tape = u0.tape();
        let mut inv_logdet = tape.constant(Tensor::zeros(vec![n]));
        let mut latent_lp = self.base_log_prob(p, u0, n)?;
        let mut latents = vec![u0];
        let mut h = u0;
        let depth = self.levels.len();
        for (l, level) in self.levels.iter().enumerate().rev() {
            if let Some(enc) = &level.split {
                let i = depth - 1 - l;
                let (mu, log_std) = enc.predict(p, h, mode)?;
                let u = fill(i, mu, log_std)?;
                if u.shape() != mu.shape() {
                    return Err(Error::shape("decode latent", &mu.shape(), &u.shape()));
                }
                latent_lp = latent_lp.add(log_prob_var(u, mu, log_std)?)?;
                latents.push(u);
                h = h.concat_channels(u)?;
            }
            for step in level.steps.iter().rev() {
                h = Self::step_apply(step, p, h, Direction::Inverse, &mut inv_logdet)?;
            }
            h = squeeze(h, Direction::Inverse)?;
        }
        Ok(Decoded {
            x: h,
            log_prob: latent_lp.sub(inv_logdet)?,
            latents,
        })
    }

    /// Decode a full stack of given latents.
    pub fn decode_stack_var<'t>(&self, p: &Bound<'t>, z: &[Var<'t>], mode: &mut Mode<'_>) -> Result<Decoded<'t>> {
        self.check_latents(&z.iter().map(|v| v.shape()).collect::<Vec<_>>())?;
        self.decode_var(p, z[0], |i, _, _| Ok(z[i]), mode)
    }

    /// Decode with every non-deepest latent set to its conditional mean.
    pub fn mean_decode_var<'t>(&self, p: &Bound<'t>, u0: Var<'t>, mode: &mut Mode<'_>) -> Result<Decoded<'t>> {
        self.decode_var(p, u0, |_, mu, _| Ok(mu), mode)
    }

    fn with_tape<T>(&self, f: impl for<'t> FnOnce(&'t Tape, &Bound<'t>) -> Result<T>) -> Result<T> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        f(&tape, &p)
    }

    /// Latents and per-sample log-likelihood of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<(LatentStack, Vec<f64>)> {
        self.with_tape(|tape, p| {
            let e = self.encode_var(p, tape.constant(x.clone()), &mut Mode::Eval)?;
            let latents = e.latents.iter().map(|v| (*v.value()).clone()).collect();
            Ok((LatentStack { latents }, e.log_prob.value().data().to_vec()))
        })
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode(x)?.1)
    }

    pub fn decode(&self, z: &LatentStack) -> Result<Tensor> {
        self.with_tape(|tape, p| {
            let vars: Vec<Var> = z.latents.iter().map(|u| tape.constant(u.clone())).collect();
            let d = self.decode_stack_var(p, &vars, &mut Mode::Eval)?;
            let x = (*d.x.value()).clone();
            Ok(x)
        })
    }

    pub fn mean_decode(&self, u0: &Tensor) -> Result<Tensor> {
        self.with_tape(|tape, p| {
            let d = self.mean_decode_var(p, tape.constant(u0.clone()), &mut Mode::Eval)?;
            let x = (*d.x.value()).clone();
            Ok(x)
        })
    }

    /// Draw `n` images: `u_0` from the base, then each finer latent from its
    /// conditional with standard deviation scaled by `temperature`.
    pub fn sample(&self, n: usize, temperature: f64, rng: &mut Rng) -> Result<Tensor> {
        let base = self.base();
        let draws: Vec<Tensor> = (0..n)
            .map(|_| {
                let mut t = base.clone();
                t.log_std = t.log_std.map(|v| v + temperature.ln());
                t.sample(rng)
            })
            .collect();
        let u0 = Tensor::stack_batch(&draws)?;
        self.with_tape(|tape, p| {
            let d = self.decode_var(
                p,
                tape.constant(u0),
                |_, mu, log_std| {
                    let d = DiagGaussian::new((*mu.value()).clone(), log_std.value().map(|v| v + temperature.ln()))?;
                    Ok(tape.constant(d.sample(rng)))
                },
                &mut Mode::Eval,
            )?;
            let x = (*d.x.value()).clone();
            Ok(x)
        })
    }

    /// Data-dependent actnorm init: each actnorm normalizes its own input on
    /// `x`, in flow order.
    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for l in 0..self.levels.len() {
            h = h.squeeze2()?;
            for k in 0..self.levels[l].steps.len() {
                let mut actnorm = self.levels[l].steps[k].actnorm.clone();
                actnorm.data_init(&mut self.params, &h)?;
                self.levels[l].steps[k].actnorm = actnorm;
                let step = &self.levels[l].steps[k];
                h = self.with_tape(|tape, p| {
                    let mut ld = tape.constant(Tensor::scalar(0.0));
                    let y = Self::step_apply(step, p, tape.constant(h), Direction::Forward, &mut ld)?;
                    let y = (*y.value()).clone();
                    Ok(y)
                })?;
            }
            if self.levels[l].split.is_some() {
                let c = h.nchw()?.1 / 2;
                h = h.slice_channels(0, c)?;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn validate_latents(&self, z: &LatentStack) -> Result<usize> {
        self.check_latents(&z.latents.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::HALF_LOG_2PI;

    pub(crate) fn config(levels: usize, steps: usize) -> FlowConfig {
        FlowConfig {
            levels,
            steps,
            c_inter: 8,
            blocks: 1,
            channels: 1,
            height: 8,
            width: 8,
            encoder: EncoderKind::Conv3,
            base_learn_std: true,
        }
    }

    #[test]
    fn latent_shapes_cascade() {
        let mut c = config(3, 1);
        c.height = 32;
        c.width = 32;
        assert_eq!(c.latent_shapes(), vec![[16, 4, 4], [4, 8, 8], [2, 16, 16]]);
        let total: usize = c.latent_shapes().iter().map(|s| s[0] * s[1] * s[2]).sum();
        assert_eq!(total, 32 * 32);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut c = config(2, 1);
        c.height = 6;
        assert!(FlowModel::new(c, 0).is_err());
        let m = FlowModel::new(config(2, 1), 0).unwrap();
        assert!(m.encode(&Tensor::zeros(vec![1, 1, 6, 8])).is_err());
    }

    #[test]
    fn roundtrip_random_init() {
        let m = FlowModel::new(config(2, 2), 3).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i as f64 * 0.37).sin());
        let (z, _) = m.encode(&x).unwrap();
        assert_eq!(z.len(), 2);
        let back = m.decode(&z).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn identity_model_is_gaussian_of_squeezed_input() {
        let mut m = FlowModel::new(config(1, 2), 1).unwrap();
        for level in &m.levels.clone() {
            for step in &level.steps {
                let c = step.invconv.channels;
                let eye = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
                m.params.set(step.invconv.weight, eye).unwrap();
            }
        }
        let x = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f64 * 0.1).cos());
        let lp = m.log_prob(&x).unwrap()[0];
        let oracle: f64 = x.data().iter().map(|v| -0.5 * v * v - HALF_LOG_2PI).sum();
        assert!((lp - oracle).abs() < 1e-9);
    }

    #[test]
    fn decode_log_prob_matches_encode() {
        let mut m = FlowModel::new(config(2, 1), 5).unwrap();
        let x = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f64 * 0.7).sin());
        m.data_init(&x).unwrap();
        let (z, lp) = m.encode(&x).unwrap();
        let tape = Tape::new();
        let p = m.params.bind(&tape, false);
        let vars: Vec<Var> = z.latents.iter().map(|u| tape.constant(u.clone())).collect();
        let d = m.decode_stack_var(&p, &vars, &mut Mode::Eval).unwrap();
        assert!((d.log_prob.item() - lp[0]).abs() < 1e-9);
    }

    #[test]
    fn zero_init_mean_decode_of_zero_is_zero() {
        let m = FlowModel::new(config(3, 1), 2).unwrap();
        let [c, h, w] = m.latent_shapes()[0];
        let x = m.mean_decode(&Tensor::zeros(vec![1, c, h, w])).unwrap();
        assert!(x.max_abs() < 1e-15);
    }

    #[test]
    fn data_init_normalizes_every_actnorm() {
        let mut m = FlowModel::new(config(2, 2), 4).unwrap();
        let x = Tensor::from_fn(vec![3, 1, 8, 8], |i| 3.0 + (i as f64 * 1.3).sin() * 2.0);
        m.data_init(&x).unwrap();
        assert!(m.is_initialized());
        let mean = m.params.get(m.levels[0].steps[0].actnorm.bias).clone();
        assert!(mean.max_abs() > 0.1);
    }

    #[test]
    fn decode_rejects_wrong_latent_shapes() {
        let m = FlowModel::new(config(2, 1), 0).unwrap();
        let z = LatentStack {
            latents: vec![Tensor::zeros(vec![1, 2, 4, 4]), Tensor::zeros(vec![1, 8, 2, 2])],
        };
        assert!(m.decode(&z).is_err());
    }
}
