//! Invertible layers with exact log-determinants.
//!
//! Every `apply` returns the transformed tensor together with the
//! log-determinant of the Jacobian of the map that was applied: positive
//! orientation for [`Direction::Forward`] (data towards latents) and its
//! negation for [`Direction::Inverse`].

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest `|det W|` accepted by the 1x1 convolution.
pub const MIN_ABS_DET: f64 = 1e-12;

/// Standard deviation of the Gaussian init of non-zero conditioner convs.
const CONV_INIT_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Forward-pass behaviour that differs between training and inference.
pub enum Mode<'a> {
    Eval,
    /// Enables dropout in context encoders, drawing masks from the stream.
    Train(&'a mut Rng),
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum ConvInit {
    Zero,
    Normal,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        init: ConvInit,
        rng: &mut Rng,
    ) -> Self {
        let shape = vec![c_out, c_in, kernel, kernel];
        let weight = match init {
            ConvInit::Zero => Tensor::zeros(shape),
            ConvInit::Normal => Tensor::from_fn(shape, |_| CONV_INIT_STD * rng.sample::<f64, _>(StandardNormal)),
        };
        Conv {
            weight: store.add(format!("{name}.weight"), weight, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]), true),
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p[self.weight], Some(p[self.bias]))
    }
}

pub fn squeeze<'t>(x: Var<'t>, dir: Direction) -> Result<Var<'t>> {
    match dir {
        Direction::Forward => x.squeeze2(),
        Direction::Inverse => x.unsqueeze2(),
    }
}

fn spatial(x: &Var<'_>) -> Result<f64> {
    let (_, _, h, w) = x.value().nchw()?;
    Ok((h * w) as f64)
}

// ---------------------------------------------------------------------------

/// Per-channel affine map `y = exp(log_scale) * x + bias`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        ActNorm {
            log_scale: store.add(format!("{name}.log_scale"), Tensor::zeros(vec![channels]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]), true),
            channels,
            initialized: false,
        }
    }

    /// Graph-level application. Uses the current parameters whether or not
    /// data-dependent init has run (fresh parameters are the identity).
    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>, dir: Direction) -> Result<(Var<'t>, Var<'t>)> {
        let ls = p[self.log_scale];
        let b = p[self.bias];
        let logdet = ls.sum().scale(spatial(&x)?);
        match dir {
            Direction::Forward => Ok((x.channel_mul(ls.exp())?.channel_add(b)?, logdet)),
            Direction::Inverse => {
                let y = x.channel_add(b.neg())?.channel_mul(ls.neg().exp())?;
                Ok((y, logdet.neg()))
            }
        }
    }

    /// Set scale and bias so that `x` maps to zero mean, unit variance per channel.
    pub fn data_init(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.nchw()?;
        if c != self.channels {
            return Err(Error::shape("actnorm init", &[self.channels], x.shape()));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut log_scale = Vec::with_capacity(c);
        let mut bias = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |b| x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter());
            let mean = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            let std = var.sqrt().max(1e-6);
            log_scale.push(-std.ln());
            bias.push(-mean / std);
        }
        store.set(self.log_scale, Tensor::new(vec![c], log_scale)?)?;
        store.set(self.bias, Tensor::new(vec![c], bias)?)?;
        self.initialized = true;
        Ok(())
    }
}

/// Standalone actnorm evaluation: initializes from `x` on the first forward
/// call, and refuses to invert before that.
pub fn actnorm_apply(layer: &mut ActNorm, store: &mut ParamStore, x: &Tensor, dir: Direction) -> Result<(Tensor, f64)> {
    match dir {
        Direction::Forward if !layer.initialized => layer.data_init(store, x)?,
        Direction::Inverse if !layer.initialized => {
            return Err(Error::State("actnorm inverse before data-dependent init".into()))
        }
        _ => {}
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let (y, ld) = layer.apply(&p, tape.constant(x.clone()), dir)?;
    let y = (*y.value()).clone();
    Ok((y, ld.item()))
}

// ---------------------------------------------------------------------------

/// Channel mixing by a learned invertible matrix `W`.
#[derive(Clone, Debug)]
pub struct InvConv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

/// A Haar-distributed random orthonormal matrix (QR of a Gaussian matrix with
/// sign-corrected diagonal).
pub fn random_rotation(n: usize, rng: &mut Rng) -> Tensor {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Tensor::from_fn(vec![n, n], |i| q[(i / n, i % n)])
}

impl InvConv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        InvConv1x1 {
            weight: store.add(format!("{name}.weight"), random_rotation(channels, rng), true),
            channels,
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>, dir: Direction) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.channels;
        let w = p[self.weight];
        let log_det = w.log_abs_det()?;
        if log_det.item() < MIN_ABS_DET.ln() {
            return Err(Error::Singular {
                det: log_det.item().exp(),
            });
        }
        let logdet = log_det.scale(spatial(&x)?);
        match dir {
            Direction::Forward => Ok((x.conv2d(w.reshape(vec![c, c, 1, 1])?, None)?, logdet)),
            Direction::Inverse => {
                let w_inv = w.mat_inverse()?.reshape(vec![c, c, 1, 1])?;
                Ok((x.conv2d(w_inv, None)?, logdet.neg()))
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// One residual block of the coupling conditioner: 3x3 conv, 1x1 conv, skip add.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv3: Conv,
    pub conv1: Conv,
}

/// Affine coupling: the first half of the channels conditions a scale and
/// translation applied to the second half.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub c_half: usize,
    pub input: Conv,
    pub blocks: Vec<ResBlock>,
    /// Zero-initialized, so a fresh layer is the identity.
    pub output: Conv,
}

impl AffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        c_inter: usize,
        n_blocks: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::invalid(
                "coupling",
                format!("channel count must be even, got {channels}"),
            ));
        }
        let c_half = channels / 2;
        let input = Conv::new(store, &format!("{name}.in"), c_half, c_inter, 3, ConvInit::Normal, rng);
        let blocks = (0..n_blocks)
            .map(|b| ResBlock {
                conv3: Conv::new(
                    store,
                    &format!("{name}.block{b}.conv3"),
                    c_inter,
                    c_inter,
                    3,
                    ConvInit::Normal,
                    rng,
                ),
                conv1: Conv::new(
                    store,
                    &format!("{name}.block{b}.conv1"),
                    c_inter,
                    c_inter,
                    1,
                    ConvInit::Normal,
                    rng,
                ),
            })
            .collect();
        let output = Conv::new(
            store,
            &format!("{name}.out"),
            c_inter,
            2 * c_half,
            3,
            ConvInit::Zero,
            rng,
        );
        Ok(AffineCoupling {
            c_half,
            input,
            blocks,
            output,
        })
    }

    /// Raw log-scale and translation predicted from the conditioning half.
    pub fn conditioner<'t>(&self, p: &Bound<'t>, x1: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = self.input.apply(p, x1)?.relu();
        for block in &self.blocks {
            let r = block.conv3.apply(p, h)?.relu();
            let r = block.conv1.apply(p, r)?.relu();
            h = h.add(r)?;
        }
        let out = self.output.apply(p, h)?;
        Ok((
            out.slice_channels(0, self.c_half)?,
            out.slice_channels(self.c_half, self.c_half)?,
        ))
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>, dir: Direction) -> Result<(Var<'t>, Var<'t>)> {
        let c = x.value().nchw()?.1;
        if c != 2 * self.c_half {
            return Err(Error::invalid(
                "coupling",
                format!("expected {} channels, got {c}", 2 * self.c_half),
            ));
        }
        let x1 = x.slice_channels(0, self.c_half)?;
        let x2 = x.slice_channels(self.c_half, self.c_half)?;
        let (raw, t) = self.conditioner(p, x1)?;
        let logdet = raw.sum_per_sample()?;
        match dir {
            Direction::Forward => {
                let y2 = x2.mul(raw.exp())?.add(t)?;
                Ok((x1.concat_channels(y2)?, logdet))
            }
            Direction::Inverse => {
                let y2 = x2.sub(t)?.mul(raw.neg().exp())?;
                Ok((x1.concat_channels(y2)?, logdet.neg()))
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// Predicts `(mu, log_sigma)` of a factored-out latent from the kept half.
#[derive(Clone, Debug)]
pub enum ContextEncoder {
    /// A single zero-initialized 3x3 conv.
    Conv(Conv),
    /// Dropout, then a stack of 3x3 convs with rectifiers; the last conv is
    /// zero-initialized.
    Deep { convs: Vec<Conv>, dropout: f64 },
}

impl ContextEncoder {
    pub fn single(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        ContextEncoder::Conv(Conv::new(store, name, channels, 2 * channels, 3, ConvInit::Zero, rng))
    }

    pub fn deep(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let layers = layers.max(1);
        let convs = (0..layers)
            .map(|i| {
                let c_in = if i == 0 { channels } else { hidden };
                let last = i + 1 == layers;
                let c_out = if last { 2 * channels } else { hidden };
                let init = if last { ConvInit::Zero } else { ConvInit::Normal };
                Conv::new(store, &format!("{name}.conv{i}"), c_in, c_out, 3, init, rng)
            })
            .collect();
        ContextEncoder::Deep { convs, dropout }
    }

    pub fn predict<'t>(&self, p: &Bound<'t>, h: Var<'t>, mode: &mut Mode<'_>) -> Result<(Var<'t>, Var<'t>)> {
        let out = match self {
            ContextEncoder::Conv(conv) => conv.apply(p, h)?,
            ContextEncoder::Deep { convs, dropout } => {
                let mut z = h;
                if let (Mode::Train(rng), true) = (&mut *mode, *dropout > 0.0) {
                    let keep =
                        Bernoulli::new(1.0 - dropout).map_err(|e| Error::Param(format!("dropout {dropout}: {e}")))?;
                    let shape = h.shape();
                    let scale = 1.0 / (1.0 - dropout);
                    let mask = Tensor::from_fn(shape, |_| if keep.sample(&mut **rng) { scale } else { 0.0 });
                    z = z.mul(h.tape().constant(mask))?;
                }
                let last = convs.len() - 1;
                for (i, conv) in convs.iter().enumerate() {
                    z = conv.apply(p, z)?;
                    if i != last {
                        z = z.relu();
                    }
                }
                z
            }
        };
        let c = out.value().nchw()?.1 / 2;
        Ok((out.slice_channels(0, c)?, out.slice_channels(c, c)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn eval<'t>(
        tape: &'t Tape,
        store: &ParamStore,
        x: &Tensor,
        f: impl FnOnce(&Bound<'t>, Var<'t>) -> Result<(Var<'t>, Var<'t>)>,
    ) -> (Tensor, f64) {
        let p = store.bind(tape, false);
        let (y, ld) = f(&p, tape.constant(x.clone())).unwrap();
        let y = (*y.value()).clone();
        (y, ld.value().sum())
    }

    #[test]
    fn actnorm_identity_and_scaled() {
        let mut store = ParamStore::new();
        let mut an = ActNorm::new(&mut store, "an", 1);
        an.initialized = true;
        let x = Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f64 + 1.0);
        let (y, ld) = actnorm_apply(&mut an, &mut store, &x, Direction::Forward).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        store.set(an.log_scale, Tensor::ones(vec![1])).unwrap();
        let (y, ld) = actnorm_apply(&mut an, &mut store, &x, Direction::Forward).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| v * std::f64::consts::E)) < 1e-12);
        assert!((ld - 4.0).abs() < 1e-12);
    }

    #[test]
    fn actnorm_inverse_before_init_fails() {
        let mut store = ParamStore::new();
        let mut an = ActNorm::new(&mut store, "an", 2);
        let x = Tensor::zeros(vec![1, 2, 2, 2]);
        assert!(matches!(
            actnorm_apply(&mut an, &mut store, &x, Direction::Inverse),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn actnorm_first_forward_normalizes() {
        let mut store = ParamStore::new();
        let mut an = ActNorm::new(&mut store, "an", 3);
        let mut rng = stream(1, &[]);
        let x = Tensor::from_fn(vec![4, 3, 3, 3], |i| {
            (i % 3) as f64 * 2.0 + rng.sample::<f64, _>(StandardNormal) * (1.0 + (i % 3) as f64)
        });
        let (y, _) = actnorm_apply(&mut an, &mut store, &x, Direction::Forward).unwrap();
        assert!(an.initialized);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 9..(b * 3 + ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|u| (u - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "ch {ch}: {m} {v}");
        }
        let (back, _) = actnorm_apply(&mut an, &mut store, &y, Direction::Inverse).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn invconv_identity_and_scaled() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, &[]);
        let ic = InvConv1x1::new(&mut store, "w", 2, &mut rng);
        store
            .set(ic.weight, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let x = Tensor::from_fn(vec![1, 2, 1, 1], |i| i as f64 + 3.0);
        let tape = Tape::new();
        let (y, ld) = eval(&tape, &store, &x, |p, v| ic.apply(p, v, Direction::Forward));
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        store
            .set(ic.weight, Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let (_, ld) = eval(&tape, &store, &x, |p, v| ic.apply(p, v, Direction::Forward));
        assert!((ld - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invconv_singular_rejected() {
        let mut store = ParamStore::new();
        let ic = InvConv1x1::new(&mut store, "w", 2, &mut stream(2, &[]));
        store
            .set(ic.weight, Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap())
            .unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::ones(vec![1, 2, 1, 1]));
        assert!(matches!(
            ic.apply(&p, x, Direction::Forward),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let q = random_rotation(5, &mut stream(9, &[]));
        let m = DMatrix::from_row_slice(5, 5, q.data());
        let prod = m.transpose() * &m;
        assert!((prod - DMatrix::identity(5, 5)).abs().max() < 1e-12);
    }

    #[test]
    fn zero_init_coupling_is_identity() {
        let mut store = ParamStore::new();
        let cp = AffineCoupling::new(&mut store, "c", 4, 8, 2, &mut stream(3, &[])).unwrap();
        let x = Tensor::from_fn(vec![1, 4, 3, 3], |i| (i as f64).sin());
        let tape = Tape::new();
        let (y, ld) = eval(&tape, &store, &x, |p, v| cp.apply(p, v, Direction::Forward));
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn coupling_rejects_odd_channels() {
        let mut store = ParamStore::new();
        assert!(AffineCoupling::new(&mut store, "c", 3, 8, 1, &mut stream(3, &[])).is_err());
        let cp = AffineCoupling::new(&mut store, "d", 4, 8, 1, &mut stream(3, &[])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::ones(vec![1, 6, 2, 2]));
        assert!(cp.apply(&p, x, Direction::Forward).is_err());
    }

    #[test]
    fn zero_encoder_predicts_standard_normal() {
        let mut store = ParamStore::new();
        let enc = ContextEncoder::single(&mut store, "e", 2, &mut stream(1, &[]));
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let h = tape.constant(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64));
        let (mu, ls) = enc.predict(&p, h, &mut Mode::Eval).unwrap();
        assert!(mu.value().data().iter().all(|&v| v == 0.0));
        assert!(ls.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deep_encoder_dropout_only_in_training() {
        let mut store = ParamStore::new();
        let mut rng = stream(4, &[]);
        let enc = ContextEncoder::deep(&mut store, "e", 2, 4, 5, 0.2, &mut rng);
        let last = match &enc {
            ContextEncoder::Deep { convs, .. } => convs.last().unwrap().weight,
            _ => unreachable!(),
        };
        store
            .set(last, Tensor::from_fn(vec![4, 4, 3, 3], |i| (i as f64 * 0.1).sin()))
            .unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let h = tape.constant(Tensor::from_fn(vec![1, 2, 4, 4], |i| (i as f64 * 0.3).cos()));
        let (a, _) = enc.predict(&p, h, &mut Mode::Eval).unwrap();
        let (b, _) = enc.predict(&p, h, &mut Mode::Eval).unwrap();
        assert_eq!(*a.value(), *b.value());
        let mut drop_rng = stream(4, &[1]);
        let (c, _) = enc.predict(&p, h, &mut Mode::Train(&mut drop_rng)).unwrap();
        assert_ne!(*a.value(), *c.value());
    }
}
