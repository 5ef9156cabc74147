//! Deterministic synthetic datasets.
//!
//! Sprites: a single silhouette (rectangle, cross or disc) near the centre of
//! a flat, slightly noisy background, with strong foreground/background
//! contrast. Digits: 28x28 anti-aliased stroke renderings of 0-9 under random
//! affine jitter, zero-padded to 32x32 like the padded MNIST inputs.
//!
//! Image `i` depends only on `(seed, i)`.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::{purpose, stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Cross,
    Disc,
}

pub const SHAPE_KINDS: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Cross, ShapeKind::Disc];

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSpec {
    pub size: usize,
    /// Kinds drawn uniformly per image.
    pub kinds: Vec<ShapeKind>,
    /// Minimum absolute foreground/background intensity difference.
    pub min_contrast: f64,
    /// Maximum centre offset in pixels.
    pub jitter: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
}

impl Default for SpriteSpec {
    fn default() -> Self {
        SpriteSpec {
            size: 32,
            kinds: SHAPE_KINDS.to_vec(),
            min_contrast: 80.0,
            jitter: 4,
            noise: 3.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

/// First 90% of the indices train, the rest test.
fn split(images: Vec<Tensor>) -> Dataset {
    let n_train = images.len() * 9 / 10;
    let mut train = images;
    let test = train.split_off(n_train);
    Dataset { train, test }
}

fn contrasting(bg: f64, min: f64, rng: &mut Rng) -> f64 {
    let below = (bg - min).max(-1.0) + 1.0;
    let above = (255.0 - (bg + min)).max(-1.0) + 1.0;
    let t = rng.random::<f64>() * (below + above);
    if t < below {
        t.min(bg - min)
    } else {
        (bg + min + (t - below)).min(255.0)
    }
}

pub fn sprite(spec: &SpriteSpec, rng: &mut Rng) -> Tensor {
    let s = spec.size;
    let bg = rng.random_range(0.0..=255.0f64).round();
    let fg = contrasting(bg, spec.min_contrast, rng).round();
    let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
    let j = spec.jitter as i64;
    let cy = (s / 2) as f64 + rng.random_range(-j..=j) as f64;
    let cx = (s / 2) as f64 + rng.random_range(-j..=j) as f64;
    let span = s as f64;
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
        ShapeKind::Rect => {
            let hh = rng.random_range(0.12..0.28) * span;
            let hw = rng.random_range(0.12..0.28) * span;
            Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
        }
        ShapeKind::Cross => {
            let arm = rng.random_range(0.2..0.32) * span;
            let half = rng.random_range(0.05..0.09) * span;
            Box::new(move |y, x| {
                let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                (dy <= half && dx <= arm) || (dx <= half && dy <= arm)
            })
        }
        ShapeKind::Disc => {
            let r = rng.random_range(0.15..0.28) * span;
            Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        }
    };
    Tensor::from_fn(vec![1, 1, s, s], |i| {
        let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
        let noise = spec.noise * rng.sample::<f64, _>(StandardNormal);
        let v = if inside(y, x) { fg } else { bg + noise };
        v.round().clamp(0.0, 255.0)
    })
}

pub fn sprites(spec: &SpriteSpec, n: usize, seed: u64) -> Dataset {
    split(
        (0..n)
            .map(|i| sprite(spec, &mut stream(seed, &[purpose::DATA, 0, i as u64])))
            .collect(),
    )
}

type Stroke = &'static [(f64, f64)];

const ZERO: &[Stroke] = &[&[
    (0.5, 0.12),
    (0.68, 0.2),
    (0.78, 0.4),
    (0.78, 0.6),
    (0.68, 0.8),
    (0.5, 0.88),
    (0.32, 0.8),
    (0.22, 0.6),
    (0.22, 0.4),
    (0.32, 0.2),
    (0.5, 0.12),
]];
const ONE: &[Stroke] = &[&[(0.36, 0.26), (0.52, 0.12), (0.52, 0.88)]];
const TWO: &[Stroke] = &[&[
    (0.25, 0.3),
    (0.35, 0.15),
    (0.55, 0.12),
    (0.72, 0.22),
    (0.72, 0.4),
    (0.25, 0.88),
    (0.78, 0.88),
]];
const THREE: &[Stroke] = &[&[
    (0.25, 0.15),
    (0.7, 0.15),
    (0.45, 0.45),
    (0.72, 0.6),
    (0.68, 0.82),
    (0.45, 0.9),
    (0.25, 0.82),
]];
const FOUR: &[Stroke] = &[&[(0.65, 0.88), (0.65, 0.12), (0.22, 0.65), (0.8, 0.65)]];
const FIVE: &[Stroke] = &[&[
    (0.72, 0.12),
    (0.3, 0.12),
    (0.28, 0.45),
    (0.55, 0.42),
    (0.72, 0.58),
    (0.68, 0.82),
    (0.45, 0.9),
    (0.25, 0.82),
]];
const SIX: &[Stroke] = &[&[
    (0.65, 0.12),
    (0.38, 0.35),
    (0.28, 0.65),
    (0.4, 0.88),
    (0.62, 0.85),
    (0.7, 0.65),
    (0.55, 0.5),
    (0.3, 0.6),
]];
const SEVEN: &[Stroke] = &[&[(0.22, 0.12), (0.78, 0.12), (0.42, 0.88)]];
const EIGHT: &[Stroke] = &[
    &[
        (0.5, 0.12),
        (0.68, 0.2),
        (0.68, 0.38),
        (0.5, 0.47),
        (0.32, 0.38),
        (0.32, 0.2),
        (0.5, 0.12),
    ],
    &[
        (0.5, 0.47),
        (0.72, 0.56),
        (0.74, 0.78),
        (0.5, 0.88),
        (0.26, 0.78),
        (0.28, 0.56),
        (0.5, 0.47),
    ],
];
const NINE: &[Stroke] = &[
    &[
        (0.7, 0.32),
        (0.6, 0.14),
        (0.42, 0.14),
        (0.3, 0.3),
        (0.4, 0.48),
        (0.6, 0.48),
        (0.7, 0.32),
    ],
    &[(0.7, 0.32), (0.6, 0.88)],
];
const DIGITS: [&[Stroke]; 10] = [ZERO, ONE, TWO, THREE, FOUR, FIVE, SIX, SEVEN, EIGHT, NINE];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One 28x28 digit with values in `[0, 255]`, shape `(1, 1, 28, 28)`.
pub fn digit(label: usize, rng: &mut Rng) -> Tensor {
    let scale = rng.random_range(0.8..1.05);
    let angle: f64 = rng.random_range(-0.25..0.25);
    let shear: f64 = rng.random_range(-0.2..0.2);
    let (ty, tx) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let thickness = rng.random_range(1.2..2.6);
    let (sin, cos) = angle.sin_cos();
    // Unit-box template onto the central 20x20 box of the 28x28 canvas.
    let place = |(x, y): (f64, f64)| {
        let (u, v) = ((x - 0.5) * scale, (y - 0.5) * scale);
        let u = u + shear * v;
        let (u, v) = (cos * u - sin * v, sin * u + cos * v);
        (14.0 + 20.0 * u + tx, 14.0 + 20.0 * v + ty)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = DIGITS[label % 10]
        .iter()
        .flat_map(|s| s.windows(2).map(|w| (place(w[0]), place(w[1]))))
        .collect();
    Tensor::from_fn(vec![1, 1, 28, 28], |i| {
        let p = ((i % 28) as f64 + 0.5, (i / 28) as f64 + 0.5);
        let d = segments
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min);
        (255.0 * (thickness / 2.0 - d + 0.5).clamp(0.0, 1.0)).round()
    })
}

/// `n` digits with cycling labels, each padded to 32x32.
pub fn digits(n: usize, seed: u64) -> (Vec<Tensor>, Vec<u8>) {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, &[purpose::DATA, 1, i as u64]);
            let label = rng.random_range(0..10usize);
            let img = digit(label, &mut rng).pad_to(32, 32).expect("28 fits in 32");
            (img, label as u8)
        })
        .unzip()
}
