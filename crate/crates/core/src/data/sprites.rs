//! Procedural sprite identities and their rendered views.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_autograd::Tensor;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Triangle,
    Square,
    Ellipse,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Triangle, ShapeKind::Square, ShapeKind::Ellipse, ShapeKind::Star];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Triangle => "triangle",
            ShapeKind::Square => "square",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Star => "star",
        }
    }
}

pub const HUES: usize = 12;
/// Sprite radius as a fraction of the image side.
pub const SCALES: [f64; 3] = [0.24, 0.31, 0.38];
pub const IDENTITY_SPACE: usize = ShapeKind::ALL.len() * HUES * SCALES.len() * 2;

const SUPERSAMPLE: usize = 4;
const STROKE_WIDTH: f64 = 0.15;
const STAR_INNER: f64 = 0.45;
const SQUARE_HALF: f64 = 0.75;
const ELLIPSE_MINOR: f64 = 0.6;
/// Farthest point of any shape from its centre, in sprite radii.
const MAX_EXTENT: f64 = 1.07;

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteIdentity {
    pub shape: ShapeKind,
    pub hue: usize,
    pub color: [f64; 3],
    pub scale: f64,
    pub stroke: bool,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl SpriteIdentity {
    /// The `index`-th point of the shape × hue × scale × stroke grid.
    pub fn from_combo(index: usize) -> Self {
        let index = index % IDENTITY_SPACE;
        let stroke = index % 2 == 1;
        let scale = SCALES[(index / 2) % SCALES.len()];
        let hue = (index / (2 * SCALES.len())) % HUES;
        let shape = ShapeKind::ALL[index / (2 * SCALES.len() * HUES)];
        Self { shape, hue, color: hsv(hue as f64 / HUES as f64, 0.85, 1.0), scale, stroke }
    }

    /// Identity `id` of the dataset with the given seed; the seed permutes the grid.
    pub fn from_id(dataset_seed: u64, id: usize) -> Result<Self> {
        if id >= IDENTITY_SPACE {
            return Err(Error::Data(format!("only {IDENTITY_SPACE} distinct sprite identities exist, asked for #{id}")));
        }
        Ok(Self::from_combo(identity_permutation(dataset_seed)[id]))
    }
}

pub fn identity_permutation(dataset_seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..IDENTITY_SPACE).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(dataset_seed));
    p
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    pub angle: f64,
    /// Centre offset as a fraction of the image side.
    pub shift: [f64; 2],
    pub brightness: f64,
}

impl ViewParams {
    pub const CANONICAL: ViewParams = ViewParams { angle: 0.0, shift: [0.0, 0.0], brightness: 1.0 };

    /// Largest centre offset that keeps a sprite of this scale inside the frame.
    pub fn max_shift(scale: f64) -> f64 {
        (0.5 - MAX_EXTENT * scale - 0.03).clamp(0.0, 0.1)
    }

    pub fn sample(identity: &SpriteIdentity, rng: &mut impl Rng) -> Self {
        let m = Self::max_shift(identity.scale);
        let angle = rng.random_range(0.0..TAU);
        let shift = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
        let brightness = rng.random_range(0.8..=1.0);
        Self { angle, shift, brightness }
    }
}

/// View `view` of identity `id`; each pair has its own RNG stream.
pub fn view_params(dataset_seed: u64, id: usize, view: usize) -> Result<ViewParams> {
    let identity = SpriteIdentity::from_id(dataset_seed, id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(((id as u64) << 32) | view as u64);
    Ok(ViewParams::sample(&identity, &mut rng))
}

fn polygon(radii: &[f64]) -> Vec<[f64; 2]> {
    let k = radii.len();
    (0..k)
        .map(|i| {
            let a = -PI / 2.0 + TAU * i as f64 / k as f64;
            [radii[i] * a.cos(), radii[i] * a.sin()]
        })
        .collect()
}

fn polygon_sdf(p: [f64; 2], verts: &[[f64; 2]]) -> f64 {
    let mut d = f64::INFINITY;
    let mut inside = false;
    for i in 0..verts.len() {
        let a = verts[i];
        let b = verts[(i + 1) % verts.len()];
        let e = [b[0] - a[0], b[1] - a[1]];
        let w = [p[0] - a[0], p[1] - a[1]];
        let t = ((w[0] * e[0] + w[1] * e[1]) / (e[0] * e[0] + e[1] * e[1])).clamp(0.0, 1.0);
        let q = [w[0] - e[0] * t, w[1] - e[1] * t];
        d = d.min((q[0] * q[0] + q[1] * q[1]).sqrt());
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) * e[0] / e[1] {
            inside = !inside;
        }
    }
    if inside {
        -d
    } else {
        d
    }
}

struct Outline {
    kind: ShapeKind,
    verts: Vec<[f64; 2]>,
}

impl Outline {
    fn new(kind: ShapeKind) -> Self {
        let verts = match kind {
            ShapeKind::Triangle => polygon(&[1.0; 3]),
            ShapeKind::Star => polygon(&[1.0, STAR_INNER].repeat(5)),
            _ => Vec::new(),
        };
        Self { kind, verts }
    }

    /// Signed distance in sprite radii; negative inside.
    fn sdf(&self, p: [f64; 2]) -> f64 {
        match self.kind {
            ShapeKind::Square => p[0].abs().max(p[1].abs()) - SQUARE_HALF,
            ShapeKind::Ellipse => ((p[0] * p[0] + (p[1] / ELLIPSE_MINOR).powi(2)).sqrt() - 1.0) * ELLIPSE_MINOR,
            ShapeKind::Triangle | ShapeKind::Star => polygon_sdf(p, &self.verts),
        }
    }
}

/// Renders `[3, size, size]` pixels in `[-1, 1]` on a black background.
pub fn render_view(identity: &SpriteIdentity, view: &ViewParams, size: usize) -> Result<Tensor<f32>> {
    if size < 16 {
        return Err(Error::Data(format!("render size must be at least 16, got {size}")));
    }
    let outline = Outline::new(identity.shape);
    let s = size as f64;
    let radius = identity.scale * s;
    let centre = [s / 2.0 + view.shift[0] * s, s / 2.0 + view.shift[1] * s];
    let (sin, cos) = (-view.angle).sin_cos();
    let fill = identity.color.map(|c| c * view.brightness);
    let stroke = [view.brightness; 3];
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - centre[0];
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - centre[1];
                    let p = [(cos * x - sin * y) / radius, (sin * x + cos * y) / radius];
                    let d = outline.sdf(p);
                    if d > 0.0 {
                        continue;
                    }
                    let c = if identity.stroke && d > -STROKE_WIDTH { &stroke } else { &fill };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                out[k * plane + py * size + px] = (2.0 * acc[k] * inv - 1.0) as f32;
            }
        }
    }
    Ok(Tensor::new(&[3, size, size], out)?)
}

/// Fraction of pixels whose brightest channel is above mid-grey.
pub fn foreground_fraction(image: &Tensor<f32>) -> f64 {
    let plane = image.len() / 3;
    let d = image.data();
    let fg = (0..plane).filter(|&i| (0..3).any(|k| d[k * plane + i] > 0.0)).count();
    fg as f64 / plane as f64
}
