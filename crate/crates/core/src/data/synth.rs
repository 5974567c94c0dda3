//! Procedural flow pairs: band-limited sinusoid textures on a background
//! layer and optional elliptical patches, each moved by its own affine
//! motion. Textures are analytic, so frame 2 is sampled exactly and both
//! flow directions are exact by construction.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seeded_rng, Sample};
use crate::error::{Error, Result};
use crate::flowops::FlowField;
use crate::tensor::{Shape4, Tensor4};

/// Affine motion about a layer's center `c`: p ↦ A(p − c) + c + t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// Row-major 2×2 matrix acting on (x, y).
    pub matrix: [f64; 4],
    pub translation: [f64; 2],
}

impl Default for Motion {
    fn default() -> Self {
        Motion::translation(0.0, 0.0)
    }
}

impl Motion {
    pub fn translation(dx: f64, dy: f64) -> Self {
        Motion {
            matrix: [1.0, 0.0, 0.0, 1.0],
            translation: [dx, dy],
        }
    }

    /// Rotation by `deg` (clockwise on screen, since y points down), scaled
    /// by `scale`, followed by a translation.
    pub fn similarity(deg: f64, scale: f64, dx: f64, dy: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Motion {
            matrix: [scale * c, -scale * s, scale * s, scale * c],
            translation: [dx, dy],
        }
    }

    pub fn rotation(deg: f64) -> Self {
        Motion::similarity(deg, 1.0, 0.0, 0.0)
    }

    pub fn det(&self) -> f64 {
        let [a, b, c, d] = self.matrix;
        a * d - b * c
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().chain(&self.translation).all(|v| v.is_finite())
    }

    pub fn apply(&self, p: [f64; 2], center: [f64; 2]) -> [f64; 2] {
        let [a, b, c, d] = self.matrix;
        let (x, y) = (p[0] - center[0], p[1] - center[1]);
        [
            a * x + b * y + center[0] + self.translation[0],
            c * x + d * y + center[1] + self.translation[1],
        ]
    }

    /// `self` applied after `first`, expressed about `center`. `first` acts
    /// about `first_center`; `self` acts about the image of `center`.
    pub fn after(&self, first: &Motion, first_center: [f64; 2], center: [f64; 2]) -> Motion {
        let [a, b, c, d] = self.matrix;
        let [e, f, g, h] = first.matrix;
        let q = first.apply(center, first_center);
        Motion {
            matrix: [a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h],
            translation: [
                q[0] - center[0] + self.translation[0],
                q[1] - center[1] + self.translation[1],
            ],
        }
    }

    /// Inverse about the same center, if the matrix is invertible.
    pub fn inverse(&self) -> Option<Motion> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let [a, b, c, d] = self.matrix;
        let m = [d / det, -b / det, -c / det, a / det];
        let [tx, ty] = self.translation;
        Some(Motion {
            matrix: m,
            translation: [-(m[0] * tx + m[1] * ty), -(m[2] * tx + m[3] * ty)],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub motion: Motion,
}

impl PatchSpec {
    fn contains(&self, p: [f64; 2]) -> bool {
        let dx = (p[0] - self.center[0]) / self.radii[0];
        let dy = (p[1] - self.center[1]) / self.radii[1];
        dx * dx + dy * dy <= 1.0
    }
}

/// Motion of every layer in one pair. Patches are drawn in order, later
/// ones on top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub background: Motion,
    pub patches: Vec<PatchSpec>,
}

impl MotionSpec {
    pub fn global(m: Motion) -> Self {
        MotionSpec {
            background: m,
            patches: Vec::new(),
        }
    }
}

/// Random dataset recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Translations are drawn uniformly from the disk of this radius.
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Scale factors are drawn from [1 − s, 1 + s].
    pub max_scale_change: f64,
    pub patches: usize,
    pub patch_radius: [f64; 2],
    /// Patches follow the background plus a relative motion: a translation
    /// from the disk of this radius and a rotation within
    /// ±`patch_rotation_deg`. Keeping it small bounds the occluded area.
    pub patch_translation: f64,
    pub patch_rotation_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            max_translation: 8.0,
            max_rotation_deg: 10.0,
            max_scale_change: 0.0,
            patches: 0,
            patch_radius: [6.0, 16.0],
            patch_translation: 2.0,
            patch_rotation_deg: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("extents must be positive");
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let ranges = [
            self.max_translation,
            self.max_rotation_deg,
            self.patch_translation,
            self.patch_rotation_deg,
        ];
        if !ranges.into_iter().all(nonneg) {
            return bad("motion ranges must be finite and non-negative");
        }
        if !(nonneg(self.max_scale_change) && self.max_scale_change < 1.0) {
            return bad("max_scale_change must lie in [0, 1)");
        }
        let [lo, hi] = self.patch_radius;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad("patch_radius must be an ordered positive range");
        }
        Ok(())
    }

    fn sample_motion(rng: &mut ChaCha8Rng, translation: f64, rotation: f64, scale: f64) -> Motion {
        let r = translation * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..2.0 * PI);
        let deg = rotation * rng.gen_range(-1.0..=1.0);
        let scale = 1.0 + scale * rng.gen_range(-1.0..=1.0);
        Motion::similarity(deg, scale, r * phi.cos(), r * phi.sin())
    }

    pub fn sample_spec(&self, rng: &mut ChaCha8Rng) -> MotionSpec {
        let background = Self::sample_motion(rng, self.max_translation, self.max_rotation_deg, self.max_scale_change);
        let image_center = [(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0];
        let patches = (0..self.patches)
            .map(|_| {
                let center = [
                    rng.gen_range(0.0..self.width as f64),
                    rng.gen_range(0.0..self.height as f64),
                ];
                let [lo, hi] = self.patch_radius;
                let radii = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
                let rel = Self::sample_motion(rng, self.patch_translation, self.patch_rotation_deg, 0.0);
                PatchSpec {
                    center,
                    radii,
                    motion: rel.after(&background, image_center, center),
                }
            })
            .collect();
        MotionSpec { background, patches }
    }
}

/// Sum of random plane waves per channel, periods between 6 and 20 pixels.
struct Texture {
    waves: Vec<Vec<[f64; 4]>>,
}

const WAVES: usize = 12;
const CONTRAST: f64 = 0.2;

impl Texture {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..channels)
            .map(|_| {
                let mut w: Vec<[f64; 4]> = (0..WAVES)
                    .map(|_| {
                        let period = rng.gen_range(6.0..20.0);
                        let dir = rng.gen_range(0.0..2.0 * PI);
                        let k = 2.0 * PI / period;
                        let amp = rng.gen_range(0.5..1.0);
                        [amp, k * dir.cos(), k * dir.sin(), rng.gen_range(0.0..2.0 * PI)]
                    })
                    .collect();
                let norm = (w.iter().map(|a| a[0] * a[0]).sum::<f64>() / 2.0).sqrt();
                for a in &mut w {
                    a[0] *= CONTRAST / norm;
                }
                w
            })
            .collect();
        Texture { waves }
    }

    fn eval(&self, c: usize, p: [f64; 2]) -> f64 {
        let s: f64 = self.waves[c]
            .iter()
            .map(|&[a, kx, ky, ph]| a * (kx * p[0] + ky * p[1] + ph).sin())
            .sum();
        (0.5 + s).clamp(0.0, 1.0)
    }
}

/// Renders one pair. `seed` drives the textures only; the motion comes from
/// `spec`.
pub fn synth_pair(spec: &MotionSpec, height: usize, width: usize, seed: u64, id: &str) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("synth_pair", "extents must be positive"));
    }
    for (i, p) in spec.patches.iter().enumerate() {
        let ok = p.radii.iter().all(|r| r.is_finite() && *r > 0.0) && p.center.iter().all(|c| c.is_finite());
        if !ok {
            return Err(Error::invalid(
                "synth_pair",
                format!("patch {i} is degenerate (radii {:?})", p.radii),
            ));
        }
    }
    let layers: Vec<(Motion, Motion)> = std::iter::once(spec.background)
        .chain(spec.patches.iter().map(|p| p.motion))
        .enumerate()
        .map(|(i, m)| {
            let inv = m.inverse().filter(|_| m.is_finite());
            inv.map(|inv| (m, inv))
                .ok_or_else(|| Error::invalid("synth_pair", format!("layer {i} motion is not invertible")))
        })
        .collect::<Result<_>>()?;

    let channels = 3;
    let mut rng = seeded_rng(seed, "texture");
    let textures: Vec<Texture> = (0..layers.len()).map(|_| Texture::new(channels, &mut rng)).collect();
    let image_center = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
    let center_of = |l: usize| if l == 0 { image_center } else { spec.patches[l - 1].center };

    // Topmost layer covering p in frame 1.
    let layer1 = |p: [f64; 2]| (1..layers.len()).rev().find(|&l| spec.patches[l - 1].contains(p)).unwrap_or(0);
    // Topmost layer covering q in frame 2, with q's frame-1 preimage.
    let layer2 = |q: [f64; 2]| {
        for l in (1..layers.len()).rev() {
            let src = layers[l].1.apply(q, center_of(l));
            if spec.patches[l - 1].contains(src) {
                return (l, src);
            }
        }
        (0, layers[0].1.apply(q, center_of(0)))
    };

    let shape = Shape4::new(1, channels, height, width);
    let mut f1 = Tensor4::zeros(shape);
    let mut f2 = Tensor4::zeros(shape);
    let mut fwd = Tensor4::zeros(Shape4::new(1, 2, height, width));
    let mut bwd = Tensor4::zeros(Shape4::new(1, 2, height, width));
    for y in 0..height {
        for x in 0..width {
            let p = [x as f64, y as f64];
            let l = layer1(p);
            let to = layers[l].0.apply(p, center_of(l));
            *fwd.at_mut(0, 0, y, x) = (to[0] - p[0]) as f32;
            *fwd.at_mut(0, 1, y, x) = (to[1] - p[1]) as f32;
            for c in 0..channels {
                *f1.at_mut(0, c, y, x) = textures[l].eval(c, p) as f32;
            }
            let (l2, src) = layer2(p);
            *bwd.at_mut(0, 0, y, x) = (src[0] - p[0]) as f32;
            *bwd.at_mut(0, 1, y, x) = (src[1] - p[1]) as f32;
            for c in 0..channels {
                *f2.at_mut(0, c, y, x) = textures[l2].eval(c, src) as f32;
            }
        }
    }
    Ok(Sample {
        frame1: f1,
        frame2: f2,
        flow_fwd: FlowField::new(fwd)?,
        flow_bwd: Some(FlowField::new(bwd)?),
        id: id.to_string(),
        padding: Default::default(),
    })
}

/// `count` pairs; pair `i` depends only on (`seed`, `i`).
pub fn synth_dataset(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let id = format!("{i:05}");
            let mut rng = seeded_rng(seed, &format!("motion/{id}"));
            let spec = cfg.sample_spec(&mut rng);
            let tex_seed = rng.gen();
            synth_pair(&spec, cfg.height, cfg.width, tex_seed, &id)
        })
        .collect()
}
