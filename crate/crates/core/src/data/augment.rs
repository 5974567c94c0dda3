use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{seeded_rng, Sample};
use crate::error::{Error, Result};
use crate::flowops::FlowField;
use crate::tensor::Tensor4;

/// Closed interval a parameter is drawn from uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn is_fixed_at(&self, v: f64) -> bool {
        self.lo == v && self.hi == v
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(&self, name: &str, positive: bool) -> Result<()> {
        let ok = self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi && (!positive || self.lo > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "augment.{name}: [{}, {}] is not a valid{} range",
                self.lo,
                self.hi,
                if positive { " positive" } else { "" }
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub geometric: bool,
    /// Per-axis shift in pixels.
    pub translation: Range,
    pub rotation_deg: Range,
    pub scale: Range,
    pub photometric: bool,
    /// Additive offset.
    pub brightness: Range,
    /// Multiplier around mid-gray.
    pub contrast: Range,
    pub gamma: Range,
    /// Per-channel multiplier.
    pub color: Range,
    pub noise_sigma: f64,
    /// Share of samples replaced by a motionless pair.
    pub motionless_fraction: f64,
    /// Also emit the reversed pair of every sample with a backward flow.
    pub motion_reversal: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            geometric: false,
            translation: Range::fixed(0.0),
            rotation_deg: Range::fixed(0.0),
            scale: Range::fixed(1.0),
            photometric: false,
            brightness: Range::fixed(0.0),
            contrast: Range::fixed(1.0),
            gamma: Range::fixed(1.0),
            color: Range::fixed(1.0),
            noise_sigma: 0.0,
            motionless_fraction: 3.0 / 22.0,
            motion_reversal: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every sample untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            motionless_fraction: 0.0,
            ..Self::default()
        }
    }

    /// Moderate ranges for training on synthetic data.
    pub fn standard(seed: u64) -> Self {
        AugmentConfig {
            geometric: true,
            translation: Range::new(-4.0, 4.0),
            rotation_deg: Range::new(-5.0, 5.0),
            scale: Range::new(0.95, 1.05),
            photometric: true,
            brightness: Range::new(-0.05, 0.05),
            contrast: Range::new(0.9, 1.1),
            gamma: Range::new(0.9, 1.1),
            color: Range::new(0.95, 1.05),
            noise_sigma: 0.01,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.translation.check("translation", false)?;
        self.rotation_deg.check("rotation_deg", false)?;
        self.scale.check("scale", true)?;
        self.brightness.check("brightness", false)?;
        self.contrast.check("contrast", true)?;
        self.gamma.check("gamma", true)?;
        self.color.check("color", true)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("augment.noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.motionless_fraction) {
            return Err(Error::Config("augment.motionless_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn geometric_is_identity(&self) -> bool {
        !self.geometric
            || (self.translation.is_fixed_at(0.0) && self.rotation_deg.is_fixed_at(0.0) && self.scale.is_fixed_at(1.0))
    }

    fn photometric_is_identity(&self) -> bool {
        !self.photometric
            || (self.brightness.is_fixed_at(0.0)
                && self.contrast.is_fixed_at(1.0)
                && self.gamma.is_fixed_at(1.0)
                && self.color.is_fixed_at(1.0))
    }
}

/// Bilinear sample of channel `c` at `p`, clamped to the border.
fn sample_clamped(t: &Tensor4<f32>, c: usize, p: [f64; 2]) -> f64 {
    let s = t.shape();
    let x = p[0].clamp(0.0, (s.w - 1) as f64);
    let y = p[1].clamp(0.0, (s.h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(s.w - 1), (y0 + 1).min(s.h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v = |yy, xx| t.at(0, c, yy, xx) as f64;
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// The same affine map x ↦ A(x − c) + c + t applied to both frames.
struct Geometric {
    a: [f64; 4],
    inv: [f64; 4],
    t: [f64; 2],
    c: [f64; 2],
}

impl Geometric {
    fn source(&self, x: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (x[0] - self.c[0] - self.t[0], x[1] - self.c[1] - self.t[1]);
        let m = self.inv;
        [m[0] * dx + m[1] * dy + self.c[0], m[2] * dx + m[3] * dy + self.c[1]]
    }

    fn image(&self, img: &Tensor4<f32>) -> Tensor4<f32> {
        let s = img.shape();
        let mut out = Tensor4::zeros(s);
        for y in 0..s.h {
            for x in 0..s.w {
                let p = self.source([x as f64, y as f64]);
                for c in 0..s.c {
                    *out.at_mut(0, c, y, x) = sample_clamped(img, c, p) as f32;
                }
            }
        }
        out
    }

    /// W'(x) = A·W(A⁻¹(x − c − t) + c): displacements rotate and scale with
    /// the frames, the shared translation cancels.
    fn flow(&self, f: &FlowField<f32>) -> FlowField<f32> {
        let t = f.tensor();
        let s = t.shape();
        let mut out = Tensor4::zeros(s);
        let a = self.a;
        for y in 0..s.h {
            for x in 0..s.w {
                let p = self.source([x as f64, y as f64]);
                let (u, v) = (sample_clamped(t, 0, p), sample_clamped(t, 1, p));
                *out.at_mut(0, 0, y, x) = (a[0] * u + a[1] * v) as f32;
                *out.at_mut(0, 1, y, x) = (a[2] * u + a[3] * v) as f32;
            }
        }
        FlowField::new(out).expect("finite flow stays finite")
    }
}

struct Photometric {
    brightness: f64,
    contrast: f64,
    gamma: f64,
    color: Vec<f64>,
}

impl Photometric {
    fn apply(&self, img: &Tensor4<f32>) -> Tensor4<f32> {
        let s = img.shape();
        Tensor4::from_fn(s, |n, c, y, x| {
            let v = img.at(n, c, y, x) as f64 * self.color[c];
            let v = (v - 0.5) * self.contrast + 0.5 + self.brightness;
            v.clamp(0.0, 1.0).powf(self.gamma) as f32
        })
    }
}

fn add_noise(img: &Tensor4<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor4<f32> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Applies one random draw of `cfg` to `s`. The draw depends only on
/// `cfg.seed` and `s.id`.
pub fn augment(s: &Sample, cfg: &AugmentConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, &format!("augment/{}", s.id));
    let mut out = s.clone();
    if !cfg.geometric_is_identity() {
        let tx = cfg.translation.draw(&mut rng);
        let ty = cfg.translation.draw(&mut rng);
        let deg = cfg.rotation_deg.draw(&mut rng);
        let scale = cfg.scale.draw(&mut rng);
        let (sn, cs) = deg.to_radians().sin_cos();
        let a = [scale * cs, -scale * sn, scale * sn, scale * cs];
        let det = a[0] * a[3] - a[1] * a[2];
        let g = Geometric {
            a,
            inv: [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det],
            t: [tx, ty],
            c: [(s.width() as f64 - 1.0) / 2.0, (s.height() as f64 - 1.0) / 2.0],
        };
        out.frame1 = g.image(&out.frame1);
        out.frame2 = g.image(&out.frame2);
        out.flow_fwd = g.flow(&out.flow_fwd);
        out.flow_bwd = out.flow_bwd.as_ref().map(|b| g.flow(b));
    }
    if !cfg.photometric_is_identity() {
        let p = Photometric {
            brightness: cfg.brightness.draw(&mut rng),
            contrast: cfg.contrast.draw(&mut rng),
            gamma: cfg.gamma.draw(&mut rng),
            color: (0..s.frame1.shape().c).map(|_| cfg.color.draw(&mut rng)).collect(),
        };
        out.frame1 = p.apply(&out.frame1);
        out.frame2 = p.apply(&out.frame2);
    }
    if cfg.noise_sigma > 0.0 {
        out.frame1 = add_noise(&out.frame1, cfg.noise_sigma, &mut rng);
        out.frame2 = add_noise(&out.frame2, cfg.noise_sigma, &mut rng);
    }
    Ok(out)
}

/// Swaps the frames. The new forward flow is the old backward flow (frame 2
/// onto frame 1) and vice versa, so reversing twice is the identity.
pub fn motion_reversal(s: &Sample) -> Result<Sample> {
    let bwd = s.flow_bwd.clone().ok_or_else(|| {
        Error::invalid("motion_reversal", "no backward flow to reverse with").for_sample(&s.id)
    })?;
    Ok(Sample {
        frame1: s.frame2.clone(),
        frame2: s.frame1.clone(),
        flow_fwd: bwd,
        flow_bwd: Some(s.flow_fwd.clone()),
        id: format!("{}~rev", s.id),
        padding: s.padding,
    })
}

/// `image` in both frames with all-zero flow.
pub fn motionless_sample(image: &Tensor4<f32>, id: impl Into<String>) -> Sample {
    let s = image.shape();
    Sample {
        frame1: image.clone(),
        frame2: image.clone(),
        flow_fwd: FlowField::zeros(1, s.h, s.w),
        flow_bwd: Some(FlowField::zeros(1, s.h, s.w)),
        id: id.into(),
        padding: Default::default(),
    }
}

/// Replaces each sample, independently with probability `fraction`, by the
/// motionless pair built from its first frame.
pub fn motionless_inject<I>(samples: I, fraction: f64, seed: u64) -> impl Iterator<Item = Sample>
where
    I: IntoIterator<Item = Sample>,
{
    let mut rng = seeded_rng(seed, "motionless");
    let p = fraction.clamp(0.0, 1.0);
    samples.into_iter().map(move |s| {
        if rng.gen::<f64>() < p {
            motionless_sample(&s.frame1, format!("{}~still", s.id))
        } else {
            s
        }
    })
}
