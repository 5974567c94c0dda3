//! Flow-specific differentiable primitives: correlation cost volumes and
//! their pyramid mapping, bilinear warping, flow upsampling and channel
//! normalization.

mod correlation;
mod normalize;
mod upsample;
mod warp;

use crate::error::{ensure_same, Error, Result};
use crate::tensor::{avg_pool2, avg_pool2_backward, concat_channels, Scalar, Shape4, Tensor4};

pub use correlation::{correlate, correlate_backward, offset_channels, offset_of, Exec};
pub use normalize::{channel_normalize, channel_normalize_backward, NormConstants};
pub use upsample::{
    upsample2x, upsample2x_backward, upsample_flow, upsample_flow_backward, UpsampleMode,
};
pub use warp::{
    warp_bilinear, warp_bilinear_backward, warp_bilinear_scaled, warp_bilinear_scaled_backward,
};

/// A dense displacement field: channel 0 is u (pixels, rightward), channel 1
/// is v (pixels, downward).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(Tensor4<T>);

impl<T: Scalar> FlowField<T> {
    pub fn new(t: Tensor4<T>) -> Result<Self> {
        if t.shape().c != 2 {
            return Err(Error::invalid(
                "flow_field",
                format!("expected 2 channels, got {}", t.shape()),
            ));
        }
        if !t.is_finite() {
            return Err(Error::invalid("flow_field", "non-finite displacement"));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor4::zeros(Shape4::new(n, 2, h, w)))
    }

    pub fn constant(n: usize, h: usize, w: usize, u: T, v: T) -> Self {
        FlowField(Tensor4::from_fn(Shape4::new(n, 2, h, w), |_, c, _, _| {
            if c == 0 {
                u
            } else {
                v
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor4<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4<T> {
        self.0
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField(self.0.cast())
    }

    pub fn shape(&self) -> Shape4 {
        self.0.shape()
    }

    pub fn u(&self, n: usize, y: usize, x: usize) -> T {
        self.0.at(n, 0, y, x)
    }

    pub fn v(&self, n: usize, y: usize, x: usize) -> T {
        self.0.at(n, 1, y, x)
    }

    pub fn upsample(&self, mode: UpsampleMode) -> Self {
        FlowField(upsample2x(&self.0, mode).scale(T::lit(2.0)))
    }
}

/// Correlation scores over the offset window, with the search radius and
/// pyramid level they were computed at (level 1 is the finest).
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    pub volume: Tensor4<T>,
    pub radius: usize,
    pub level: usize,
}

impl<T: Scalar> CostVolume<T> {
    pub fn single(
        f1: &Tensor4<T>,
        f2: &Tensor4<T>,
        radius: usize,
        patch_radius: usize,
        level: usize,
        exec: Exec,
    ) -> Result<Self> {
        Ok(CostVolume {
            volume: correlate(f1, f2, radius, patch_radius, exec)?,
            radius,
            level,
        })
    }

    pub fn channels(&self) -> usize {
        self.volume.shape().c
    }
}

/// Channel count after pairwise reduction: adjacent pairs averaged, an odd
/// trailing channel passed through.
pub const fn reduced_channels(c: usize) -> usize {
    c.div_ceil(2)
}

fn reduce_channels<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let half = T::lit(0.5);
    let out_shape = s.with_channels(reduced_channels(s.c));
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..s.n {
        for j in 0..out_shape.c {
            let a = x.plane(n, 2 * j);
            let dst = out.plane_mut(n, j);
            if 2 * j + 1 < s.c {
                let b = x.plane(n, 2 * j + 1);
                for ((d, &p), &q) in dst.iter_mut().zip(a).zip(b) {
                    *d = (p + q) * half;
                }
            } else {
                dst.copy_from_slice(a);
            }
        }
    }
    out
}

fn reduce_channels_backward<T: Scalar>(input: Shape4, g: &Tensor4<T>) -> Tensor4<T> {
    let half = T::lit(0.5);
    let mut out = Tensor4::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let src = g.plane(n, c / 2);
            let paired = c ^ 1 < input.c;
            let dst = out.plane_mut(n, c);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = if paired { v * half } else { v };
            }
        }
    }
    out
}

/// Halves a cost volume spatially (2×2 average pooling) and in channels
/// (adjacent-pair averaging).
pub fn downsample_cost<T: Scalar>(c: &Tensor4<T>) -> Result<Tensor4<T>> {
    if c.shape().c < 2 {
        return Err(Error::invalid(
            "downsample_cost",
            format!("need at least 2 channels, got {}", c.shape()),
        ));
    }
    Ok(reduce_channels(&avg_pool2(c)))
}

pub fn downsample_cost_backward<T: Scalar>(input: Shape4, g: &Tensor4<T>) -> Result<Tensor4<T>> {
    let pooled = input.with_spatial(input.h.div_ceil(2), input.w.div_ceil(2));
    ensure_same(
        "downsample_cost_backward",
        pooled.with_channels(reduced_channels(input.c)),
        g.shape(),
    )?;
    avg_pool2_backward(input, &reduce_channels_backward(pooled, g))
}

/// Aggregates the single-level volume at level k with the mapped volume of
/// the finer level k−1: identity at the finest level, otherwise the channel
/// concatenation of `single` and the downsampled previous volume.
pub fn pyramid_correlation_map<T: Scalar>(
    single: &CostVolume<T>,
    prev: Option<&CostVolume<T>>,
) -> Result<CostVolume<T>> {
    let Some(prev) = prev else {
        return Ok(single.clone());
    };
    let down = downsample_cost(&prev.volume)?;
    let (a, b) = (single.volume.shape(), down.shape());
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::invalid(
            "pyramid_correlation_map",
            format!(
                "downsampled level-{} volume is {b}, level-{} volume is {a}; pyramid levels must halve",
                prev.level, single.level
            ),
        ));
    }
    Ok(CostVolume {
        volume: concat_channels(&[&single.volume, &down])?,
        radius: single.radius,
        level: single.level,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};

    #[test]
    fn constant_volume_stays_constant() {
        let c = Tensor4::full(Shape4::new(1, 4, 6, 6), 0.7f64);
        let d = downsample_cost(&c).unwrap();
        assert_eq!(d.shape(), Shape4::new(1, 2, 3, 3));
        assert!(d.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn pair_is_averaged_and_odd_channel_kept() {
        let c = Tensor4::from_fn(Shape4::new(1, 3, 2, 2), |_, c, _, _| [1.0, 3.0, 5.0][c]);
        let d = downsample_cost(&c).unwrap();
        assert_eq!(d.data(), &[2.0, 5.0]);
    }

    #[test]
    fn downsample_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor4::<f64>::random_uniform(Shape4::new(1, 5, 4, 4), -1.0, 1.0, &mut rng);
        let a = downsample_cost(&c.scale(3.0)).unwrap();
        let b = downsample_cost(&c).unwrap().scale(3.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn downsample_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in [4, 5] {
            let x = Tensor4::<f64>::random_uniform(Shape4::new(1, c, 4, 6), -1.0, 1.0, &mut rng);
            let report = check_gradients(
                &[x],
                |i| downsample_cost(&i[0]),
                |i, g| Ok(vec![downsample_cost_backward(i[0].shape(), g)?]),
                CheckOptions::linear(),
                0,
            );
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn mapping_channel_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = Shape4::new(1, 3, 8, 8);
        let coarse = Shape4::new(1, 3, 4, 4);
        let mut f = |s| Tensor4::<f32>::random_uniform(s, -1.0, 1.0, &mut rng);
        let (a1, a2) = (f(fine), f(fine));
        let (b1, b2) = (f(coarse), f(coarse));
        let c1 = CostVolume::single(&a1, &a2, 2, 0, 1, Exec::Serial).unwrap();
        let m1 = pyramid_correlation_map(&c1, None).unwrap();
        assert_eq!(m1, c1);
        let c2 = CostVolume::single(&b1, &b2, 2, 0, 2, Exec::Serial).unwrap();
        let m2 = pyramid_correlation_map(&c2, Some(&m1)).unwrap();
        assert_eq!(m2.channels(), 25 + 13);
        assert_eq!(offset_channels(4) + reduced_channels(81), 122);
        assert_eq!(offset_channels(4) + reduced_channels(122), 142);
    }

    #[test]
    fn mis_built_pyramid_is_rejected() {
        let s = Shape4::new(1, 2, 8, 8);
        let a = Tensor4::<f32>::zeros(s);
        let c1 = CostVolume::single(&a, &a, 1, 0, 1, Exec::Serial).unwrap();
        let c2 = CostVolume::single(&a, &a, 1, 0, 2, Exec::Serial).unwrap();
        let err = pyramid_correlation_map(&c2, Some(&c1)).unwrap_err();
        assert!(err.to_string().contains("halve"));
    }

    #[test]
    fn flow_field_requires_two_channels() {
        assert!(FlowField::new(Tensor4::<f32>::zeros(Shape4::new(1, 3, 2, 2))).is_err());
        let f = FlowField::constant(1, 2, 2, 1.0f32, -2.0);
        let up = f.upsample(UpsampleMode::Bicubic).upsample(UpsampleMode::Bicubic);
        assert_eq!(up.shape(), Shape4::new(1, 2, 8, 8));
        assert!(up.tensor().data()[..64].iter().all(|&u| u == 4.0));
    }
}
