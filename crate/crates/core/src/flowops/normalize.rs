use serde::{Deserialize, Serialize};

use crate::error::{ensure_same, Result};
use crate::tensor::{Scalar, Tensor4};

/// Constants of `N = V / (α·ΣV² + ε)^β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants {
            alpha: 0.99,
            beta: 0.5,
            eps: 0.01,
        }
    }
}

/// Per-channel denominators `(α·Σ_x V(x,c)² + ε)^β`, one per (batch, channel).
fn denominators<T: Scalar>(v: &Tensor4<T>, k: NormConstants) -> Vec<(T, T)> {
    let s = v.shape();
    let (a, b, e) = (T::lit(k.alpha), T::lit(k.beta), T::lit(k.eps));
    (0..s.n * s.c)
        .map(|i| {
            let p = v.plane(i / s.c, i % s.c);
            let sq: T = p.iter().map(|&x| x * x).sum();
            let base = a * sq + e;
            (base, base.powf(b))
        })
        .collect()
}

/// Scales every channel by its own energy: `N(x,c) = V(x,c) / (α·Σ_x V(x,c)² + ε)^β`,
/// the sum running over the spatial positions of one batch item.
pub fn channel_normalize<T: Scalar>(v: &Tensor4<T>, k: NormConstants) -> Tensor4<T> {
    let s = v.shape();
    let dens = denominators(v, k);
    let mut out = v.clone();
    for (i, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let inv = T::one() / dens[i].1;
        plane.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

/// `∂L/∂V = g/d − 2αβ·(αs + ε)^(−β−1)·(Σ g·V)·V` per channel.
pub fn channel_normalize_backward<T: Scalar>(
    v: &Tensor4<T>,
    k: NormConstants,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    ensure_same("channel_normalize_backward", v.shape(), grad_out.shape())?;
    let s = v.shape();
    let dens = denominators(v, k);
    let two_ab = T::lit(2.0 * k.alpha * k.beta);
    let mut out = Tensor4::zeros(s);
    for (i, dst) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let (n, c) = (i / s.c, i % s.c);
        let (vp, gp) = (v.plane(n, c), grad_out.plane(n, c));
        let (base, d) = dens[i];
        let gv: T = gp.iter().zip(vp).map(|(&g, &x)| g * x).sum();
        let coef = two_ab * gv / (d * base);
        for ((o, &g), &x) in dst.iter_mut().zip(gp).zip(vp) {
            *o = g / d - coef * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};
    use crate::tensor::Shape4;

    fn single(v: f64) -> f64 {
        let t = Tensor4::full(Shape4::new(1, 1, 1, 1), v);
        channel_normalize(&t, NormConstants::default()).data()[0]
    }

    #[test]
    fn unit_pixel_is_unchanged() {
        assert_eq!(single(1.0), 1.0);
    }

    #[test]
    fn value_two_is_divided_by_root_397() {
        let got = single(2.0);
        assert!((got - 2.0 / 3.97f64.sqrt()).abs() < 1e-15);
        assert!((got - 1.00377).abs() < 1e-5);
    }

    #[test]
    fn zero_stays_zero() {
        let t = Tensor4::<f32>::zeros(Shape4::new(2, 3, 4, 4));
        assert_eq!(channel_normalize(&t, NormConstants::default()), t);
    }

    #[test]
    fn channels_are_independent() {
        let t = Tensor4::from_fn(Shape4::new(1, 2, 1, 2), |_, c, _, _| if c == 0 { 1.0 } else { 10.0 });
        let n = channel_normalize(&t, NormConstants::default());
        let d0 = (0.99f64 * 2.0 + 0.01).sqrt();
        assert!((n.at(0, 0, 0, 0) - 1.0 / d0).abs() < 1e-15);
        let d1 = (0.99f64 * 200.0 + 0.01).sqrt();
        assert!((n.at(0, 1, 0, 1) - 10.0 / d1).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor4::<f64>::random_uniform(Shape4::new(2, 3, 3, 4), -1.0, 1.0, &mut rng);
        for k in [NormConstants::default(), NormConstants { alpha: 0.5, beta: 0.75, eps: 0.1 }] {
            let report = check_gradients(
                &[v.clone()],
                |i| Ok(channel_normalize(&i[0], k)),
                |i, g| Ok(vec![channel_normalize_backward(&i[0], k, g)?]),
                CheckOptions::smooth(),
                3,
            );
            assert!(report.passed(), "{report}");
        }
    }
}
