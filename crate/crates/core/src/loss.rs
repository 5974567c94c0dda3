//! Training objective: supervised end-point plus absolute error, warped
//! feature alignment, edge-aware smoothness, and their per-stage and
//! cross-stage combinations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same, Error, Result};
use crate::flowops::{warp_bilinear_scaled, warp_bilinear_scaled_backward};
use crate::tensor::{Scalar, Tensor4};

/// Per-component penalty in the supervised loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsPenalty {
    /// `|x|`.
    #[default]
    L1,
    /// Huber with δ = 1: `x²/2` for `|x| < 1`, else `|x| − 1/2`.
    SmoothL1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Divide by the number of pixels (batch × height × width).
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub penalty: AbsPenalty,
    pub reduction: Reduction,
}

/// Coefficients of the per-stage and cross-stage sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    /// Listed finest stage first.
    pub stage_weights: Vec<f64>,
    pub supervised: SupervisedConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.05,
            mu: 0.005,
            stage_weights: vec![0.32, 0.08, 0.02, 0.01, 0.005],
            supervised: SupervisedConfig::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.mu]
            .into_iter()
            .chain(self.stage_weights.iter().copied());
        for w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Weights for `stages` stages ordered coarse to fine: the finest stage
    /// gets the first listed weight.
    pub fn for_stages(&self, stages: usize) -> Result<Vec<f64>> {
        if stages > self.stage_weights.len() {
            return Err(Error::Config(format!(
                "{stages} stages but only {} stage weights configured",
                self.stage_weights.len()
            )));
        }
        Ok(self.stage_weights[..stages].iter().rev().copied().collect())
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_flow(op: &'static str, w: &Tensor4<impl Scalar>) -> Result<()> {
    if w.shape().c != 2 {
        return Err(Error::invalid(op, format!("flow must have 2 channels, got {}", w.shape())));
    }
    Ok(())
}

fn reduction_factor<T: Scalar>(w: &Tensor4<T>, r: Reduction) -> T {
    match r {
        Reduction::Sum => T::one(),
        Reduction::Mean => {
            let s = w.shape();
            T::one() / T::lit((s.n * s.plane()) as f64)
        }
    }
}

/// `Σ_x ‖W − Ŵ‖₂ + Σ_x Σ_d ρ(W − Ŵ)` with ρ the configured absolute penalty.
pub fn supervised_loss<T: Scalar>(w: &Tensor4<T>, w_hat: &Tensor4<T>, cfg: SupervisedConfig) -> Result<T> {
    check_flow("supervised_loss", w)?;
    ensure_same("supervised_loss", w.shape(), w_hat.shape())?;
    let s = w.shape();
    let half = T::lit(0.5);
    let rho = |d: T| match cfg.penalty {
        AbsPenalty::L1 => d.abs(),
        AbsPenalty::SmoothL1 if d.abs() < T::one() => half * d * d,
        AbsPenalty::SmoothL1 => d.abs() - half,
    };
    let mut total = T::zero();
    for b in 0..s.n {
        let (u, v) = (w.plane(b, 0), w.plane(b, 1));
        let (uh, vh) = (w_hat.plane(b, 0), w_hat.plane(b, 1));
        for i in 0..s.plane() {
            let (du, dv) = (u[i] - uh[i], v[i] - vh[i]);
            total += (du * du + dv * dv).sqrt() + rho(du) + rho(dv);
        }
    }
    Ok(total * reduction_factor(w, cfg.reduction))
}

/// Gradient of [`supervised_loss`] with respect to `w`. Where the error
/// vanishes the zero subgradient is used.
pub fn supervised_loss_backward<T: Scalar>(
    w: &Tensor4<T>,
    w_hat: &Tensor4<T>,
    cfg: SupervisedConfig,
) -> Result<Tensor4<T>> {
    check_flow("supervised_loss_backward", w)?;
    ensure_same("supervised_loss_backward", w.shape(), w_hat.shape())?;
    let s = w.shape();
    let scale = reduction_factor(w, cfg.reduction);
    let drho = |d: T| match cfg.penalty {
        AbsPenalty::L1 => sign(d),
        AbsPenalty::SmoothL1 if d.abs() < T::one() => d,
        AbsPenalty::SmoothL1 => sign(d),
    };
    let mut g = Tensor4::zeros(s);
    for b in 0..s.n {
        for i in 0..s.plane() {
            let du = w.plane(b, 0)[i] - w_hat.plane(b, 0)[i];
            let dv = w.plane(b, 1)[i] - w_hat.plane(b, 1)[i];
            let norm = (du * du + dv * dv).sqrt();
            let (eu, ev) = if norm > T::zero() {
                (du / norm, dv / norm)
            } else {
                (T::zero(), T::zero())
            };
            g.plane_mut(b, 0)[i] = (eu + drho(du)) * scale;
            g.plane_mut(b, 1)[i] = (ev + drho(dv)) * scale;
        }
    }
    Ok(g)
}

/// `Σ_x Σ_c |F1(x) − F2(x + s·W(x))|`, sampling F2 bilinearly. `s` converts
/// the flow's units to pixels of the feature grid.
pub fn unsupervised_loss<T: Scalar>(f1: &Tensor4<T>, f2: &Tensor4<T>, w: &Tensor4<T>, s: T) -> Result<T> {
    check_flow("unsupervised_loss", w)?;
    ensure_same("unsupervised_loss", f1.shape(), f2.shape())?;
    let warped = warp_bilinear_scaled(f2, w, s)?;
    Ok(f1
        .data()
        .iter()
        .zip(warped.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum())
}

/// Gradients of [`unsupervised_loss`] with respect to `(f1, f2, w)`.
pub fn unsupervised_loss_backward<T: Scalar>(
    f1: &Tensor4<T>,
    f2: &Tensor4<T>,
    w: &Tensor4<T>,
    s: T,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    check_flow("unsupervised_loss_backward", w)?;
    ensure_same("unsupervised_loss_backward", f1.shape(), f2.shape())?;
    let warped = warp_bilinear_scaled(f2, w, s)?;
    let g1 = f1.zip_map(&warped, |a, b| sign(a - b))?;
    let gw = g1.map(|v| -v);
    let (g2, gflow) = warp_bilinear_scaled_backward(f2, w, s, &gw)?;
    Ok((g1, g2, gflow))
}

/// Edge weights `exp(−Σ_c |∂F|)` for forward differences along x and y.
/// Entries at the last column (x) and last row (y) are unused.
fn edge_weights<T: Scalar>(f: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let s = f.shape();
    let plane = s.with_channels(1);
    let mut ex = Tensor4::<T>::zeros(plane);
    let mut ey = Tensor4::<T>::zeros(plane);
    for b in 0..s.n {
        for c in 0..s.c {
            let p = f.plane(b, c);
            let dx = ex.plane_mut(b, 0);
            for y in 0..s.h {
                for x in 0..s.w - 1 {
                    dx[y * s.w + x] += (p[y * s.w + x + 1] - p[y * s.w + x]).abs();
                }
            }
            let dyp = ey.plane_mut(b, 0);
            for y in 0..s.h - 1 {
                for x in 0..s.w {
                    dyp[y * s.w + x] += (p[(y + 1) * s.w + x] - p[y * s.w + x]).abs();
                }
            }
        }
    }
    (ex.map(|v: T| (-v).exp()), ey.map(|v: T| (-v).exp()))
}

fn check_reg(op: &'static str, w: &Tensor4<impl Scalar>, f1: &Tensor4<impl Scalar>) -> Result<()> {
    check_flow(op, w)?;
    let (a, b) = (w.shape(), f1.shape());
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::ShapeMismatch { op, lhs: a, rhs: b });
    }
    Ok(())
}

/// `Σ_d Σ_x |∂_x W_d|·exp(−|∂_x F1|₁) + |∂_y W_d|·exp(−|∂_y F1|₁)` with
/// forward differences that vanish at the last row and column. F1 is treated
/// as a constant.
pub fn regularization_loss<T: Scalar>(w: &Tensor4<T>, f1: &Tensor4<T>) -> Result<T> {
    check_reg("regularization_loss", w, f1)?;
    let s = w.shape();
    let (ex, ey) = edge_weights(f1);
    let mut total = T::zero();
    for b in 0..s.n {
        let (wx, wy) = (ex.plane(b, 0), ey.plane(b, 0));
        for d in 0..2 {
            let p = w.plane(b, d);
            for y in 0..s.h {
                for x in 0..s.w {
                    let i = y * s.w + x;
                    if x + 1 < s.w {
                        total += (p[i + 1] - p[i]).abs() * wx[i];
                    }
                    if y + 1 < s.h {
                        total += (p[i + s.w] - p[i]).abs() * wy[i];
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Gradient of [`regularization_loss`] with respect to `w`.
pub fn regularization_loss_backward<T: Scalar>(w: &Tensor4<T>, f1: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_reg("regularization_loss_backward", w, f1)?;
    let s = w.shape();
    let (ex, ey) = edge_weights(f1);
    let mut g = Tensor4::zeros(s);
    for b in 0..s.n {
        for d in 0..2 {
            let p = w.plane(b, d).to_vec();
            let (wx, wy) = (ex.plane(b, 0), ey.plane(b, 0));
            let gp = g.plane_mut(b, d);
            for y in 0..s.h {
                for x in 0..s.w {
                    let i = y * s.w + x;
                    if x + 1 < s.w {
                        let t = sign(p[i + 1] - p[i]) * wx[i];
                        gp[i + 1] += t;
                        gp[i] -= t;
                    }
                    if y + 1 < s.h {
                        let t = sign(p[i + s.w] - p[i]) * wy[i];
                        gp[i + s.w] += t;
                        gp[i] -= t;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// The three terms of one stage, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTerms {
    pub supervised: f64,
    pub unsupervised: f64,
    pub regularization: f64,
}

impl StageTerms {
    /// `L^S + λ·L^U + μ·L^R`.
    pub fn combined(&self, w: &LossWeights) -> f64 {
        self.supervised + w.lambda * self.unsupervised + w.mu * self.regularization
    }

    pub fn scaled(&self, k: f64) -> StageTerms {
        StageTerms {
            supervised: self.supervised * k,
            unsupervised: self.unsupervised * k,
            regularization: self.regularization * k,
        }
    }

    pub fn add(&self, o: &StageTerms) -> StageTerms {
        StageTerms {
            supervised: self.supervised + o.supervised,
            unsupervised: self.unsupervised + o.unsupervised,
            regularization: self.regularization + o.regularization,
        }
    }
}

/// Inputs of one stage's loss: features (or images) at the stage grid, the
/// predicted flow, the target flow in the same units, and the factor that
/// turns flow units into grid pixels.
pub struct StageInputs<'a, T> {
    pub f1: &'a Tensor4<T>,
    pub f2: &'a Tensor4<T>,
    pub flow: &'a Tensor4<T>,
    pub target: &'a Tensor4<T>,
    pub flow_scale: T,
}

pub fn stage_terms<T: Scalar>(i: &StageInputs<'_, T>, w: &LossWeights) -> Result<StageTerms> {
    Ok(StageTerms {
        supervised: supervised_loss(i.flow, i.target, w.supervised)?.as_f64(),
        unsupervised: if w.lambda == 0.0 {
            0.0
        } else {
            unsupervised_loss(i.f1, i.f2, i.flow, i.flow_scale)?.as_f64()
        },
        regularization: if w.mu == 0.0 {
            0.0
        } else {
            regularization_loss(i.flow, i.f1)?.as_f64()
        },
    })
}

/// `L^S + λ·L^U + μ·L^R` for one stage.
pub fn stage_loss<T: Scalar>(i: &StageInputs<'_, T>, w: &LossWeights) -> Result<f64> {
    Ok(stage_terms(i, w)?.combined(w))
}

/// `Σ_k w_k · stage_loss_k` over stages ordered coarse to fine.
pub fn total_loss<T: Scalar>(stages: &[StageInputs<'_, T>], w: &LossWeights) -> Result<f64> {
    let weights = w.for_stages(stages.len())?;
    let mut total = 0.0;
    for (k, (s, wk)) in stages.iter().zip(weights).enumerate() {
        total += wk * stage_loss(s, w).map_err(|e| e.at_stage(k))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_scalar, CheckOptions};
    use crate::tensor::Shape4;

    fn flow(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor4<f64> {
        Tensor4::from_fn(Shape4::new(1, 2, h, w), |_, c, y, x| f(c, y, x))
    }

    #[test]
    fn supervised_three_four_is_twelve() {
        let w = flow(1, 1, |c, _, _| [3.0, 4.0][c]);
        let z = Tensor4::zeros(w.shape());
        assert_eq!(supervised_loss(&w, &z, SupervisedConfig::default()).unwrap(), 12.0);
        assert_eq!(supervised_loss(&w, &w, SupervisedConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn smooth_l1_switch() {
        let w = flow(1, 1, |c, _, _| [0.5, 0.0][c]);
        let z = Tensor4::zeros(w.shape());
        let cfg = SupervisedConfig {
            penalty: AbsPenalty::SmoothL1,
            reduction: Reduction::Sum,
        };
        assert_eq!(supervised_loss(&w, &z, cfg).unwrap(), 0.5 + 0.125);
    }

    #[test]
    fn mean_reduction_divides_by_pixels() {
        let w = flow(2, 2, |c, _, _| [3.0, 4.0][c]);
        let z = Tensor4::zeros(w.shape());
        let cfg = SupervisedConfig {
            reduction: Reduction::Mean,
            ..Default::default()
        };
        assert_eq!(supervised_loss(&w, &z, cfg).unwrap(), 12.0);
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor4::<f64>::random_uniform(Shape4::new(2, 2, 3, 3), -2.0, 2.0, &mut rng);
        let t = Tensor4::random_uniform(w.shape(), -2.0, 2.0, &mut rng);
        for penalty in [AbsPenalty::L1, AbsPenalty::SmoothL1] {
            let cfg = SupervisedConfig {
                penalty,
                reduction: Reduction::Sum,
            };
            let g = supervised_loss_backward(&w, &t, cfg).unwrap();
            let report = check_scalar(
                &[w.clone()],
                |x| supervised_loss(&x[0], &t, cfg),
                &[g],
                CheckOptions::smooth(),
                0,
            );
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn aligned_shift_has_zero_unsupervised_loss_inside() {
        // F2 is F1 moved right by one pixel, so F2(x + 1) == F1(x).
        let f1 = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 4, 6), |_, _, y, x| ((x * 7 + y * 3) % 5) as f64);
        let f2 = Tensor4::from_fn(f1.shape(), |_, _, y, x| if x == 0 { 9.0 } else { f1.at(0, 0, y, x - 1) });
        let w = flow(4, 6, |c, _, _| [1.0, 0.0][c]);
        // Only the last column samples outside the frame.
        let edge: f64 = (0..4).map(|y| f1.at(0, 0, y, 5).abs()).sum();
        assert_eq!(unsupervised_loss(&f1, &f2, &w, 1.0).unwrap(), edge);
        assert_eq!(unsupervised_loss(&f1, &f1, &Tensor4::zeros(w.shape()), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn unsupervised_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f1 = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let f2 = Tensor4::random_uniform(f1.shape(), -1.0, 1.0, &mut rng);
        let w = Tensor4::random_uniform(Shape4::new(1, 2, 5, 5), -0.1, 0.1, &mut rng);
        let s = 4.0;
        let (g1, g2, gw) = unsupervised_loss_backward(&f1, &f2, &w, s).unwrap();
        let report = check_scalar(
            &[f1, f2, w],
            |x| unsupervised_loss(&x[0], &x[1], &x[2], s),
            &[g1, g2, gw],
            CheckOptions::piecewise().with_step(1e-7),
            0,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn step_along_one_column_costs_its_height() {
        let h = 5;
        let w = flow(h, 4, |c, _, x| if c == 0 && x >= 2 { 1.0 } else { 0.0 });
        let f1 = Tensor4::full(Shape4::new(1, 3, h, 4), 0.3);
        assert_eq!(regularization_loss(&w, &f1).unwrap(), h as f64);
        let constant = flow(h, 4, |c, _, _| c as f64 + 2.0);
        assert_eq!(regularization_loss(&constant, &f1).unwrap(), 0.0);
    }

    #[test]
    fn regularization_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 4, 5), -1.0, 1.0, &mut rng);
        let f1 = Tensor4::random_uniform(Shape4::new(1, 3, 4, 5), 0.0, 1.0, &mut rng);
        let g = regularization_loss_backward(&w, &f1).unwrap();
        let report = check_scalar(
            &[w],
            |x| regularization_loss(&x[0], &f1),
            &[g],
            CheckOptions::smooth(),
            0,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn stage_weights_put_the_largest_on_the_finest_stage() {
        let w = LossWeights::default();
        assert_eq!(w.for_stages(3).unwrap(), vec![0.02, 0.08, 0.32]);
        assert!(w.for_stages(6).is_err());
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shapes = [(2, 2), (4, 4)];
        let data: Vec<_> = shapes
            .iter()
            .map(|&(h, w)| {
                let mut r = |c| Tensor4::<f64>::random_uniform(Shape4::new(1, c, h, w), -1.0, 1.0, &mut rng);
                (r(3), r(3), r(2), r(2))
            })
            .collect();
        let stages: Vec<_> = data
            .iter()
            .map(|(f1, f2, fl, t)| StageInputs {
                f1,
                f2,
                flow: fl,
                target: t,
                flow_scale: 2.0,
            })
            .collect();
        let w = LossWeights::default();
        let total = total_loss(&stages, &w).unwrap();
        let mut expect = 0.0;
        for (s, k) in stages.iter().zip([0.08, 0.32]) {
            let sup = supervised_loss(s.flow, s.target, w.supervised).unwrap();
            let uns = unsupervised_loss(s.f1, s.f2, s.flow, 2.0).unwrap();
            let reg = regularization_loss(s.flow, s.f1).unwrap();
            expect += k * (sup + 0.05 * uns + 0.005 * reg);
        }
        assert!((total - expect).abs() < 1e-12);
        let s_only = LossWeights {
            lambda: 0.0,
            mu: 0.0,
            ..w
        };
        let sup = stage_loss(&stages[1], &s_only).unwrap();
        assert_eq!(sup, supervised_loss(stages[1].flow, stages[1].target, s_only.supervised).unwrap());
    }
}
