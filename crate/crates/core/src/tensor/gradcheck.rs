//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! A tensor-valued op `f` is reduced to the scalar `L = Σ r ⊙ f(inputs)` with
//! a fixed random projection `r`; its analytic gradient is the op's backward
//! applied to `r`. The difference `L(x + h) − L(x − h)` is accumulated
//! elementwise so that untouched outputs cancel exactly.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor4;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor, relative to the largest analytic entry of the input.
    pub rel_floor: f64,
    /// Skip entries whose one-sided slopes disagree (a kink inside ±step).
    pub skip_kinks: bool,
    /// Check at most this many entries per input (chosen at random).
    pub max_entries: Option<usize>,
}

impl CheckOptions {
    /// Smooth nonlinear ops: step 1e-5, rel. err < 1e-5.
    pub fn smooth() -> Self {
        CheckOptions {
            step: 1e-5,
            tolerance: 1e-5,
            rel_floor: 1e-3,
            skip_kinks: false,
            max_entries: None,
        }
    }

    /// Ops that are linear in each input coordinate. Central differences are
    /// exact for them at any step, so a large step keeps roundoff below 1e-9.
    pub fn linear() -> Self {
        CheckOptions {
            step: 0.25,
            tolerance: 1e-9,
            ..Self::smooth()
        }
    }

    /// Piecewise-smooth ops (warps, absolute values): rel. err < 1e-4 with
    /// entries straddling a kink excluded.
    pub fn piecewise() -> Self {
        CheckOptions {
            tolerance: 1e-4,
            skip_kinks: true,
            ..Self::smooth()
        }
    }

    pub fn with_tolerance(self, tolerance: f64) -> Self {
        CheckOptions { tolerance, ..self }
    }

    pub fn with_step(self, step: f64) -> Self {
        CheckOptions { step, ..self }
    }

    pub fn with_max_entries(self, n: usize) -> Self {
        CheckOptions {
            max_entries: Some(n),
            ..self
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    /// Set when the oracle itself failed (non-finite value, forward error).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none()
            && self.inputs.iter().all(|r| {
                r.max_rel_err < self.tolerance
                    // a check that skipped most entries proves nothing
                    && r.skipped_kinks * 10 <= r.checked + r.skipped_kinks
            })
    }

    fn failed(msg: String, tolerance: f64) -> Self {
        GradCheckReport {
            inputs: Vec::new(),
            tolerance,
            failure: Some(msg),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return write!(f, "FAIL (oracle failure: {msg})");
        }
        write!(
            f,
            "{} max rel. err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )?;
        for r in &self.inputs {
            write!(
                f,
                "; input {}: {:.3e} over {} entries",
                r.index, r.max_rel_err, r.checked
            )?;
            if r.skipped_kinks > 0 {
                write!(f, " ({} at kinks skipped)", r.skipped_kinks)?;
            }
        }
        Ok(())
    }
}

/// Checks a tensor-valued op against its backward.
pub fn check_gradients<F, B>(
    inputs: &[Tensor4<f64>],
    forward: F,
    backward: B,
    opts: CheckOptions,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&[Tensor4<f64>]) -> Result<Tensor4<f64>>,
    B: Fn(&[Tensor4<f64>], &Tensor4<f64>) -> Result<Vec<Tensor4<f64>>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match forward(inputs) {
        Ok(y) if y.is_finite() => y,
        Ok(_) => return GradCheckReport::failed("non-finite forward value".into(), opts.tolerance),
        Err(e) => return GradCheckReport::failed(e.to_string(), opts.tolerance),
    };
    let proj = Tensor4::<f64>::random_uniform(base.shape(), -1.0, 1.0, &mut rng);
    let analytic = match backward(inputs, &proj) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(e.to_string(), opts.tolerance),
    };
    let delta = |a: &Tensor4<f64>, b: &Tensor4<f64>| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .zip(proj.data())
            .map(|((x, y), r)| if x == y { 0.0 } else { r * (x - y) })
            .sum()
    };
    run_check(inputs, &analytic, opts, &mut rng, |xs| {
        let y = forward(xs)?;
        Ok(delta(&y, &base))
    })
}

/// Checks a scalar function given precomputed analytic gradients.
pub fn check_scalar<F>(
    inputs: &[Tensor4<f64>],
    f: F,
    analytic: &[Tensor4<f64>],
    opts: CheckOptions,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&[Tensor4<f64>]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match f(inputs) {
        Ok(v) if v.is_finite() => v,
        Ok(_) => return GradCheckReport::failed("non-finite function value".into(), opts.tolerance),
        Err(e) => return GradCheckReport::failed(e.to_string(), opts.tolerance),
    };
    run_check(inputs, analytic, opts, &mut rng, |xs| Ok(f(xs)? - base))
}

/// `shifted(xs)` returns `L(xs) − L(inputs)`.
fn run_check<S>(
    inputs: &[Tensor4<f64>],
    analytic: &[Tensor4<f64>],
    opts: CheckOptions,
    rng: &mut ChaCha8Rng,
    shifted: S,
) -> GradCheckReport
where
    S: Fn(&[Tensor4<f64>]) -> Result<f64>,
{
    if analytic.len() != inputs.len() {
        return GradCheckReport::failed(
            format!(
                "backward returned {} gradients for {} inputs",
                analytic.len(),
                inputs.len()
            ),
            opts.tolerance,
        );
    }
    let h = opts.step;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor4<f64>> = inputs.to_vec();
    for (idx, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
        if grad.shape() != input.shape() {
            return GradCheckReport::failed(
                format!(
                    "gradient {idx} has shape {} but input is {}",
                    grad.shape(),
                    input.shape()
                ),
                opts.tolerance,
            );
        }
        let len = input.shape().len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < len => {
                let mut v = sample(rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let floor = (opts.rel_floor * grad.max_abs()).max(1e-12);
        let mut report = InputReport {
            index: idx,
            checked: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
            worst_entry: 0,
        };
        for &e in &entries {
            let orig = input.data()[e];
            work[idx].data_mut()[e] = orig + h;
            let plus = shifted(&work);
            work[idx].data_mut()[e] = orig - h;
            let minus = shifted(&work);
            work[idx].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(err), _) | (_, Err(err)) => {
                    return GradCheckReport::failed(err.to_string(), opts.tolerance)
                }
                _ => {
                    return GradCheckReport::failed(
                        format!("non-finite function value at input {idx} entry {e}"),
                        opts.tolerance,
                    )
                }
            };
            if opts.skip_kinks {
                let right = plus / h;
                let left = -minus / h;
                let scale = right.abs().max(left.abs()).max(floor);
                if (right - left).abs() > 1e-2 * scale {
                    report.skipped_kinks += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_entry = e;
            }
        }
        reports.push(report);
    }
    GradCheckReport {
        inputs: reports,
        tolerance: opts.tolerance,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Shape4;

    fn inputs() -> Vec<Tensor4<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        vec![Tensor4::random_uniform(Shape4::new(1, 2, 3, 3), -1.0, 1.0, &mut rng)]
    }

    #[test]
    fn linear_op_matches_to_roundoff() {
        let report = check_gradients(
            &inputs(),
            |x| Ok(x[0].scale(3.0)),
            |_, g| Ok(vec![g.scale(3.0)]),
            CheckOptions::linear(),
            0,
        );
        assert!(report.passed());
        assert!(report.max_rel_err() < 1e-10, "{report}");
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let report = check_gradients(
            &inputs(),
            |x| Ok(x[0].map(|v| v * v * v)),
            |x, g| Ok(vec![x[0].zip_map(g, |v, g| 3.0 * v * v * g * 1.01)?]),
            CheckOptions::smooth(),
            0,
        );
        assert!(!report.passed());
        let err = report.max_rel_err();
        assert!((0.005..0.02).contains(&err), "{err}");
    }

    #[test]
    fn non_finite_value_is_an_oracle_failure_not_a_panic() {
        let report = check_gradients(
            &inputs(),
            |x| Ok(x[0].map(|v| if v > 0.0 { 1.0 / 0.0 } else { v })),
            |_, g| Ok(vec![g.clone()]),
            CheckOptions::smooth(),
            0,
        );
        assert!(!report.passed());
        assert!(report.failure.is_some());
    }

    #[test]
    fn forward_error_is_reported() {
        let report = check_scalar(
            &inputs(),
            |_| Err(Error::invalid("test", "boom")),
            &inputs(),
            CheckOptions::smooth(),
            0,
        );
        assert!(report.to_string().contains("boom"));
    }

    #[test]
    fn kinks_are_skipped_when_requested() {
        // |x| with entries at exactly zero: the kink straddles every step.
        let x = vec![Tensor4::zeros(Shape4::new(1, 1, 1, 20)).map(|_| 0.0)];
        let mut xs = x.clone();
        xs[0].data_mut()[0] = 0.5;
        let report = check_scalar(
            &xs,
            |v| Ok(v[0].data().iter().map(|a| a.abs()).sum()),
            &[xs[0].map(|a| a.signum() * (a != 0.0) as i32 as f64)],
            CheckOptions::piecewise(),
            0,
        );
        assert_eq!(report.inputs[0].skipped_kinks, 19);
        assert!(!report.passed(), "mostly-skipped check must not pass");
    }
}
