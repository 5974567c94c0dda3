use super::{Scalar, Tensor4};
use crate::error::{ensure_same, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

/// Elementwise `max(x, slope·x)` for `slope ∈ (0, 1)`.
pub fn leaky_relu<T: Scalar>(x: &Tensor4<T>, slope: T) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor4<T>, slope: T, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same("leaky_relu_backward", x.shape(), grad_out.shape())?;
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { g * slope })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};
    use crate::tensor::Shape4;

    #[test]
    fn values() {
        let x = Tensor4::new(Shape4::new(1, 1, 1, 3), vec![-1.0f64, 2.0, 0.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.1).data(), &[-0.1, 2.0, 0.0]);
    }

    #[test]
    fn slopes_on_each_side() {
        let x = Tensor4::new(Shape4::new(1, 1, 1, 2), vec![-3.0f64, 4.0]).unwrap();
        let g = Tensor4::full(x.shape(), 1.0);
        assert_eq!(leaky_relu_backward(&x, 0.1, &g).unwrap().data(), &[0.1, 1.0]);
    }

    #[test]
    fn gradients_match_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // keep |x| ≥ 0.05 so no entry sits within a step of the kink
        let x = Tensor4::<f64>::random_uniform(Shape4::new(1, 3, 4, 4), 0.05, 1.0, &mut rng)
            .zip_map(
                &Tensor4::random_uniform(Shape4::new(1, 3, 4, 4), -1.0, 1.0, &mut rng),
                |m, s| m * s.signum(),
            )
            .unwrap();
        let report = check_gradients(
            &[x],
            |i| Ok(leaky_relu(&i[0], 0.1)),
            |i, g| Ok(vec![leaky_relu_backward(&i[0], 0.1, g)?]),
            CheckOptions::smooth(),
            1,
        );
        assert!(report.passed(), "{report}");
    }
}
