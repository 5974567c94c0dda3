use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Concatenates along the channel dimension, preserving input order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for x in xs {
        let s = x.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first,
                rhs: s,
            });
        }
        channels += s.c;
    }
    let shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..shape.n {
        for x in xs {
            data.extend_from_slice(x.item(n));
        }
    }
    Tensor4::new(shape, data)
}

/// Splits `grad_out` back at the channel boundaries of `shapes`.
pub fn concat_channels_backward<T: Scalar>(shapes: &[Shape4], grad_out: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
    let total: usize = shapes.iter().map(|s| s.c).sum();
    let gs = grad_out.shape();
    if total != gs.c {
        return Err(Error::invalid(
            "concat_channels_backward",
            format!("gradient {gs} does not have {total} channels"),
        ));
    }
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let part = grad_out.narrow_channels(start, s.c);
            start += s.c;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};

    #[test]
    fn single_input_is_identity() {
        let x = Tensor4::from_fn(Shape4::new(2, 2, 2, 2), |n, c, y, x| (n + c * 2 + y * 4 + x * 8) as f32);
        assert_eq!(concat_channels(&[&x]).unwrap(), x);
    }

    #[test]
    fn channel_counts_add_and_order_is_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor4::<f64>::random_uniform(Shape4::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
        let b = Tensor4::<f64>::random_uniform(Shape4::new(2, 5, 4, 5), -1.0, 1.0, &mut rng);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape().c, 8);
        assert_eq!(c.narrow_channels(0, 3).unwrap(), a);
        let parts = concat_channels_backward(&[a.shape(), b.shape()], &c).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let a = Tensor4::<f32>::zeros(Shape4::new(1, 1, 4, 4));
        let b = Tensor4::<f32>::zeros(Shape4::new(1, 1, 4, 5));
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor4::random_uniform(Shape4::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let b = Tensor4::random_uniform(Shape4::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        let report = check_gradients(
            &[a, b],
            |i| concat_channels(&[&i[0], &i[1]]),
            |i, g| concat_channels_backward(&[i[0].shape(), i[1].shape()], g),
            CheckOptions::linear(),
            2,
        );
        assert!(report.passed(), "{report}");
    }
}
