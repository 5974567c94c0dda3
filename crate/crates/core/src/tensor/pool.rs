use super::{Scalar, Shape4, Tensor4};
use crate::error::{ensure_same, Result};

fn pooled(shape: Shape4) -> Shape4 {
    shape.with_spatial(shape.h.div_ceil(2), shape.w.div_ceil(2))
}

/// 2×2 non-overlapping mean. Odd extents replicate the last row/column, so
/// the output is ceil(h/2) × ceil(w/2).
pub fn avg_pool2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let os = pooled(s);
    let quarter = T::lit(0.25);
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..os.h {
                let y0 = 2 * oy;
                let y1 = (y0 + 1).min(s.h - 1);
                for ox in 0..os.w {
                    let x0 = 2 * ox;
                    let x1 = (x0 + 1).min(s.w - 1);
                    dst[oy * os.w + ox] = (src[y0 * s.w + x0]
                        + src[y0 * s.w + x1]
                        + src[y1 * s.w + x0]
                        + src[y1 * s.w + x1])
                        * quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(input_shape: Shape4, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = input_shape;
    let os = pooled(s);
    ensure_same("avg_pool2_backward", grad_out.shape(), os)?;
    let quarter = T::lit(0.25);
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for oy in 0..os.h {
                let y0 = 2 * oy;
                let y1 = (y0 + 1).min(s.h - 1);
                for ox in 0..os.w {
                    let x0 = 2 * ox;
                    let x1 = (x0 + 1).min(s.w - 1);
                    let v = g[oy * os.w + ox] * quarter;
                    dst[y0 * s.w + x0] += v;
                    dst[y0 * s.w + x1] += v;
                    dst[y1 * s.w + x0] += v;
                    dst[y1 * s.w + x1] += v;
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};

    #[test]
    fn constant_stays_constant() {
        let x = Tensor4::full(Shape4::new(2, 3, 6, 4), 0.7f64);
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), Shape4::new(2, 3, 3, 2));
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn two_by_two_mean() {
        let x = Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).data(), &[2.5]);
    }

    #[test]
    fn odd_extent_replicates_last_row_and_column() {
        let x = Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f64);
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        // bottom-right output sees only the corner value, replicated 4×
        assert_eq!(y.at(0, 0, 1, 1), 8.0);
        // bottom-left: rows {2,2}, cols {0,1}
        assert_eq!(y.at(0, 0, 1, 0), 6.5);
    }

    #[test]
    fn backward_spreads_a_quarter() {
        let g = Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0f64);
        let gx = avg_pool2_backward(Shape4::new(1, 1, 2, 2), &g).unwrap();
        assert_eq!(gx.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn gradients_match_finite_differences_even_and_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for shape in [Shape4::new(1, 2, 4, 6), Shape4::new(2, 1, 5, 3)] {
            let x = Tensor4::random_uniform(shape, -1.0, 1.0, &mut rng);
            let report = check_gradients(
                &[x],
                |i| Ok(avg_pool2(&i[0])),
                |i, g| Ok(vec![avg_pool2_backward(i[0].shape(), g)?]),
                CheckOptions::linear(),
                3,
            );
            assert!(report.passed(), "{report}");
        }
    }
}
