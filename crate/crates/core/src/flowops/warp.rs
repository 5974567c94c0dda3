use crate::error::{ensure_same, Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Bilinear taps of one sample position. Corners outside the frame carry a
/// `None` index and contribute zero.
#[derive(Clone, Copy)]
struct Taps<T> {
    idx: [Option<usize>; 4],
    ax: T,
    ay: T,
}

#[inline]
fn taps<T: Scalar>(sx: T, sy: T, h: usize, w: usize) -> Taps<T> {
    let fx = sx.floor();
    let fy = sy.floor();
    let ax = sx - fx;
    let ay = sy - fy;
    let x0 = fx.to_i64().unwrap_or(i64::MIN / 2);
    let y0 = fy.to_i64().unwrap_or(i64::MIN / 2);
    let at = |y: i64, x: i64| {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    };
    Taps {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        ax,
        ay,
    }
}

impl<T: Scalar> Taps<T> {
    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.ax) * (one - self.ay),
            self.ax * (one - self.ay),
            (one - self.ax) * self.ay,
            self.ax * self.ay,
        ]
    }

    #[inline]
    fn read(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }
}

fn check(op: &'static str, f: &Tensor4<impl Scalar>, flow: &Tensor4<impl Scalar>) -> Result<()> {
    let (fs, ws) = (f.shape(), flow.shape());
    if ws.c != 2 {
        return Err(Error::invalid(op, format!("flow must have 2 channels, got {ws}")));
    }
    ensure_same(op, fs.with_channels(2), ws)
}

/// Samples `f` at `x + s·flow(x)` with bilinear interpolation. Each corner
/// that falls outside the frame contributes zero. With zero flow the output
/// equals `f` exactly.
pub fn warp_bilinear_scaled<T: Scalar>(f: &Tensor4<T>, flow: &Tensor4<T>, s: T) -> Result<Tensor4<T>> {
    check("warp_bilinear", f, flow)?;
    let sh = f.shape();
    let mut out = Tensor4::zeros(sh);
    for b in 0..sh.n {
        let (u, v) = (flow.plane(b, 0), flow.plane(b, 1));
        for y in 0..sh.h {
            for x in 0..sh.w {
                let i = y * sh.w + x;
                let t = taps(T::lit(x as f64) + s * u[i], T::lit(y as f64) + s * v[i], sh.h, sh.w);
                let wts = t.weights();
                for c in 0..sh.c {
                    let p = t.read(f.plane(b, c));
                    let val = wts[0] * p[0] + wts[1] * p[1] + wts[2] * p[2] + wts[3] * p[3];
                    out.plane_mut(b, c)[i] = val;
                }
            }
        }
    }
    Ok(out)
}

pub fn warp_bilinear<T: Scalar>(f: &Tensor4<T>, flow: &Tensor4<T>) -> Result<Tensor4<T>> {
    warp_bilinear_scaled(f, flow, T::one())
}

/// Gradients of [`warp_bilinear_scaled`] with respect to the sampled
/// features and the flow. Piecewise smooth: the flow gradient jumps where a
/// sample position crosses an integer coordinate.
pub fn warp_bilinear_scaled_backward<T: Scalar>(
    f: &Tensor4<T>,
    flow: &Tensor4<T>,
    s: T,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check("warp_bilinear_backward", f, flow)?;
    let sh = f.shape();
    ensure_same("warp_bilinear_backward", sh, grad_out.shape())?;
    let mut gf = Tensor4::zeros(sh);
    let mut gflow = Tensor4::zeros(flow.shape());
    let one = T::one();
    for b in 0..sh.n {
        for y in 0..sh.h {
            for x in 0..sh.w {
                let i = y * sh.w + x;
                let u = flow.plane(b, 0)[i];
                let v = flow.plane(b, 1)[i];
                let t = taps(T::lit(x as f64) + s * u, T::lit(y as f64) + s * v, sh.h, sh.w);
                let wts = t.weights();
                let (mut gu, mut gv) = (T::zero(), T::zero());
                for c in 0..sh.c {
                    let g = grad_out.plane(b, c)[i];
                    if g == T::zero() {
                        continue;
                    }
                    let p = t.read(f.plane(b, c));
                    gu += g * ((one - t.ay) * (p[1] - p[0]) + t.ay * (p[3] - p[2]));
                    gv += g * ((one - t.ax) * (p[2] - p[0]) + t.ax * (p[3] - p[1]));
                    let dst = gf.plane_mut(b, c);
                    for (k, idx) in t.idx.iter().enumerate() {
                        if let Some(j) = idx {
                            dst[*j] += wts[k] * g;
                        }
                    }
                }
                gflow.plane_mut(b, 0)[i] = s * gu;
                gflow.plane_mut(b, 1)[i] = s * gv;
            }
        }
    }
    Ok((gf, gflow))
}

pub fn warp_bilinear_backward<T: Scalar>(
    f: &Tensor4<T>,
    flow: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    warp_bilinear_scaled_backward(f, flow, T::one(), grad_out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};
    use crate::tensor::Shape4;

    #[test]
    fn zero_flow_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor4::<f32>::random_uniform(Shape4::new(2, 3, 7, 5), -10.0, 10.0, &mut rng);
        let flow = Tensor4::zeros(Shape4::new(2, 2, 7, 5));
        assert_eq!(warp_bilinear(&f, &flow).unwrap(), f);
    }

    #[test]
    fn integer_shift_moves_pixels_and_zero_fills() {
        let f = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f64);
        let flow = Tensor4::from_fn(Shape4::new(1, 2, 4, 4), |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let out = warp_bilinear(&f, &flow).unwrap();
        assert_eq!(out.at(0, 0, 2, 1), f.at(0, 0, 2, 2));
        assert_eq!(out.at(0, 0, 2, 3), 0.0);
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let f = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 1, 4), |_, _, _, x| x as f64 * 2.0);
        let flow = Tensor4::from_fn(Shape4::new(1, 2, 1, 4), |_, c, _, _| if c == 0 { 0.5 } else { 0.0 });
        let out = warp_bilinear(&f, &flow).unwrap();
        assert_eq!(out.at(0, 0, 0, 1), 3.0);
    }

    #[test]
    fn scale_multiplies_the_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor4::<f64>::random_uniform(Shape4::new(1, 2, 6, 6), -1.0, 1.0, &mut rng);
        let flow = Tensor4::random_uniform(Shape4::new(1, 2, 6, 6), -2.0, 2.0, &mut rng);
        let a = warp_bilinear_scaled(&f, &flow, 2.5).unwrap();
        let b = warp_bilinear(&f, &flow.scale(2.5)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_flow_with_wrong_channels() {
        let f = Tensor4::<f32>::zeros(Shape4::new(1, 3, 4, 4));
        let flow = Tensor4::zeros(Shape4::new(1, 3, 4, 4));
        assert!(warp_bilinear(&f, &flow).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = Tensor4::<f64>::random_uniform(Shape4::new(1, 3, 6, 5), -1.0, 1.0, &mut rng);
        // Flows reaching outside the frame exercise the zero-padded corners.
        let flow = Tensor4::random_uniform(Shape4::new(1, 2, 6, 5), -3.0, 3.0, &mut rng);
        for s in [1.0, 1.7] {
            let report = check_gradients(
                &[f.clone(), flow.clone()],
                |i| warp_bilinear_scaled(&i[0], &i[1], s),
                |i, g| {
                    let (a, b) = warp_bilinear_scaled_backward(&i[0], &i[1], s, g)?;
                    Ok(vec![a, b])
                },
                CheckOptions::piecewise().with_step(1e-6),
                1,
            );
            assert!(report.passed(), "{report}");
        }
    }
}
