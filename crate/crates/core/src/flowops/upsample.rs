use serde::{Deserialize, Serialize};

use crate::error::{ensure_same, Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bicubic,
    Bilinear,
}

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
fn cubic(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let near = |d: f64| ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0;
    let far = |d: f64| ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Source taps for each output index along one axis of length `2·len`.
/// Output index X maps to source coordinate (X + 0.5)/2 − 0.5; taps past
/// the border are clamped to the edge sample.
fn axis_taps<T: Scalar>(len: usize, mode: UpsampleMode) -> Vec<[(usize, T); 4]> {
    let clamp = |i: i64| i.clamp(0, len as i64 - 1) as usize;
    (0..2 * len)
        .map(|x| {
            let src = (x as f64 + 0.5) / 2.0 - 0.5;
            let x0 = src.floor();
            let t = src - x0;
            let x0 = x0 as i64;
            match mode {
                UpsampleMode::Bilinear => [
                    (clamp(x0), T::lit(1.0 - t)),
                    (clamp(x0 + 1), T::lit(t)),
                    (0, T::zero()),
                    (0, T::zero()),
                ],
                UpsampleMode::Bicubic => {
                    let w = cubic(t);
                    [
                        (clamp(x0 - 1), T::lit(w[0])),
                        (clamp(x0), T::lit(w[1])),
                        (clamp(x0 + 1), T::lit(w[2])),
                        (clamp(x0 + 2), T::lit(w[3])),
                    ]
                }
            }
        })
        .collect()
}

/// Factor-2 spatial interpolation of every channel. Values are not rescaled.
pub fn upsample2x<T: Scalar>(x: &Tensor4<T>, mode: UpsampleMode) -> Tensor4<T> {
    let s = x.shape();
    let (h2, w2) = (2 * s.h, 2 * s.w);
    let tx = axis_taps::<T>(s.w, mode);
    let ty = axis_taps::<T>(s.h, mode);
    let mut out = Tensor4::zeros(s.with_spatial(h2, w2));
    let mut rows = vec![T::zero(); s.h * w2];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for y in 0..s.h {
                let r = &src[y * s.w..(y + 1) * s.w];
                for (xo, taps) in tx.iter().enumerate() {
                    rows[y * w2 + xo] = taps.iter().map(|&(i, wt)| wt * r[i]).sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for (yo, taps) in ty.iter().enumerate() {
                let d = &mut dst[yo * w2..(yo + 1) * w2];
                for &(i, wt) in taps {
                    if wt == T::zero() {
                        continue;
                    }
                    for (o, &v) in d.iter_mut().zip(&rows[i * w2..(i + 1) * w2]) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`] for an input of shape `input`.
pub fn upsample2x_backward<T: Scalar>(
    input: Shape4,
    mode: UpsampleMode,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    ensure_same(
        "upsample2x_backward",
        input.with_spatial(2 * input.h, 2 * input.w),
        grad_out.shape(),
    )?;
    let w2 = 2 * input.w;
    let tx = axis_taps::<T>(input.w, mode);
    let ty = axis_taps::<T>(input.h, mode);
    let mut g = Tensor4::zeros(input);
    let mut rows = vec![T::zero(); input.h * w2];
    for n in 0..input.n {
        for c in 0..input.c {
            rows.iter_mut().for_each(|v| *v = T::zero());
            let go = grad_out.plane(n, c);
            for (yo, taps) in ty.iter().enumerate() {
                let src = &go[yo * w2..(yo + 1) * w2];
                for &(i, wt) in taps {
                    if wt == T::zero() {
                        continue;
                    }
                    for (r, &v) in rows[i * w2..(i + 1) * w2].iter_mut().zip(src) {
                        *r += wt * v;
                    }
                }
            }
            let dst = g.plane_mut(n, c);
            for y in 0..input.h {
                let r = &rows[y * w2..(y + 1) * w2];
                let d = &mut dst[y * input.w..(y + 1) * input.w];
                for (xo, taps) in tx.iter().enumerate() {
                    for &(i, wt) in taps {
                        d[i] += wt * r[xo];
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Doubles the resolution of a flow field: interpolates, then multiplies the
/// displacement values by 2 so they stay in pixels of the finer grid.
pub fn upsample_flow<T: Scalar>(flow: &Tensor4<T>, mode: UpsampleMode) -> Result<Tensor4<T>> {
    if flow.shape().c != 2 {
        return Err(Error::invalid(
            "upsample_flow",
            format!("flow must have 2 channels, got {}", flow.shape()),
        ));
    }
    Ok(upsample2x(flow, mode).scale(T::lit(2.0)))
}

pub fn upsample_flow_backward<T: Scalar>(
    input: Shape4,
    mode: UpsampleMode,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    Ok(upsample2x_backward(input, mode, grad_out)?.scale(T::lit(2.0)))
}
