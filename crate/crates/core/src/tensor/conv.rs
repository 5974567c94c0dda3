use serde::{Deserialize, Serialize};

use super::linalg::{matmul, Trans};
use super::{Scalar, Shape4, Tensor4};
use crate::error::{ensure_same, Error, Result};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with the padding that preserves extents for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom::new(1, 0, 1)
    }
}

/// Weights of a convolution layer.
///
/// For `conv2d` the kernel is laid out (out_c, in_c, kh, kw); for
/// `conv_transpose2d` it is (in_c, out_c, kh, kw). The bias is stored as an
/// (out_c, 1, 1, 1) tensor so that every parameter is a `Tensor4`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Tensor4<T>,
    pub bias: Tensor4<T>,
    pub geom: ConvGeom,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Tensor4<T>,
}

pub fn conv_out_extent(input: usize, kernel: usize, geom: ConvGeom) -> Option<usize> {
    if geom.stride == 0 || geom.dilation == 0 || kernel == 0 {
        return None;
    }
    let span = geom.dilation * (kernel - 1) + 1;
    let padded = input + 2 * geom.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / geom.stride + 1)
}

pub fn conv_transpose_out_extent(input: usize, kernel: usize, geom: ConvGeom) -> Option<usize> {
    if geom.stride == 0 || geom.dilation == 0 || kernel == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * geom.stride + geom.dilation * (kernel - 1) + 1;
    full.checked_sub(2 * geom.padding).filter(|&e| e > 0)
}

/// Receptive-field bookkeeping shared by im2col and col2im: an image of
/// `c × h × w` read through a `kh × kw` window into an `oh × ow` grid.
#[derive(Clone, Copy)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output indices `lo..hi` whose tap at offset `k` lands inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.geom.stride as isize;
        let off = (k * self.geom.dilation) as isize - self.geom.padding as isize;
        // need 0 <= o*s + off <= extent-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let (s, d, p) = (self.geom.stride, self.geom.dilation, self.geom.padding);
        let ncols = self.cols();
        for ch in 0..self.c {
            let plane = &img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.valid_range(kj, self.w, self.ow);
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * s + ki * d - p;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if s == 1 {
                            let ix0 = xlo + kj * d - p;
                            out[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                out[ox] = src[ox * s + kj * d - p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds columns back into the image.
    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let (s, d, p) = (self.geom.stride, self.geom.dilation, self.geom.padding);
        let ncols = self.cols();
        for ch in 0..self.c {
            let plane = &mut img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.valid_range(kj, self.w, self.ow);
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let srcrow = &col[row * ncols..(row + 1) * ncols];
                    for oy in ylo..yhi {
                        let iy = oy * s + ki * d - p;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src = &srcrow[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xlo..xhi {
                            dst[ox * s + kj * d - p] += src[ox];
                        }
                    }
                }
            }
        }
    }

    /// 1×1 kernels with unit stride and no padding read the image directly.
    fn is_identity(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geom.stride == 1
            && self.geom.padding == 0
            && self.oh == self.h
            && self.ow == self.w
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor4<T>, out_c: usize) -> Result<()> {
    ensure_same(op, bias.shape(), Shape4::new(out_c, 1, 1, 1))
}

fn conv_window<T: Scalar>(x: Shape4, p: &ConvParams<T>, op: &'static str) -> Result<Window> {
    let k = p.kernel.shape();
    if x.c != k.c {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x,
            rhs: k,
        });
    }
    check_bias(op, &p.bias, k.n)?;
    let (oh, ow) = match (
        conv_out_extent(x.h, k.h, p.geom),
        conv_out_extent(x.w, k.w, p.geom),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::invalid(
                op,
                format!("input {x} too small for kernel {k} with {:?}", p.geom),
            ))
        }
    };
    Ok(Window {
        c: x.c,
        h: x.h,
        w: x.w,
        kh: k.h,
        kw: k.w,
        oh,
        ow,
        geom: p.geom,
    })
}

/// Cross-correlation convolution (no kernel flip).
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let win = conv_window(xs, p, "conv2d")?;
    let out_c = p.kernel.shape().n;
    let out_shape = Shape4::new(xs.n, out_c, win.oh, win.ow);
    let mut out = Tensor4::zeros(out_shape);
    let (k, cols) = (win.rows(), win.cols());
    let mut col = if win.is_identity() {
        Vec::new()
    } else {
        vec![T::zero(); k * cols]
    };
    for b in 0..xs.n {
        let dst = out.item_mut(b);
        for (o, plane) in dst.chunks_mut(cols).enumerate() {
            let bias = p.bias.data()[o];
            plane.iter_mut().for_each(|v| *v = bias);
        }
        let src: &[T] = if win.is_identity() {
            x.item(b)
        } else {
            win.im2col(x.item(b), &mut col);
            &col
        };
        matmul(
            out_c,
            k,
            cols,
            T::one(),
            p.kernel.data(),
            Trans::No,
            src,
            Trans::No,
            T::one(),
            dst,
        );
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_masked(x, p, grad_out, true)
}

/// As [`conv2d_backward`], skipping the input gradient when `need_x` is false
/// (the returned `x` gradient is then all zeros).
pub(crate) fn conv2d_backward_masked<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let win = conv_window(xs, p, "conv2d_backward")?;
    let out_c = p.kernel.shape().n;
    ensure_same(
        "conv2d_backward",
        grad_out.shape(),
        Shape4::new(xs.n, out_c, win.oh, win.ow),
    )?;
    let (k, cols) = (win.rows(), win.cols());
    let mut gx = Tensor4::zeros(xs);
    let mut gk = Tensor4::zeros(p.kernel.shape());
    let mut gb = Tensor4::zeros(p.bias.shape());
    let identity = win.is_identity();
    let mut col = if identity {
        Vec::new()
    } else {
        vec![T::zero(); k * cols]
    };
    let mut gcol = vec![T::zero(); if identity || !need_x { 0 } else { k * cols }];
    for b in 0..xs.n {
        let g = grad_out.item(b);
        for (o, plane) in g.chunks(cols).enumerate() {
            gb.data_mut()[o] += plane.iter().copied().sum::<T>();
        }
        let src: &[T] = if identity {
            x.item(b)
        } else {
            win.im2col(x.item(b), &mut col);
            &col
        };
        // dK (out_c × k) += G (out_c × cols) · colᵀ
        matmul(
            out_c,
            cols,
            k,
            T::one(),
            g,
            Trans::No,
            src,
            Trans::Yes,
            T::one(),
            gk.data_mut(),
        );
        if !need_x {
            continue;
        }
        if identity {
            matmul(
                k,
                out_c,
                cols,
                T::one(),
                p.kernel.data(),
                Trans::Yes,
                g,
                Trans::No,
                T::zero(),
                gx.item_mut(b),
            );
        } else {
            matmul(
                k,
                out_c,
                cols,
                T::one(),
                p.kernel.data(),
                Trans::Yes,
                g,
                Trans::No,
                T::zero(),
                &mut gcol,
            );
            win.col2im(&gcol, gx.item_mut(b));
        }
    }
    Ok(ConvGrads {
        x: gx,
        kernel: gk,
        bias: gb,
    })
}

fn transpose_window<T: Scalar>(x: Shape4, p: &ConvParams<T>, op: &'static str) -> Result<Window> {
    let k = p.kernel.shape();
    if x.c != k.n {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x,
            rhs: k,
        });
    }
    check_bias(op, &p.bias, k.c)?;
    let (oh, ow) = match (
        conv_transpose_out_extent(x.h, k.h, p.geom),
        conv_transpose_out_extent(x.w, k.w, p.geom),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::invalid(
                op,
                format!("non-positive output extents for input {x}, kernel {k}, {:?}", p.geom),
            ))
        }
    };
    // The transposed convolution is the adjoint of a convolution that reads
    // the (oh, ow) output image into the (h, w) input grid.
    Ok(Window {
        c: k.c,
        h: oh,
        w: ow,
        kh: k.h,
        kw: k.w,
        oh: x.h,
        ow: x.w,
        geom: p.geom,
    })
}

/// Transposed convolution ("deconvolution"), the adjoint of `conv2d` plus a
/// bias. Kernel layout is (in_c, out_c, kh, kw).
pub fn conv_transpose2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let win = transpose_window(xs, p, "conv_transpose2d")?;
    let in_c = xs.c;
    let out_c = win.c;
    let out_shape = Shape4::new(xs.n, out_c, win.h, win.w);
    let mut out = Tensor4::zeros(out_shape);
    let (k, cols) = (win.rows(), win.cols());
    let mut col = vec![T::zero(); k * cols];
    for b in 0..xs.n {
        // col (k × cols) = Wᵀ (k × in_c) · x (in_c × cols)
        matmul(
            k,
            in_c,
            cols,
            T::one(),
            p.kernel.data(),
            Trans::Yes,
            x.item(b),
            Trans::No,
            T::zero(),
            &mut col,
        );
        let dst = out.item_mut(b);
        win.col2im(&col, dst);
        let plane = win.h * win.w;
        for (o, ch) in dst.chunks_mut(plane).enumerate() {
            let bias = p.bias.data()[o];
            ch.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let win = transpose_window(xs, p, "conv_transpose2d_backward")?;
    let in_c = xs.c;
    let out_c = win.c;
    ensure_same(
        "conv_transpose2d_backward",
        grad_out.shape(),
        Shape4::new(xs.n, out_c, win.h, win.w),
    )?;
    let (k, cols) = (win.rows(), win.cols());
    let mut gx = Tensor4::zeros(xs);
    let mut gk = Tensor4::zeros(p.kernel.shape());
    let mut gb = Tensor4::zeros(p.bias.shape());
    let mut col = vec![T::zero(); k * cols];
    let plane = win.h * win.w;
    for b in 0..xs.n {
        let g = grad_out.item(b);
        for (o, ch) in g.chunks(plane).enumerate() {
            gb.data_mut()[o] += ch.iter().copied().sum::<T>();
        }
        win.im2col(g, &mut col);
        // dx (in_c × cols) = W (in_c × k) · col
        matmul(
            in_c,
            k,
            cols,
            T::one(),
            p.kernel.data(),
            Trans::No,
            &col,
            Trans::No,
            T::zero(),
            gx.item_mut(b),
        );
        // dW (in_c × k) += x (in_c × cols) · colᵀ
        matmul(
            in_c,
            cols,
            k,
            T::one(),
            x.item(b),
            Trans::No,
            &col,
            Trans::Yes,
            T::one(),
            gk.data_mut(),
        );
    }
    Ok(ConvGrads {
        x: gx,
        kernel: gk,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};

    fn params(out_c: usize, in_c: usize, k: usize, geom: ConvGeom, seed: u64) -> ConvParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvParams {
            kernel: Tensor4::random_uniform(Shape4::new(out_c, in_c, k, k), -1.0, 1.0, &mut rng),
            bias: Tensor4::random_uniform(Shape4::new(out_c, 1, 1, 1), -1.0, 1.0, &mut rng),
            geom,
        }
    }

    /// Quadruple-loop reference convolution, independent of im2col/GEMM.
    fn reference_conv(x: &Tensor4<f64>, p: &ConvParams<f64>) -> Tensor4<f64> {
        let xs = x.shape();
        let ks = p.kernel.shape();
        let g = p.geom;
        let oh = conv_out_extent(xs.h, ks.h, g).unwrap();
        let ow = conv_out_extent(xs.w, ks.w, g).unwrap();
        Tensor4::from_fn(Shape4::new(xs.n, ks.n, oh, ow), |n, o, y, x_| {
            let mut acc = p.bias.data()[o];
            for c in 0..xs.c {
                for i in 0..ks.h {
                    for j in 0..ks.w {
                        let iy = (y * g.stride + i * g.dilation) as isize - g.padding as isize;
                        let ix = (x_ * g.stride + j * g.dilation) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += p.kernel.at(o, c, i, j) * x.at(n, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f64);
        let p = ConvParams {
            kernel: Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0),
            bias: Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            geom: ConvGeom::default(),
        };
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor4::full(Shape4::new(1, 1, 5, 5), 1.0f64);
        let p = ConvParams {
            kernel: Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0),
            bias: Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            geom: ConvGeom::new(1, 1, 1),
        };
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 4, 4), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn matches_loop_reference_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::random_uniform(Shape4::new(2, 3, 8, 8), -1.0, 1.0, &mut rng);
        for (seed, geom, k) in [
            (1, ConvGeom::new(1, 1, 1), 3),
            (2, ConvGeom::new(2, 1, 1), 3),
            (3, ConvGeom::new(1, 4, 4), 3),
            (4, ConvGeom::new(2, 0, 1), 1),
            (5, ConvGeom::new(1, 0, 1), 1),
            (6, ConvGeom::new(3, 2, 2), 3),
        ] {
            let p = params(4, 3, k, geom, seed);
            let got = conv2d(&x, &p).unwrap();
            let want = reference_conv(&x, &p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{geom:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dilation_wider_than_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::random_uniform(Shape4::new(1, 2, 2, 3), -1.0, 1.0, &mut rng);
        for d in [2, 4, 8] {
            let p = params(3, 2, 3, ConvGeom::same(3, d), d as u64);
            let got = conv2d(&x, &p).unwrap();
            let want = reference_conv(&x, &p);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_preserves_extent_for_every_dilation() {
        for d in [1, 2, 4, 8] {
            let g = ConvGeom::same(3, d);
            assert_eq!(conv_out_extent(20, 3, g), Some(20));
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 4, 4));
        let p = params(1, 3, 3, ConvGeom::same(3, 1), 0);
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("1×2×4×4") && msg.contains("1×3×3×3"), "{msg}");
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random_uniform(Shape4::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let p = params(3, 2, 3, ConvGeom::same(3, 1), 4);
        let g = Tensor4::zeros(Shape4::new(1, 3, 5, 5));
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        assert_eq!(grads.x.max_abs(), 0.0);
        assert_eq!(grads.kernel.max_abs(), 0.0);
        assert_eq!(grads.bias.max_abs(), 0.0);
    }

    #[test]
    fn identity_kernel_backward_passes_gradient_through() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 3, 3));
        let p = ConvParams {
            kernel: Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0),
            bias: Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            geom: ConvGeom::default(),
        };
        let g = Tensor4::from_fn(x.shape(), |_, _, y, x| (y as f64) - 2.0 * x as f64);
        assert_eq!(conv2d_backward(&x, &p, &g).unwrap().x, g);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (geom, k) in [(ConvGeom::new(1, 1, 1), 3), (ConvGeom::new(2, 2, 2), 3)] {
            let x = Tensor4::random_uniform(Shape4::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
            let p = params(2, 2, k, geom, 12);
            let report = check_gradients(
                &[x, p.kernel.clone(), p.bias.clone()],
                |ins| {
                    let pp = ConvParams {
                        kernel: ins[1].clone(),
                        bias: ins[2].clone(),
                        geom,
                    };
                    conv2d(&ins[0], &pp)
                },
                |ins, g| {
                    let pp = ConvParams {
                        kernel: ins[1].clone(),
                        bias: ins[2].clone(),
                        geom,
                    };
                    let gr = conv2d_backward(&ins[0], &pp, g)?;
                    Ok(vec![gr.x, gr.kernel, gr.bias])
                },
                CheckOptions::linear(),
                99,
            );
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn transpose_of_centered_unit_kernel_zero_upsamples() {
        let x = Tensor4::from_vec_2x2([1.0, 2.0, 3.0, 4.0]);
        let mut kernel = Tensor4::zeros(Shape4::new(1, 1, 4, 4));
        *kernel.at_mut(0, 0, 1, 1) = 1.0;
        let p = ConvParams {
            kernel,
            bias: Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            geom: ConvGeom::new(2, 1, 1),
        };
        let y = conv_transpose2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 4, 4));
        for yy in 0..4 {
            for xx in 0..4 {
                let want = if yy % 2 == 0 && xx % 2 == 0 {
                    x.at(0, 0, yy / 2, xx / 2)
                } else {
                    0.0
                };
                assert_eq!(y.at(0, 0, yy, xx), want);
            }
        }
    }

    #[test]
    fn transpose_doubles_extents() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 8, 7, 9));
        let p = ConvParams {
            kernel: Tensor4::zeros(Shape4::new(8, 5, 4, 4)),
            bias: Tensor4::zeros(Shape4::new(5, 1, 1, 1)),
            geom: ConvGeom::new(2, 1, 1),
        };
        assert_eq!(
            conv_transpose2d(&x, &p).unwrap().shape(),
            Shape4::new(1, 5, 14, 18)
        );
    }

    #[test]
    fn transpose_rejects_non_positive_extent() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 1, 1));
        let p = ConvParams {
            kernel: Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            bias: Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            geom: ConvGeom::new(2, 1, 1),
        };
        assert!(conv_transpose2d(&x, &p).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(a), b> == <a, convT(b)> with a shared kernel and zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeom::new(2, 1, 1);
        let k = Tensor4::<f64>::random_uniform(Shape4::new(3, 2, 4, 4), -1.0, 1.0, &mut rng);
        let a = Tensor4::random_uniform(Shape4::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
        let conv = ConvParams {
            kernel: k.clone(),
            bias: Tensor4::zeros(Shape4::new(3, 1, 1, 1)),
            geom,
        };
        let ca = conv2d(&a, &conv).unwrap();
        let b = Tensor4::random_uniform(ca.shape(), -1.0, 1.0, &mut rng);
        let tconv = ConvParams {
            kernel: k,
            bias: Tensor4::zeros(Shape4::new(2, 1, 1, 1)),
            geom,
        };
        let tb = conv_transpose2d(&b, &tconv).unwrap();
        let lhs = ca.dot(&b).unwrap();
        let rhs = a.dot(&tb).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let geom = ConvGeom::new(2, 1, 1);
        let x = Tensor4::random_uniform(Shape4::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let kernel = Tensor4::random_uniform(Shape4::new(2, 2, 4, 4), -1.0, 1.0, &mut rng);
        let bias = Tensor4::random_uniform(Shape4::new(2, 1, 1, 1), -1.0, 1.0, &mut rng);
        let report = check_gradients(
            &[x, kernel, bias],
            |ins| {
                conv_transpose2d(
                    &ins[0],
                    &ConvParams {
                        kernel: ins[1].clone(),
                        bias: ins[2].clone(),
                        geom,
                    },
                )
            },
            |ins, g| {
                let gr = conv_transpose2d_backward(
                    &ins[0],
                    &ConvParams {
                        kernel: ins[1].clone(),
                        bias: ins[2].clone(),
                        geom,
                    },
                    g,
                )?;
                Ok(vec![gr.x, gr.kernel, gr.bias])
            },
            CheckOptions::linear(),
            5,
        );
        assert!(report.passed(), "{report}");
    }

    impl Tensor4<f64> {
        fn from_vec_2x2(v: [f64; 4]) -> Self {
            Tensor4::new(Shape4::new(1, 1, 2, 2), v.to_vec()).unwrap()
        }
    }
}
