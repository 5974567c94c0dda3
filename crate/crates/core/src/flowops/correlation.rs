use rayon::prelude::*;

use crate::error::{ensure_same, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Execution strategy for the correlation kernels. Both paths produce
/// bit-identical results: each output plane is owned by one task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Serial,
    Parallel,
}

/// Number of offset channels for search radius `n`.
pub const fn offset_channels(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Offset `(dy, dx)` of channel `o`, row-major over `[-n, n]²`.
#[inline]
pub fn offset_of(o: usize, radius: usize) -> (isize, isize) {
    let side = 2 * radius + 1;
    let r = radius as isize;
    ((o / side) as isize - r, (o % side) as isize - r)
}

/// Indices `lo..hi` of `0..len` for which `i + d` is also inside `0..len`.
#[inline]
fn overlap(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

fn check_pair(op: &'static str, f1: Shape4, f2: Shape4) -> Result<()> {
    ensure_same(op, f1, f2)
}

/// Zero-padded (2r+1)² box sum, in place. Symmetric, so it is its own adjoint.
fn box_sum<T: Scalar>(plane: &mut [T], h: usize, w: usize, r: usize, tmp: &mut Vec<T>) {
    if r == 0 {
        return;
    }
    tmp.clear();
    tmp.resize(h * w, T::zero());
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            tmp[y * w + x] = row[lo..hi].iter().copied().sum();
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r + 1).min(h);
        for x in 0..w {
            let mut acc = T::zero();
            for yy in lo..hi {
                acc += tmp[yy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// One output plane: Σ_c f1(z)·f2(z + o), boxed over the patch, scaled by 1/C.
#[allow(clippy::too_many_arguments)]
fn correlate_plane<T: Scalar>(
    f1: &[T],
    f2: &[T],
    c: usize,
    h: usize,
    w: usize,
    (dy, dx): (isize, isize),
    patch: usize,
    out: &mut [T],
    tmp: &mut Vec<T>,
) {
    out.iter_mut().for_each(|v| *v = T::zero());
    let (ylo, yhi) = overlap(h, dy);
    let (xlo, xhi) = overlap(w, dx);
    let plane = h * w;
    // An offset past the frame edge overlaps nothing.
    let channels = if xlo < xhi { c } else { 0 };
    for ch in 0..channels {
        let a = &f1[ch * plane..(ch + 1) * plane];
        let b = &f2[ch * plane..(ch + 1) * plane];
        for y in ylo..yhi {
            let ys = (y as isize + dy) as usize;
            let xs0 = (xlo as isize + dx) as usize;
            let n = xhi - xlo;
            let ra = &a[y * w + xlo..y * w + xlo + n];
            let rb = &b[ys * w + xs0..ys * w + xs0 + n];
            let ro = &mut out[y * w + xlo..y * w + xlo + n];
            for ((o, &p), &q) in ro.iter_mut().zip(ra).zip(rb) {
                *o += p * q;
            }
        }
    }
    box_sum(out, h, w, patch, tmp);
    let inv = T::one() / T::lit(c as f64);
    out.iter_mut().for_each(|v| *v *= inv);
}

/// Single-level correlation cost volume.
///
/// `out(b, o, y, x) = (1/C) Σ_{p ∈ [-r, r]²} Σ_c f1(c, x + p) · f2(c, x + o + p)`
/// for offsets `o ∈ [-n, n]²` in row-major order; reads outside the frame
/// contribute zero.
pub fn correlate<T: Scalar>(
    f1: &Tensor4<T>,
    f2: &Tensor4<T>,
    radius: usize,
    patch_radius: usize,
    exec: Exec,
) -> Result<Tensor4<T>> {
    let s = f1.shape();
    check_pair("correlate_single", s, f2.shape())?;
    let d = offset_channels(radius);
    let out_shape = s.with_channels(d);
    let mut out = Tensor4::zeros(out_shape);
    let plane = s.plane();
    let task = |(idx, dst): (usize, &mut [T]), tmp: &mut Vec<T>| {
        let (b, o) = (idx / d, idx % d);
        correlate_plane(
            f1.item(b),
            f2.item(b),
            s.c,
            s.h,
            s.w,
            offset_of(o, radius),
            patch_radius,
            dst,
            tmp,
        );
    };
    match exec {
        Exec::Serial => {
            let mut tmp = Vec::new();
            out.data_mut()
                .chunks_mut(plane)
                .enumerate()
                .for_each(|job| task(job, &mut tmp));
        }
        Exec::Parallel => {
            out.data_mut()
                .par_chunks_mut(plane)
                .enumerate()
                .for_each_init(Vec::new, |tmp, job| task(job, tmp));
        }
    }
    Ok(out)
}

/// Gradients of [`correlate`] with respect to both feature maps.
pub fn correlate_backward<T: Scalar>(
    f1: &Tensor4<T>,
    f2: &Tensor4<T>,
    radius: usize,
    patch_radius: usize,
    grad_out: &Tensor4<T>,
    exec: Exec,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = f1.shape();
    check_pair("correlate_single_backward", s, f2.shape())?;
    let d = offset_channels(radius);
    ensure_same("correlate_single_backward", grad_out.shape(), s.with_channels(d))?;
    let plane = s.plane();
    let inv = T::one() / T::lit(s.c as f64);

    // Gradient w.r.t. the per-offset product maps (box adjoint, 1/C folded in).
    let mut gprod = grad_out.scale(inv);
    if patch_radius > 0 {
        let mut tmp = Vec::new();
        for p in gprod.data_mut().chunks_mut(plane) {
            box_sum(p, s.h, s.w, patch_radius, &mut tmp);
        }
    }

    let mut g1 = Tensor4::zeros(s);
    let mut g2 = Tensor4::zeros(s);
    // One task per (batch, channel) plane of each gradient.
    let task = |idx: usize, d1: &mut [T], d2: &mut [T]| {
        let (b, ch) = (idx / s.c, idx % s.c);
        let a = f1.plane(b, ch);
        let bb = f2.plane(b, ch);
        for o in 0..d {
            let (dy, dx) = offset_of(o, radius);
            let g = gprod.plane(b, o);
            let (ylo, yhi) = overlap(s.h, dy);
            let (xlo, xhi) = overlap(s.w, dx);
            if xlo >= xhi {
                continue;
            }
            let n = xhi - xlo;
            for y in ylo..yhi {
                let ys = (y as isize + dy) as usize;
                let xs0 = (xlo as isize + dx) as usize;
                let gr = &g[y * s.w + xlo..y * s.w + xlo + n];
                let ar = &a[y * s.w + xlo..y * s.w + xlo + n];
                let br = &bb[ys * s.w + xs0..ys * s.w + xs0 + n];
                let d1r = &mut d1[y * s.w + xlo..y * s.w + xlo + n];
                for ((t, &gv), &bv) in d1r.iter_mut().zip(gr).zip(br) {
                    *t += gv * bv;
                }
                let d2r = &mut d2[ys * s.w + xs0..ys * s.w + xs0 + n];
                for ((t, &gv), &av) in d2r.iter_mut().zip(gr).zip(ar) {
                    *t += gv * av;
                }
            }
        }
    };
    match exec {
        Exec::Serial => {
            for (idx, (d1, d2)) in g1
                .data_mut()
                .chunks_mut(plane)
                .zip(g2.data_mut().chunks_mut(plane))
                .enumerate()
            {
                task(idx, d1, d2);
            }
        }
        Exec::Parallel => {
            g1.data_mut()
                .par_chunks_mut(plane)
                .zip(g2.data_mut().par_chunks_mut(plane))
                .enumerate()
                .for_each(|(idx, (d1, d2))| task(idx, d1, d2));
        }
    }
    Ok((g1, g2))
}
