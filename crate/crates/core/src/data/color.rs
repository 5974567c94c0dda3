//! Flow visualization with the Middlebury color wheel: hue encodes
//! direction, saturation encodes magnitude, zero flow is white.

use crate::flowops::FlowField;
use crate::tensor::Scalar;

/// Hue segment lengths of the wheel: red-yellow, yellow-green, green-cyan,
/// cyan-blue, blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn wheel() -> Vec<[f64; 3]> {
    let mut w = Vec::with_capacity(SEGMENTS.iter().sum());
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    for i in 0..ry {
        w.push([1.0, i as f64 / ry as f64, 0.0]);
    }
    for i in 0..yg {
        w.push([1.0 - i as f64 / yg as f64, 1.0, 0.0]);
    }
    for i in 0..gc {
        w.push([0.0, 1.0, i as f64 / gc as f64]);
    }
    for i in 0..cb {
        w.push([0.0, 1.0 - i as f64 / cb as f64, 1.0]);
    }
    for i in 0..bm {
        w.push([i as f64 / bm as f64, 0.0, 1.0]);
    }
    for i in 0..mr {
        w.push([1.0, 0.0, 1.0 - i as f64 / mr as f64]);
    }
    w
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Wheel color for a displacement already divided by the saturation
/// magnitude. Magnitudes above 1 are desaturated towards darker tones.
fn color_of(u: f64, v: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let ncols = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
    let k0 = (fk.floor() as usize).min(ncols - 1);
    let k1 = (k0 + 1) % ncols;
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        *o = (255.0 * col).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Renders item 0 of `flow`. With `max_mag = None` the largest magnitude in
/// the field saturates.
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>, max_mag: Option<f64>) -> RgbImage {
    let s = flow.shape();
    let (u, v) = (flow.tensor().plane(0, 0), flow.tensor().plane(0, 1));
    let scale = max_mag.unwrap_or_else(|| {
        u.iter()
            .zip(v)
            .map(|(a, b)| a.as_f64().hypot(b.as_f64()))
            .fold(0.0, f64::max)
    });
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let wheel = wheel();
    let mut pixels = Vec::with_capacity(3 * s.h * s.w);
    for (a, b) in u.iter().zip(v) {
        pixels.extend_from_slice(&color_of(a.as_f64() / scale, b.as_f64() / scale, &wheel));
    }
    RgbImage {
        width: s.w,
        height: s.h,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor4};

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::<f32>::zeros(1, 3, 4), None);
        assert!(img.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn saturated_rightward_vector_sits_on_the_first_anchor() {
        let img = flow_to_color(&FlowField::constant(1, 1, 1, 2.5f64, 0.0), Some(2.5));
        // atan2(-0, -1) = -π lands on wheel entry 0, pure red.
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
    }

    #[test]
    fn opposite_vectors_get_opposite_hues() {
        let wheel = wheel();
        let n = wheel.len() as f64;
        for deg in (0..360).step_by(15) {
            let t = (deg as f64).to_radians();
            let (u, v) = (t.cos(), t.sin());
            let hue = |u: f64, v: f64| {
                let a = (-v).atan2(-u) / std::f64::consts::PI;
                (a + 1.0) / 2.0 * (n - 1.0)
            };
            let d = (hue(u, v) - hue(-u, -v)).abs();
            assert!((d - (n - 1.0) / 2.0).abs() < 1e-9, "{deg}: {d}");
        }
        // Rendering agrees: opposite pixels are distinct and saturated.
        let t = Tensor4::from_fn(Shape4::new(1, 2, 1, 2), |_, c, _, x| {
            let s = if x == 0 { 1.0 } else { -1.0 };
            if c == 0 {
                0.6 * s
            } else {
                0.8 * s
            }
        });
        let img = flow_to_color(&FlowField::new(t).unwrap(), Some(1.0));
        assert_ne!(img.pixel(0, 0), img.pixel(1, 0));
    }
}
