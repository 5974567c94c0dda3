//! Samples: synthetic generation, augmentation, dataset ingestion, flow
//! files and visualization.

mod augment;
mod color;
mod flo;
mod image_io;
mod ingest;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment, motion_reversal, motionless_inject, motionless_sample, AugmentConfig, Range};
pub use color::{flow_to_color, RgbImage};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_TAG};
pub use image_io::{read_image, tensor_to_rgb, write_frame, write_gray, write_rgb};
pub use ingest::{ingest_dataset, write_paired, Dataset, IngestOptions, Layout};
pub use synth::{synth_dataset, synth_pair, Motion, MotionSpec, PatchSpec, SynthConfig};

use crate::error::{Error, Result};
use crate::flowops::{warp_bilinear, FlowField};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// One training or evaluation pair. Frames are 1×C×H×W in [0, 1]; flows are
/// in pixels. `flow_bwd` maps frame 2 onto frame 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame1: Tensor4<f32>,
    pub frame2: Tensor4<f32>,
    pub flow_fwd: FlowField<f32>,
    pub flow_bwd: Option<FlowField<f32>>,
    pub id: String,
    /// Replication padding added on ingest; predictions are cropped back.
    pub padding: Padding,
}

impl Sample {
    pub fn new(
        frame1: Tensor4<f32>,
        frame2: Tensor4<f32>,
        flow_fwd: FlowField<f32>,
        flow_bwd: Option<FlowField<f32>>,
        id: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        let s = frame1.shape();
        let check = || -> Result<()> {
            if s.n != 1 {
                return Err(Error::invalid("sample", format!("expected one frame, got {s}")));
            }
            crate::error::ensure_same("sample", s, frame2.shape())?;
            let fs = s.with_channels(2);
            crate::error::ensure_same("sample", fs, flow_fwd.shape())?;
            if let Some(b) = &flow_bwd {
                crate::error::ensure_same("sample", fs, b.shape())?;
            }
            Ok(())
        };
        check().map_err(|e| e.for_sample(&id))?;
        Ok(Sample {
            frame1,
            frame2,
            flow_fwd,
            flow_bwd,
            id,
            padding: Padding::default(),
        })
    }

    pub fn height(&self) -> usize {
        self.frame1.shape().h
    }

    pub fn width(&self) -> usize {
        self.frame1.shape().w
    }

    /// Pads frames and flows on the bottom and right by edge replication so
    /// both extents become multiples of `m`.
    pub fn pad_to_multiple(mut self, m: usize) -> Sample {
        let (f1, pad) = pad_to_multiple(&self.frame1, m);
        if pad.is_empty() {
            return self;
        }
        self.frame2 = pad.apply(&self.frame2);
        self.flow_fwd = FlowField::new(pad.apply(self.flow_fwd.tensor())).expect("padding keeps values finite");
        self.flow_bwd = self
            .flow_bwd
            .map(|b| FlowField::new(pad.apply(b.tensor())).expect("padding keeps values finite"));
        self.frame1 = f1;
        self.padding = Padding {
            bottom: self.padding.bottom + pad.bottom,
            right: self.padding.right + pad.right,
        };
        self
    }
}

/// Rows added at the bottom and columns added at the right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub fn is_empty(&self) -> bool {
        self.bottom == 0 && self.right == 0
    }

    /// Replication-pads `t` by this amount.
    pub fn apply<T: Scalar>(&self, t: &Tensor4<T>) -> Tensor4<T> {
        let s = t.shape();
        Tensor4::from_fn(Shape4::new(s.n, s.c, s.h + self.bottom, s.w + self.right), |n, c, y, x| {
            t.at(n, c, y.min(s.h - 1), x.min(s.w - 1))
        })
    }

    /// Removes the padding again.
    pub fn crop<T: Scalar>(&self, t: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = t.shape();
        if s.h <= self.bottom || s.w <= self.right {
            return Err(Error::invalid(
                "crop",
                format!("{s} is smaller than the padding {}×{}", self.bottom, self.right),
            ));
        }
        let (h, w) = (s.h - self.bottom, s.w - self.right);
        Ok(Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, x| t.at(n, c, y, x)))
    }
}

/// Pads to the next multiple of `m` in both extents.
pub fn pad_to_multiple<T: Scalar>(t: &Tensor4<T>, m: usize) -> (Tensor4<T>, Padding) {
    let s = t.shape();
    let m = m.max(1);
    let pad = Padding {
        bottom: s.h.next_multiple_of(m) - s.h,
        right: s.w.next_multiple_of(m) - s.w,
    };
    (pad.apply(t), pad)
}

/// Deterministic RNG for a named purpose under a global seed.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

/// Mean |frame1(x) − frame2(x + flow(x))| over pixels whose target lies
/// inside frame 2, with bilinear sampling.
pub fn photometric_residual(s: &Sample) -> f64 {
    let f2 = s.frame2.cast::<f64>();
    let flow = s.flow_fwd.tensor().cast::<f64>();
    let warped = warp_bilinear(&f2, &flow).expect("sample shapes are consistent");
    let sh = s.frame1.shape();
    let (mut acc, mut count) = (0.0, 0usize);
    for y in 0..sh.h {
        for x in 0..sh.w {
            let tx = x as f64 + flow.at(0, 0, y, x);
            let ty = y as f64 + flow.at(0, 1, y, x);
            if tx < 0.0 || ty < 0.0 || tx > (sh.w - 1) as f64 || ty > (sh.h - 1) as f64 {
                continue;
            }
            for c in 0..sh.c {
                acc += (s.frame1.at(0, c, y, x) as f64 - warped.at(0, c, y, x)).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}
