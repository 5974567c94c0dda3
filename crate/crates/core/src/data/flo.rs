//! Middlebury `.flo` files: a float tag, 32-bit width and height, then
//! interleaved (u, v) floats, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flowops::FlowField;
use crate::tensor::{Shape4, Tensor4};

pub const FLO_TAG: f32 = 202021.25;
const HEADER: usize = 12;

pub fn encode_flo(flow: &FlowField<f32>) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.n != 1 {
        return Err(Error::invalid("write_flo", format!("expected a single field, got {s}")));
    }
    let mut out = Vec::with_capacity(HEADER + 8 * s.h * s.w);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(s.w as u32).to_le_bytes());
    out.extend_from_slice(&(s.h as u32).to_le_bytes());
    let (u, v) = (flow.tensor().plane(0, 0), flow.tensor().plane(0, 1));
    for (a, b) in u.iter().zip(v) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField<f32>> {
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|b| b.try_into().expect("four bytes"))
            .ok_or_else(|| Error::Format {
                offset: bytes.len() as u64,
                msg: format!("file ends inside the header (need {HEADER} bytes)"),
            })
    };
    let tag = f32::from_le_bytes(word(0)?);
    if tag != FLO_TAG {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad tag {tag}, expected {FLO_TAG}"),
        });
    }
    let w = u32::from_le_bytes(word(4)?) as usize;
    let h = u32::from_le_bytes(word(8)?) as usize;
    if w == 0 || h == 0 {
        return Err(Error::Format {
            offset: 4,
            msg: format!("empty extents {w}×{h}"),
        });
    }
    let need = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(8))
        .and_then(|p| p.checked_add(HEADER))
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: format!("extents {w}×{h} overflow"),
        })?;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: {w}×{h} needs {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Format {
            offset: need as u64,
            msg: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    let mut t = Tensor4::zeros(Shape4::new(1, 2, h, w));
    let payload = &bytes[HEADER..];
    for i in 0..h * w {
        let at = 8 * i;
        let u = f32::from_le_bytes(payload[at..at + 4].try_into().expect("four bytes"));
        let v = f32::from_le_bytes(payload[at + 4..at + 8].try_into().expect("four bytes"));
        t.plane_mut(0, 0)[i] = u;
        t.plane_mut(0, 1)[i] = v;
    }
    FlowField::new(t).map_err(|_| Error::Format {
        offset: HEADER as u64,
        msg: "non-finite displacement".into(),
    })
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_flo(flow)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_is_twenty_bytes() {
        let f = FlowField::constant(1, 1, 1, 1.5f32, -2.0);
        let bytes = encode_flo(&f).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn corrupt_tag_is_rejected_at_offset_zero() {
        let mut bytes = encode_flo(&FlowField::zeros(1, 2, 3)).unwrap();
        bytes[0] ^= 0xff;
        match decode_flo(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_where_the_data_ends() {
        let bytes = encode_flo(&FlowField::zeros(1, 2, 3)).unwrap();
        for cut in [3, 11, bytes.len() - 1] {
            match decode_flo(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn layout_is_interleaved_row_major() {
        let t = Tensor4::from_fn(Shape4::new(1, 2, 2, 2), |_, c, y, x| (c * 100 + y * 10 + x) as f32);
        let bytes = encode_flo(&FlowField::new(t).unwrap()).unwrap();
        let f = |i: usize| f32::from_le_bytes(bytes[HEADER + 4 * i..HEADER + 4 * i + 4].try_into().unwrap());
        // pixel (0,1): u = 1, v = 101
        assert_eq!((f(2), f(3)), (1.0, 101.0));
        // pixel (1,0): u = 10, v = 110
        assert_eq!((f(4), f(5)), (10.0, 110.0));
    }
}
