//! Versioned checkpoint container:
//!
//! ```text
//! "FPCRCKPT" | version u32 | scalar bytes u32 | manifest length u64 |
//! manifest (JSON) | parameters | optimizer moments (m then v per tensor)
//! ```
//!
//! Integers and scalars are little-endian. Tensors appear in the order the
//! manifest lists them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState, Moments};
use super::Progress;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{Scalar, Shape4, Tensor4};

const MAGIC: &[u8; 8] = b"FPCRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerManifest {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    network: NetworkConfig,
    seed: u64,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerManifest>,
    progress: Option<Progress>,
}

pub struct Checkpoint<T: Scalar> {
    pub network: Network<T>,
    /// Seed the network was initialized from.
    pub seed: u64,
    pub optimizer: Option<AdamState<T>>,
    pub progress: Option<Progress>,
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor4<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Scalar>(
    net: &Network<T>,
    seed: u64,
    optimizer: Option<&AdamState<T>>,
    progress: Option<&Progress>,
) -> Result<Vec<u8>> {
    let tensors = net.params.named_tensors();
    if let Some(o) = optimizer {
        if o.moments.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} tensors, network {}",
                o.moments.len(),
                tensors.len()
            )));
        }
    }
    let manifest = Manifest {
        network: net.config.clone(),
        seed,
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().as_array(),
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerManifest {
            config: o.config,
            step: o.step,
        }),
        progress: progress.cloned(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        write_tensor(&mut out, t);
    }
    if let Some(o) = optimizer {
        for m in &o.moments {
            write_tensor(&mut out, &m.m);
            write_tensor(&mut out, &m.v);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("checkpoint truncated while reading {what}"),
            });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn tensor<T: Scalar>(&mut self, shape: Shape4, width: usize, what: &str) -> Result<Tensor4<T>> {
        let raw = self.take(shape.len() * width, what)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                let v = if width == 4 {
                    f32::from_le_bytes(c.try_into().expect("four bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("eight bytes"))
                };
                T::lit(v)
            })
            .collect();
        Tensor4::new(shape, data)
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let width = r.u32("scalar width")? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unknown scalar width {width}")));
    }
    let len = r.u64("manifest length")? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;

    let mut net = Network::<T>::new(manifest.network.clone(), manifest.seed)
        .map_err(|e| Error::Checkpoint(format!("network config: {e}")))?;
    let expected: Vec<(String, Shape4)> = net
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, the network has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), e) in expected.iter().zip(&manifest.tensors) {
        if *name != e.name || shape.as_array() != e.shape {
            return Err(Error::Checkpoint(format!(
                "entry `{}` {:?} does not match network tensor `{name}` {shape}",
                e.name, e.shape
            )));
        }
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        loaded.push(r.tensor::<T>(*shape, width, name)?);
    }
    for (dst, src) in net.params.tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut moments = Vec::with_capacity(expected.len());
            for (name, shape) in &expected {
                let m = r.tensor::<T>(*shape, width, &format!("{name} (first moment)"))?;
                let v = r.tensor::<T>(*shape, width, &format!("{name} (second moment)"))?;
                moments.push(Moments { m, v });
            }
            Some(AdamState {
                config: o.config,
                step: o.step,
                moments,
            })
        }
    };
    if r.at != bytes.len() {
        return Err(Error::Format {
            offset: r.at as u64,
            msg: format!("{} trailing bytes after the checkpoint", bytes.len() - r.at),
        });
    }
    Ok(Checkpoint {
        network: net,
        seed: manifest.seed,
        optimizer,
        progress: manifest.progress,
    })
}

/// Writes through a temporary file so a crash never leaves a torn
/// checkpoint behind.
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    net: &Network<T>,
    seed: u64,
    optimizer: Option<&AdamState<T>>,
    progress: Option<&Progress>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net, seed, optimizer, progress)?;
    let mut tmp = PathBuf::from(path);
    tmp.set_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::train::Phase;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            stages: 2,
            feature_channels: vec![3, 4],
            search_radius: 1,
            warp_radius: 1,
            estimator_channels: vec![4],
            residual_channels: vec![2, 2, 3, 3],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let net = Network::<f32>::new(tiny(), 4).unwrap();
        let mut opt = AdamState::new(&net.params, AdamConfig::default());
        opt.step = 17;
        for (i, m) in opt.moments.iter_mut().enumerate() {
            m.m = m.m.map(|_| i as f32 * 0.25);
            m.v = m.v.map(|_| i as f32 * 0.5 + 0.125);
        }
        let progress = Progress {
            phase: Phase::Joint,
            phase_step: 3,
            global_step: 11,
        };
        let a = encode_checkpoint(&net, 4, Some(&opt), Some(&progress)).unwrap();
        let ck = decode_checkpoint::<f32>(&a).unwrap();
        assert_eq!(ck.network.params, net.params);
        assert_eq!(ck.optimizer.as_ref().unwrap(), &opt);
        let b = encode_checkpoint(&ck.network, ck.seed, ck.optimizer.as_ref(), ck.progress.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_and_version_errors_are_clean() {
        let net = Network::<f64>::new(tiny(), 0).unwrap();
        let bytes = encode_checkpoint(&net, 0, None, None).unwrap();
        for cut in [0, 7, 12, 30, bytes.len() - 1] {
            assert!(decode_checkpoint::<f64>(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = decode_checkpoint::<f64>(&v2).err().unwrap().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn mismatched_manifest_names_the_entry() {
        let net = Network::<f32>::new(tiny(), 0).unwrap();
        let bytes = encode_checkpoint(&net, 0, None, None).unwrap();
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[24..24 + len].to_vec()).unwrap();
        let bad = json.replacen("backbone.l1.mix.bias\",\"shape\":[3,", "backbone.l1.mix.bias\",\"shape\":[5,", 1);
        assert_ne!(bad, json);
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(&(bad.len() as u64).to_le_bytes());
        out.extend_from_slice(bad.as_bytes());
        out.extend_from_slice(&bytes[24 + len..]);
        let err = decode_checkpoint::<f32>(&out).err().unwrap().to_string();
        assert!(err.contains("backbone.l1.mix.bias"), "{err}");
    }
}
