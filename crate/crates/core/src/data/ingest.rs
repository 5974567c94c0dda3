//! Dataset directories.
//!
//! `paired_files`: `<id>_img1.<ext>`, `<id>_img2.<ext>`, `<id>_flow.flo` and
//! optionally `<id>_flow_bwd.flo` side by side in one directory.
//!
//! `sintel_like`: `<pass>/<scene>/<frame>.<ext>` for images and
//! `flow/<scene>/<frame>.flo` for the flow from a frame to its successor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_flo, read_image, write_flo, write_frame, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTS: [&str; 3] = ["ppm", "png", "pgm"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    PairedFiles,
    SintelLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    /// Image subdirectory of a sintel-like tree.
    pub pass: String,
    /// Fail on empty datasets and pairs without flow instead of skipping.
    pub strict: bool,
    /// Pad frames so both extents are multiples of this.
    pub pad_multiple: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            pass: "clean".into(),
            strict: false,
            pad_multiple: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    id: String,
    img1: PathBuf,
    img2: PathBuf,
    flow: PathBuf,
    flow_bwd: Option<PathBuf>,
}

/// Index of an ingested directory; samples load on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    entries: Vec<Entry>,
    pad_multiple: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Files backing sample `i`, in a fixed order.
    pub fn files(&self, i: usize) -> Vec<&Path> {
        let e = &self.entries[i];
        let mut v = vec![e.img1.as_path(), e.img2.as_path(), e.flow.as_path()];
        if let Some(b) = &e.flow_bwd {
            v.push(b);
        }
        v
    }

    pub fn load(&self, i: usize) -> Result<Sample> {
        let e = &self.entries[i];
        let run = || -> Result<Sample> {
            let f1 = read_image(&e.img1)?;
            let f2 = read_image(&e.img2)?;
            let flow = read_flo(&e.flow)?;
            let bwd = e.flow_bwd.as_ref().map(read_flo).transpose()?;
            Sample::new(f1, f2, flow, bwd, e.id.clone())
        };
        Ok(run().map_err(|err| err.for_sample(&e.id))?.pad_to_multiple(self.pad_multiple))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn missing_flow(strict: bool, id: &str, path: &Path) -> Result<()> {
    if strict {
        Err(Error::invalid("ingest_dataset", format!("missing flow {}", path.display())).for_sample(id))
    } else {
        log::warn!("skipping `{id}`: missing flow {}", path.display());
        Ok(())
    }
}

fn paired(root: &Path, strict: bool) -> Result<Vec<Entry>> {
    let mut ids = Vec::new();
    for p in list_dir(root)? {
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        for ext in IMAGE_EXTS {
            if let Some(id) = name.strip_suffix(&format!("_img1.{ext}")) {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    let mut out = Vec::new();
    for id in ids {
        let img1 = find_image(root, &format!("{id}_img1")).expect("listed above");
        let Some(img2) = find_image(root, &format!("{id}_img2")) else {
            let msg = format!("missing second frame for `{id}`");
            if strict {
                return Err(Error::invalid("ingest_dataset", msg));
            }
            log::warn!("{msg}");
            continue;
        };
        let flow = root.join(format!("{id}_flow.flo"));
        if !flow.is_file() {
            missing_flow(strict, &id, &flow)?;
            continue;
        }
        let bwd = root.join(format!("{id}_flow_bwd.flo"));
        out.push(Entry {
            id,
            img1,
            img2,
            flow,
            flow_bwd: bwd.is_file().then_some(bwd),
        });
    }
    Ok(out)
}

fn sintel(root: &Path, pass: &str, strict: bool) -> Result<Vec<Entry>> {
    let img_root = root.join(pass);
    if !img_root.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for scene_dir in list_dir(&img_root)?.into_iter().filter(|p| p.is_dir()) {
        let scene = scene_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut frames: BTreeMap<String, PathBuf> = BTreeMap::new();
        for p in list_dir(&scene_dir)? {
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    frames.entry(stem.to_string()).or_insert(p.clone());
                }
            }
        }
        let frames: Vec<(String, PathBuf)> = frames.into_iter().collect();
        for pair in frames.windows(2) {
            let (stem, img1) = &pair[0];
            let img2 = &pair[1].1;
            let id = format!("{scene}/{stem}");
            let flow = root.join("flow").join(&scene).join(format!("{stem}.flo"));
            if !flow.is_file() {
                missing_flow(strict, &id, &flow)?;
                continue;
            }
            out.push(Entry {
                id,
                img1: img1.clone(),
                img2: img2.clone(),
                flow,
                flow_bwd: None,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Indexes `root`. Samples come back sorted by id.
pub fn ingest_dataset(root: impl AsRef<Path>, layout: Layout, opts: &IngestOptions) -> Result<Dataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::invalid(
            "ingest_dataset",
            format!("{} is not a directory", root.display()),
        ));
    }
    let entries = match layout {
        Layout::PairedFiles => paired(root, opts.strict)?,
        Layout::SintelLike => sintel(root, &opts.pass, opts.strict)?,
    };
    if entries.is_empty() && opts.strict {
        return Err(Error::invalid(
            "ingest_dataset",
            format!("no samples under {}", root.display()),
        ));
    }
    Ok(Dataset {
        entries,
        pad_multiple: opts.pad_multiple.max(1),
    })
}

/// Writes `s` in the paired-files layout.
pub fn write_paired(dir: impl AsRef<Path>, s: &Sample) -> Result<()> {
    let dir = dir.as_ref();
    write_frame(dir.join(format!("{}_img1.ppm", s.id)), &s.frame1)?;
    write_frame(dir.join(format!("{}_img2.ppm", s.id)), &s.frame2)?;
    write_flo(dir.join(format!("{}_flow.flo", s.id)), &s.flow_fwd)?;
    if let Some(b) = &s.flow_bwd {
        write_flo(dir.join(format!("{}_flow_bwd.flo", s.id)), b)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_pair, Motion, MotionSpec};
    use crate::flowops::FlowField;
    use crate::tensor::{Shape4, Tensor4};

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let d = ingest_dataset(dir.path(), Layout::PairedFiles, &IngestOptions::default()).unwrap();
        assert!(d.is_empty());
        let strict = IngestOptions {
            strict: true,
            ..IngestOptions::default()
        };
        assert!(ingest_dataset(dir.path(), Layout::PairedFiles, &strict).is_err());
        assert!(ingest_dataset(dir.path(), Layout::SintelLike, &strict).is_err());
    }

    #[test]
    fn sintel_scenes_pair_consecutive_frames() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Tensor4::full(Shape4::new(1, 3, 4, 6), 0.5f32);
        for scene in ["alley", "bamboo"] {
            let img = dir.path().join("clean").join(scene);
            let flo = dir.path().join("flow").join(scene);
            std::fs::create_dir_all(&img).unwrap();
            std::fs::create_dir_all(&flo).unwrap();
            for i in 1..=3 {
                write_frame(img.join(format!("frame_{i:04}.ppm")), &frame).unwrap();
            }
            for i in 1..=2 {
                write_flo(flo.join(format!("frame_{i:04}.flo")), &FlowField::zeros(1, 4, 6)).unwrap();
            }
        }
        let d = ingest_dataset(dir.path(), Layout::SintelLike, &IngestOptions::default()).unwrap();
        let ids: Vec<&str> = d.ids().collect();
        assert_eq!(ids, ["alley/frame_0001", "alley/frame_0002", "bamboo/frame_0001", "bamboo/frame_0002"]);
        assert_eq!(d.load(1).unwrap().flow_fwd.shape().w, 6);
    }

    #[test]
    fn missing_flow_skips_or_fails() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_pair(&MotionSpec::global(Motion::translation(1.0, 0.0)), 8, 8, 0, "a").unwrap();
        write_paired(dir.path(), &s).unwrap();
        let mut t = s.clone();
        t.id = "b".into();
        write_paired(dir.path(), &t).unwrap();
        std::fs::remove_file(dir.path().join("b_flow.flo")).unwrap();
        let d = ingest_dataset(dir.path(), Layout::PairedFiles, &IngestOptions::default()).unwrap();
        assert_eq!(d.ids().collect::<Vec<_>>(), ["a"]);
        let strict = IngestOptions {
            strict: true,
            ..IngestOptions::default()
        };
        let err = ingest_dataset(dir.path(), Layout::PairedFiles, &strict).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn padded_ingest_records_the_padding() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_pair(&MotionSpec::global(Motion::translation(1.0, 0.5)), 10, 13, 0, "p").unwrap();
        write_paired(dir.path(), &s).unwrap();
        let opts = IngestOptions {
            pad_multiple: 8,
            ..IngestOptions::default()
        };
        let d = ingest_dataset(dir.path(), Layout::PairedFiles, &opts).unwrap();
        let got = d.load(0).unwrap();
        assert_eq!((got.height(), got.width()), (16, 16));
        let crop = got.padding.crop(got.flow_fwd.tensor()).unwrap();
        assert_eq!(crop, *s.flow_fwd.tensor());
        assert!(got.flow_bwd.is_some());
    }
}
