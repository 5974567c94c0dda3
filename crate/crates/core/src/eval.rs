//! Average end-point error, evaluation reports and comparison tables.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{flow_to_color, write_flo, write_rgb, Dataset, Sample};
use crate::error::{ensure_same, Error, Result};
use crate::flowops::{Exec, FlowField};
use crate::network::Network;
use crate::tensor::Scalar;

/// Upper bounds of the ground-truth magnitude buckets, in pixels.
pub const BUCKET_EDGES: [f64; 2] = [10.0, 40.0];
pub const BUCKET_LABELS: [&str; 3] = ["0-10", "10-40", "40+"];

/// Mean end-point error between two full-resolution flows.
pub fn aee<T: Scalar>(w: &FlowField<T>, w_hat: &FlowField<T>) -> Result<f64> {
    ensure_same("aee", w.shape(), w_hat.shape())?;
    let (a, b) = (w.tensor(), w_hat.tensor());
    let s = w.shape();
    let mut sum = 0.0;
    for n in 0..s.n {
        let (au, av, bu, bv) = (a.plane(n, 0), a.plane(n, 1), b.plane(n, 0), b.plane(n, 1));
        for i in 0..au.len() {
            let du = au[i].as_f64() - bu[i].as_f64();
            let dv = av[i].as_f64() - bv[i].as_f64();
            sum += du.hypot(dv);
        }
    }
    Ok(sum / (s.n * s.h * s.w) as f64)
}

fn bucket_of(magnitude: f64) -> usize {
    BUCKET_EDGES.iter().take_while(|&&e| magnitude >= e).count()
}

/// Anything that maps a sample to a flow at the sample's extents.
pub trait FlowModel: Sync {
    fn predict(&self, sample: &Sample) -> Result<FlowField<f32>>;

    /// Identifies the model in reports.
    fn fingerprint(&self) -> String;
}

impl FlowModel for Network<f32> {
    /// Pads to the network's required multiple, predicts and crops back to
    /// the sample's original extents (before any ingest padding).
    fn predict(&self, sample: &Sample) -> Result<FlowField<f32>> {
        let padded = sample.clone().pad_to_multiple(self.config.required_multiple());
        let flow = Network::predict(self, &padded.frame1, &padded.frame2, Exec::Serial)?;
        let extra = crate::data::Padding {
            bottom: padded.padding.bottom - sample.padding.bottom,
            right: padded.padding.right - sample.padding.right,
        };
        FlowField::new(extra.crop(&flow)?)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut buf = Vec::new();
        for (_, t) in self.params.named_tensors() {
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex(&h.finalize())
    }
}

/// Returns the ground truth; a harness check.
pub struct OracleModel;

impl FlowModel for OracleModel {
    fn predict(&self, sample: &Sample) -> Result<FlowField<f32>> {
        Ok(sample.flow_fwd.clone())
    }

    fn fingerprint(&self) -> String {
        "oracle".into()
    }
}

/// Predicts zero motion everywhere.
pub struct ZeroModel;

impl FlowModel for ZeroModel {
    fn predict(&self, sample: &Sample) -> Result<FlowField<f32>> {
        Ok(FlowField::zeros(1, sample.height(), sample.width()))
    }

    fn fingerprint(&self) -> String {
        "zero".into()
    }
}

/// Indexed collection of evaluation samples.
pub trait SampleSource: Sync {
    fn count(&self) -> usize;
    fn sample(&self, i: usize) -> Result<Sample>;
}

impl SampleSource for [Sample] {
    fn count(&self) -> usize {
        self.len()
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        Ok(self[i].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn count(&self) -> usize {
        self.len()
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        Ok(self[i].clone())
    }
}

impl SampleSource for Dataset {
    fn count(&self) -> usize {
        self.len()
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        self.load(i)
    }
}

/// End-point error totals over pixels whose ground-truth magnitude falls in
/// one bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub pixels: usize,
    pub epe_sum: f64,
}

impl Bucket {
    pub fn mean(&self) -> Option<f64> {
        (self.pixels > 0).then(|| self.epe_sum / self.pixels as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub pixels: usize,
    pub aee: f64,
    pub buckets: [Bucket; 3],
}

/// Wall-clock figures; kept apart from the report so reports stay
/// reproducible byte for byte.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub samples: usize,
    pub total_seconds: f64,
    pub mean_ms_per_sample: f64,
    pub max_ms_per_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub samples: Vec<SampleResult>,
    /// Pixel-weighted mean over all samples.
    pub mean_aee: f64,
    pub buckets: [Bucket; 3],
    #[serde(skip)]
    pub runtime: RuntimeStats,
}

impl EvalReport {
    pub fn bucket_means(&self) -> [Option<f64>; 3] {
        self.buckets.map(|b| b.mean())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("evaluation report: {e}"),
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| metric | AEE |\n|---|---|");
        let _ = writeln!(s, "| mean | {} |", fmt_aee(Some(self.mean_aee)));
        for (label, m) in BUCKET_LABELS.iter().zip(self.bucket_means()) {
            let _ = writeln!(s, "| s{label} | {} |", fmt_aee(m));
        }
        let _ = writeln!(s, "\n| sample | pixels | AEE |\n|---|---|---|");
        for r in &self.samples {
            let _ = writeln!(s, "| {} | {} | {:.4} |", r.id, r.pixels, r.aee);
        }
        s
    }

    /// Writes `report.json`, `report.md` and the `runtime.json` sidecar.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put("report.json", self.to_json())?;
        put("report.md", self.to_markdown())?;
        put(
            "runtime.json",
            serde_json::to_string_pretty(&self.runtime).expect("stats serialize") + "\n",
        )
    }
}

fn fmt_aee(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_sample(h: &mut Sha256, s: &Sample) {
    h.update((s.id.len() as u64).to_le_bytes());
    h.update(s.id.as_bytes());
    let mut buf = Vec::new();
    for t in [&s.frame1, &s.frame2, s.flow_fwd.tensor()] {
        let sh = t.shape();
        for d in [sh.n, sh.c, sh.h, sh.w] {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        t.data().iter().for_each(|v| v.write_le(&mut buf));
    }
    h.update(&buf);
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Write `<id>.flo` and `<id>.png` per prediction here; `/` in ids
    /// becomes `_`.
    pub dump_dir: Option<std::path::PathBuf>,
    /// Evaluate samples on the rayon pool.
    pub parallel: bool,
}

fn evaluate_one(model: &dyn FlowModel, s: &Sample, opts: &EvalOptions) -> Result<(SampleResult, f64)> {
    let start = Instant::now();
    let pred = model.predict(s)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let crop = |f: &FlowField<f32>| -> Result<FlowField<f32>> { FlowField::new(s.padding.crop(f.tensor())?) };
    let (pred, gt) = if s.padding.is_empty() {
        (pred, s.flow_fwd.clone())
    } else {
        (crop(&pred)?, crop(&s.flow_fwd)?)
    };
    ensure_same("evaluate", gt.shape(), pred.shape())?;
    let (gu, gv) = (gt.tensor().plane(0, 0), gt.tensor().plane(0, 1));
    let (pu, pv) = (pred.tensor().plane(0, 0), pred.tensor().plane(0, 1));
    let mut buckets = [Bucket::default(); 3];
    let mut sum = 0.0;
    for i in 0..gu.len() {
        let (gx, gy) = (gu[i] as f64, gv[i] as f64);
        let e = (pu[i] as f64 - gx).hypot(pv[i] as f64 - gy);
        let b = &mut buckets[bucket_of(gx.hypot(gy))];
        b.pixels += 1;
        b.epe_sum += e;
        sum += e;
    }
    if let Some(dir) = &opts.dump_dir {
        let stem = s.id.replace('/', "_");
        write_flo(dir.join(format!("{stem}.flo")), &pred)?;
        write_rgb(dir.join(format!("{stem}.png")), &flow_to_color(&pred, None))?;
    }
    let pixels = gu.len();
    Ok((
        SampleResult {
            id: s.id.clone(),
            pixels,
            aee: sum / pixels as f64,
            buckets,
        },
        ms,
    ))
}

/// Runs `model` over every sample. Results are assembled in sample order,
/// so the report does not depend on scheduling.
pub fn evaluate(model: &dyn FlowModel, source: &dyn SampleSource, opts: &EvalOptions) -> Result<EvalReport> {
    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    let run = |i: usize| -> Result<(SampleResult, f64, [u8; 32])> {
        let s = source.sample(i)?;
        let (r, ms) = evaluate_one(model, &s, opts).map_err(|e| e.for_sample(&s.id))?;
        let mut h = Sha256::new();
        hash_sample(&mut h, &s);
        Ok((r, ms, h.finalize().into()))
    };
    let n = source.count();
    let results: Vec<_> = if opts.parallel {
        (0..n).into_par_iter().map(run).collect()
    } else {
        (0..n).map(run).collect()
    };
    let mut data_hash = Sha256::new();
    let mut samples = Vec::with_capacity(n);
    let mut buckets = [Bucket::default(); 3];
    let (mut pixels, mut weighted) = (0usize, 0.0);
    let mut runtime = RuntimeStats {
        samples: n,
        ..RuntimeStats::default()
    };
    for r in results {
        let (r, ms, digest) = r?;
        data_hash.update(digest);
        for (acc, b) in buckets.iter_mut().zip(&r.buckets) {
            acc.pixels += b.pixels;
            acc.epe_sum += b.epe_sum;
        }
        pixels += r.pixels;
        weighted += r.aee * r.pixels as f64;
        runtime.mean_ms_per_sample += ms;
        runtime.max_ms_per_sample = runtime.max_ms_per_sample.max(ms);
        samples.push(r);
    }
    runtime.total_seconds = start.elapsed().as_secs_f64();
    if n > 0 {
        runtime.mean_ms_per_sample /= n as f64;
    }
    Ok(EvalReport {
        model_fingerprint: model.fingerprint(),
        dataset_fingerprint: hex(&data_hash.finalize()),
        samples,
        mean_aee: if pixels == 0 { 0.0 } else { weighted / pixels as f64 },
        buckets,
        runtime,
    })
}

/// Mean AEE of every stage's flow, coarsest first, after upsampling it to
/// the input grid. Samples are padded to the network's multiple and
/// scored on the padded grid.
pub fn stage_aee(net: &Network<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    let cfg = &net.config;
    let mut sums = vec![0.0; cfg.stages];
    for s in samples {
        let s = s.clone().pad_to_multiple(cfg.required_multiple());
        let mut g = net.graph_with(Exec::Serial);
        let a = g.input(s.frame1.clone(), false);
        let b = g.input(s.frame2.clone(), false);
        let out = net.forward(&mut g, a, b).map_err(|e| e.for_sample(&s.id))?;
        for (k, st) in out.stages.iter().enumerate() {
            let mut f = FlowField::new(g.value(st.flow).clone())?;
            for _ in 0..st.level {
                f = f.upsample(cfg.upsample_mode);
            }
            let f = FlowField::new(f.tensor().scale(cfg.flow_scale as f32))?;
            sums[k] += aee(&s.flow_fwd, &f)?;
        }
    }
    Ok(sums.into_iter().map(|v| v / samples.len().max(1) as f64).collect())
}

/// Markdown table with one row per report; the lowest value of each column
/// is set in bold.
pub fn compare(reports: &[(String, EvalReport)]) -> Result<String> {
    if let Some((_, first)) = reports.first() {
        for (label, r) in reports {
            if r.dataset_fingerprint != first.dataset_fingerprint {
                return Err(Error::invalid(
                    "compare",
                    format!("`{label}` was evaluated on a different dataset"),
                ));
            }
        }
    }
    let rows: Vec<[Option<f64>; 4]> = reports
        .iter()
        .map(|(_, r)| {
            let b = r.bucket_means();
            [Some(r.mean_aee), b[0], b[1], b[2]]
        })
        .collect();
    let best: Vec<Option<f64>> = (0..4)
        .map(|c| rows.iter().filter_map(|r| r[c]).min_by(f64::total_cmp))
        .collect();
    let mut s = String::from("| configuration | AEE | s0-10 | s10-40 | s40+ |\n|---|---|---|---|---|\n");
    for ((label, _), row) in reports.iter().zip(&rows) {
        let _ = write!(s, "| {label} |");
        for (c, v) in row.iter().enumerate() {
            let cell = fmt_aee(*v);
            if v.is_some() && *v == best[c] {
                let _ = write!(s, " **{cell}** |");
            } else {
                let _ = write!(s, " {cell} |");
            }
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn const_flow(u: f64, v: f64) -> FlowField<f64> {
        FlowField::constant(1, 3, 5, u, v)
    }

    #[test]
    fn three_four_five() {
        assert_eq!(aee(&const_flow(0.0, 0.0), &const_flow(3.0, 4.0)).unwrap(), 5.0);
        assert_eq!(aee(&const_flow(1.5, 2.0), &const_flow(1.5, 2.0)).unwrap(), 0.0);
    }

    #[test]
    fn half_the_pixels_off_by_two() {
        let gt = FlowField::<f64>::zeros(1, 2, 2);
        let mut t = gt.tensor().clone();
        t.plane_mut(0, 1)[..2].fill(2.0);
        assert_eq!(aee(&gt, &FlowField::new(t).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        assert!(aee(&const_flow(0.0, 0.0), &FlowField::zeros(1, 5, 3)).is_err());
    }

    #[test]
    fn magnitude_buckets() {
        assert_eq!(bucket_of(0.0), 0);
        assert_eq!(bucket_of(9.99), 0);
        assert_eq!(bucket_of(10.0), 1);
        assert_eq!(bucket_of(40.0), 2);
    }

    fn data() -> Vec<Sample> {
        let cfg = SynthConfig {
            height: 12,
            width: 20,
            ..SynthConfig::default()
        };
        synth_dataset(&cfg, 5, 9).unwrap()
    }

    #[test]
    fn oracle_scores_zero_and_zero_model_scores_the_mean_magnitude() {
        let d = data();
        let r = evaluate(&OracleModel, &d, &EvalOptions::default()).unwrap();
        assert_eq!(r.mean_aee, 0.0);
        let z = evaluate(&ZeroModel, &d, &EvalOptions::default()).unwrap();
        let mut mag = 0.0;
        for s in &d {
            mag += aee(&s.flow_fwd, &FlowField::zeros(1, 12, 20)).unwrap();
        }
        assert!((z.mean_aee - mag / d.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn mean_is_the_pixel_weighted_sample_mean() {
        let mut d = data();
        d[0] = d[0].clone().pad_to_multiple(16);
        let r = evaluate(&ZeroModel, &d, &EvalOptions::default()).unwrap();
        assert_eq!(r.samples[0].pixels, 12 * 20);
        let (mut w, mut n) = (0.0, 0);
        for s in &r.samples {
            w += s.aee * s.pixels as f64;
            n += s.pixels;
        }
        assert!((r.mean_aee - w / n as f64).abs() < 1e-9);
        let bucket_total: f64 = r.buckets.iter().map(|b| b.epe_sum).sum();
        assert!((bucket_total / n as f64 - r.mean_aee).abs() < 1e-9);
    }

    #[test]
    fn reports_are_reproducible_and_round_trip() {
        let d = data();
        let par = EvalOptions {
            parallel: true,
            ..EvalOptions::default()
        };
        let a = evaluate(&ZeroModel, &d, &par).unwrap();
        let b = evaluate(&ZeroModel, &d, &EvalOptions::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_markdown(), b.to_markdown());
        let back = EvalReport::from_json(&a.to_json()).unwrap();
        assert_eq!(back.to_json(), a.to_json());
    }

    #[test]
    fn comparison_marks_the_best_row() {
        let d = data();
        let mut a = evaluate(&ZeroModel, &d, &EvalOptions::default()).unwrap();
        let mut b = a.clone();
        a.mean_aee = 2.0;
        b.mean_aee = 1.5;
        let t = compare(&[("a".into(), a.clone()), ("b".into(), b)]).unwrap();
        let rows: Vec<&str> = t.lines().skip(2).collect();
        assert!(rows[1].contains("**1.5000**"), "{t}");
        assert!(!rows[0].contains("**2.0000**"), "{t}");
        let single = compare(&[("a".into(), a.clone())]).unwrap();
        assert_eq!(single.lines().count(), 3);
        let mut other = a.clone();
        other.dataset_fingerprint = "x".into();
        assert!(compare(&[("a".into(), a), ("o".into(), other)]).is_err());
    }

    #[test]
    fn network_predictions_keep_the_sample_extents() {
        let net = Network::<f32>::new(
            crate::network::NetworkConfig {
                stages: 2,
                feature_channels: vec![4, 4],
                estimator_channels: vec![4],
                residual_channels: vec![2],
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let s = data().remove(0);
        let f = FlowModel::predict(&net, &s).unwrap();
        assert_eq!((f.shape().h, f.shape().w), (12, 20));
        let padded = s.pad_to_multiple(8);
        let f = FlowModel::predict(&net, &padded).unwrap();
        assert_eq!((f.shape().h, f.shape().w), (16, 24));
    }
}
