//! Three-phase optimization: backbone and CWN estimator first, then the
//! residual branch with everything else frozen, then the whole network.

mod adam;
mod checkpoint;
mod schedule;
mod targets;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, Moments};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use schedule::{lr_at, lr_from, Schedule};
pub use targets::{scale_targets, unscale_flow};

use crate::data::{augment, motion_reversal, motionless_sample, seeded_rng, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::flowops::Exec;
use crate::graph::{ParamGrads, ParamGroup, Var};
use crate::loss::{LossWeights, StageTerms};
use crate::network::Network;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    ResidualFrozen,
    Joint,
}

impl Phase {
    pub const ORDER: [Phase; 3] = [Phase::Main, Phase::ResidualFrozen, Phase::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::ResidualFrozen => "residual_frozen",
            Phase::Joint => "joint",
        }
    }

    /// Groups that receive no updates in this phase.
    pub fn frozen(self) -> &'static [ParamGroup] {
        match self {
            Phase::Main => &[ParamGroup::Residual],
            Phase::ResidualFrozen => &[ParamGroup::Backbone, ParamGroup::Cwn],
            Phase::Joint => &[],
        }
    }

    fn next(self) -> Option<Phase> {
        match self {
            Phase::Main => Some(Phase::ResidualFrozen),
            Phase::ResidualFrozen => Some(Phase::Joint),
            Phase::Joint => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub schedule: Schedule,
    /// Starting rate; the schedule's own base rate when absent.
    #[serde(default)]
    pub base_lr: Option<f64>,
}

impl PhaseConfig {
    pub fn lr(&self, step: usize) -> f64 {
        lr_from(
            self.schedule,
            self.base_lr.unwrap_or(self.schedule.base_lr()),
            step,
            self.steps,
        )
    }
}

/// What the alignment and smoothness terms compare at each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentInput {
    /// The stage's feature maps.
    #[default]
    Features,
    /// The input frames average-pooled to the stage grid.
    Images,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub main: PhaseConfig,
    pub residual_frozen: PhaseConfig,
    pub joint: PhaseConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub alignment: AlignmentInput,
    pub augment: AugmentConfig,
    /// Main-phase steps over which the motionless share decays linearly
    /// from 1 to `augment.motionless_fraction`.
    pub motionless_warmup: usize,
    /// Checkpoint every this many steps (0: only at phase ends).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    /// Compute the samples of a batch on the rayon pool. Results are reduced
    /// in batch order either way.
    pub parallel_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            main: PhaseConfig {
                steps: 5000,
                schedule: Schedule::SLong,
                base_lr: None,
            },
            residual_frozen: PhaseConfig {
                steps: 2000,
                schedule: Schedule::SLong,
                base_lr: None,
            },
            joint: PhaseConfig {
                steps: 2000,
                schedule: Schedule::SFine,
                base_lr: None,
            },
            batch_size: 4,
            seed: 0,
            loss: LossWeights::default(),
            alignment: AlignmentInput::Features,
            augment: AugmentConfig::default(),
            motionless_warmup: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            parallel_batch: true,
        }
    }
}

impl TrainConfig {
    pub fn phase(&self, p: Phase) -> &PhaseConfig {
        match p {
            Phase::Main => &self.main,
            Phase::ResidualFrozen => &self.residual_frozen,
            Phase::Joint => &self.joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for p in Phase::ORDER {
            if let Some(lr) = self.phase(p).base_lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Config(format!("train.{}.base_lr must be positive", p.name())));
                }
            }
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("train.adam: betas must lie in [0, 1) and eps be positive".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn total_steps(&self) -> usize {
        Phase::ORDER.iter().map(|&p| self.phase(p).steps).sum()
    }
}

/// Position in the three-phase run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub phase_step: usize,
    pub global_step: usize,
}

/// One row of the loss curve. Terms are stage-weighted sums, averaged over
/// the batch, so `total = supervised + λ·unsupervised + μ·regularization`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub regularization: f64,
}

/// Loss value and stage-weighted terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub terms: StageTerms,
}

/// Handles of the loss nodes built by [`build_loss`].
pub struct LossGraph {
    pub root: Var,
    pub stages: Vec<[Var; 3]>,
    pub weights: Vec<f64>,
}

/// Adds the multi-stage training objective for one sample to `g`.
pub fn build_loss<T: Scalar>(
    g: &mut crate::graph::Graph<'_, T>,
    net: &Network<T>,
    sample: &Sample,
    weights: &LossWeights,
    alignment: AlignmentInput,
) -> Result<LossGraph> {
    let i1 = g.input(sample.frame1.cast(), false);
    let i2 = g.input(sample.frame2.cast(), false);
    let out = net.forward(g, i1, i2)?;
    let cfg = &net.config;
    let stage_w = weights.for_stages(cfg.stages)?;
    let targets = scale_targets(&sample.flow_fwd.cast(), cfg.stages, cfg.flow_scale);
    let mut pooled = vec![(i1, i2)];
    if alignment == AlignmentInput::Images {
        for _ in 0..cfg.stages {
            let (a, b) = *pooled.last().expect("level 0");
            pooled.push((g.avg_pool2(a), g.avg_pool2(b)));
        }
    }
    let scale = T::lit(cfg.flow_scale);
    let mut terms = Vec::new();
    let mut stages = Vec::new();
    for (si, (st, &w)) in out.stages.iter().zip(&stage_w).enumerate() {
        let run = |g: &mut crate::graph::Graph<'_, T>| -> Result<[Var; 3]> {
            let target = g.constant(targets[st.level].tensor().clone());
            let s = g.supervised_loss(st.flow, target, weights.supervised)?;
            let (a, b) = match alignment {
                AlignmentInput::Features => (st.f1, st.f2),
                AlignmentInput::Images => pooled[st.level],
            };
            let u = g.unsupervised_loss(a, b, st.flow, scale)?;
            let r = g.regularization_loss(st.flow, a)?;
            Ok([s, u, r])
        };
        let [s, u, r] = run(g).map_err(|e| e.at_stage(si))?;
        terms.push((s, T::lit(w)));
        if weights.lambda != 0.0 {
            terms.push((u, T::lit(w * weights.lambda)));
        }
        if weights.mu != 0.0 {
            terms.push((r, T::lit(w * weights.mu)));
        }
        stages.push([s, u, r]);
    }
    let root = g.weighted_sum(&terms)?;
    Ok(LossGraph {
        root,
        stages,
        weights: stage_w,
    })
}

fn read_loss<T: Scalar>(g: &crate::graph::Graph<'_, T>, lg: &LossGraph) -> SampleLoss {
    let v = |x: Var| g.value(x).data()[0].as_f64();
    let mut terms = StageTerms::default();
    for (st, &w) in lg.stages.iter().zip(&lg.weights) {
        let t = StageTerms {
            supervised: v(st[0]),
            unsupervised: v(st[1]),
            regularization: v(st[2]),
        };
        terms = terms.add(&t.scaled(w));
    }
    SampleLoss {
        total: v(lg.root),
        terms,
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients<T: Scalar>(
    net: &Network<T>,
    sample: &Sample,
    weights: &LossWeights,
    alignment: AlignmentInput,
    exec: Exec,
) -> Result<(SampleLoss, ParamGrads<T>)> {
    let mut g = net.graph_with(exec);
    let lg = build_loss(&mut g, net, sample, weights, alignment).map_err(|e| e.for_sample(&sample.id))?;
    let loss = read_loss(&g, &lg);
    let bp = g.backward(lg.root).map_err(|e| e.for_sample(&sample.id))?;
    Ok((loss, bp.params))
}

/// Loss of one sample without gradients.
pub fn sample_loss<T: Scalar>(
    net: &Network<T>,
    sample: &Sample,
    weights: &LossWeights,
    alignment: AlignmentInput,
) -> Result<SampleLoss> {
    let mut g = net.graph();
    let lg = build_loss(&mut g, net, sample, weights, alignment).map_err(|e| e.for_sample(&sample.id))?;
    Ok(read_loss(&g, &lg))
}

pub struct Trainer<'d> {
    pub net: Network<f32>,
    /// Seed the network was initialized from; stored in checkpoints.
    pub init_seed: u64,
    pub cfg: TrainConfig,
    pub optimizer: AdamState<f32>,
    pub progress: Progress,
    data: &'d [Sample],
    checkpoint_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(net: Network<f32>, init_seed: u64, cfg: TrainConfig, data: &'d [Sample]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("train", "the training set is empty"));
        }
        let optimizer = AdamState::new(&net.params, cfg.adam);
        let mut t = Trainer {
            net,
            init_seed,
            cfg,
            optimizer,
            progress: Progress {
                phase: Phase::Main,
                phase_step: 0,
                global_step: 0,
            },
            data,
            checkpoint_dir: None,
            last_checkpoint: None,
        };
        t.settle();
        t.net.params.set_frozen(t.progress.phase.frozen());
        Ok(t)
    }

    /// Continues from a checkpoint written by a trainer with the same
    /// configuration and data.
    pub fn resume(ck: Checkpoint<f32>, cfg: TrainConfig, data: &'d [Sample]) -> Result<Self> {
        let progress = ck
            .progress
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training progress".into()))?;
        let mut t = Trainer::new(ck.network, ck.seed, cfg, data)?;
        if let Some(o) = ck.optimizer {
            t.optimizer = o;
        }
        t.progress = progress;
        t.net.params.set_frozen(progress.phase.frozen());
        Ok(t)
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase == Phase::Joint && self.progress.phase_step >= self.cfg.joint.steps
    }

    fn phase_is_empty(&self, p: Phase) -> bool {
        self.cfg.phase(p).steps == 0 || (p == Phase::ResidualFrozen && self.net.config.ablation.no_residual)
    }

    /// Moves past finished or empty phases, resetting the optimizer at each
    /// phase boundary.
    fn settle(&mut self) {
        while self.progress.phase_step >= self.cfg.phase(self.progress.phase).steps
            || self.phase_is_empty(self.progress.phase)
        {
            let Some(next) = self.progress.phase.next() else { return };
            self.progress.phase = next;
            self.progress.phase_step = 0;
            self.optimizer = AdamState::new(&self.net.params, self.cfg.adam);
            self.net.params.set_frozen(next.frozen());
        }
    }

    fn motionless_share(&self) -> f64 {
        let base = self.cfg.augment.motionless_fraction;
        let warm = self.cfg.motionless_warmup;
        if self.progress.phase == Phase::Main && self.progress.phase_step < warm {
            1.0 - (1.0 - base) * self.progress.phase_step as f64 / warm as f64
        } else {
            base
        }
    }

    /// Sample `b` of the batch at the current step: epoch-wise shuffled
    /// order, then reversal, augmentation and motionless injection.
    fn draw(&self, b: usize) -> Result<Sample> {
        let n = self.data.len();
        let pos = self.progress.global_step * self.cfg.batch_size + b;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(self.cfg.seed, &format!("epoch/{}", pos / n)));
        let mut s = self.data[order[pos % n]].clone();
        s.id = format!("{}@{}.{b}", s.id, self.progress.global_step);
        let mut rng = seeded_rng(self.cfg.seed, &format!("draw/{}", s.id));
        if self.cfg.augment.motion_reversal && s.flow_bwd.is_some() && rng.gen::<bool>() {
            s = motion_reversal(&s)?;
        }
        let mut s = augment(&s, &self.cfg.augment)?;
        if rng.gen::<f64>() < self.motionless_share() {
            s = motionless_sample(&s.frame1, s.id.clone());
        }
        Ok(s)
    }

    /// Runs one optimizer step. Returns `None` once every phase is done.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        self.settle();
        if self.is_done() {
            return Ok(None);
        }
        let batch: Vec<Sample> = (0..self.cfg.batch_size).map(|b| self.draw(b)).collect::<Result<_>>()?;
        let (net, cfg) = (&self.net, &self.cfg);
        let run = |s: &Sample| sample_gradients(net, s, &cfg.loss, cfg.alignment, Exec::Serial);
        let results: Vec<Result<(SampleLoss, ParamGrads<f32>)>> = if cfg.parallel_batch {
            batch.par_iter().map(run).collect()
        } else {
            batch.iter().map(run).collect()
        };
        let mut grads = ParamGrads::empty(self.net.params.len());
        let mut sum = SampleLoss::default();
        for r in results {
            let (l, g) = r?;
            grads.merge(&g)?;
            sum.total += l.total;
            sum.terms = sum.terms.add(&l.terms);
        }
        let inv = 1.0 / self.cfg.batch_size as f64;
        grads.scale(inv as f32);
        let p = self.progress;
        if !sum.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: p.global_step,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        let lr = self.cfg.phase(p.phase).lr(p.phase_step);
        self.optimizer.step(&mut self.net.params, &grads, lr)?;
        let terms = sum.terms.scaled(inv);
        let record = LossRecord {
            step: p.global_step,
            phase: p.phase,
            lr,
            total: sum.total * inv,
            supervised: terms.supervised,
            unsupervised: terms.unsupervised,
            regularization: terms.regularization,
        };
        self.progress.phase_step += 1;
        self.progress.global_step += 1;
        let phase_end = self.progress.phase_step >= self.cfg.phase(p.phase).steps;
        let cadence = self.cfg.checkpoint_every > 0 && self.progress.global_step % self.cfg.checkpoint_every == 0;
        if phase_end || cadence {
            self.checkpoint()?;
        }
        Ok(Some(record))
    }

    /// Writes `ckpt-<global step>.bin` into the checkpoint directory, if any.
    pub fn checkpoint(&mut self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(None);
        };
        let path = dir.join(format!("ckpt-{:06}.bin", self.progress.global_step));
        save_checkpoint(&path, &self.net, self.init_seed, Some(&self.optimizer), Some(&self.progress))?;
        self.last_checkpoint = Some(path.clone());
        Ok(Some(path))
    }

    /// Trains to the end, handing every record to `observer`.
    pub fn run(&mut self, mut observer: impl FnMut(&LossRecord) -> Result<()>) -> Result<()> {
        while let Some(r) = self.step()? {
            observer(&r)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::network::NetworkConfig;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            stages: 2,
            feature_channels: vec![4, 6],
            search_radius: 2,
            warp_radius: 1,
            estimator_channels: vec![8, 4],
            residual_channels: vec![2, 2, 3, 3],
            ..NetworkConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<Sample> {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            max_translation: 2.0,
            max_rotation_deg: 3.0,
            ..SynthConfig::default()
        };
        synth_dataset(&cfg, n, 3).unwrap()
    }

    fn short(steps: [usize; 3]) -> TrainConfig {
        let phase = |steps, schedule| PhaseConfig {
            steps,
            schedule,
            base_lr: Some(1e-3),
        };
        TrainConfig {
            main: phase(steps[0], Schedule::SLong),
            residual_frozen: phase(steps[1], Schedule::SLong),
            joint: phase(steps[2], Schedule::SFine),
            batch_size: 2,
            augment: AugmentConfig::identity(),
            ..TrainConfig::default()
        }
    }

    fn snapshot(net: &Network<f32>, group: ParamGroup) -> Vec<f32> {
        net.params
            .layers()
            .iter()
            .filter(|l| l.group == group)
            .flat_map(|l| l.params.kernel.data().iter().chain(l.params.bias.data()).copied())
            .collect()
    }

    #[test]
    fn residual_phase_leaves_backbone_and_estimator_untouched() {
        let data = tiny_data(4);
        let net = Network::new(tiny_net(), 1).unwrap();
        let mut t = Trainer::new(net, 1, short([2, 3, 0]), &data).unwrap();
        t.step().unwrap();
        t.step().unwrap();
        let (bb, cwn, res) = (
            snapshot(&t.net, ParamGroup::Backbone),
            snapshot(&t.net, ParamGroup::Cwn),
            snapshot(&t.net, ParamGroup::Residual),
        );
        for _ in 0..3 {
            let r = t.step().unwrap().unwrap();
            assert_eq!(r.phase, Phase::ResidualFrozen);
        }
        assert_eq!(snapshot(&t.net, ParamGroup::Backbone), bb);
        assert_eq!(snapshot(&t.net, ParamGroup::Cwn), cwn);
        assert_ne!(snapshot(&t.net, ParamGroup::Residual), res);
        assert!(t.step().unwrap().is_none());
    }

    #[test]
    fn main_phase_does_not_touch_the_residual_branch() {
        let data = tiny_data(2);
        let net = Network::new(tiny_net(), 2).unwrap();
        let before = snapshot(&net, ParamGroup::Residual);
        let mut t = Trainer::new(net, 2, short([3, 0, 0]), &data).unwrap();
        while t.step().unwrap().is_some() {}
        assert_eq!(snapshot(&t.net, ParamGroup::Residual), before);
    }

    #[test]
    fn record_total_is_the_weighted_term_sum() {
        let data = tiny_data(2);
        let net = Network::new(tiny_net(), 3).unwrap();
        let cfg = short([1, 0, 0]);
        let mut t = Trainer::new(net, 3, cfg.clone(), &data).unwrap();
        let r = t.step().unwrap().unwrap();
        let recomposed = r.supervised + cfg.loss.lambda * r.unsupervised + cfg.loss.mu * r.regularization;
        assert!((r.total - recomposed).abs() <= 1e-4 * r.total.abs(), "{} vs {recomposed}", r.total);
    }

    #[test]
    fn repeated_runs_and_resume_are_bit_identical() {
        let data = tiny_data(3);
        let cfg = short([3, 2, 2]);
        let run = |parallel: bool| {
            let net = Network::new(tiny_net(), 4).unwrap();
            let mut t = Trainer::new(
                net,
                4,
                TrainConfig {
                    parallel_batch: parallel,
                    ..cfg.clone()
                },
                &data,
            )
            .unwrap();
            let mut out = Vec::new();
            t.run(|r| {
                out.push(*r);
                Ok(())
            })
            .unwrap();
            out
        };
        let a = run(true);
        assert_eq!(a.len(), 7);
        assert_eq!(a, run(true));
        assert_eq!(a, run(false));

        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(tiny_net(), 4).unwrap();
        let mut t = Trainer::new(net, 4, cfg.clone(), &data).unwrap().with_checkpoints(dir.path());
        let mut first = Vec::new();
        for _ in 0..4 {
            first.push(t.step().unwrap().unwrap());
        }
        let path = t.checkpoint().unwrap().unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        let mut resumed = Trainer::resume(ck, cfg, &data).unwrap();
        resumed
            .run(|r| {
                first.push(*r);
                Ok(())
            })
            .unwrap();
        assert_eq!(first, a);
    }

    #[test]
    fn loss_falls_on_a_fixed_set() {
        let data = tiny_data(2);
        let net = Network::new(tiny_net(), 5).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..short([60, 0, 0])
        };
        let mut t = Trainer::new(net, 5, cfg, &data).unwrap();
        let mut losses = Vec::new();
        t.run(|r| {
            losses.push(r.total);
            Ok(())
        })
        .unwrap();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[losses.len() - 5..].iter().sum();
        assert!(tail < 0.7 * head, "{head} → {tail}");
    }

    #[test]
    fn warmup_starts_fully_motionless() {
        let data = tiny_data(2);
        let net = Network::new(tiny_net(), 6).unwrap();
        let cfg = TrainConfig {
            motionless_warmup: 10,
            ..short([10, 0, 0])
        };
        let t = Trainer::new(net, 6, cfg, &data).unwrap();
        let s = t.draw(0).unwrap();
        assert_eq!(s.frame1, s.frame2);
        assert_eq!(s.flow_fwd.tensor().max_abs(), 0.0);
    }
}
