//! Registry of finite-difference gradient checks over every differentiable
//! op, the conv stack unit and a miniature network. Always 64-bit.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flowops::{
    channel_normalize, channel_normalize_backward, correlate, correlate_backward, downsample_cost,
    downsample_cost_backward, offset_channels, upsample_flow, upsample_flow_backward, warp_bilinear_scaled,
    warp_bilinear_scaled_backward, Exec, NormConstants, UpsampleMode,
};
use crate::graph::{Graph, Init, ParamGroup, ParamStore, Var};
use crate::loss::{
    regularization_loss, regularization_loss_backward, supervised_loss, supervised_loss_backward,
    unsupervised_loss, unsupervised_loss_backward, LossWeights, SupervisedConfig,
};
use crate::network::{conv_stack_unit, Network, NetworkConfig, SharedUnit, UnitLayers};
use crate::tensor::gradcheck::{check_gradients, CheckOptions, GradCheckReport};
use crate::tensor::{
    avg_pool2, avg_pool2_backward, concat_channels, concat_channels_backward, conv2d, conv2d_backward,
    conv_transpose2d, conv_transpose2d_backward, leaky_relu, leaky_relu_backward, ConvGeom, ConvParams, Shape4,
    Tensor4,
};

/// Tolerance class of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    /// Linear in each input coordinate: rel. err < 1e-9.
    Linear,
    /// Smooth, or piecewise linear sampled away from its kinks: < 1e-5.
    Smooth,
    /// Warps and losses with kinks: < 1e-4.
    Piecewise,
}

impl Class {
    pub fn options(self) -> CheckOptions {
        match self {
            Class::Linear => CheckOptions::linear(),
            Class::Smooth => CheckOptions::smooth(),
            Class::Piecewise => CheckOptions::piecewise(),
        }
    }
}

pub struct GradCase {
    pub name: &'static str,
    pub class: Class,
    check: fn(u64, CheckOptions) -> GradCheckReport,
}

impl GradCase {
    pub fn run(&self, seed: u64) -> GradCheckReport {
        (self.check)(seed, self.class.options())
    }
}

pub struct CaseResult {
    pub name: &'static str,
    pub class: Class,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

pub fn registry() -> Vec<GradCase> {
    macro_rules! case {
        ($name:literal, $class:ident, $f:ident) => {
            GradCase {
                name: $name,
                class: Class::$class,
                check: $f,
            }
        };
    }
    vec![
        case!("conv2d", Linear, conv2d_case),
        case!("conv_transpose2d", Linear, conv_transpose_case),
        case!("avg_pool2", Linear, avg_pool_case),
        case!("leaky_relu", Smooth, leaky_case),
        case!("concat", Linear, concat_case),
        case!("correlate_single", Linear, correlate_case),
        case!("downsample_cost", Linear, downsample_case),
        case!("warp_bilinear", Piecewise, warp_case),
        case!("upsample_flow", Linear, upsample_case),
        case!("channel_normalize", Smooth, normalize_case),
        case!("supervised_loss", Piecewise, supervised_case),
        case!("unsupervised_loss", Piecewise, unsupervised_case),
        case!("regularization_loss", Piecewise, regularization_case),
        case!("total_loss", Piecewise, total_case),
        case!("conv_stack_unit", Smooth, unit_case),
        case!("network_2stage", Piecewise, network_case),
    ]
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run_suite(seed: u64, filter: Option<&str>) -> Vec<CaseResult> {
    registry()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let start = Instant::now();
            let report = c.run(seed);
            CaseResult {
                name: c.name,
                class: c.class,
                report,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn uniform(r: &mut ChaCha8Rng, s: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::random_uniform(s, lo, hi, r)
}

/// Values whose magnitude lies in [0.2, 1], away from the kink at zero.
fn away_from_zero(r: &mut ChaCha8Rng, s: Shape4) -> Tensor4<f64> {
    Tensor4::from_fn(s, |_, _, _, _| {
        let m = r.gen_range(0.2..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Flows with fractional parts in [0.2, 0.8], away from bilinear kinks.
fn off_grid_flow(r: &mut ChaCha8Rng, s: Shape4, span: i64) -> Tensor4<f64> {
    Tensor4::from_fn(s, |_, _, _, _| r.gen_range(-span..span) as f64 + r.gen_range(0.2..0.8))
}

fn scalar(v: f64) -> Tensor4<f64> {
    Tensor4::full(Shape4::new(1, 1, 1, 1), v)
}

fn conv_params(xs: &[Tensor4<f64>], geom: ConvGeom) -> ConvParams<f64> {
    ConvParams {
        kernel: xs[1].clone(),
        bias: xs[2].clone(),
        geom,
    }
}

fn conv2d_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 1);
    let geom = ConvGeom::new(2, 2, 2);
    let inputs = [
        uniform(&mut r, Shape4::new(2, 3, 7, 6), -1.0, 1.0),
        uniform(&mut r, Shape4::new(4, 3, 3, 3), -1.0, 1.0),
        uniform(&mut r, Shape4::new(4, 1, 1, 1), -1.0, 1.0),
    ];
    check_gradients(
        &inputs,
        |x| conv2d(&x[0], &conv_params(x, geom)),
        |x, g| {
            let c = conv2d_backward(&x[0], &conv_params(x, geom), g)?;
            Ok(vec![c.x, c.kernel, c.bias])
        },
        o,
        seed,
    )
}

fn conv_transpose_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 2);
    let geom = ConvGeom::new(2, 1, 1);
    let inputs = [
        uniform(&mut r, Shape4::new(1, 3, 4, 5), -1.0, 1.0),
        uniform(&mut r, Shape4::new(3, 2, 4, 4), -1.0, 1.0),
        uniform(&mut r, Shape4::new(2, 1, 1, 1), -1.0, 1.0),
    ];
    check_gradients(
        &inputs,
        |x| conv_transpose2d(&x[0], &conv_params(x, geom)),
        |x, g| {
            let c = conv_transpose2d_backward(&x[0], &conv_params(x, geom), g)?;
            Ok(vec![c.x, c.kernel, c.bias])
        },
        o,
        seed,
    )
}

fn avg_pool_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 3);
    let inputs = [uniform(&mut r, Shape4::new(1, 3, 7, 6), -1.0, 1.0)];
    check_gradients(
        &inputs,
        |x| Ok(avg_pool2(&x[0])),
        |x, g| Ok(vec![avg_pool2_backward(x[0].shape(), g)?]),
        o,
        seed,
    )
}

fn leaky_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 4);
    let inputs = [away_from_zero(&mut r, Shape4::new(1, 3, 5, 5))];
    check_gradients(
        &inputs,
        |x| Ok(leaky_relu(&x[0], 0.1)),
        |x, g| Ok(vec![leaky_relu_backward(&x[0], 0.1, g)?]),
        o,
        seed,
    )
}

fn concat_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 5);
    let inputs = [
        uniform(&mut r, Shape4::new(2, 2, 3, 4), -1.0, 1.0),
        uniform(&mut r, Shape4::new(2, 3, 3, 4), -1.0, 1.0),
    ];
    check_gradients(
        &inputs,
        |x| concat_channels(&[&x[0], &x[1]]),
        |x, g| concat_channels_backward(&[x[0].shape(), x[1].shape()], g),
        o,
        seed,
    )
}

fn correlate_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 6);
    let s = Shape4::new(1, 3, 6, 7);
    let inputs = [uniform(&mut r, s, -1.0, 1.0), uniform(&mut r, s, -1.0, 1.0)];
    check_gradients(
        &inputs,
        |x| correlate(&x[0], &x[1], 2, 1, Exec::Serial),
        |x, g| {
            let (a, b) = correlate_backward(&x[0], &x[1], 2, 1, g, Exec::Serial)?;
            Ok(vec![a, b])
        },
        o,
        seed,
    )
}

fn downsample_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 7);
    let inputs = [uniform(&mut r, Shape4::new(1, offset_channels(2), 6, 6), -1.0, 1.0)];
    check_gradients(
        &inputs,
        |x| downsample_cost(&x[0]),
        |x, g| Ok(vec![downsample_cost_backward(x[0].shape(), g)?]),
        o,
        seed,
    )
}

fn warp_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 8);
    let inputs = [
        uniform(&mut r, Shape4::new(1, 3, 6, 5), -1.0, 1.0),
        off_grid_flow(&mut r, Shape4::new(1, 2, 6, 5), 3),
    ];
    check_gradients(
        &inputs,
        |x| warp_bilinear_scaled(&x[0], &x[1], 1.0),
        |x, g| {
            let (a, b) = warp_bilinear_scaled_backward(&x[0], &x[1], 1.0, g)?;
            Ok(vec![a, b])
        },
        o.with_step(1e-6),
        seed,
    )
}

fn upsample_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 9);
    let inputs = [uniform(&mut r, Shape4::new(1, 2, 4, 5), -1.0, 1.0)];
    let modes = [UpsampleMode::Bicubic, UpsampleMode::Bilinear];
    // Both modes side by side in one output.
    check_gradients(
        &inputs,
        |x| {
            let [a, b] = modes.map(|m| upsample_flow(&x[0], m));
            concat_channels(&[&a?, &b?])
        },
        |x, g| {
            let mut acc = Tensor4::zeros(x[0].shape());
            for (i, m) in modes.into_iter().enumerate() {
                let part = g.narrow_channels(2 * i, 2)?;
                acc.add_assign(&upsample_flow_backward(x[0].shape(), m, &part)?)?;
            }
            Ok(vec![acc])
        },
        o,
        seed,
    )
}

fn normalize_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 10);
    let inputs = [uniform(&mut r, Shape4::new(2, 3, 4, 4), -1.0, 1.0)];
    let k = NormConstants::default();
    check_gradients(
        &inputs,
        |x| Ok(channel_normalize(&x[0], k)),
        |x, g| Ok(vec![channel_normalize_backward(&x[0], k, g)?]),
        o,
        seed,
    )
}

fn supervised_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 11);
    let target = uniform(&mut r, Shape4::new(1, 2, 5, 5), -1.0, 1.0);
    let inputs = [target.add(&away_from_zero(&mut r, target.shape())).expect("same shape")];
    let cfg = SupervisedConfig::default();
    check_gradients(
        &inputs,
        |x| Ok(scalar(supervised_loss(&x[0], &target, cfg)?)),
        |x, g| Ok(vec![supervised_loss_backward(&x[0], &target, cfg)?.scale(g.data()[0])]),
        o,
        seed,
    )
}

fn unsupervised_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 12);
    let s = Shape4::new(1, 3, 6, 6);
    let inputs = [
        uniform(&mut r, s, -1.0, 1.0),
        uniform(&mut r, s, -1.0, 1.0),
        off_grid_flow(&mut r, s.with_channels(2), 2).scale(0.5),
    ];
    let scale = 2.0;
    check_gradients(
        &inputs,
        |x| Ok(scalar(unsupervised_loss(&x[0], &x[1], &x[2], scale)?)),
        |x, g| {
            let (a, b, c) = unsupervised_loss_backward(&x[0], &x[1], &x[2], scale)?;
            let k = g.data()[0];
            Ok(vec![a.scale(k), b.scale(k), c.scale(k)])
        },
        o.with_step(1e-6),
        seed,
    )
}

fn regularization_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 13);
    let image = uniform(&mut r, Shape4::new(1, 3, 5, 6), 0.0, 1.0);
    let inputs = [uniform(&mut r, Shape4::new(1, 2, 5, 6), -1.0, 1.0)];
    check_gradients(
        &inputs,
        |x| Ok(scalar(regularization_loss(&x[0], &image)?)),
        |x, g| Ok(vec![regularization_loss_backward(&x[0], &image)?.scale(g.data()[0])]),
        o,
        seed,
    )
}

/// Weighted multi-stage objective over two stages: inputs are the stage
/// flows and first-frame features; second-frame features are fixed.
fn total_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 14);
    let store = ParamStore::<f64>::new();
    let shapes = [Shape4::new(1, 3, 4, 4), Shape4::new(1, 3, 8, 8)];
    let f2: Vec<Tensor4<f64>> = shapes.iter().map(|&s| uniform(&mut r, s, -1.0, 1.0)).collect();
    // The smoothness term's edge image is a stop-gradient input.
    let edges: Vec<Tensor4<f64>> = shapes.iter().map(|&s| uniform(&mut r, s, -1.0, 1.0)).collect();
    let targets: Vec<Tensor4<f64>> =
        shapes.iter().map(|&s| uniform(&mut r, s.with_channels(2), -1.0, 1.0)).collect();
    let mut inputs = Vec::new();
    for (s, t) in shapes.iter().zip(&targets) {
        let off = off_grid_flow(&mut r, s.with_channels(2), 1).scale(0.25);
        inputs.push(t.add(&off).expect("same shape"));
        inputs.push(uniform(&mut r, *s, -1.0, 1.0));
    }
    let weights = LossWeights::default();
    let build = |g: &mut Graph<'_, f64>, xs: &[Tensor4<f64>]| -> Result<(Var, Vec<Var>)> {
        let stage_w = weights.for_stages(2)?;
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone(), true)).collect();
        let mut terms = Vec::new();
        for k in 0..2 {
            let (flow, f1) = (vars[2 * k], vars[2 * k + 1]);
            let b = g.constant(f2[k].clone());
            let t = g.constant(targets[k].clone());
            terms.push((g.supervised_loss(flow, t, weights.supervised)?, stage_w[k]));
            terms.push((g.unsupervised_loss(f1, b, flow, 4.0)?, stage_w[k] * weights.lambda));
            let e = g.constant(edges[k].clone());
            terms.push((g.regularization_loss(flow, e)?, stage_w[k] * weights.mu));
        }
        Ok((g.weighted_sum(&terms)?, vars))
    };
    check_gradients(
        &inputs,
        |x| {
            let mut g = Graph::new(&store);
            let (root, _) = build(&mut g, x)?;
            Ok(g.value(root).clone())
        },
        |x, seed_grad| {
            let mut g = Graph::new(&store);
            let (root, vars) = build(&mut g, x)?;
            let bp = g.backward_seeded(root, seed_grad.clone())?;
            Ok(vars
                .iter()
                .zip(x)
                .map(|(&v, xi)| bp.wrt(v).cloned().unwrap_or_else(|| Tensor4::zeros(xi.shape())))
                .collect())
        },
        o.with_step(1e-6),
        seed,
    )
}

/// Writes `xs` into the store's tensors, in `named_tensors` order.
fn load_params(store: &mut ParamStore<f64>, xs: &[Tensor4<f64>]) {
    for (dst, src) in store.tensors_mut().into_iter().zip(xs) {
        *dst = src.clone();
    }
}

fn param_grads(store: &ParamStore<f64>, grads: &crate::graph::ParamGrads<f64>) -> Vec<Tensor4<f64>> {
    store
        .ids()
        .flat_map(|id| {
            let l = &store.layer(id).params;
            match grads.get(id) {
                Some(g) => [g.kernel.clone(), g.bias.clone()],
                None => [Tensor4::zeros(l.kernel.shape()), Tensor4::zeros(l.bias.shape())],
            }
        })
        .collect()
}

/// Random parameters so that no layer starts at zero.
fn randomize(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, amp: f64) {
    for t in store.tensors_mut() {
        *t = uniform(r, t.shape(), -amp, amp);
    }
}

fn unit_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 15);
    let mut store = ParamStore::<f64>::new();
    let (ci, co) = (3, 4);
    let mut add = |s: &mut ParamStore<f64>, name: &str, i, o, k, d| {
        let geom = if k == 1 { ConvGeom::default() } else { ConvGeom::same(3, d) };
        s.add_conv(name, ParamGroup::Residual, i, o, k, geom, Init::He, &mut r)
    };
    let own = UnitLayers {
        atrous: [
            add(&mut store, "a1", ci, co, 3, 1).expect("fresh name"),
            add(&mut store, "a2", ci, co, 3, 2).expect("fresh name"),
            add(&mut store, "a4", ci, co, 3, 4).expect("fresh name"),
        ],
        projection: add(&mut store, "p", ci, co, 1, 1).expect("fresh name"),
    };
    let shared = SharedUnit {
        block1_out: add(&mut store, "b1", co, co, 3, 1).expect("fresh name"),
        block2_in: add(&mut store, "b2i", co, co, 3, 1).expect("fresh name"),
        block2_out: add(&mut store, "b2o", co, co, 3, 1).expect("fresh name"),
    };
    randomize(&mut store, &mut r, 0.3);
    let x = uniform(&mut r, Shape4::new(1, ci, 6, 6), -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(store.named_tensors().into_iter().map(|(_, t)| t.clone()));
    let run = |xs: &[Tensor4<f64>], seed_grad: Option<&Tensor4<f64>>| -> Result<Vec<Tensor4<f64>>> {
        let mut s = store.clone();
        load_params(&mut s, &xs[1..]);
        let mut g = Graph::new(&s);
        let v = g.input(xs[0].clone(), true);
        let y = conv_stack_unit(&mut g, &own, &shared, v, 0.1)?;
        match seed_grad {
            None => Ok(vec![g.value(y).clone()]),
            Some(sg) => {
                let bp = g.backward_seeded(y, sg.clone())?;
                let mut out = vec![bp.wrt(v).cloned().expect("input requires grad")];
                out.extend(param_grads(&s, &bp.params));
                Ok(out)
            }
        }
    };
    check_gradients(
        &inputs,
        |xs| Ok(run(xs, None)?.remove(0)),
        |xs, sg| run(xs, Some(sg)),
        CheckOptions { skip_kinks: true, ..o }.with_step(1e-6),
        seed,
    )
}

/// Two-stage network with every parameter randomized, checked on all of
/// its parameters (a random subset of entries per tensor).
fn network_case(seed: u64, o: CheckOptions) -> GradCheckReport {
    let mut r = rng(seed, 16);
    let cfg = NetworkConfig {
        stages: 2,
        feature_channels: vec![4, 6],
        search_radius: 1,
        warp_radius: 1,
        estimator_channels: vec![6, 4],
        residual_channels: vec![3, 3],
        ..NetworkConfig::default()
    };
    let mut net = Network::<f64>::new(cfg, seed).expect("valid miniature config");
    randomize(&mut net.params, &mut r, 0.4);
    let s = Shape4::new(1, 3, 16, 16);
    let i1 = uniform(&mut r, s, 0.0, 1.0);
    let i2 = uniform(&mut r, s, 0.0, 1.0);
    let target = uniform(&mut r, s.with_channels(2), -2.0, 2.0);
    let weights = LossWeights::default();
    let inputs: Vec<Tensor4<f64>> = net.params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    // Edge image of the smoothness term: a stop-gradient, so it is frozen at
    // the unperturbed parameters.
    let edges = {
        let mut g = net.graph();
        let a = g.input(i1.clone(), false);
        let b = g.input(i2.clone(), false);
        let out = net.forward(&mut g, a, b).expect("miniature forward");
        g.value(out.stages.last().expect("two stages").f1).clone()
    };
    let objective = |xs: &[Tensor4<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor4<f64>>)> {
        let mut n = net.clone();
        load_params(&mut n.params, xs);
        let mut g = n.graph();
        let a = g.input(i1.clone(), false);
        let b = g.input(i2.clone(), false);
        let out = n.forward(&mut g, a, b)?;
        let t = g.constant(target.clone());
        let sup = g.supervised_loss(out.flow, t, weights.supervised)?;
        let st = out.stages.last().expect("two stages");
        let uns = g.unsupervised_loss(st.f1, st.f2, st.flow, 2.0)?;
        let e = g.constant(edges.clone());
        let reg = g.regularization_loss(st.flow, e)?;
        let root = g.weighted_sum(&[(sup, 1.0), (uns, weights.lambda), (reg, weights.mu)])?;
        let v = g.value(root).data()[0];
        if !want_grad {
            return Ok((v, Vec::new()));
        }
        let bp = g.backward(root)?;
        Ok((v, param_grads(&n.params, &bp.params)))
    };
    check_gradients(
        &inputs,
        |xs| Ok(scalar(objective(xs, false)?.0)),
        |xs, sg| {
            let k = sg.data()[0];
            Ok(objective(xs, true)?.1.into_iter().map(|t| t.scale(k)).collect())
        },
        o.with_step(1e-6).with_max_entries(4),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let r = registry();
        let mut names: Vec<&str> = r.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), r.len());
    }

    #[test]
    fn cheap_cases_pass() {
        for c in registry().iter().filter(|c| c.class == Class::Linear) {
            let report = c.run(0);
            assert!(report.passed(), "{}: {report}", c.name);
        }
    }
}
