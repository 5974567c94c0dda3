//! The coarse-to-fine flow network: a shared-weight atrous feature pyramid,
//! pyramid cost volumes, the correlation-warping-normalization estimator and
//! the residual refinement branch.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, NetworkConfig, UpsampleVariant};

use crate::error::{Error, Result};
use crate::flowops::{offset_channels, Exec};
use crate::graph::{Graph, Init, LayerId, ParamGroup, ParamStore, Var};
use crate::tensor::{ConvGeom, Scalar, Tensor4};

const BACKBONE_DILATIONS: [usize; 4] = [1, 2, 4, 8];
const UNIT_DILATIONS: [usize; 3] = [1, 2, 4];
/// Scale on the He bound of each estimator's final layer.
const HEAD_GAIN: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct BackboneLevel {
    pub branches: [LayerId; 4],
    pub mix: LayerId,
}

/// Layers of one conv stack unit owned by a single stage.
#[derive(Clone, Debug)]
pub struct UnitLayers {
    pub atrous: [LayerId; 3],
    pub projection: LayerId,
}

/// Interior 3×3 layers of one conv stack unit, shared by all stages.
#[derive(Clone, Debug)]
pub struct SharedUnit {
    pub block1_out: LayerId,
    pub block2_in: LayerId,
    pub block2_out: LayerId,
}

#[derive(Clone, Debug)]
pub struct ResidualLayers {
    pub units: Vec<UnitLayers>,
    pub upsample: LayerId,
    pub last: LayerId,
}

#[derive(Clone, Debug)]
pub struct StageLayers {
    pub level: usize,
    pub estimator: Vec<LayerId>,
    pub residual: Option<ResidualLayers>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub backbone: Vec<BackboneLevel>,
    pub stages: Vec<StageLayers>,
    pub shared_units: Vec<SharedUnit>,
}

/// Graph handles produced by one stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub level: usize,
    pub f1: Var,
    pub f2: Var,
    /// Mapped cost volume at this level.
    pub cost: Var,
    pub warped: Var,
    /// Flow before the residual correction (scaled units, level pixels).
    pub cwn_flow: Var,
    /// Final stage flow (scaled units, level pixels).
    pub flow: Var,
    pub residual: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Coarsest stage first.
    pub stages: Vec<StageOutput>,
    /// Finest stage flow upsampled to the input grid, in input pixels.
    pub flow: Var,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(
        &mut self,
        name: String,
        group: ParamGroup,
        (i, o, k): (usize, usize, usize),
        geom: ConvGeom,
        init: Init,
    ) -> Result<LayerId> {
        self.store.add_conv(name, group, i, o, k, geom, init, self.rng)
    }
}

fn same3(d: usize) -> ConvGeom {
    ConvGeom::same(3, d)
}

impl<T: Scalar> Network<T> {
    /// Builds a network with freshly initialized parameters. Initialization
    /// depends only on `config` and `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, &mut rng)?;
        Ok(Network {
            config,
            params: store,
            layout,
        })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    pub fn graph_with(&self, exec: Exec) -> Graph<'_, T> {
        Graph::new(&self.params).with_exec(exec)
    }

    /// Scalar count of the interior layers shared by every stage's residual
    /// branch.
    pub fn shared_core_params(&self) -> usize {
        self.layout
            .shared_units
            .iter()
            .flat_map(|u| [u.block1_out, u.block2_in, u.block2_out])
            .map(|id| self.params.layer(id).param_count())
            .sum()
    }

    /// Runs both frames through the network. `i1`, `i2` are graph nodes
    /// holding n×C×H×W images.
    pub fn forward(&self, g: &mut Graph<'_, T>, i1: Var, i2: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let s = g.shape(i1);
        if s != g.shape(i2) {
            return Err(Error::ShapeMismatch {
                op: "fpcrnet_forward",
                lhs: s,
                rhs: g.shape(i2),
            });
        }
        if s.c != cfg.image_channels {
            return Err(Error::invalid(
                "fpcrnet_forward",
                format!("expected {} image channels, got {s}", cfg.image_channels),
            ));
        }
        let m = cfg.required_multiple();
        if s.h % m != 0 || s.w % m != 0 {
            return Err(Error::invalid(
                "fpcrnet_forward",
                format!(
                    "input extents {}×{} are not multiples of {m}; pad the frames first",
                    s.h, s.w
                ),
            ));
        }
        let (i1, i2) = if cfg.input_mean == 0.0 {
            (i1, i2)
        } else {
            let shift = g.constant(Tensor4::full(s, T::lit(-cfg.input_mean)));
            (g.add(i1, shift)?, g.add(i2, shift)?)
        };
        let p1 = backbone_forward(g, self, i1)?;
        let p2 = backbone_forward(g, self, i2)?;

        // Mapped cost volumes, finest level first.
        let mut costs: Vec<Var> = Vec::with_capacity(cfg.stages);
        for k in 0..cfg.stages {
            let single = g.correlate(p1[k], p2[k], cfg.search_radius, cfg.patch_radius)?;
            let c = if k == 0 || cfg.ablation.no_pyramid_mapping {
                single
            } else {
                let down = g.downsample_cost(costs[k - 1])?;
                g.concat(&[single, down])?
            };
            costs.push(c);
        }

        let slope = T::lit(cfg.leaky_slope);
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut flow_prev: Option<Var> = None;
        let mut residual_prev: Option<Var> = None;
        for (si, layers) in self.layout.stages.iter().enumerate() {
            let k = layers.level;
            let (f1, f2) = (p1[k - 1], p2[k - 1]);
            let run = |g: &mut Graph<'_, T>| -> Result<StageOutput> {
                let cwn = cwn_forward(g, self, layers, f1, f2, costs[k - 1], flow_prev)?;
                let (flow, residual) = match &layers.residual {
                    None => (cwn.flow, None),
                    Some(res) => {
                        let gk = g.concat(&[f1, cwn.flow])?;
                        let (r, corr) = residual_branch_forward(
                            g,
                            res,
                            &self.layout.shared_units,
                            cfg.upsample_variant,
                            residual_prev,
                            gk,
                            slope,
                        )?;
                        (g.add(cwn.flow, corr)?, Some(r))
                    }
                };
                Ok(StageOutput {
                    level: k,
                    f1,
                    f2,
                    cost: costs[k - 1],
                    warped: cwn.warped,
                    cwn_flow: cwn.flow,
                    flow,
                    residual,
                })
            };
            let out = run(g).map_err(|e| e.at_stage(si))?;
            flow_prev = Some(out.flow);
            residual_prev = out.residual;
            stages.push(out);
        }
        let finest = stages.last().expect("at least two stages").flow;
        let up = g.upsample_flow(finest, cfg.upsample_mode)?;
        let flow = g.scale(up, T::lit(cfg.flow_scale));
        Ok(ForwardOutput { stages, flow })
    }

    /// Convenience inference: full-resolution flow in pixels for a batch.
    pub fn predict(&self, i1: &Tensor4<T>, i2: &Tensor4<T>, exec: Exec) -> Result<Tensor4<T>> {
        let mut g = self.graph_with(exec);
        let a = g.input(i1.clone(), false);
        let b = g.input(i2.clone(), false);
        let out = self.forward(&mut g, a, b)?;
        Ok(g.value(out.flow).clone())
    }
}

fn build_layout<T: Scalar>(
    cfg: &NetworkConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Layout> {
    let mut b = Builder { store, rng };
    let he = Init::He;

    let mut backbone = Vec::with_capacity(cfg.stages);
    let mut in_c = cfg.image_channels;
    for k in 1..=cfg.stages {
        let out_c = cfg.feature_channels[k - 1];
        let width = out_c.div_ceil(2);
        let mut branches = Vec::with_capacity(4);
        for d in BACKBONE_DILATIONS {
            branches.push(b.conv(
                format!("backbone.l{k}.atrous_d{d}"),
                ParamGroup::Backbone,
                (in_c, width, 3),
                same3(d),
                he,
            )?);
        }
        let mix = b.conv(
            format!("backbone.l{k}.mix"),
            ParamGroup::Backbone,
            (4 * width, out_c, 1),
            ConvGeom::new(2, 0, 1),
            he,
        )?;
        backbone.push(BackboneLevel {
            branches: branches.try_into().expect("four branches"),
            mix,
        });
        in_c = out_c;
    }

    let units = cfg.residual_channels.len();
    let mut shared_units = Vec::new();
    if !cfg.ablation.no_residual {
        for (u, &c) in cfg.residual_channels.iter().enumerate() {
            // Block outputs start at zero so each unit begins as its
            // projection skip; stacked units otherwise blow up activations.
            let mut mk = |name: &str, init| {
                b.conv(
                    format!("residual.shared.unit{u}.{name}"),
                    ParamGroup::Residual,
                    (c, c, 3),
                    same3(1),
                    init,
                )
            };
            shared_units.push(SharedUnit {
                block1_out: mk("block1_out", Init::Zero)?,
                block2_in: mk("block2_in", he)?,
                block2_out: mk("block2_out", Init::Zero)?,
            });
        }
    }

    let mut stages = Vec::with_capacity(cfg.stages);
    let mut residual_prev_c: Option<usize> = None;
    for si in 0..cfg.stages {
        let k = cfg.level_of_stage(si);
        let mut estimator = Vec::new();
        let mut c = cfg.estimator_input(k);
        for (i, &w) in cfg.estimator_channels.iter().enumerate() {
            estimator.push(b.conv(format!("cwn.l{k}.est{i}"), ParamGroup::Cwn, (c, w, 3), same3(1), he)?);
            c = w;
        }
        let n = cfg.estimator_channels.len();
        // A full-gain head starts with flows of hundreds of pixels.
        estimator.push(b.conv(format!("cwn.l{k}.est{n}"), ParamGroup::Cwn, (c, 2, 3), same3(1), Init::HeScaled(HEAD_GAIN))?);

        let residual = if cfg.ablation.no_residual {
            None
        } else {
            let g_c = cfg.feature_channels[k - 1] + 2;
            let z_c = residual_prev_c.unwrap_or(0) + g_c;
            let before = cfg.upsample_variant.units_before(units);
            let mut unit_layers = Vec::with_capacity(units);
            let mut in_c = z_c;
            let mut up_c = if before == 0 { Some(z_c) } else { None };
            for (u, &out_c) in cfg.residual_channels.iter().enumerate() {
                if u == before && u > 0 {
                    up_c = Some(in_c);
                }
                let unit_in = if u == before { in_c + g_c } else { in_c };
                let mut atrous = Vec::with_capacity(3);
                for d in UNIT_DILATIONS {
                    atrous.push(b.conv(
                        format!("residual.l{k}.unit{u}.atrous_d{d}"),
                        ParamGroup::Residual,
                        (unit_in, out_c, 3),
                        same3(d),
                        he,
                    )?);
                }
                let projection = b.conv(
                    format!("residual.l{k}.unit{u}.projection"),
                    ParamGroup::Residual,
                    (unit_in, out_c, 1),
                    ConvGeom::default(),
                    he,
                )?;
                unit_layers.push(UnitLayers {
                    atrous: atrous.try_into().expect("three branches"),
                    projection,
                });
                in_c = out_c;
            }
            let last_c = in_c;
            let up_c = up_c.unwrap_or(last_c);
            let upsample = b.store.add_conv_transpose(
                format!("residual.l{k}.upsample"),
                ParamGroup::Residual,
                up_c,
                up_c,
                4,
                ConvGeom::new(2, 1, 1),
                he,
                b.rng,
            )?;
            let last_in = if before == units { last_c + g_c } else { last_c };
            let last = b.conv(
                format!("residual.l{k}.last"),
                ParamGroup::Residual,
                (last_in, 2, 3),
                same3(1),
                Init::Zero,
            )?;
            residual_prev_c = Some(last_c);
            Some(ResidualLayers {
                units: unit_layers,
                upsample,
                last,
            })
        };
        stages.push(StageLayers {
            level: k,
            estimator,
            residual,
        });
    }
    Ok(Layout {
        backbone,
        stages,
        shared_units,
    })
}

/// Feature pyramid of one image, finest level first. Level k has extents
/// H/2^k × W/2^k.
pub fn backbone_forward<T: Scalar>(g: &mut Graph<'_, T>, net: &Network<T>, image: Var) -> Result<Vec<Var>> {
    let slope = T::lit(net.config.leaky_slope);
    let mut x = image;
    let mut out = Vec::with_capacity(net.layout.backbone.len());
    for level in &net.layout.backbone {
        let mut branches = [x; 4];
        for (dst, &id) in branches.iter_mut().zip(&level.branches) {
            let y = g.conv(x, id)?;
            *dst = g.leaky_relu(y, slope);
        }
        let cat = g.concat(&branches)?;
        let mixed = g.conv(cat, level.mix)?;
        x = g.leaky_relu(mixed, slope);
        out.push(x);
    }
    Ok(out)
}

pub(crate) struct CwnOutput {
    pub flow: Var,
    pub warped: Var,
}

/// Correlation-warping-normalization estimator for one stage. The
/// estimator predicts an increment on the upsampled previous flow.
pub(crate) fn cwn_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &Network<T>,
    layers: &StageLayers,
    f1: Var,
    f2: Var,
    cost: Var,
    flow_prev: Option<Var>,
) -> Result<CwnOutput> {
    let cfg = &net.config;
    let slope = T::lit(cfg.leaky_slope);
    let (up, warped) = match flow_prev {
        Some(prev) => {
            let up = g.upsample_flow(prev, cfg.upsample_mode)?;
            let warped = g.warp(f2, up, T::lit(cfg.flow_scale))?;
            (up, warped)
        }
        None => {
            let s = g.shape(f1);
            let up = g.constant(Tensor4::zeros(s.with_channels(2)));
            (up, f2)
        }
    };
    let wcorr = g.correlate(f1, warped, cfg.warp_radius, cfg.patch_radius)?;
    let (nc, nw, nf) = if cfg.ablation.no_cwn_normalization {
        (cost, wcorr, up)
    } else {
        let nc = g.channel_normalize(cost, cfg.norm);
        let nw = g.channel_normalize(wcorr, cfg.norm);
        let nf = if cfg.normalize_flow {
            g.channel_normalize(up, cfg.norm)
        } else {
            up
        };
        (nc, nw, nf)
    };
    debug_assert_eq!(g.shape(wcorr).c, offset_channels(cfg.warp_radius));
    let mut x = g.concat(&[nc, nw, f1, nf])?;
    let last = layers.estimator.len() - 1;
    for (i, &id) in layers.estimator.iter().enumerate() {
        x = g.conv(x, id)?;
        if i < last {
            x = g.leaky_relu(x, slope);
        }
    }
    let flow = g.add(up, x)?;
    Ok(CwnOutput { flow, warped })
}

/// Atrous projection block followed by a single residual block.
pub fn conv_stack_unit<T: Scalar>(
    g: &mut Graph<'_, T>,
    own: &UnitLayers,
    shared: &SharedUnit,
    x: Var,
    slope: T,
) -> Result<Var> {
    let mut branches = Vec::with_capacity(3);
    for &id in &own.atrous {
        branches.push((g.conv(x, id)?, T::one()));
    }
    let a = g.weighted_sum(&branches)?;
    let a = g.leaky_relu(a, slope);
    let b = g.conv(a, shared.block1_out)?;
    let skip = g.conv(x, own.projection)?;
    let y1 = g.add(b, skip)?;
    let y1 = g.leaky_relu(y1, slope);
    let c = g.conv(y1, shared.block2_in)?;
    let c = g.leaky_relu(c, slope);
    let d = g.conv(c, shared.block2_out)?;
    let y = g.add(d, y1)?;
    Ok(g.leaky_relu(y, slope))
}

/// Refines the previous stage's residual features at the current level.
/// `gk` is this stage's [features, CWN flow] at level k; the branch input is
/// the previous residual features (level k+1) next to a pooled copy of `gk`.
/// Returns the residual features R_k and the flow correction.
pub fn residual_branch_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    layers: &ResidualLayers,
    shared: &[SharedUnit],
    variant: UpsampleVariant,
    residual_prev: Option<Var>,
    gk: Var,
    slope: T,
) -> Result<(Var, Var)> {
    let pooled = g.avg_pool2(gk);
    let mut x = match residual_prev {
        Some(r) => g.concat(&[r, pooled])?,
        None => pooled,
    };
    let units = layers.units.len();
    let before = variant.units_before(units);
    for (u, (own, sh)) in layers.units.iter().zip(shared).enumerate() {
        if u == before {
            let up = g.conv_transpose(x, layers.upsample)?;
            x = g.concat(&[up, gk])?;
        }
        x = conv_stack_unit(g, own, sh, x, slope)?;
    }
    if before == units {
        let up = g.conv_transpose(x, layers.upsample)?;
        let fused = g.concat(&[up, gk])?;
        return Ok((up, g.conv(fused, layers.last)?));
    }
    let correction = g.conv(x, layers.last)?;
    Ok((x, correction))
}
