//! A reverse-mode tape over the tensor, flow and loss primitives.
//!
//! Every node stores its forward value and the op that produced it. The
//! backward sweep visits nodes in reverse creation order and calls each op's
//! analytic backward function. Nodes that depend on no input requiring a
//! gradient and on no unfrozen parameter are skipped.

mod params;

use crate::error::{Error, Result};
use crate::flowops::{
    channel_normalize, channel_normalize_backward, correlate, correlate_backward, downsample_cost,
    downsample_cost_backward, upsample_flow, upsample_flow_backward, warp_bilinear_scaled,
    warp_bilinear_scaled_backward, Exec, NormConstants, UpsampleMode,
};
use crate::loss::{
    regularization_loss, regularization_loss_backward, supervised_loss, supervised_loss_backward,
    unsupervised_loss, unsupervised_loss_backward, SupervisedConfig,
};
use crate::tensor::{
    avg_pool2, avg_pool2_backward, concat_channels, concat_channels_backward, conv2d,
    conv2d_backward_masked, conv_transpose2d, conv_transpose2d_backward, leaky_relu,
    leaky_relu_backward, Scalar, Shape4, Tensor4,
};

pub use params::{Init, Layer, LayerGrad, LayerId, ParamGrads, ParamGroup, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Constant,
    Conv { x: Var, layer: LayerId },
    ConvTranspose { x: Var, layer: LayerId },
    LeakyRelu { x: Var, slope: T },
    AvgPool { x: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    Correlate { a: Var, b: Var, radius: usize, patch: usize },
    DownsampleCost { x: Var },
    Warp { f: Var, flow: Var, s: T },
    UpsampleFlow { x: Var, mode: UpsampleMode },
    ChannelNorm { x: Var, k: NormConstants },
    Supervised { pred: Var, target: Var, cfg: SupervisedConfig },
    Unsupervised { f1: Var, f2: Var, flow: Var, s: T },
    Regularization { flow: Var, image: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Backprop<T> {
    inputs: Vec<Option<Tensor4<T>>>,
    pub params: ParamGrads<T>,
}

impl<T: Scalar> Backprop<T> {
    /// Gradient with respect to an input node created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor4<T>> {
        self.inputs.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    exec: Exec,
}

fn scalar<T: Scalar>(v: T) -> Tensor4<T> {
    Tensor4::full(Shape4::new(1, 1, 1, 1), v)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            exec: Exec::Serial,
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A constant copy of `v`'s value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn layer_trainable(&self, id: LayerId) -> bool {
        !self.params.is_frozen(id)
    }

    pub fn conv(&mut self, x: Var, layer: LayerId) -> Result<Var> {
        let l = self.params.layer(layer);
        if l.transpose {
            return Err(Error::invalid("graph", format!("layer `{}` is a transposed convolution", l.name)));
        }
        let y = conv2d(self.value(x), &l.params).map_err(|e| annotate(e, &l.name))?;
        let g = self.needs(x) || self.layer_trainable(layer);
        Ok(self.push(y, Op::Conv { x, layer }, g))
    }

    pub fn conv_transpose(&mut self, x: Var, layer: LayerId) -> Result<Var> {
        let l = self.params.layer(layer);
        if !l.transpose {
            return Err(Error::invalid("graph", format!("layer `{}` is not a transposed convolution", l.name)));
        }
        let y = conv_transpose2d(self.value(x), &l.params).map_err(|e| annotate(e, &l.name))?;
        let g = self.needs(x) || self.layer_trainable(layer);
        Ok(self.push(y, Op::ConvTranspose { x, layer }, g))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = leaky_relu(self.value(x), slope);
        let g = self.needs(x);
        self.push(y, Op::LeakyRelu { x, slope }, g)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let y = avg_pool2(self.value(x));
        let g = self.needs(x);
        self.push(y, Op::AvgPool { x }, g)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor4<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = concat_channels(&vals)?;
        let g = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        let g = self.needs(x);
        self.push(y, Op::Scale { x, s }, g)
    }

    pub fn correlate(&mut self, a: Var, b: Var, radius: usize, patch: usize) -> Result<Var> {
        let y = correlate(self.value(a), self.value(b), radius, patch, self.exec)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Correlate { a, b, radius, patch }, g))
    }

    pub fn downsample_cost(&mut self, x: Var) -> Result<Var> {
        let y = downsample_cost(self.value(x))?;
        let g = self.needs(x);
        Ok(self.push(y, Op::DownsampleCost { x }, g))
    }

    /// Samples `f` at `x + s·flow(x)`.
    pub fn warp(&mut self, f: Var, flow: Var, s: T) -> Result<Var> {
        let y = warp_bilinear_scaled(self.value(f), self.value(flow), s)?;
        let g = self.needs(f) || self.needs(flow);
        Ok(self.push(y, Op::Warp { f, flow, s }, g))
    }

    pub fn upsample_flow(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let y = upsample_flow(self.value(x), mode)?;
        let g = self.needs(x);
        Ok(self.push(y, Op::UpsampleFlow { x, mode }, g))
    }

    pub fn channel_normalize(&mut self, x: Var, k: NormConstants) -> Var {
        let y = channel_normalize(self.value(x), k);
        let g = self.needs(x);
        self.push(y, Op::ChannelNorm { x, k }, g)
    }

    pub fn supervised_loss(&mut self, pred: Var, target: Var, cfg: SupervisedConfig) -> Result<Var> {
        let y = supervised_loss(self.value(pred), self.value(target), cfg)?;
        let g = self.needs(pred);
        Ok(self.push(scalar(y), Op::Supervised { pred, target, cfg }, g))
    }

    pub fn unsupervised_loss(&mut self, f1: Var, f2: Var, flow: Var, s: T) -> Result<Var> {
        let y = unsupervised_loss(self.value(f1), self.value(f2), self.value(flow), s)?;
        let g = self.needs(f1) || self.needs(f2) || self.needs(flow);
        Ok(self.push(scalar(y), Op::Unsupervised { f1, f2, flow, s }, g))
    }

    /// Edge-aware smoothness of `flow`; `image` only supplies edge weights.
    pub fn regularization_loss(&mut self, flow: Var, image: Var) -> Result<Var> {
        let y = regularization_loss(self.value(flow), self.value(image))?;
        let g = self.needs(flow);
        Ok(self.push(scalar(y), Op::Regularization { flow, image }, g))
    }

    /// `Σ wᵢ·xᵢ` over nodes of identical shape.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum", "no terms"))?;
        let mut y = Tensor4::zeros(self.shape(first));
        for &(v, w) in terms {
            crate::error::ensure_same("weighted_sum", y.shape(), self.shape(v))?;
            for (a, &b) in y.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += w * b;
            }
        }
        let g = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(y, Op::WeightedSum { terms: terms.to_vec() }, g))
    }

    /// Backpropagates from a scalar (1×1×1×1) node.
    pub fn backward(&self, root: Var) -> Result<Backprop<T>> {
        let s = self.shape(root);
        if s != Shape4::new(1, 1, 1, 1) {
            return Err(Error::invalid("backward", format!("root must be a scalar, got {s}")));
        }
        self.backward_seeded(root, scalar(T::one()))
    }

    /// Backpropagates `seed = ∂L/∂root` from an arbitrary node.
    pub fn backward_seeded(&self, root: Var, seed: Tensor4<T>) -> Result<Backprop<T>> {
        crate::error::ensure_same("backward", self.shape(root), seed.shape())?;
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::empty(self.params.len());
        if self.needs(root) {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params)?;
        }
        Ok(Backprop {
            inputs: grads,
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor4<T>,
        grads: &mut [Option<Tensor4<T>>],
        params: &mut ParamGrads<T>,
    ) -> Result<()> {
        let mut send = |v: Var, d: Tensor4<T>| -> Result<()> {
            if !self.needs(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        let val = |v: Var| self.value(v);
        // Scalar loss nodes carry their upstream gradient in a 1×1×1×1 tensor.
        let up = || g.data()[0];
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Conv { x, layer } => {
                let l = self.params.layer(*layer);
                let r = conv2d_backward_masked(val(*x), &l.params, g, self.needs(*x))?;
                if self.layer_trainable(*layer) {
                    params.accumulate(*layer, r.kernel, r.bias)?;
                }
                send(*x, r.x)?;
            }
            Op::ConvTranspose { x, layer } => {
                let l = self.params.layer(*layer);
                let r = conv_transpose2d_backward(val(*x), &l.params, g)?;
                if self.layer_trainable(*layer) {
                    params.accumulate(*layer, r.kernel, r.bias)?;
                }
                send(*x, r.x)?;
            }
            Op::LeakyRelu { x, slope } => send(*x, leaky_relu_backward(val(*x), *slope, g)?)?,
            Op::AvgPool { x } => send(*x, avg_pool2_backward(val(*x).shape(), g)?)?,
            Op::Concat { xs } => {
                let shapes: Vec<Shape4> = xs.iter().map(|&v| val(v).shape()).collect();
                for (&v, d) in xs.iter().zip(concat_channels_backward(&shapes, g)?) {
                    send(v, d)?;
                }
            }
            Op::Add { a, b } => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Scale { x, s } => send(*x, g.scale(*s))?,
            Op::Correlate { a, b, radius, patch } => {
                let (ga, gb) = correlate_backward(val(*a), val(*b), *radius, *patch, g, self.exec)?;
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::DownsampleCost { x } => send(*x, downsample_cost_backward(val(*x).shape(), g)?)?,
            Op::Warp { f, flow, s } => {
                let (gf, gw) = warp_bilinear_scaled_backward(val(*f), val(*flow), *s, g)?;
                send(*f, gf)?;
                send(*flow, gw)?;
            }
            Op::UpsampleFlow { x, mode } => {
                send(*x, upsample_flow_backward(val(*x).shape(), *mode, g)?)?
            }
            Op::ChannelNorm { x, k } => send(*x, channel_normalize_backward(val(*x), *k, g)?)?,
            Op::Supervised { pred, target, cfg } => {
                let d = supervised_loss_backward(val(*pred), val(*target), *cfg)?;
                send(*pred, d.scale(up()))?;
            }
            Op::Unsupervised { f1, f2, flow, s } => {
                let (a, b, w) = unsupervised_loss_backward(val(*f1), val(*f2), val(*flow), *s)?;
                let k = up();
                send(*f1, a.scale(k))?;
                send(*f2, b.scale(k))?;
                send(*flow, w.scale(k))?;
            }
            Op::Regularization { flow, image } => {
                let d = regularization_loss_backward(val(*flow), val(*image))?;
                send(*flow, d.scale(up()))?;
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    send(v, g.scale(w))?;
                }
            }
        }
        Ok(())
    }
}

fn annotate(e: Error, layer: &str) -> Error {
    match e {
        Error::InvalidInput { op, msg } => Error::InvalidInput {
            op,
            msg: format!("layer `{layer}`: {msg}"),
        },
        other => other,
    }
}
