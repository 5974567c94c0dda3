use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, ConvParams, Scalar, Shape4, Tensor4};

/// Which part of the network a layer belongs to; training phases freeze
/// whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Cwn,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerId(pub(crate) usize);

impl LayerId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform He initialization for leaky-ReLU slope 0.1, zero bias.
    He,
    /// He bound multiplied by the factor, for output heads.
    HeScaled(f64),
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub group: ParamGroup,
    pub transpose: bool,
    pub params: ConvParams<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn param_count(&self) -> usize {
        self.params.kernel.shape().len() + self.params.bias.shape().len()
    }
}

/// Every trainable tensor of a network, as named convolution layers. Layers
/// used more than once in a forward pass share one entry, so their gradients
/// accumulate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    layers: Vec<Layer<T>>,
    frozen: Vec<ParamGroup>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            layers: Vec::new(),
            frozen: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: String,
        group: ParamGroup,
        transpose: bool,
        kernel_shape: Shape4,
        out_c: usize,
        fan_in: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<LayerId> {
        if self.layers.iter().any(|l| l.name == name) {
            return Err(Error::Config(format!("duplicate layer name `{name}`")));
        }
        let kernel = match init {
            Init::Zero => Tensor4::zeros(kernel_shape),
            Init::He | Init::HeScaled(_) => {
                let slope = 0.1f64;
                let gain = if let Init::HeScaled(f) = init { f } else { 1.0 };
                let bound = gain * (6.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
                Tensor4::random_uniform(kernel_shape, -bound, bound, rng)
            }
        };
        self.layers.push(Layer {
            name,
            group,
            transpose,
            params: ConvParams {
                kernel,
                bias: Tensor4::zeros(Shape4::new(out_c, 1, 1, 1)),
                geom,
            },
        });
        Ok(LayerId(self.layers.len() - 1))
    }

    /// Adds a square convolution with kernel layout (out, in, k, k).
    #[allow(clippy::too_many_arguments)]
    pub fn add_conv(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        k: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<LayerId> {
        self.push(
            name.into(),
            group,
            false,
            Shape4::new(out_c, in_c, k, k),
            out_c,
            in_c * k * k,
            geom,
            init,
            rng,
        )
    }

    /// Adds a square transposed convolution with kernel layout (in, out, k, k).
    #[allow(clippy::too_many_arguments)]
    pub fn add_conv_transpose(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        k: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<LayerId> {
        let fan = in_c * k * k / (geom.stride * geom.stride).max(1);
        self.push(
            name.into(),
            group,
            true,
            Shape4::new(in_c, out_c, k, k),
            out_c,
            fan,
            geom,
            init,
            rng,
        )
    }

    pub fn layer(&self, id: LayerId) -> &Layer<T> {
        &self.layers[id.0]
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut Layer<T> {
        &mut self.layers[id.0]
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<LayerId> {
        self.layers.iter().position(|l| l.name == name).map(LayerId)
    }

    pub fn ids(&self) -> impl Iterator<Item = LayerId> {
        (0..self.layers.len()).map(LayerId)
    }

    pub fn set_frozen(&mut self, groups: &[ParamGroup]) {
        self.frozen = groups.to_vec();
    }

    pub fn frozen_groups(&self) -> &[ParamGroup] {
        &self.frozen
    }

    pub fn is_frozen(&self, id: LayerId) -> bool {
        self.frozen.contains(&self.layers[id.0].group)
    }

    /// Total scalar count over layers accepted by `filter`.
    pub fn param_count(&self, filter: impl Fn(&Layer<T>) -> bool) -> usize {
        self.layers.iter().filter(|l| filter(l)).map(Layer::param_count).sum()
    }

    /// Flattened `(name, tensor)` pairs in a fixed order: for each layer its
    /// kernel (`<layer>.weight`) then its bias (`<layer>.bias`).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor4<T>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), &l.params.kernel),
                    (format!("{}.bias", l.name), &l.params.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.params.kernel, &mut l.params.bias])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    group: l.group,
                    transpose: l.transpose,
                    params: ConvParams {
                        kernel: l.params.kernel.cast(),
                        bias: l.params.bias.cast(),
                        geom: l.params.geom,
                    },
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Gradient of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub kernel: Tensor4<T>,
    pub bias: Tensor4<T>,
}

/// Accumulated parameter gradients, indexed like the store's layers. Frozen
/// or unused layers have no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub(crate) grads: Vec<Option<LayerGrad<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(layers: usize) -> Self {
        ParamGrads {
            grads: vec![None; layers],
        }
    }

    pub fn get(&self, id: LayerId) -> Option<&LayerGrad<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: LayerId, kernel: Tensor4<T>, bias: Tensor4<T>) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(g) => {
                g.kernel.add_assign(&kernel)?;
                g.bias.add_assign(&bias)?;
            }
            slot @ None => *slot = Some(LayerGrad { kernel, bias }),
        }
        Ok(())
    }

    /// Adds another gradient set of the same layout.
    pub fn merge(&mut self, other: &ParamGrads<T>) -> Result<()> {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(LayerId(i), g.kernel.clone(), g.bias.clone())?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for g in self.grads.iter_mut().flatten() {
            g.kernel = g.kernel.scale(k);
            g.bias = g.bias.scale(k);
        }
    }

    /// Name of the first layer whose gradient is not finite.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore<T>) -> Option<&'a str> {
        self.grads.iter().enumerate().find_map(|(i, g)| {
            g.as_ref()
                .filter(|g| !(g.kernel.is_finite() && g.bias.is_finite()))
                .map(|_| store.layers[i].name.as_str())
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.kernel.data().iter().chain(g.bias.data()))
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.add_conv("a", ParamGroup::Cwn, 2, 3, 3, ConvGeom::same(3, 1), Init::He, &mut rng)
            .unwrap();
        assert!(s
            .add_conv("a", ParamGroup::Cwn, 2, 3, 3, ConvGeom::same(3, 1), Init::He, &mut rng)
            .is_err());
    }

    #[test]
    fn counts_and_freezing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let a = s
            .add_conv("a", ParamGroup::Backbone, 2, 3, 3, ConvGeom::same(3, 1), Init::He, &mut rng)
            .unwrap();
        let b = s
            .add_conv_transpose("b", ParamGroup::Residual, 4, 4, 4, ConvGeom::new(2, 1, 1), Init::Zero, &mut rng)
            .unwrap();
        assert_eq!(s.layer(a).param_count(), 3 * 2 * 9 + 3);
        assert_eq!(s.layer(b).params.kernel.max_abs(), 0.0);
        s.set_frozen(&[ParamGroup::Backbone]);
        assert!(s.is_frozen(a) && !s.is_frozen(b));
        let names: Vec<_> = s.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.weight", "a.bias", "b.weight", "b.bias"]);
    }
}
