use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, LayerCache, LayerKind};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Ordered parameter tensors with a gradient accumulator each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor2) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.push(Param { name, value, grad });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Flat copy of all parameter values, in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.as_slice().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice().iter().copied())
            .collect()
    }

    fn split(&mut self, range: std::ops::Range<usize>) -> (Vec<&Tensor2>, Vec<&mut Tensor2>) {
        self.params[range]
            .iter_mut()
            .map(|p| (&p.value, &mut p.grad))
            .unzip()
    }
}

/// Activations recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// ReLU and max-pool decisions across the whole network.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in &self.layers {
            c.pattern(&mut out);
        }
        out
    }
}

/// A feed-forward stack of layers with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_shape: (usize, usize),
    layers: Vec<LayerKind>,
    /// Index range into `params` for each layer.
    spans: Vec<(usize, usize)>,
    params: ParamStore,
}

impl Network {
    /// Assembles the layers with all parameters set to zero.
    pub fn zeros(input_shape: (usize, usize), layers: Vec<LayerKind>) -> Result<Self> {
        let mut shape = input_shape;
        let mut params = ParamStore::default();
        let mut spans = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(shape).map_err(|e| match e {
                Error::Shape {
                    context,
                    expected,
                    actual,
                } => Error::Shape {
                    context: format!("layer {i}: {context}"),
                    expected,
                    actual,
                },
                other => other,
            })?;
            let start = params.len();
            for ps in layer.param_shapes() {
                params.push(
                    format!("{i}.{}.{}", layer.name(), ps.suffix),
                    Tensor2::zeros(ps.rows, ps.cols),
                )?;
            }
            spans.push((start, params.len()));
        }
        Ok(Self {
            input_shape,
            layers,
            spans,
            params,
        })
    }

    /// Uniform `+-sqrt(6 / (rows + cols))` for weight matrices, zero biases.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (layer, &(start, _)) in self.layers.iter().zip(&self.spans) {
            for (k, ps) in layer.param_shapes().iter().enumerate() {
                let value = &mut self.params.get_mut(start + k).value;
                if ps.is_bias {
                    value.fill(0.0);
                } else {
                    let limit = (6.0 / (ps.rows + ps.cols) as f64).sqrt();
                    for v in value.as_mut_slice() {
                        *v = rng.random_range(-limit..=limit);
                    }
                }
            }
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let mut shape = self.input_shape;
        for l in &self.layers {
            shape = l.output_shape(shape).expect("validated at construction");
        }
        shape
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    /// Index range into the parameter store owned by layer `i`.
    pub fn layer_span(&self, i: usize) -> (usize, usize) {
        self.spans[i]
    }

    pub fn forward(&self, input: &Tensor2) -> Result<(Vec<f64>, ForwardCache)> {
        if input.shape() != self.input_shape {
            return Err(Error::shape(
                "network input",
                format!("{}x{}", self.input_shape.0, self.input_shape.1),
                format!("{}x{}", input.rows(), input.cols()),
            ));
        }
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, (layer, &(s, e))) in self.layers.iter().zip(&self.spans).enumerate() {
            let params: Vec<&Tensor2> = (s..e).map(|k| &self.params.get(k).value).collect();
            let (y, cache) = layers::forward(layer, &params, x);
            if !y.is_finite() {
                return Err(Error::NumericOverflow {
                    layer: i,
                    kind: layer.name().to_string(),
                });
            }
            caches.push(cache);
            x = y;
        }
        Ok((x.into_vec(), ForwardCache { layers: caches }))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, input: &Tensor2) -> Result<Vec<f64>> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients for `output_grad` (dLoss/dOutput) and
    /// returns dLoss/dInput.
    pub fn backward(&mut self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Tensor2> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "cache has {} layers, network has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let (orows, ocols) = self.output_shape();
        let mut g = Tensor2::new(orows, ocols, output_grad.to_vec())
            .map_err(|_| Error::shape("output gradient", orows * ocols, output_grad.len()))?;
        for i in (0..self.layers.len()).rev() {
            let (s, e) = self.spans[i];
            let (values, mut grads) = self.params.split(s..e);
            g = layers::backward(&self.layers[i], &values, &mut grads, &cache.layers[i], &g)?;
        }
        Ok(g)
    }

    /// Overwrites all parameter values from a flat slice in store order.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count_params() {
            return Err(Error::shape(
                "flat parameters",
                self.count_params(),
                flat.len(),
            ));
        }
        let mut off = 0;
        for p in self.params.iter_mut() {
            let n = p.value.len();
            p.value.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::layers::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(inputs: usize, units: usize, activation: Activation) -> LayerKind {
        LayerKind::Dense {
            inputs,
            units,
            activation,
        }
    }

    #[test]
    fn dense_sum_by_substitution() {
        let mut net = Network::zeros((1, 2), vec![dense(2, 1, Activation::Linear)]).unwrap();
        net.set_flat_values(&[1.0, 1.0, 0.0]).unwrap();
        let y = net.predict(&Tensor2::row(vec![3.0, 4.0])).unwrap();
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let layers = vec![
            LayerKind::Flatten,
            dense(80, 16, Activation::Relu),
            dense(16, 3, Activation::Linear),
        ];
        let net = Network::zeros((40, 2), layers).unwrap();
        let x = Tensor2::from_fn(40, 2, |r, c| (r as f64).sin() + c as f64);
        assert_eq!(net.predict(&x).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_dense_gradient_by_hand() {
        // y = w x, loss = (y - t)^2 / 2, dL/dw = (y - t) x
        let mut net = Network::zeros((1, 1), vec![dense(1, 1, Activation::Linear)]).unwrap();
        net.set_flat_values(&[1.5, 0.0]).unwrap();
        let (x, t) = (2.0, 1.0);
        let (y, cache) = net.forward(&Tensor2::row(vec![x])).unwrap();
        net.backward(&cache, &[y[0] - t]).unwrap();
        assert_eq!(net.params().get(0).grad.as_slice(), &[(3.0 - t) * x]);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut net = Network::zeros(
            (6, 1),
            vec![
                LayerKind::Gru {
                    inputs: 1,
                    units: 3,
                    ret: crate::nnkit::ReturnMode::Last,
                },
                dense(3, 3, Activation::Linear),
            ],
        )
        .unwrap();
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor2::from_fn(6, 1, |r, _| r as f64 * 0.1);
        let (_, cache) = net.forward(&x).unwrap();
        net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(net.params().flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_wrong_input_shape_and_wrong_cache() {
        let mut net = Network::zeros(
            (4, 1),
            vec![LayerKind::Flatten, dense(4, 3, Activation::Linear)],
        )
        .unwrap();
        assert!(matches!(
            net.forward(&Tensor2::zeros(5, 1)),
            Err(Error::Shape { .. })
        ));
        let other = Network::zeros((4, 1), vec![LayerKind::Flatten]).unwrap();
        let (_, cache) = other.forward(&Tensor2::zeros(4, 1)).unwrap();
        assert!(matches!(
            net.backward(&cache, &[1.0; 3]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn overflow_names_the_layer() {
        let mut net = Network::zeros((1, 1), vec![dense(1, 1, Activation::Linear)]).unwrap();
        net.set_flat_values(&[f64::MAX, 0.0]).unwrap();
        let err = net.predict(&Tensor2::row(vec![10.0])).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { layer: 0, .. }));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = Network::zeros(
            (10, 2),
            vec![
                LayerKind::Lstm {
                    inputs: 2,
                    units: 4,
                    ret: crate::nnkit::ReturnMode::Last,
                },
                dense(4, 3, Activation::Linear),
            ],
        )
        .unwrap();
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(9));
        let x = Tensor2::from_fn(10, 2, |r, c| ((r * 3 + c) as f64).cos());
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }
}
