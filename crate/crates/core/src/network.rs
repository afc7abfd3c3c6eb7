//! A minimal feed-forward classifier: dense, relu and flatten layers.
//!
//! All parameters live in one flat buffer (dense layers in order, each as a
//! row-major `inputs x outputs` weight matrix followed by its bias) with a
//! gradient buffer of the same length. A dense layer computes `x W + b`.
//!
//! [`Network::forward`] returns the logits and a [`ForwardCache`] holding the
//! input of every layer. [`Network::backward`] turns a logit gradient into
//! parameter gradients, overwriting the gradient buffer. Every parameter
//! mutation bumps a version counter; a cache taken before the mutation is
//! rejected as stale.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network spec has no layers")]
    EmptySpec,
    #[error("network spec has no dense layer")]
    NoDense,
    #[error("layer {layer}: expects {expected} inputs but receives {got}")]
    Incompatible {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("input has {got} columns, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("logit gradient is {got:?}, forward produced {expected:?}")]
    GradShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("forward cache is stale: parameters changed since the forward pass")]
    StaleCache,
    #[error("forward cache does not match this network")]
    CacheMismatch,
    #[error("network needs at least {needed} layers, has {has}")]
    TooShallow { needed: usize, has: usize },
    #[error("invalid layer spec `{0}` (expected `dense:<in>x<out>`, `relu` or `flatten`)")]
    BadLayerSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One layer in a network description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Relu,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense:{inputs}x{outputs}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NetworkError::BadLayerSpec(s.to_string());
        match s.trim() {
            "relu" => Ok(LayerSpec::Relu),
            "flatten" => Ok(LayerSpec::Flatten),
            other => {
                let dims = other.strip_prefix("dense:").ok_or_else(bad)?;
                let (i, o) = dims.split_once('x').ok_or_else(bad)?;
                let inputs = i.parse().map_err(|_| bad())?;
                let outputs = o.parse().map_err(|_| bad())?;
                if inputs == 0 || outputs == 0 {
                    return Err(bad());
                }
                Ok(LayerSpec::Dense { inputs, outputs })
            }
        }
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = NetworkError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(value: LayerSpec) -> Self {
        value.to_string()
    }
}

/// `dense(input→h0), relu, dense(h0→h1), relu, ..., dense(→output)`.
pub fn mlp_spec(input: usize, hidden: &[usize], output: usize) -> Vec<LayerSpec> {
    let mut spec = Vec::with_capacity(2 * hidden.len() + 1);
    let mut width = input;
    for &h in hidden {
        spec.push(LayerSpec::Dense {
            inputs: width,
            outputs: h,
        });
        spec.push(LayerSpec::Relu);
        width = h;
    }
    spec.push(LayerSpec::Dense {
        inputs: width,
        outputs: output,
    });
    spec
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        offset: usize,
    },
    Relu,
    Flatten,
}

/// Inputs to every layer, recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
    output_shape: (usize, usize),
    version: u64,
    id: u64,
}

impl ForwardCache {
    /// Number of recorded layer inputs (equals the layer count).
    pub fn depth(&self) -> usize {
        self.activations.len()
    }

    /// Input to layer `index`.
    pub fn activation(&self, index: usize) -> &Array2<f64> {
        &self.activations[index]
    }
}

#[derive(Debug)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
    params: Vec<f64>,
    grads: Vec<f64>,
    seed: u64,
    version: u64,
    id: u64,
}

impl Clone for Network {
    /// The clone gets its own identity, so caches from one never validate on the other.
    fn clone(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            layers: self.layers.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            params: self.params.clone(),
            grads: self.grads.clone(),
            seed: self.seed,
            version: self.version,
            id: next_network_id(),
        }
    }
}

fn next_network_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl Network {
    /// Builds a network with He-uniform dense weights (bound `sqrt(6 / fan_in)`)
    /// and zero biases, drawn in layer order from `seed`.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self, NetworkError> {
        let mut net = Self::zeros(specs, seed)?;
        let mut rng = seed::rng(seed);
        for layer in &net.layers {
            if let Layer::Dense {
                inputs,
                outputs,
                offset,
            } = *layer
            {
                let bound = (6.0 / inputs as f64).sqrt();
                for w in &mut net.params[offset..offset + inputs * outputs] {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    /// Same layout as [`Network::init`] with every parameter zero.
    pub fn zeros(specs: &[LayerSpec], seed: u64) -> Result<Self, NetworkError> {
        if specs.is_empty() {
            return Err(NetworkError::EmptySpec);
        }
        let input_dim = specs
            .iter()
            .find_map(|s| match s {
                LayerSpec::Dense { inputs, .. } => Some(*inputs),
                _ => None,
            })
            .ok_or(NetworkError::NoDense)?;
        let mut width = input_dim;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(specs.len());
        for (index, spec) in specs.iter().enumerate() {
            layers.push(match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != width {
                        return Err(NetworkError::Incompatible {
                            layer: index,
                            expected: inputs,
                            got: width,
                        });
                    }
                    let layer = Layer::Dense {
                        inputs,
                        outputs,
                        offset,
                    };
                    offset += inputs * outputs + outputs;
                    width = outputs;
                    layer
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
            });
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input_dim,
            output_dim: width,
            params: vec![0.0; offset],
            grads: vec![0.0; offset],
            seed,
            version: 0,
            id: next_network_id(),
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// Mutable parameters. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Mutable parameters alongside read-only gradients, for optimizers.
    /// Invalidates outstanding forward caches.
    pub fn params_and_grads_mut(&mut self) -> (&mut [f64], &[f64]) {
        self.version += 1;
        (&mut self.params, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    fn dense_view(
        &self,
        inputs: usize,
        outputs: usize,
        offset: usize,
    ) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let w = ArrayView2::from_shape(
            (inputs, outputs),
            &self.params[offset..offset + inputs * outputs],
        )
        .expect("layout computed at construction");
        let b_start = offset + inputs * outputs;
        let b = ArrayView2::from_shape((1, outputs), &self.params[b_start..b_start + outputs])
            .expect("layout computed at construction");
        (w, b)
    }

    fn apply(&self, layer: &Layer, x: &Array2<f64>) -> Array2<f64> {
        match *layer {
            Layer::Dense {
                inputs,
                outputs,
                offset,
            } => {
                let (w, b) = self.dense_view(inputs, outputs, offset);
                x.dot(&w) + b
            }
            Layer::Relu => x.mapv(|v| v.max(0.0)),
            Layer::Flatten => x.clone(),
        }
    }

    fn check_input(&self, inputs: &ArrayView2<'_, f64>) -> Result<(), NetworkError> {
        if inputs.ncols() != self.input_dim {
            return Err(NetworkError::InputWidth {
                expected: self.input_dim,
                got: inputs.ncols(),
            });
        }
        Ok(())
    }

    /// Logits for `inputs` (N x D) plus the cache needed by [`Network::backward`].
    pub fn forward(
        &self,
        inputs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, ForwardCache), NetworkError> {
        self.check_input(&inputs)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            let next = self.apply(layer, &x);
            activations.push(x);
            x = next;
        }
        let cache = ForwardCache {
            activations,
            output_shape: x.dim(),
            version: self.version,
            id: self.id,
        };
        Ok((x, cache))
    }

    /// Logits only.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, NetworkError> {
        self.check_input(&inputs)?;
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            x = self.apply(layer, &x);
        }
        Ok(x)
    }

    /// Activations feeding the final layer.
    pub fn penultimate(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, NetworkError> {
        if self.layers.len() < 2 {
            return Err(NetworkError::TooShallow {
                needed: 2,
                has: self.layers.len(),
            });
        }
        self.check_input(&inputs)?;
        let mut x = inputs.to_owned();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = self.apply(layer, &x);
        }
        Ok(x)
    }

    /// Backpropagates `logit_grad` and overwrites the gradient buffer with
    /// the parameter gradients. Parameters are not touched.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        logit_grad: ArrayView2<'_, f64>,
    ) -> Result<(), NetworkError> {
        if cache.id != self.id || cache.activations.len() != self.layers.len() {
            return Err(NetworkError::CacheMismatch);
        }
        if cache.version != self.version {
            return Err(NetworkError::StaleCache);
        }
        if logit_grad.dim() != cache.output_shape {
            return Err(NetworkError::GradShape {
                expected: cache.output_shape,
                got: logit_grad.dim(),
            });
        }

        let mut grads = std::mem::take(&mut self.grads);
        let mut upstream = logit_grad.to_owned();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.activations[index];
            match *layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    offset,
                } => {
                    let (w, _) = self.dense_view(inputs, outputs, offset);
                    let dw = x.t().dot(&upstream);
                    let db = upstream.sum_axis(Axis(0));
                    grads[offset..offset + inputs * outputs]
                        .iter_mut()
                        .zip(dw.iter())
                        .for_each(|(g, v)| *g = *v);
                    grads[offset + inputs * outputs..offset + inputs * outputs + outputs]
                        .iter_mut()
                        .zip(db.iter())
                        .for_each(|(g, v)| *g = *v);
                    if index > 0 {
                        upstream = upstream.dot(&w.t());
                    }
                }
                Layer::Relu => {
                    upstream.zip_mut_with(x, |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                Layer::Flatten => {}
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Writes the checkpoint container: the magic bytes `HCOTCKPT`, a
    /// little-endian `u32` header length, a JSON header, then every parameter
    /// as a little-endian `f64` in layout order.
    pub fn write_checkpoint<W: Write>(
        &self,
        mut writer: W,
        epoch: usize,
    ) -> Result<(), NetworkError> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            layers: self.specs.clone(),
            seed: self.seed,
            epoch,
            param_count: self.params.len(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        writer.write_all(CHECKPOINT_MAGIC)?;
        writer.write_all(&(json.len() as u32).to_le_bytes())?;
        writer.write_all(&json)?;
        for p in &self.params {
            writer.write_all(&p.to_le_bytes())?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Network::write_checkpoint`]; returns the
    /// network and the recorded epoch.
    pub fn read_checkpoint<R: Read>(mut reader: R) -> Result<(Self, usize), NetworkError> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetworkError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        reader.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        reader.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(NetworkError::Checkpoint(format!(
                "unsupported format `{}`",
                header.format
            )));
        }
        let mut net = Self::zeros(&header.layers, header.seed)?;
        if net.params.len() != header.param_count {
            return Err(NetworkError::Checkpoint(format!(
                "header declares {} parameters, layers need {}",
                header.param_count,
                net.params.len()
            )));
        }
        let mut buf = [0u8; 8];
        for p in &mut net.params {
            reader.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        if reader.read(&mut buf)? != 0 {
            return Err(NetworkError::Checkpoint(
                "trailing bytes after parameters".into(),
            ));
        }
        Ok((net, header.epoch))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HCOTCKPT";
const CHECKPOINT_FORMAT: &str = "hcot-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    layers: Vec<LayerSpec>,
    seed: u64,
    epoch: usize,
    param_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn small_spec() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                inputs: 8,
                outputs: 16,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 16,
                outputs: 4,
            },
        ]
    }

    #[test]
    fn parameter_count_and_output_width() {
        let net = Network::init(&small_spec(), 3).unwrap();
        assert_eq!(net.parameter_count(), 8 * 16 + 16 + 16 * 4 + 4);
        assert_eq!(net.parameter_count(), 212);
        let x = Array2::<f64>::ones((5, 8));
        assert_eq!(net.predict(x.view()).unwrap().dim(), (5, 4));
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::init(&small_spec(), 11).unwrap();
        let b = Network::init(&small_spec(), 11).unwrap();
        let c = Network::init(&small_spec(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.params()[..128].iter().all(|w| w.abs() < bound));
        assert!(a.params()[128..144].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_and_identity_forward() {
        let net = Network::zeros(&small_spec(), 0).unwrap();
        let x = array![[1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 1.0, 1.0]];
        assert!(net.predict(x.view()).unwrap().iter().all(|&v| v == 0.0));

        let mut id = Network::zeros(
            &[LayerSpec::Dense {
                inputs: 3,
                outputs: 3,
            }],
            0,
        )
        .unwrap();
        for i in 0..3 {
            id.params_mut()[i * 3 + i] = 1.0;
        }
        let x = array![[0.5, -1.0, 2.0], [3.0, 0.0, -4.0]];
        assert_eq!(id.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_cache_has_full_depth() {
        let net = Network::init(&small_spec(), 5).unwrap();
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i as f64 - j as f64) * 0.1);
        let (a, cache) = net.forward(x.view()).unwrap();
        let (b, _) = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.depth(), 3);
        assert_eq!(cache.activation(0), &x);
    }

    #[test]
    fn single_dense_weight_gradient_is_outer_product() {
        let mut net = Network::init(
            &[LayerSpec::Dense {
                inputs: 3,
                outputs: 2,
            }],
            1,
        )
        .unwrap();
        let x = array![[1.0, 2.0, -1.0]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let dy = array![[0.5, -2.0]];
        net.backward(&cache, dy.view()).unwrap();
        let expected = [0.5, -2.0, 1.0, -4.0, -0.5, 2.0, 0.5, -2.0];
        assert_eq!(net.grads(), &expected);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let mut net = Network::init(&small_spec(), 9).unwrap();
        let before = net.params().to_vec();
        let x = Array2::from_elem((4, 8), 0.3);
        let (_, cache) = net.forward(x.view()).unwrap();
        net.backward(&cache, Array2::zeros((4, 4)).view()).unwrap();
        assert!(net.grads().iter().all(|&g| g == 0.0));
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn stale_and_foreign_caches_are_rejected() {
        let mut net = Network::init(&small_spec(), 9).unwrap();
        let other = Network::init(&small_spec(), 9).unwrap();
        let x = Array2::from_elem((2, 8), 0.3);
        let (_, cache) = net.forward(x.view()).unwrap();
        let (_, foreign) = other.forward(x.view()).unwrap();
        let dy = Array2::zeros((2, 4));
        assert!(matches!(
            net.backward(&foreign, dy.view()),
            Err(NetworkError::CacheMismatch)
        ));
        assert!(matches!(
            net.backward(&cache, Array2::zeros((2, 3)).view()),
            Err(NetworkError::GradShape { .. })
        ));
        net.params_mut()[0] += 1.0;
        assert!(matches!(
            net.backward(&cache, dy.view()),
            Err(NetworkError::StaleCache)
        ));
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(
            Network::init(&[], 0),
            Err(NetworkError::EmptySpec)
        ));
        assert!(matches!(
            Network::init(&[LayerSpec::Relu], 0),
            Err(NetworkError::NoDense)
        ));
        let bad = [
            LayerSpec::Dense {
                inputs: 4,
                outputs: 5,
            },
            LayerSpec::Dense {
                inputs: 6,
                outputs: 2,
            },
        ];
        assert!(matches!(
            Network::init(&bad, 0),
            Err(NetworkError::Incompatible {
                layer: 1,
                expected: 6,
                got: 5
            })
        ));
        let net = Network::init(&small_spec(), 0).unwrap();
        assert!(matches!(
            net.forward(Array2::zeros((1, 7)).view()),
            Err(NetworkError::InputWidth {
                expected: 8,
                got: 7
            })
        ));
        let shallow = Network::init(
            &[LayerSpec::Dense {
                inputs: 2,
                outputs: 2,
            }],
            0,
        )
        .unwrap();
        assert!(matches!(
            shallow.penultimate(Array2::zeros((1, 2)).view()),
            Err(NetworkError::TooShallow { .. })
        ));
    }

    #[test]
    fn layer_spec_strings() {
        for s in ["dense:8x16", "relu", "flatten"] {
            assert_eq!(s.parse::<LayerSpec>().unwrap().to_string(), s);
        }
        for s in ["dense:8", "dense:0x3", "conv", "dense:ax2"] {
            assert!(s.parse::<LayerSpec>().is_err(), "{s}");
        }
        assert_eq!(
            mlp_spec(4, &[], 3),
            vec![LayerSpec::Dense {
                inputs: 4,
                outputs: 3
            }]
        );
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let spec = [
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 8,
                outputs: 16,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 16,
                outputs: 4,
            },
        ];
        let net = Network::init(&spec, 21).unwrap();
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes, 7).unwrap();
        let (back, epoch) = Network::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(back.params(), net.params());
        assert_eq!(back.specs(), net.specs());
        assert_eq!(back.seed(), 21);

        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Network::read_checkpoint(truncated.as_slice()).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Network::read_checkpoint(trailing.as_slice()).is_err());
        bytes[0] = b'X';
        assert!(Network::read_checkpoint(bytes.as_slice()).is_err());
    }
}
