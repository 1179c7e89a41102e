//! Small neural toolkit: tape autodiff, graph convolutions over feature-line
//! loops, a silhouette pyramid encoder and the two training loops.

mod gcn;
mod lines;
mod occupancy;
mod refiner;
mod silhouette;
mod tape;
mod tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gcn::{gcn_forward, gcn_record, init_gcn, GcnConfig};
pub use lines::{
    loss_history_csv, node_features, train_line_regressor, LineGraph, LineRegressor, LineSample, LineTrainConfig,
    LossRecord, NODE_FEATURE_DIM,
};
pub use occupancy::{
    fourier_features, train_occupancy, ConditionedOccupancy, OccupancyConfig, OccupancyNet, OccupancySample,
    FOURIER_BANDS,
};
pub use refiner::{mesh_graph, train_mesh_refiner, MeshRefiner, RefinerConfig, RefinerSample, MESH_FEATURE_DIM};
pub use silhouette::{SilhouetteDescriptor, DESCRIPTOR_DIM, IMAGE_FEATURE_DIM, PYRAMID_CELLS, SILHOUETTE_SIZE};
pub use tape::{gradient_check, Gradients, Graph, Var};
pub use tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const WEIGHTS_MAGIC: &[u8; 8] = b"GARMWTS1";

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {0} is not 0 or 1")]
    Label(f64),
    #[error("bad weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Line(#[from] crate::feature_line::LineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t.with_grad(true)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Records every tensor as a trainable leaf, in store order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors().map(|t| g.param(t.clone())).collect()
    }

    /// Flat blob: magic, little-endian u64 header length, JSON header, then
    /// every tensor's values as little-endian f64 in store order.
    pub fn to_bytes(&self, seed: u64, config: serde_json::Value) -> Vec<u8> {
        let header = WeightsHeader {
            layers: self.entries.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            seed,
            config,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.parameter_count() * 8);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, WeightsHeader), NeuralError> {
        let bad = |m: &str| NeuralError::Weights(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: WeightsHeader = serde_json::from_slice(body).map_err(|e| NeuralError::Weights(e.to_string()))?;
        let mut pos = 16 + hlen;
        let mut store = ParamStore::new();
        for (name, shape) in &header.layers {
            let n: usize = shape.iter().product();
            let chunk = bytes.get(pos..pos + n * 8).ok_or_else(|| bad("truncated data"))?;
            let data = chunk.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.push(name.clone(), Tensor::new(shape.clone(), data)?);
            pos += n * 8;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((store, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub layers: Vec<(String, Vec<usize>)>,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Uniform Glorot initialisation of a `rows x cols` matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Deterministic shuffle of `0..n` for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests;
