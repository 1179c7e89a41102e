//! Occupancy MLP conditioned on a silhouette code.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_order, glorot, Adam, AdamConfig, Graph, NeuralError, ParamStore, Tensor, Var, DESCRIPTOR_DIM};
use crate::implicit::{OccupancyField, Provenance};
use crate::mesh::Vec3;

/// Frequencies `2^k * pi`, `k < FOURIER_BANDS`.
pub const FOURIER_BANDS: usize = 4;
const POINT_DIM: usize = 3 + 6 * FOURIER_BANDS;

/// `p` followed by `sin` and `cos` of each coordinate at every band.
pub fn fourier_features(p: &Vec3) -> [f64; POINT_DIM] {
    let mut f = [0.0; POINT_DIM];
    f[..3].copy_from_slice(p.as_slice());
    for k in 0..FOURIER_BANDS {
        let w = std::f64::consts::PI * (1u32 << k) as f64;
        for c in 0..3 {
            let (s, co) = (w * p[c]).sin_cos();
            f[3 + 6 * k + c] = s;
            f[3 + 6 * k + 3 + c] = co;
        }
    }
    f
}

/// Points with 0/1 inside labels and the code of the shape they came from.
#[derive(Debug, Clone)]
pub struct OccupancySample {
    pub code: Vec<f64>,
    pub points: Vec<Vec3>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub layers: usize,
    pub code_dim: usize,
    pub seed: u64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 256, epochs: 60, hidden: 64, layers: 3, code_dim: DESCRIPTOR_DIM, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyNet {
    pub config: OccupancyConfig,
    pub weights: ParamStore,
}

fn relu_layer(x: &[f64], w: &Tensor, b: &Tensor, relu: bool, out: &mut Vec<f64>) {
    let (rows, cols) = (w.rows(), w.cols());
    out.clear();
    out.extend_from_slice(b.data());
    for (i, xi) in x.iter().enumerate().take(rows) {
        if *xi != 0.0 {
            for (o, wij) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
                *o += xi * wij;
            }
        }
    }
    if relu {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

impl OccupancyNet {
    pub fn untrained(config: OccupancyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = ParamStore::new();
        let mut width = POINT_DIM + config.code_dim;
        for l in 0..config.layers {
            weights.push(format!("mlp{l}.w"), glorot(width, config.hidden, &mut rng));
            weights.push(format!("mlp{l}.b"), Tensor::zeros(&[config.hidden]));
            width = config.hidden;
        }
        weights.push("out.w", glorot(width, 1, &mut rng));
        weights.push("out.b", Tensor::zeros(&[1]));
        Self { config, weights }
    }

    /// Network input: Fourier features of each point followed by the code.
    pub fn input_rows(&self, points: &[Vec3], code: &[f64]) -> Result<Tensor, NeuralError> {
        if code.len() != self.config.code_dim {
            return Err(NeuralError::Shape(format!("code of length {}, expected {}", code.len(), self.config.code_dim)));
        }
        let mut data = Vec::with_capacity(points.len() * (POINT_DIM + code.len()));
        for p in points {
            data.extend_from_slice(&fourier_features(p));
            data.extend_from_slice(code);
        }
        Tensor::matrix(points.len(), POINT_DIM + code.len(), data)
    }

    /// Records the forward pass on `g` and returns the logits.
    pub fn record(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, NeuralError> {
        let mut h = x;
        for l in 0..self.config.layers {
            let z = g.matmul(h, vars[2 * l])?;
            let z = g.add_row(z, vars[2 * l + 1])?;
            h = g.relu(z);
        }
        let z = g.matmul(h, vars[2 * self.config.layers])?;
        g.add_row(z, vars[2 * self.config.layers + 1])
    }

    /// Logits for a batch of points sharing one code.
    pub fn logits(&self, points: &[Vec3], code: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.weights.tensors().map(|t| g.input(t.clone())).collect();
        let x = g.input(self.input_rows(points, code)?);
        let out = self.record(&mut g, &vars, x)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Fraction of points whose label the net reproduces at threshold 0.5.
    pub fn accuracy(&self, points: &[Vec3], labels: &[f64], code: &[f64]) -> Result<f64, NeuralError> {
        let logits = self.logits(points, code)?;
        let hits = logits.iter().zip(labels).filter(|(z, y)| (**z > 0.0) == (**y > 0.5)).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// The net as an occupancy field for one shape code.
    pub fn field(self: &Arc<Self>, code: &[f64]) -> Result<ConditionedOccupancy, NeuralError> {
        let w0 = self.weights.get("mlp0.w").ok_or_else(|| NeuralError::Weights("missing first layer".into()))?;
        if code.len() != self.config.code_dim || w0.rows() != POINT_DIM + code.len() {
            return Err(NeuralError::Shape(format!("code of length {} for a {:?} first layer", code.len(), w0.shape())));
        }
        let mut code_bias = Vec::new();
        let zeros = vec![0.0; POINT_DIM];
        let x: Vec<f64> = zeros.iter().chain(code).copied().collect();
        relu_layer(&x, w0, self.weights.get("mlp0.b").expect("first bias"), false, &mut code_bias);
        let first = Tensor::matrix(POINT_DIM, w0.cols(), w0.data()[..POINT_DIM * w0.cols()].to_vec())?;
        Ok(ConditionedOccupancy { net: Arc::clone(self), first, code_bias: Tensor::new(vec![code_bias.len()], code_bias)? })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.weights.to_bytes(self.config.seed, serde_json::to_value(self.config).expect("config serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let (weights, header) = ParamStore::from_bytes(bytes)?;
        let config: OccupancyConfig =
            serde_json::from_value(header.config).map_err(|e| NeuralError::Weights(e.to_string()))?;
        if weights.len() != 2 * config.layers + 2 {
            return Err(NeuralError::Weights("tensor count does not match the layer config".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A trained net with its code folded into the first layer's bias.
#[derive(Debug, Clone)]
pub struct ConditionedOccupancy {
    net: Arc<OccupancyNet>,
    first: Tensor,
    code_bias: Tensor,
}

impl ConditionedOccupancy {
    pub fn logit(&self, p: &Vec3) -> f64 {
        let layers = self.net.config.layers;
        let w = &self.net.weights;
        let tensors: Vec<&Tensor> = w.tensors().collect();
        let mut h = Vec::new();
        relu_layer(&fourier_features(p), &self.first, &self.code_bias, true, &mut h);
        let mut next = Vec::new();
        for l in 1..layers {
            relu_layer(&h, tensors[2 * l], tensors[2 * l + 1], true, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        relu_layer(&h, tensors[2 * layers], tensors[2 * layers + 1], false, &mut next);
        next[0]
    }
}

impl OccupancyField for ConditionedOccupancy {
    fn evaluate(&self, p: &Vec3) -> f64 {
        let z = self.logit(p);
        1.0 / (1.0 + (-z).exp())
    }

    fn provenance(&self) -> Provenance {
        Provenance::Trained
    }
}

/// Minibatch Adam on mean binary cross-entropy. Returns the net and the
/// mean training loss of every epoch.
pub fn train_occupancy(samples: &[OccupancySample], config: &OccupancyConfig) -> Result<(OccupancyNet, Vec<f64>), NeuralError> {
    let total: usize = samples.iter().map(|s| s.points.len()).sum();
    if total == 0 {
        return Err(NeuralError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(NeuralError::Shape("batch size 0".into()));
    }
    for s in samples {
        if s.points.len() != s.labels.len() {
            return Err(NeuralError::Shape(format!("{} points, {} labels", s.points.len(), s.labels.len())));
        }
        if s.code.len() != config.code_dim {
            return Err(NeuralError::Shape(format!("code of length {}, expected {}", s.code.len(), config.code_dim)));
        }
        if let Some(&y) = s.labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(NeuralError::Label(y));
        }
    }
    let index: Vec<(usize, usize)> =
        samples.iter().enumerate().flat_map(|(s, smp)| (0..smp.points.len()).map(move |i| (s, i))).collect();
    let width = POINT_DIM + config.code_dim;
    let mut net = OccupancyNet::untrained(*config);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &net.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0cc0_0cc0);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let order = epoch_order(index.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * width);
            let mut y = Vec::with_capacity(batch.len());
            for &k in batch {
                let (s, i) = index[k];
                x.extend_from_slice(&fourier_features(&samples[s].points[i]));
                x.extend_from_slice(&samples[s].code);
                y.push(samples[s].labels[i]);
            }
            let mut g = Graph::new();
            let vars = net.weights.register(&mut g);
            let xv = g.input(Tensor::matrix(batch.len(), width, x)?);
            let logits = net.record(&mut g, &vars, xv)?;
            let loss = g.bce_with_logits(logits, &y)?;
            epoch_loss += g.value(loss).item() * batch.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|v| grads.take(*v).expect("parameter gradient")).collect();
            adam.step(&mut net.weights, &grads);
        }
        history.push(epoch_loss / index.len() as f64);
    }
    Ok((net, history))
}
