use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, Graph, LineGraph, NeuralError, ParamStore, Tensor, Var, IMAGE_FEATURE_DIM, NODE_FEATURE_DIM};
use crate::mesh::Vec3;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub input_dim: usize,
    pub image_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self { input_dim: NODE_FEATURE_DIM, image_dim: IMAGE_FEATURE_DIM, hidden: 64, layers: 3 }
    }
}

impl GcnConfig {
    pub fn tensor_count(&self) -> usize {
        4 * self.layers + 2
    }
}

/// Glorot-initialised graph layers and a zero output layer, so an untrained
/// network predicts no displacement.
pub fn init_gcn(cfg: &GcnConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut width = cfg.input_dim;
    for l in 0..cfg.layers {
        store.push(format!("gcn{l}.w_self"), glorot(width, cfg.hidden, &mut rng));
        store.push(format!("gcn{l}.w_neigh"), glorot(width, cfg.hidden, &mut rng));
        store.push(format!("gcn{l}.w_img"), glorot(cfg.image_dim, cfg.hidden, &mut rng));
        store.push(format!("gcn{l}.b"), Tensor::zeros(&[cfg.hidden]));
        width = cfg.hidden;
    }
    store.push("out.w", Tensor::zeros(&[width, 3]));
    store.push("out.b", Tensor::zeros(&[3]));
    store
}

/// Records the network on `g`: per layer
/// `h <- relu(h W_self + (A h) W_neigh + img W_img + b)`, then a linear map
/// to 3 outputs. `params` are the handles of an [`init_gcn`]-shaped store.
pub fn gcn_record(
    g: &mut Graph,
    params: &[Var],
    cfg: &GcnConfig,
    features: Var,
    image: Var,
    adjacency: &Arc<CsrMatrix>,
) -> Result<Var, NeuralError> {
    if params.len() != cfg.tensor_count() {
        return Err(NeuralError::Shape(format!("{} weight tensors for {} layers", params.len(), cfg.layers)));
    }
    let mut h = features;
    for l in 0..cfg.layers {
        let p = &params[4 * l..4 * l + 4];
        let own = g.matmul(h, p[0])?;
        let mean = g.sparse_mul(adjacency.clone(), h)?;
        let neigh = g.matmul(mean, p[1])?;
        let img = g.matmul(image, p[2])?;
        let s = g.add(own, neigh)?;
        let s = g.add(s, img)?;
        let s = g.add_row(s, p[3])?;
        h = g.relu(s);
    }
    let out = g.matmul(h, params[4 * cfg.layers])?;
    g.add_row(out, params[4 * cfg.layers + 1])
}

/// Per-node displacements for `graph`.
pub fn gcn_forward(graph: &LineGraph, weights: &ParamStore, cfg: &GcnConfig) -> Result<Vec<Vec3>, NeuralError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = weights.tensors().map(|t| g.input(t.clone())).collect();
    let f = g.input(graph.features().clone());
    let img = g.input(graph.image_features().clone());
    let out = gcn_record(&mut g, &vars, cfg, f, img, graph.adjacency())?;
    Ok(g.value(out).data().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}
