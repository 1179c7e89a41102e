//! Whole-mesh displacement GCN fitted to a target point set, used by the
//! "+GCN" ablation settings.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    epoch_order, gcn_forward, gcn_record, init_gcn, Adam, AdamConfig, GcnConfig, Graph, LineGraph, NeuralError,
    ParamStore, SilhouetteDescriptor, Tensor, IMAGE_FEATURE_DIM,
};
use crate::mesh::{compute_vertex_normals, Mesh, Vec3};
use crate::template::ClothCategory;

/// Position, vertex normal and category one-hot.
pub const MESH_FEATURE_DIM: usize = 3 + 3 + 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gcn: GcnConfig,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            gcn: GcnConfig { input_dim: MESH_FEATURE_DIM, image_dim: IMAGE_FEATURE_DIM, hidden: 64, layers: 3 },
        }
    }
}

/// A mesh to refine and the points it should cover.
#[derive(Debug, Clone)]
pub struct RefinerSample {
    pub category: ClothCategory,
    pub descriptor: SilhouetteDescriptor,
    pub mesh: Mesh,
    pub target: Vec<Vec3>,
}

/// Vertex graph of a mesh with per-vertex features. Isolated vertices are
/// their own neighbour.
pub fn mesh_graph(mesh: &Mesh, category: ClothCategory, descriptor: &SilhouetteDescriptor) -> Result<LineGraph, NeuralError> {
    let normals = compute_vertex_normals(mesh);
    let n = mesh.vertex_count();
    let mut feats = Vec::with_capacity(n * MESH_FEATURE_DIM);
    let mut img = Vec::with_capacity(n * IMAGE_FEATURE_DIM);
    for (p, nn) in mesh.vertices().iter().zip(&normals) {
        let mut f = [0.0; MESH_FEATURE_DIM];
        f[..3].copy_from_slice(p.as_slice());
        f[3..6].copy_from_slice(nn.as_slice());
        f[6 + category.index()] = 1.0;
        feats.extend_from_slice(&f);
        img.extend(descriptor.image_feature(p));
    }
    let neighbors: Vec<Vec<usize>> =
        mesh.vertex_neighbors().into_iter().enumerate().map(|(i, nb)| if nb.is_empty() { vec![i] } else { nb }).collect();
    LineGraph::from_parts(
        mesh.vertices().to_vec(),
        Tensor::matrix(n, MESH_FEATURE_DIM, feats)?,
        Tensor::matrix(n, IMAGE_FEATURE_DIM, img)?,
        &neighbors,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshRefiner {
    pub config: RefinerConfig,
    pub weights: ParamStore,
}

impl MeshRefiner {
    pub fn untrained(config: RefinerConfig) -> Self {
        Self { weights: init_gcn(&config.gcn, config.seed), config }
    }

    /// The mesh with every vertex moved by the predicted displacement.
    pub fn refine(&self, mesh: &Mesh, category: ClothCategory, descriptor: &SilhouetteDescriptor) -> Result<Mesh, NeuralError> {
        let graph = mesh_graph(mesh, category, descriptor)?;
        let d = gcn_forward(&graph, &self.weights, &self.config.gcn)?;
        Ok(mesh.with_vertices(mesh.vertices().iter().zip(&d).map(|(p, d)| p + d).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.weights.to_bytes(self.config.seed, serde_json::to_value(self.config).expect("config serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let (weights, header) = ParamStore::from_bytes(bytes)?;
        let config: RefinerConfig =
            serde_json::from_value(header.config).map_err(|e| NeuralError::Weights(e.to_string()))?;
        if weights.len() != config.gcn.tensor_count() {
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

/// Adam on the symmetric nearest-neighbour loss between displaced vertices
/// and target points. Returns the refiner and the mean loss per epoch.
pub fn train_mesh_refiner(samples: &[RefinerSample], config: &RefinerConfig) -> Result<(MeshRefiner, Vec<f64>), NeuralError> {
    if samples.is_empty() || samples.iter().any(|s| s.target.is_empty() || s.mesh.is_empty()) {
        return Err(NeuralError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(NeuralError::Shape("batch size 0".into()));
    }
    let graphs = samples
        .iter()
        .map(|s| mesh_graph(&s.mesh, s.category, &s.descriptor))
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = MeshRefiner::untrained(*config);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x2ef1_4e25);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_order(samples.len(), &mut rng).chunks(config.batch_size) {
            let mut sum: Vec<Tensor> = model.weights.tensors().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let graph = &graphs[i];
                let mut g = Graph::new();
                let vars = model.weights.register(&mut g);
                let f = g.input(graph.features().clone());
                let img = g.input(graph.image_features().clone());
                let disp = gcn_record(&mut g, &vars, &config.gcn, f, img, graph.adjacency())?;
                let base = g.input(graph.position_tensor());
                let pred = g.add(base, disp)?;
                let loss = g.line_loss(pred, &samples[i].target)?;
                epoch_loss += g.value(loss).item();
                let mut grads = g.backward(loss)?;
                for (s, v) in sum.iter_mut().zip(&vars) {
                    let gr = grads.take(*v).expect("parameter gradient");
                    s.data_mut().iter_mut().zip(gr.data()).for_each(|(s, g)| *s += g);
                }
            }
            let k = batch.len() as f64;
            sum.iter_mut().for_each(|s| s.data_mut().iter_mut().for_each(|x| *x /= k));
            adam.step(&mut model.weights, &sum);
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok((model, history))
}
