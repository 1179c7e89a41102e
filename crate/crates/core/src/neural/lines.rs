//! Feature-line graphs and the displacement regressor trained on them.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    epoch_order, gcn_forward, gcn_record, init_gcn, Adam, AdamConfig, GcnConfig, Graph, NeuralError, ParamStore,
    SilhouetteDescriptor, Tensor, IMAGE_FEATURE_DIM,
};
use crate::feature_line::{centroid, fitting_terms, FeatureLineAnnotation, LineId, PredictedLine, Side, LAMBDA_EDGE};
use crate::mesh::Vec3;
use crate::sparse::CsrMatrix;
use crate::template::ClothCategory;

/// Position, unit direction and distance from the line centroid, kind, side
/// and category one-hots.
pub const NODE_FEATURE_DIM: usize = 3 + 4 + 8 + 3 + 10;

pub fn node_features(p: &Vec3, line_centroid: &Vec3, id: LineId, category: ClothCategory) -> [f64; NODE_FEATURE_DIM] {
    let mut f = [0.0; NODE_FEATURE_DIM];
    let d = p - line_centroid;
    f[..3].copy_from_slice(p.as_slice());
    let r = d.norm();
    if r > 0.0 {
        f[3..6].copy_from_slice((d / r).as_slice());
    }
    f[6] = r;
    f[7 + id.kind.index()] = 1.0;
    let side = match id.side {
        Side::Left => 0,
        Side::Right => 1,
        Side::Center => 2,
    };
    f[15 + side] = 1.0;
    f[18 + category.index()] = 1.0;
    f
}

/// All vertices of a set of closed lines as one graph; each vertex is joined
/// to its two loop neighbours.
#[derive(Debug, Clone)]
pub struct LineGraph {
    positions: Vec<Vec3>,
    features: Tensor,
    image_features: Tensor,
    adjacency: Arc<CsrMatrix>,
    lines: Vec<(LineId, usize, usize)>,
}

impl LineGraph {
    pub fn new(lines: &[PredictedLine], category: ClothCategory, descriptor: &SilhouetteDescriptor) -> Result<Self, NeuralError> {
        let mut positions = Vec::new();
        let mut feats = Vec::new();
        let mut image = Vec::new();
        let mut neighbors = Vec::new();
        let mut spans = Vec::new();
        for l in lines {
            let n = l.positions.len();
            if n < 3 {
                return Err(crate::feature_line::LineError::ShortLoop(n).into());
            }
            let start = positions.len();
            let c = centroid(&l.positions);
            for (i, p) in l.positions.iter().enumerate() {
                feats.extend_from_slice(&node_features(p, &c, l.id, category));
                image.extend(descriptor.image_feature(p));
                neighbors.push(vec![start + (i + n - 1) % n, start + (i + 1) % n]);
                positions.push(*p);
            }
            spans.push((l.id, start, start + n));
        }
        if positions.is_empty() {
            return Err(NeuralError::Shape("no feature lines".into()));
        }
        let n = positions.len();
        let features = Tensor::matrix(n, NODE_FEATURE_DIM, feats)?;
        let image_features = Tensor::matrix(n, IMAGE_FEATURE_DIM, image)?;
        let mut g = Self::from_parts(positions, features, image_features, &neighbors)?;
        g.lines = spans;
        Ok(g)
    }

    /// Graph from explicit per-node data; `neighbors[i]` lists the nodes
    /// averaged into node `i`.
    pub fn from_parts(
        positions: Vec<Vec3>,
        features: Tensor,
        image_features: Tensor,
        neighbors: &[Vec<usize>],
    ) -> Result<Self, NeuralError> {
        let n = positions.len();
        if features.rows() != n || image_features.rows() != n || neighbors.len() != n {
            return Err(NeuralError::Shape(format!(
                "{n} nodes, {} feature rows, {} image rows, {} neighbour lists",
                features.rows(),
                image_features.rows(),
                neighbors.len()
            )));
        }
        let mut trip = Vec::new();
        for (i, nb) in neighbors.iter().enumerate() {
            if nb.is_empty() || nb.iter().any(|&j| j >= n) {
                return Err(NeuralError::Shape(format!("bad neighbours for node {i}")));
            }
            trip.extend(nb.iter().map(|&j| (i, j, 1.0 / nb.len() as f64)));
        }
        Ok(Self {
            positions,
            features,
            image_features,
            adjacency: Arc::new(CsrMatrix::from_triplets(n, n, &trip)),
            lines: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn image_features(&self) -> &Tensor {
        &self.image_features
    }

    /// Row-normalised adjacency (mean over neighbours).
    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.node_count()).map(|r| self.adjacency.row(r).count()).collect()
    }

    /// `(id, first node, end node)` per line.
    pub fn lines(&self) -> &[(LineId, usize, usize)] {
        &self.lines
    }

    /// Node positions moved by `displacements`, split back into lines.
    pub fn displaced(&self, displacements: &[Vec3]) -> Vec<PredictedLine> {
        self.lines
            .iter()
            .map(|&(id, s, e)| PredictedLine {
                id,
                positions: (s..e).map(|i| self.positions[i] + displacements[i]).collect(),
            })
            .collect()
    }

    pub(super) fn position_tensor(&self) -> Tensor {
        Tensor::matrix(self.node_count(), 3, self.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
            .expect("non-empty graph")
    }
}

/// One training item: the category's lines on the posed template, the
/// silhouette and the matching annotations.
#[derive(Debug, Clone)]
pub struct LineSample {
    pub category: ClothCategory,
    pub descriptor: SilhouetteDescriptor,
    pub base_lines: Vec<PredictedLine>,
    pub annotations: Vec<FeatureLineAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_edge: f64,
    pub seed: u64,
    pub gcn: GcnConfig,
}

impl Default for LineTrainConfig {
    fn default() -> Self {
        Self { lr: 5e-5, batch_size: 8, epochs: 50, lambda_edge: LAMBDA_EDGE, seed: 0, gcn: GcnConfig::default() }
    }
}

/// Dataset means of the summed per-line terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_line: f64,
    pub l_edge: f64,
    pub total: f64,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("epoch,L_line,L_edge,total\n");
    for r in history {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.l_line, r.l_edge, r.total));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineRegressor {
    pub config: LineTrainConfig,
    pub weights: ParamStore,
}

struct Prepared {
    graph: LineGraph,
    targets: Vec<Vec<Vec3>>,
}

fn prepare(s: &LineSample) -> Result<Prepared, NeuralError> {
    let graph = LineGraph::new(&s.base_lines, s.category, &s.descriptor)?;
    let targets = graph
        .lines()
        .iter()
        .map(|(id, _, _)| {
            s.annotations
                .iter()
                .find(|a| a.id() == *id)
                .map(|a| a.points.points().to_vec())
                .ok_or_else(|| crate::feature_line::LineError::MissingAnnotation(id.to_string()).into())
        })
        .collect::<Result<_, NeuralError>>()?;
    fitting_terms(&graph.displaced(&vec![Vec3::zeros(); graph.node_count()]), &s.annotations)?;
    Ok(Prepared { graph, targets })
}

impl LineRegressor {
    pub fn untrained(config: LineTrainConfig) -> Self {
        Self { weights: init_gcn(&config.gcn, config.seed), config }
    }

    /// Regressed lines for the given posed-template lines.
    pub fn predict(
        &self,
        category: ClothCategory,
        descriptor: &SilhouetteDescriptor,
        base_lines: &[PredictedLine],
    ) -> Result<Vec<PredictedLine>, NeuralError> {
        let graph = LineGraph::new(base_lines, category, descriptor)?;
        let d = gcn_forward(&graph, &self.weights, &self.config.gcn)?;
        Ok(graph.displaced(&d))
    }

    /// Mean `(L_line, L_edge)` over the samples.
    pub fn evaluate(&self, samples: &[LineSample]) -> Result<(f64, f64), NeuralError> {
        let mut acc = (0.0, 0.0);
        for s in samples {
            let lines = self.predict(s.category, &s.descriptor, &s.base_lines)?;
            for (l, e) in fitting_terms(&lines, &s.annotations)? {
                acc.0 += l;
                acc.1 += e;
            }
        }
        let n = samples.len().max(1) as f64;
        Ok((acc.0 / n, acc.1 / n))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.weights.to_bytes(self.config.seed, serde_json::to_value(self.config).expect("config serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let (weights, header) = ParamStore::from_bytes(bytes)?;
        let config: LineTrainConfig =
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

/// Per-item loss `sum over lines (line_loss + lambda * edge_reg)` and its
/// gradient with respect to every weight tensor.
fn item_gradient(
    weights: &ParamStore,
    cfg: &LineTrainConfig,
    item: &Prepared,
) -> Result<(f64, Vec<Tensor>), NeuralError> {
    let mut g = Graph::new();
    let vars = weights.register(&mut g);
    let f = g.input(item.graph.features().clone());
    let img = g.input(item.graph.image_features().clone());
    let disp = gcn_record(&mut g, &vars, &cfg.gcn, f, img, item.graph.adjacency())?;
    let base = g.input(item.graph.position_tensor());
    let pred = g.add(base, disp)?;
    let mut total: Option<super::Var> = None;
    for ((_, s, e), target) in item.graph.lines().iter().zip(&item.targets) {
        let rows = g.rows(pred, *s, *e)?;
        let l = g.line_loss(rows, target)?;
        let r = g.edge_reg(rows)?;
        let r = g.scale(r, cfg.lambda_edge);
        let term = g.add(l, r)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let loss = total.expect("graphs have at least one line");
    let mut grads = g.backward(loss)?;
    let out = vars.iter().map(|v| grads.take(*v).expect("parameter gradient")).collect();
    Ok((g.value(loss).item(), out))
}

/// Adam on the summed line-fitting loss of each item, averaged per batch.
/// `history[0]` is measured before the first step and `history[e]` after
/// epoch `e`.
pub fn train_line_regressor(
    samples: &[LineSample],
    config: &LineTrainConfig,
) -> Result<(LineRegressor, Vec<LossRecord>), NeuralError> {
    if samples.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(NeuralError::Shape("batch size 0".into()));
    }
    let prepared = samples.iter().map(prepare).collect::<Result<Vec<_>, _>>()?;
    let mut model = LineRegressor::untrained(*config);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_11e5);
    let record = |model: &LineRegressor, epoch: usize| -> Result<LossRecord, NeuralError> {
        let (l_line, l_edge) = model.evaluate(samples)?;
        Ok(LossRecord { epoch, l_line, l_edge, total: l_line + config.lambda_edge * l_edge })
    };
    let mut history = vec![record(&model, 0)?];
    for epoch in 1..=config.epochs {
        let order = epoch_order(prepared.len(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut sum: Vec<Tensor> = model.weights.tensors().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let (_, grads) = item_gradient(&model.weights, config, &prepared[i])?;
                for (s, g) in sum.iter_mut().zip(&grads) {
                    s.data_mut().iter_mut().zip(g.data()).for_each(|(s, g)| *s += g);
                }
            }
            let k = batch.len() as f64;
            sum.iter_mut().for_each(|s| s.data_mut().iter_mut().for_each(|x| *x /= k));
            adam.step(&mut model.weights, &sum);
        }
        history.push(record(&model, epoch)?);
        log::debug!("line regressor epoch {epoch}: {:e}", history[epoch].total);
    }
    Ok((model, history))
}
