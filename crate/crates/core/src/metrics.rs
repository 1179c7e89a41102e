//! Chamfer distance, Earth Mover's distance and benchmark reports.
//!
//! CD is the sum of the two directed means of squared nearest-neighbour
//! distances. EMD is the mean Euclidean cost of an optimal perfect matching.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{sample_surface, Mesh, MeshError, PointCloud, Vec3};
use crate::spatial::KdTree;

/// Largest cloud size matched exactly by the Hungarian method.
pub const EXACT_EMD_MAX: usize = 1024;
/// Relative optimality gap certified by the auction solver.
pub const AUCTION_REL_GAP: f64 = 1e-3;
pub const DEFAULT_EVAL_SAMPLES: usize = 2048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("point cloud is empty")]
    Empty,
    #[error("EMD needs equal cardinalities, got {0} and {1}")]
    Cardinality(usize, usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn directed_mean_sq(from: &[Vec3], to: &KdTree) -> f64 {
    let sum: f64 = from.par_iter().map(|p| to.nearest(p).unwrap().1).collect::<Vec<_>>().iter().sum();
    sum / from.len() as f64
}

/// Symmetric Chamfer distance between raw point sets.
pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let ta = KdTree::new(a);
    let tb = KdTree::new(b);
    Ok(directed_mean_sq(a, &tb) + directed_mean_sq(b, &ta))
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricError> {
    chamfer_points(a.points(), b.points())
}

fn cost_matrix(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    let n = b.len();
    let mut c = vec![0.0; a.len() * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (a[i] - b[j]).norm();
        }
    });
    c
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major).
/// Returns `assignment[row] = col` and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // Shortest augmenting path with potentials; 1-based internally.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (assignment, total)
}

/// Outcome of the auction solver.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionResult {
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Dual lower bound on the optimal total cost.
    pub lower_bound: f64,
    pub phases: usize,
}

/// Epsilon-scaling forward auction for the dense assignment problem. Runs
/// phases until `cost <= (1 + rel_gap) * lower_bound`, where the bound comes
/// from the final prices, so the returned matching is certified.
pub fn auction(cost: &[f64], n: usize, rel_gap: f64) -> AuctionResult {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return AuctionResult { assignment: Vec::new(), cost: 0.0, lower_bound: 0.0, phases: 0 };
    }
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut eps = (max_cost / 4.0).max(f64::MIN_POSITIVE);
    let floor = max_cost * 1e-15;
    let mut phases = 0;
    loop {
        phases += 1;
        let mut owner = vec![usize::MAX; n];
        let mut assigned = vec![usize::MAX; n];
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best_j, mut best, mut second) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let val = -row[j] - prices[j];
                if val > best {
                    second = best;
                    best = val;
                    best_j = j;
                } else if val > second {
                    second = val;
                }
            }
            let incr = if second.is_finite() { best - second + eps } else { eps };
            prices[best_j] += incr;
            let prev = owner[best_j];
            owner[best_j] = i;
            assigned[i] = best_j;
            if prev != usize::MAX {
                assigned[prev] = usize::MAX;
                queue.push(prev);
            }
        }
        let primal: f64 = assigned.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        let dual: f64 = (0..n)
            .map(|i| (0..n).map(|j| -cost[i * n + j] - prices[j]).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            + prices.iter().sum::<f64>();
        let lower_bound = -dual;
        if primal <= (1.0 + rel_gap) * lower_bound || primal <= floor || eps <= floor {
            return AuctionResult { assignment: assigned, cost: primal, lower_bound, phases };
        }
        eps /= 5.0;
    }
}

/// Exact EMD for clouds up to [`EXACT_EMD_MAX`] points, certified auction
/// above that.
pub fn emd_points(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Cardinality(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = a.len();
    let c = cost_matrix(a, b);
    let total = if n <= EXACT_EMD_MAX { hungarian(&c, n).1 } else { auction(&c, n, AUCTION_REL_GAP).cost };
    Ok(total / n as f64)
}

pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricError> {
    emd_points(a.points(), b.points())
}

/// Auction EMD regardless of size.
pub fn emd_auction_points(a: &[Vec3], b: &[Vec3], rel_gap: f64) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Cardinality(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = a.len();
    Ok(auction(&cost_matrix(a, b), n, rel_gap).cost / n as f64)
}

/// Picks `n` points: a subset without replacement when the cloud is large
/// enough, with replacement otherwise.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, MetricError> {
    if cloud.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if cloud.len() >= n {
        let mut v = sample_indices(&mut rng, cloud.len(), n).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).map(|_| rng.gen_range(0..cloud.len())).collect()
    };
    Ok(PointCloud::new(idx.iter().map(|&i| cloud.points()[i]).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub cd: f64,
    pub emd: f64,
}

pub fn evaluate_model(
    reconstruction: &Mesh,
    ground_truth: &PointCloud,
    n_samples: usize,
    seed: u64,
) -> Result<Distances, MetricError> {
    let rec = sample_surface(reconstruction, n_samples, seed)?;
    let gt = resample(ground_truth, n_samples, seed.wrapping_add(0x9e37_79b9))?;
    Ok(Distances { cd: chamfer_points(rec.points(), gt.points())?, emd: emd_points(rec.points(), gt.points())? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub category: String,
    pub cd: f64,
    pub emd: f64,
    pub n_reconstruction: usize,
    pub n_ground_truth: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean CD multiplied by 10^3.
    pub cd_e3: f64,
    /// Mean EMD multiplied by 10^2.
    pub emd_e2: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub conventions: String,
    pub records: Vec<ModelRecord>,
    pub aggregates: Aggregates,
}

pub const CONVENTIONS: &str = "CD = mean sq. NN distance a->b + b->a; EMD = mean Euclidean cost of optimal matching; \
     canonical units (template bbox diagonal = 1); absolute values not comparable to scan-based benchmarks";

impl BenchmarkReport {
    pub fn new(method: impl Into<String>, records: Vec<ModelRecord>) -> Self {
        let count = records.len();
        let (cd, emd) = if count == 0 {
            (0.0, 0.0)
        } else {
            let n = count as f64;
            (records.iter().map(|r| r.cd).sum::<f64>() / n, records.iter().map(|r| r.emd).sum::<f64>() / n)
        };
        Self {
            method: method.into(),
            conventions: CONVENTIONS.to_string(),
            records,
            aggregates: Aggregates { cd_e3: cd * 1e3, emd_e2: emd * 1e2, count },
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model_id,category,cd,emd,n_reconstruction,n_ground_truth,seed\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model_id, r.category, r.cd, r.emd, r.n_reconstruction, r.n_ground_truth, r.seed
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table: method, CD (x10^-3), EMD (x10^2).
    pub fn table(&self) -> String {
        format!(
            "{:<24} {:>14} {:>14}\n{:<24} {:>14.3} {:>14.3}\n",
            "Method", "CD(x10^-3)", "EMD(x10^2)", self.method, self.aggregates.cd_e3, self.aggregates.emd_e2
        )
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json())
    }
}
