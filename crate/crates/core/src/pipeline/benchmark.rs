//! Dataset benchmark and ablation runs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_pipeline, Models, PipelineConfig, PipelineError, PipelineInput, StageArtifacts, StageToggles};
use crate::mesh::{sample_surface, Mesh};
use crate::metrics::{chamfer_points, evaluate_model, BenchmarkReport, ModelRecord};
use crate::neural::SilhouetteDescriptor;
use crate::synth::{dataset_entries, read_garment, SynthGarment};
use crate::template::AdaptableTemplate;

/// Readable entries of a dataset directory as `(id, garment, silhouette)`.
/// Corrupt entries are skipped with a warning.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, SynthGarment, SilhouetteDescriptor)>, PipelineError> {
    let entries = dataset_entries(dir).map_err(|e| PipelineError::Dataset(format!("{}: {e}", dir.display())))?;
    let total = entries.len();
    let mut out = Vec::new();
    for e in entries {
        let id = e.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match read_garment(&e) {
            Ok(l) => out.push((id, l.garment, l.silhouette)),
            Err(err) => log::warn!("skipping {id}: {err}"),
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Dataset(format!("no readable entry among {total} in {}", dir.display())));
    }
    Ok(out)
}

/// Chamfer distance of every mesh stage output against the ground truth,
/// each side sampled with `n` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDistances {
    pub id: String,
    pub stages: Vec<(String, f64)>,
}

impl StageDistances {
    pub fn get(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, d)| *d)
    }
}

pub fn stage_chamfer(artifacts: &StageArtifacts, ground_truth: &Mesh, n: usize, seed: u64) -> Result<StageDistances, PipelineError> {
    let gt = sample_surface(ground_truth, n, seed).map_err(|e| PipelineError::Dataset(e.to_string()))?;
    let mut stages = Vec::new();
    for (name, m) in artifacts.meshes() {
        if name == "m_i" {
            continue;
        }
        let s = sample_surface(m, n, seed).map_err(|e| PipelineError::Dataset(e.to_string()))?;
        stages.push((name.to_string(), chamfer_points(s.points(), gt.points())?));
    }
    Ok(StageDistances { id: artifacts.id.clone(), stages })
}

/// CD and EMD of the final mesh against the ground truth.
pub fn evaluate_artifacts(
    artifacts: &StageArtifacts,
    ground_truth: &Mesh,
    config: &PipelineConfig,
) -> Result<ModelRecord, PipelineError> {
    let rec = artifacts.final_mesh().ok_or_else(|| PipelineError::Dataset(format!("{}: no output mesh", artifacts.id)))?;
    let n = config.eval_samples;
    let gt = sample_surface(ground_truth, n, config.seed).map_err(|e| PipelineError::Dataset(e.to_string()))?;
    let d = evaluate_model(rec, &gt, n, config.seed)?;
    Ok(ModelRecord {
        model_id: artifacts.id.clone(),
        category: artifacts.category().map(|c| c.as_str().to_string()).unwrap_or_default(),
        cd: d.cd,
        emd: d.emd,
        n_reconstruction: n,
        n_ground_truth: n,
        seed: config.seed,
    })
}

/// Runs the pipeline on every item and evaluates the final meshes. Items
/// whose pipeline fails are skipped with a warning; if all fail, the first
/// error is returned.
pub fn run_benchmark_on(
    items: &[(String, SynthGarment, SilhouetteDescriptor)],
    template: &AdaptableTemplate,
    models: &Models,
    config: &PipelineConfig,
    method: &str,
) -> Result<BenchmarkReport, PipelineError> {
    config.validate()?;
    let results: Vec<Result<ModelRecord, PipelineError>> = items
        .par_iter()
        .map(|(id, g, d)| {
            let input = PipelineInput::from_garment(id.clone(), g, d.clone());
            let a = run_pipeline(template, &input, models, config)?;
            evaluate_artifacts(&a, &g.ground_truth_mesh, config)
        })
        .collect();
    let mut records = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{e}");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) if records.is_empty() => Err(e),
        _ => Ok(BenchmarkReport::new(method, records)),
    }
}

pub fn run_benchmark(
    dataset: &Path,
    template: &AdaptableTemplate,
    models: &Models,
    config: &PipelineConfig,
    method: &str,
) -> Result<BenchmarkReport, PipelineError> {
    run_benchmark_on(&load_dataset(dataset)?, template, models, config, method)
}

/// A named stage selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub name: &'static str,
    pub stages: StageToggles,
}

/// The full method, its variant without refinement, and the four ablated
/// settings.
pub fn ablation_settings() -> Vec<Ablation> {
    let s = |pose, lines, implicit, refine| StageToggles { pose, lines, deform: lines, implicit, register: implicit, refine };
    vec![
        Ablation { name: "M_t+GCN", stages: s(false, false, false, true) },
        Ablation { name: "M_p+GCN", stages: s(true, false, false, true) },
        Ablation { name: "M_l+GCN", stages: s(true, true, false, true) },
        Ablation { name: "M_l", stages: s(true, true, false, false) },
        Ablation { name: "M_t+Regis", stages: s(false, false, true, false) },
        Ablation { name: "full", stages: s(true, true, true, false) },
    ]
}

pub fn run_ablations(
    items: &[(String, SynthGarment, SilhouetteDescriptor)],
    template: &AdaptableTemplate,
    models: &Models,
    config: &PipelineConfig,
) -> Result<Vec<BenchmarkReport>, PipelineError> {
    ablation_settings()
        .into_iter()
        .map(|a| {
            let c = PipelineConfig { stages: a.stages, ..config.clone() };
            run_benchmark_on(items, template, models, &c, a.name)
        })
        .collect()
}
