//! Training sets derived from synthetic garments.

use super::PipelineError;
use crate::body::pose_mesh;
use crate::feature_line::PredictedLine;
use crate::mesh::sample_surface;
use crate::neural::{LineSample, OccupancySample, RefinerSample, SilhouetteDescriptor};
use crate::synth::{occupancy_labels, SynthGarment};
use crate::template::{extract_active, AdaptableTemplate, ClothCategory};

/// Regressor inputs: the category's template lines under the true pose,
/// paired with the garment's annotations.
pub fn line_samples(
    template: &AdaptableTemplate,
    items: &[(SynthGarment, SilhouetteDescriptor)],
) -> Result<Vec<LineSample>, PipelineError> {
    items
        .iter()
        .map(|(g, d)| {
            let t = template.activate(g.category).map_err(|e| PipelineError::Dataset(e.to_string()))?;
            let posed = pose_mesh(t.body(), &g.pose).map_err(|e| PipelineError::Dataset(e.to_string()))?;
            let base_lines = t
                .feature_lines()
                .iter()
                .map(|l| PredictedLine { id: l.id(), positions: l.positions(posed.vertices()) })
                .collect();
            Ok(LineSample { category: g.category, descriptor: d.clone(), base_lines, annotations: g.annotations.clone() })
        })
        .collect()
}

/// `points` labelled samples per garment, conditioned on its silhouette
/// pyramid.
pub fn occupancy_samples(
    items: &[(SynthGarment, SilhouetteDescriptor)],
    points: usize,
    seed: u64,
) -> Result<Vec<OccupancySample>, PipelineError> {
    items
        .iter()
        .enumerate()
        .map(|(i, (g, d))| {
            let (points, labels) = occupancy_labels(g, points, seed.wrapping_add(i as u64))?;
            Ok(OccupancySample { code: d.pyramid().to_vec(), points, labels })
        })
        .collect()
}

/// The posed active template of each garment with `target_points` samples
/// of its ground truth.
pub fn refiner_samples(
    template: &AdaptableTemplate,
    items: &[(SynthGarment, SilhouetteDescriptor)],
    target_points: usize,
    seed: u64,
) -> Result<Vec<RefinerSample>, PipelineError> {
    items
        .iter()
        .map(|(g, d)| {
            let t = template.activate(g.category).map_err(|e| PipelineError::Dataset(e.to_string()))?;
            let posed = pose_mesh(t.body(), &g.pose).map_err(|e| PipelineError::Dataset(e.to_string()))?;
            let mesh = extract_active(&t, &posed).map_err(|e| PipelineError::Dataset(e.to_string()))?.mesh;
            let target = sample_surface(&g.ground_truth_mesh, target_points, seed)
                .map_err(|e| PipelineError::Dataset(e.to_string()))?
                .points()
                .to_vec();
            Ok(RefinerSample { category: g.category, descriptor: d.clone(), mesh, target })
        })
        .collect()
}

pub fn classifier_items(items: &[(SynthGarment, SilhouetteDescriptor)]) -> Vec<(ClothCategory, SilhouetteDescriptor)> {
    items.iter().map(|(g, d)| (g.category, d.clone())).collect()
}
