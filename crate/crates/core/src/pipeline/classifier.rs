//! Nearest-centroid garment classifier over silhouette pyramids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::neural::SilhouetteDescriptor;
use crate::template::ClothCategory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// Mean pyramid descriptor of every category seen in training, in
    /// category order.
    pub centroids: Vec<(ClothCategory, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub category: ClothCategory,
    /// `d2 / (d1 + d2)` for the nearest and second-nearest centroid
    /// distances; 1 for an override or a single-centroid model.
    pub confidence: f64,
}

impl Classifier {
    pub fn train(items: &[(ClothCategory, SilhouetteDescriptor)]) -> Result<Self, PipelineError> {
        if items.is_empty() {
            return Err(PipelineError::Untrained("classifier needs at least one item".into()));
        }
        let mut centroids = Vec::new();
        for cat in ClothCategory::ALL {
            let members: Vec<&[f64]> = items.iter().filter(|(c, _)| *c == cat).map(|(_, d)| d.pyramid()).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; members[0].len()];
            for m in &members {
                mean.iter_mut().zip(*m).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|a| *a /= members.len() as f64);
            centroids.push((cat, mean));
        }
        Ok(Self { centroids })
    }

    pub fn classify(&self, descriptor: &SilhouetteDescriptor) -> Result<Classification, PipelineError> {
        let x = descriptor.pyramid();
        let mut dist: Vec<(f64, ClothCategory)> = self
            .centroids
            .iter()
            .map(|(c, m)| (m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), *c))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match dist.as_slice() {
            [] => Err(PipelineError::Untrained("classifier has no centroids".into())),
            [(_, c)] => Ok(Classification { category: *c, confidence: 1.0 }),
            [(d1, c), (d2, _), ..] => {
                let confidence = if d1 + d2 > 0.0 { d2 / (d1 + d2) } else { 0.5 };
                Ok(Classification { category: *c, confidence })
            }
        }
    }

    pub fn accuracy(&self, items: &[(ClothCategory, SilhouetteDescriptor)]) -> Result<f64, PipelineError> {
        let mut hits = 0;
        for (c, d) in items {
            hits += usize::from(self.classify(d)?.category == *c);
        }
        Ok(hits as f64 / items.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("classifier serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Either the override or the classifier's answer.
pub fn classify(
    descriptor: &SilhouetteDescriptor,
    model: Option<&Classifier>,
    oracle: Option<ClothCategory>,
) -> Result<Classification, PipelineError> {
    match (oracle, model) {
        (Some(category), _) => Ok(Classification { category, confidence: 1.0 }),
        (None, Some(m)) => m.classify(descriptor),
        (None, None) => Err(PipelineError::Untrained("no classifier and no category override".into())),
    }
}
