//! Feature lines (closed landmark polylines), their annotations and the
//! line-fitting loss `L_line + lambda_edge * L_edge`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{PointCloud, Vec3};

pub const LAMBDA_EDGE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineError {
    #[error("empty point set")]
    Empty,
    #[error("loop needs at least 3 vertices, got {0}")]
    ShortLoop(usize),
    #[error("no annotation for predicted line {0}")]
    MissingAnnotation(String),
    #[error("annotation {0} has no predicted line")]
    MissingPrediction(String),
    #[error("unknown landmark kind {0:?}")]
    UnknownKind(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkKind {
    Ne,
    Wa,
    Sh,
    El,
    Wr,
    Kn,
    An,
    He,
}

impl LandmarkKind {
    pub const ALL: [LandmarkKind; 8] = [Self::Ne, Self::Wa, Self::Sh, Self::El, Self::Wr, Self::Kn, Self::An, Self::He];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ne => "ne",
            Self::Wa => "wa",
            Self::Sh => "sh",
            Self::El => "el",
            Self::Wr => "wr",
            Self::Kn => "kn",
            Self::An => "an",
            Self::He => "he",
        }
    }

    /// Kinds that come as a left/right pair.
    pub fn is_paired(self) -> bool {
        matches!(self, Self::Sh | Self::El | Self::Wr | Self::Kn | Self::An)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

impl fmt::Display for LandmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LandmarkKind {
    type Err = LineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| LineError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Center,
    Left,
    Right,
}

/// Identifies one line of a garment: kind plus side for paired kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineId {
    pub kind: LandmarkKind,
    pub side: Side,
}

impl LineId {
    pub fn new(kind: LandmarkKind, side: Side) -> Self {
        Self { kind, side }
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Side::Center => write!(f, "{}", self.kind),
            Side::Left => write!(f, "{}_l", self.kind),
            Side::Right => write!(f, "{}_r", self.kind),
        }
    }
}

/// A loop of template vertex indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLine {
    pub kind: LandmarkKind,
    #[serde(default)]
    pub side: Side,
    pub vertex_indices: Vec<usize>,
    pub closed: bool,
}

impl FeatureLine {
    pub fn new(kind: LandmarkKind, side: Side, vertex_indices: Vec<usize>, closed: bool) -> Result<Self, LineError> {
        if closed && vertex_indices.len() < 3 {
            return Err(LineError::ShortLoop(vertex_indices.len()));
        }
        if vertex_indices.is_empty() {
            return Err(LineError::Empty);
        }
        Ok(Self { kind, side, vertex_indices, closed })
    }

    pub fn id(&self) -> LineId {
        LineId::new(self.kind, self.side)
    }

    pub fn positions(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.vertex_indices.iter().map(|&i| vertices[i]).collect()
    }

    pub fn centroid(&self, vertices: &[Vec3]) -> Vec3 {
        centroid(&self.positions(vertices))
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len().max(1) as f64
}

/// Annotated points around one landmark of a ground-truth garment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLineAnnotation {
    pub kind: LandmarkKind,
    pub side: Side,
    pub points: PointCloud,
}

impl FeatureLineAnnotation {
    pub fn new(kind: LandmarkKind, side: Side, points: Vec<Vec3>) -> Result<Self, LineError> {
        if points.is_empty() {
            return Err(LineError::Empty);
        }
        Ok(Self { kind, side, points: PointCloud::new(points) })
    }

    pub fn id(&self) -> LineId {
        LineId::new(self.kind, self.side)
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    kind: LandmarkKind,
    #[serde(default)]
    side: Side,
    points: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    category: String,
    lines: Vec<AnnotationRecord>,
}

pub fn annotations_to_json(category: &str, annotations: &[FeatureLineAnnotation]) -> String {
    let file = AnnotationFile {
        category: category.to_string(),
        lines: annotations
            .iter()
            .map(|a| AnnotationRecord {
                kind: a.kind,
                side: a.side,
                points: a.points.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("annotations serialize")
}

/// Parses an annotation file, returning the category label and lines.
pub fn annotations_from_json(text: &str) -> Result<(String, Vec<FeatureLineAnnotation>), LineError> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| LineError::Io(e.to_string()))?;
    let lines = file
        .lines
        .into_iter()
        .map(|r| FeatureLineAnnotation::new(r.kind, r.side, r.points.into_iter().map(Vec3::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((file.category, lines))
}

pub fn read_annotations(path: &Path) -> Result<(String, Vec<FeatureLineAnnotation>), LineError> {
    annotations_from_json(&std::fs::read_to_string(path).map_err(|e| LineError::Io(e.to_string()))?)
}

/// For each point of `from`, the index of its nearest point in `to`; ties go
/// to the lower index.
pub fn nearest_indices(from: &[Vec3], to: &[Vec3]) -> Vec<usize> {
    from.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Symmetric mean squared nearest-neighbour distance.
pub fn line_loss(predicted: &[Vec3], annotation: &[Vec3]) -> Result<f64, LineError> {
    if predicted.is_empty() || annotation.is_empty() {
        return Err(LineError::Empty);
    }
    let fwd: f64 = nearest_indices(predicted, annotation)
        .iter()
        .zip(predicted)
        .map(|(&j, p)| (p - annotation[j]).norm_squared())
        .sum::<f64>()
        / predicted.len() as f64;
    let bwd: f64 = nearest_indices(annotation, predicted)
        .iter()
        .zip(annotation)
        .map(|(&j, q)| (q - predicted[j]).norm_squared())
        .sum::<f64>()
        / annotation.len() as f64;
    Ok(fwd + bwd)
}

/// Mean squared edge length of a closed loop.
pub fn edge_reg(loop_positions: &[Vec3]) -> Result<f64, LineError> {
    let n = loop_positions.len();
    if n < 3 {
        return Err(LineError::ShortLoop(n));
    }
    Ok((0..n).map(|i| (loop_positions[(i + 1) % n] - loop_positions[i]).norm_squared()).sum::<f64>() / n as f64)
}

/// Predicted positions of one line.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedLine {
    pub id: LineId,
    pub positions: Vec<Vec3>,
}

/// Sum over lines of `line_loss + lambda_edge * edge_reg`. Lines and
/// annotations are matched by kind and side; every line must have exactly
/// one partner.
pub fn fitting_loss(
    lines: &[PredictedLine],
    annotations: &[FeatureLineAnnotation],
    lambda_edge: f64,
) -> Result<f64, LineError> {
    let terms = fitting_terms(lines, annotations)?;
    Ok(terms.iter().map(|(l, e)| l + lambda_edge * e).sum())
}

/// Per-line `(line_loss, edge_reg)` pairs in the order of `lines`.
pub fn fitting_terms(lines: &[PredictedLine], annotations: &[FeatureLineAnnotation]) -> Result<Vec<(f64, f64)>, LineError> {
    for a in annotations {
        if !lines.iter().any(|l| l.id == a.id()) {
            return Err(LineError::MissingPrediction(a.id().to_string()));
        }
    }
    lines
        .iter()
        .map(|l| {
            let ann = annotations
                .iter()
                .find(|a| a.id() == l.id)
                .ok_or_else(|| LineError::MissingAnnotation(l.id.to_string()))?;
            Ok((line_loss(&l.positions, ann.points.points())?, edge_reg(&l.positions)?))
        })
        .collect()
}

/// Uniform Laplacian smoothing of a closed loop: each step moves every vertex
/// `step` of the way to the midpoint of its two neighbours.
pub fn laplacian_smooth_line(loop_positions: &[Vec3], iterations: usize, step: f64) -> Vec<Vec3> {
    let n = loop_positions.len();
    let mut cur = loop_positions.to_vec();
    if n < 3 {
        return cur;
    }
    for _ in 0..iterations {
        cur = (0..n)
            .map(|i| {
                let mid = 0.5 * (cur[(i + n - 1) % n] + cur[(i + 1) % n]);
                cur[i] + (mid - cur[i]) * step
            })
            .collect();
    }
    cur
}
