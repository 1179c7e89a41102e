//! Adaptable body template: region labels, per-vertex activation, and
//! category-driven line selection and waist densification.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{procedural_body, BodyModel, PoseError, Region, RegionClass};
use crate::feature_line::{FeatureLine, LandmarkKind, LineId, Side};
use crate::mesh::{self, subdivide_region_tracked, IoError, Mesh, MeshError};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("no vertex is active")]
    NothingActive,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("no candidate line for {0}")]
    MissingLine(LineId),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("bundle: {0}")]
    Bundle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClothCategory {
    LongSleeveCoat,
    ShortSleeveCoat,
    NoneSleeveCoat,
    LongSleeveDress,
    ShortSleeveDress,
    NoneSleeveDress,
    LongTrousers,
    ShortTrousers,
    LongSkirt,
    ShortSkirt,
}

use ClothCategory::*;
use LandmarkKind::*;

impl ClothCategory {
    pub const ALL: [ClothCategory; 10] = [
        LongSleeveCoat,
        ShortSleeveCoat,
        NoneSleeveCoat,
        LongSleeveDress,
        ShortSleeveDress,
        NoneSleeveDress,
        LongTrousers,
        ShortTrousers,
        LongSkirt,
        ShortSkirt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LongSleeveCoat => "long_sleeve_coat",
            ShortSleeveCoat => "short_sleeve_coat",
            NoneSleeveCoat => "none_sleeve_coat",
            LongSleeveDress => "long_sleeve_dress",
            ShortSleeveDress => "short_sleeve_dress",
            NoneSleeveDress => "none_sleeve_dress",
            LongTrousers => "long_trousers",
            ShortTrousers => "short_trousers",
            LongSkirt => "long_skirt",
            ShortSkirt => "short_skirt",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Landmark kinds carried by garments of this category.
    pub fn feature_lines(self) -> &'static [LandmarkKind] {
        match self {
            LongSleeveCoat => &[Ne, Wa, Sh, El, Wr],
            ShortSleeveCoat => &[Ne, Wa, Sh, El],
            NoneSleeveCoat => &[Ne, Wa, Sh],
            LongSleeveDress => &[Ne, Wa, Sh, El, Wr, He],
            ShortSleeveDress => &[Ne, Wa, Sh, El, He],
            NoneSleeveDress => &[Ne, Wa, Sh, He],
            LongTrousers => &[Wa, Kn, An],
            ShortTrousers => &[Wa, Kn],
            LongSkirt | ShortSkirt => &[Wa, He],
        }
    }

    pub fn active_classes(self) -> &'static [RegionClass] {
        use RegionClass as R;
        match self {
            LongSleeveCoat => &[R::Torso, R::UpperLimb, R::LowerLimb],
            ShortSleeveCoat => &[R::Torso, R::UpperLimb],
            NoneSleeveCoat => &[R::Torso],
            LongSleeveDress => &[R::Torso, R::UpperLimb, R::LowerLimb, R::Waist],
            ShortSleeveDress => &[R::Torso, R::UpperLimb, R::Waist],
            NoneSleeveDress => &[R::Torso, R::Waist],
            LongTrousers => &[R::Waist, R::UpperLeg, R::LowerLeg],
            ShortTrousers => &[R::Waist, R::UpperLeg],
            LongSkirt | ShortSkirt => &[R::Waist],
        }
    }

    /// Subdivision levels applied to the waist region.
    pub fn waist_levels(self) -> usize {
        match self {
            LongSleeveDress | ShortSleeveDress | NoneSleeveDress => 2,
            LongSkirt => 1,
            _ => 0,
        }
    }

    pub fn is_lower_body(self) -> bool {
        matches!(self, LongTrousers | ShortTrousers | LongSkirt | ShortSkirt)
    }
}

impl fmt::Display for ClothCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClothCategory {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL.into_iter().find(|c| c.as_str() == norm).ok_or_else(|| TemplateError::UnknownCategory(s.to_string()))
    }
}

/// Every category with its landmark kinds, as stored in template bundles.
pub fn category_table() -> BTreeMap<String, Vec<LandmarkKind>> {
    ClothCategory::ALL.iter().map(|c| (c.as_str().to_string(), c.feature_lines().to_vec())).collect()
}

/// Body plus region labels, activation mask and feature lines.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptableTemplate {
    body: BodyModel,
    region_labels: Vec<Region>,
    activation: Vec<bool>,
    /// All landmark loops, possibly several per id.
    candidates: Vec<FeatureLine>,
    feature_lines: Vec<FeatureLine>,
    category: Option<ClothCategory>,
    waist_levels: usize,
}

impl AdaptableTemplate {
    /// The procedural body with every region active and one line per id.
    pub fn procedural() -> Self {
        let (body, layout) = procedural_body();
        Self::new(body, layout.regions, layout.lines)
    }

    pub fn new(body: BodyModel, region_labels: Vec<Region>, candidates: Vec<FeatureLine>) -> Self {
        assert_eq!(region_labels.len(), body.rest_mesh().vertex_count());
        let activation = vec![true; region_labels.len()];
        let mut t = Self {
            body,
            region_labels,
            activation,
            candidates,
            feature_lines: Vec::new(),
            category: None,
            waist_levels: 0,
        };
        let mut seen = Vec::new();
        t.feature_lines = t.candidates.iter().filter(|l| !seen.contains(&l.id()) && { seen.push(l.id()); true }).cloned().collect();
        t
    }

    pub fn body(&self) -> &BodyModel {
        &self.body
    }

    pub fn mesh(&self) -> &Mesh {
        self.body.rest_mesh()
    }

    pub fn region_labels(&self) -> &[Region] {
        &self.region_labels
    }

    pub fn activation(&self) -> &[bool] {
        &self.activation
    }

    pub fn feature_lines(&self) -> &[FeatureLine] {
        &self.feature_lines
    }

    pub fn candidate_lines(&self) -> &[FeatureLine] {
        &self.candidates
    }

    pub fn category(&self) -> Option<ClothCategory> {
        self.category
    }

    pub fn waist_subdivision_levels(&self) -> usize {
        self.waist_levels
    }

    /// Sets activation per region class. Regions outside `classes` turn off.
    pub fn with_active_classes(&self, classes: &[RegionClass]) -> Self {
        let mut t = self.clone();
        t.activation = t.region_labels.iter().map(|r| classes.contains(&r.class())).collect();
        t
    }

    /// Activates the category's regions, picks one fully active loop per
    /// required landmark, and densifies the waist when the category needs it.
    /// Waist levels only ever grow: switching from a dress to a skirt keeps
    /// the finer waist.
    pub fn activate(&self, category: ClothCategory) -> Result<Self, TemplateError> {
        let mut t = self.clone();
        let want = category.waist_levels();
        if want > t.waist_levels {
            t = t.subdivide_waist(want - t.waist_levels)?;
            t.waist_levels = want;
        }
        t = t.with_active_classes(category.active_classes());
        let mut lines = Vec::new();
        for &kind in category.feature_lines() {
            let sides: &[Side] = if kind.is_paired() { &[Side::Left, Side::Right] } else { &[Side::Center] };
            for &side in sides {
                let id = LineId::new(kind, side);
                let line = t
                    .candidates
                    .iter()
                    .find(|l| l.id() == id && l.vertex_indices.iter().all(|&v| t.activation[v]))
                    .ok_or(TemplateError::MissingLine(id))?;
                lines.push(line.clone());
            }
        }
        t.feature_lines = lines;
        t.category = Some(category);
        Ok(t)
    }

    /// Midpoint-subdivides all faces whose three vertices carry the waist
    /// label. New vertices are waist vertices with averaged skin weights and
    /// are spliced into any loop whose edge they split.
    fn subdivide_waist(&self, levels: usize) -> Result<Self, TemplateError> {
        let mesh = self.mesh();
        let faces: Vec<usize> = (0..mesh.face_count())
            .filter(|&f| mesh.faces()[f].iter().all(|&v| self.region_labels[v] == Region::Waist))
            .collect();
        let sub = subdivide_region_tracked(mesh, &faces, levels)?;
        let mut weights = self.body.skin_weights().clone();
        let mut labels = self.region_labels.clone();
        for &(a, b) in &sub.vertex_parents {
            let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
            for &(j, w) in weights[a].iter().chain(&weights[b]) {
                *merged.entry(j).or_default() += 0.5 * w;
            }
            weights.push(merged.into_iter().collect());
            labels.push(if labels[a] == labels[b] { labels[a] } else { Region::Waist });
        }
        let splice = |line: &FeatureLine| {
            let mut idx = line.vertex_indices.clone();
            for level in &sub.midpoints {
                let n = idx.len();
                let mut out = Vec::with_capacity(2 * n);
                let edges = if line.closed { n } else { n - 1 };
                for i in 0..n {
                    out.push(idx[i]);
                    if i < edges {
                        let (a, b) = (idx[i], idx[(i + 1) % n]);
                        if let Some(&m) = level.get(&mesh::sorted_pair(a, b)) {
                            out.push(m);
                        }
                    }
                }
                idx = out;
            }
            FeatureLine { vertex_indices: idx, ..line.clone() }
        };
        let body = self.body.with_mesh(sub.mesh, weights)?;
        let activation = labels.iter().map(|_| true).collect();
        Ok(Self {
            body,
            region_labels: labels,
            activation,
            candidates: self.candidates.iter().map(splice).collect(),
            feature_lines: self.feature_lines.iter().map(splice).collect(),
            category: self.category,
            waist_levels: self.waist_levels,
        })
    }

    pub fn active_face_indices(&self) -> Vec<usize> {
        let mesh = self.mesh();
        (0..mesh.face_count()).filter(|&f| mesh.faces()[f].iter().all(|&v| self.activation[v])).collect()
    }

    /// Writes the rest mesh as OBJ and a JSON sidecar with labels,
    /// activation, lines and the category table.
    pub fn write_bundle(&self, obj_path: &Path, json_path: &Path) -> Result<(), TemplateError> {
        mesh::write_obj(self.mesh(), obj_path)?;
        let sidecar = Sidecar {
            category: self.category,
            region_labels: self.region_labels.clone(),
            activation: self.activation.clone(),
            feature_lines: self.feature_lines.clone(),
            category_table: category_table(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| TemplateError::Bundle(e.to_string()))?;
        std::fs::write(json_path, text).map_err(|e| TemplateError::Io(IoError::Io(e)))?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    category: Option<ClothCategory>,
    region_labels: Vec<Region>,
    activation: Vec<bool>,
    feature_lines: Vec<FeatureLine>,
    category_table: BTreeMap<String, Vec<LandmarkKind>>,
}

/// Reads a bundle written by [`AdaptableTemplate::write_bundle`] back as
/// (mesh, region labels, activation, feature lines).
pub fn read_bundle(obj_path: &Path, json_path: &Path) -> Result<(Mesh, Vec<Region>, Vec<bool>, Vec<FeatureLine>), TemplateError> {
    let mesh = mesh::read_obj(obj_path)?;
    let text = std::fs::read_to_string(json_path).map_err(|e| TemplateError::Io(IoError::Io(e)))?;
    let s: Sidecar = serde_json::from_str(&text).map_err(|e| TemplateError::Bundle(e.to_string()))?;
    if s.region_labels.len() != mesh.vertex_count() || s.activation.len() != mesh.vertex_count() {
        return Err(TemplateError::Bundle("per-vertex arrays do not match the mesh".into()));
    }
    Ok((mesh, s.region_labels, s.activation, s.feature_lines))
}

/// Output of [`extract_active_mesh`].
#[derive(Debug, Clone)]
pub struct ActiveMesh {
    pub mesh: Mesh,
    /// Template vertex index to output vertex index.
    pub index_map: Vec<Option<usize>>,
    /// Active feature lines re-indexed into `mesh`.
    pub lines: Vec<FeatureLine>,
}

impl ActiveMesh {
    /// Template indices of the output vertices, in output order.
    pub fn inverse_map(&self) -> Vec<usize> {
        let mut inv = vec![0; self.mesh.vertex_count()];
        for (old, new) in self.index_map.iter().enumerate() {
            if let Some(n) = new {
                inv[*n] = old;
            }
        }
        inv
    }

    /// Re-indexes template-ordered positions into output order.
    pub fn gather(&self, template_positions: &[crate::mesh::Vec3]) -> Vec<crate::mesh::Vec3> {
        self.inverse_map().iter().map(|&i| template_positions[i]).collect()
    }
}

/// Drops faces touching inactive vertices and compacts the rest.
pub fn extract_active_mesh(template: &AdaptableTemplate) -> Result<ActiveMesh, TemplateError> {
    extract_active(template, template.mesh())
}

/// Same as [`extract_active_mesh`] but on other positions for the template
/// connectivity (a posed or deformed copy).
pub fn extract_active(template: &AdaptableTemplate, mesh: &Mesh) -> Result<ActiveMesh, TemplateError> {
    if !template.activation.iter().any(|&a| a) {
        return Err(TemplateError::NothingActive);
    }
    let faces = template.active_face_indices();
    if faces.is_empty() {
        return Err(TemplateError::NothingActive);
    }
    let (out, index_map) = mesh.submesh(&faces);
    let lines = template
        .feature_lines
        .iter()
        .filter_map(|l| {
            let idx: Option<Vec<usize>> = l.vertex_indices.iter().map(|&v| index_map[v]).collect();
            idx.map(|vertex_indices| FeatureLine { vertex_indices, ..l.clone() })
        })
        .collect();
    Ok(ActiveMesh { mesh: out, index_map, lines })
}
