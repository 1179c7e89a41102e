//! End-to-end reconstruction: classify, activate, pose, regress feature
//! lines, deform by handles, extract the implicit surface and register onto
//! it. Each stage can be switched off or fed from an oracle.

mod benchmark;
pub mod classifier;
mod training;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{fit_pose_to_annotations, pose_mesh, Pose, LAMBDA_REG};
use crate::detail::{nonrigid_register, IterationDiagnostics, RefineWeights, RegistrationParams};
use crate::feature_line::{FeatureLineAnnotation, PredictedLine};
use crate::implicit::{marching_cubes, sample_grid, OccupancyField, ISO_LEVEL, MAX_RESOLUTION, MIN_RESOLUTION};
use crate::laplacian::deform;
use crate::mesh::{write_obj, Aabb, Mesh, Vec3};
use crate::metrics::DEFAULT_EVAL_SAMPLES;
use crate::neural::{
    LineRegressor, LineTrainConfig, MeshRefiner, OccupancyConfig, OccupancyNet, RefinerConfig, SilhouetteDescriptor,
};
use crate::synth::{analytic_occupancy, SynthGarment};
use crate::template::{extract_active, AdaptableTemplate, ClothCategory};

pub use benchmark::{
    ablation_settings, evaluate_artifacts, load_dataset, run_ablations, run_benchmark, run_benchmark_on, stage_chamfer, Ablation,
    StageDistances,
};
pub use classifier::{classify, Classification, Classifier};
pub use training::{classifier_items, line_samples, occupancy_samples, refiner_samples};

pub const DEFAULT_PIPELINE_RESOLUTION: usize = 128;
/// Fraction of the current mesh's extent added on every side of the
/// extraction box.
pub const BOUNDS_MARGIN: f64 = 0.15;
/// Absolute padding added after the relative margin.
pub const BOUNDS_PAD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing model: {0}")]
    Untrained(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Neural(#[from] crate::neural::NeuralError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("{0}")]
    Stage(#[from] Box<PipelineFailure>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classify,
    Activate,
    Pose,
    Lines,
    Deform,
    Implicit,
    Register,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::Classify, Stage::Activate, Stage::Pose, Stage::Lines, Stage::Deform, Stage::Implicit, Stage::Register, Stage::Refine];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classify => "classify",
            Stage::Activate => "activate",
            Stage::Pose => "pose",
            Stage::Lines => "lines",
            Stage::Deform => "deform",
            Stage::Implicit => "implicit",
            Stage::Register => "register",
            Stage::Refine => "refine",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

/// Optional stages. Classification and activation always run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub pose: bool,
    pub lines: bool,
    pub deform: bool,
    pub implicit: bool,
    pub register: bool,
    /// Whole-mesh GCN refinement, only used by ablations.
    pub refine: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { pose: true, lines: true, deform: true, implicit: true, register: true, refine: false }
    }
}

impl StageToggles {
    pub fn none() -> Self {
        Self { pose: false, lines: false, deform: false, implicit: false, register: false, refine: false }
    }

    /// Parses a comma-separated list such as `pose,lines,deform`.
    pub fn parse_list(list: &str) -> Result<Self, PipelineError> {
        let mut t = Self::none();
        for s in list.split(',').filter(|s| !s.trim().is_empty()) {
            match s.parse::<Stage>()? {
                Stage::Classify | Stage::Activate => {}
                Stage::Pose => t.pose = true,
                Stage::Lines => t.lines = true,
                Stage::Deform => t.deform = true,
                Stage::Implicit => t.implicit = true,
                Stage::Register => t.register = true,
                Stage::Refine => t.refine = true,
            }
        }
        Ok(t)
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Classify | Stage::Activate => true,
            Stage::Pose => self.pose,
            Stage::Lines => self.lines,
            Stage::Deform => self.deform,
            Stage::Implicit => self.implicit,
            Stage::Register => self.register,
            Stage::Refine => self.refine,
        }
    }
}

/// Stages fed from ground truth instead of a learned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleToggles {
    pub category: bool,
    pub pose: bool,
    pub occupancy: bool,
    /// Exact feature lines in place of the regressor.
    pub lines: bool,
}

impl OracleToggles {
    pub fn all() -> Self {
        Self { category: true, pose: true, occupancy: true, lines: true }
    }

    /// Sets one oracle by name: `category`, `pose`, `occupancy` or `lines`.
    pub fn enable(&mut self, name: &str) -> Result<(), PipelineError> {
        match name.trim() {
            "category" => self.category = true,
            "pose" => self.pose = true,
            "occupancy" => self.occupancy = true,
            "lines" => self.lines = true,
            other => return Err(PipelineError::Config(format!("unknown oracle {other:?}"))),
        }
        Ok(())
    }
}

/// Weight files loaded by [`Models::load`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPaths {
    pub classifier: Option<PathBuf>,
    pub lines: Option<PathBuf>,
    pub occupancy: Option<PathBuf>,
    pub refiner: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    pub oracle: OracleToggles,
    pub lambda_reg: f64,
    pub refine_weights: RefineWeights,
    pub registration: RegistrationParams,
    /// Also carries `lambda_edge`.
    pub line_training: LineTrainConfig,
    pub occupancy_training: OccupancyConfig,
    pub refiner_training: RefinerConfig,
    /// Labelled points per garment for occupancy training.
    pub occupancy_points: usize,
    pub resolution: usize,
    pub bounds_margin: f64,
    pub bounds_pad: f64,
    pub eval_samples: usize,
    pub seed: u64,
    pub models: ModelPaths,
    /// Where every stage output is written, one directory per input.
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: StageToggles::default(),
            oracle: OracleToggles::default(),
            lambda_reg: LAMBDA_REG,
            refine_weights: RefineWeights::default(),
            registration: RegistrationParams::default(),
            line_training: LineTrainConfig::default(),
            occupancy_training: OccupancyConfig::default(),
            refiner_training: RefinerConfig::default(),
            occupancy_points: 4000,
            resolution: DEFAULT_PIPELINE_RESOLUTION,
            bounds_margin: BOUNDS_MARGIN,
            bounds_pad: BOUNDS_PAD,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            seed: 0,
            models: ModelPaths::default(),
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&self.resolution) {
            return bad(format!("resolution {} outside {MIN_RESOLUTION}..={MAX_RESOLUTION}", self.resolution));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive".into());
        }
        let r = &self.registration;
        if !(r.sigma > 0.0 && r.max_angle_deg > 0.0 && r.max_angle_deg <= 180.0) {
            return bad("registration gate must be positive".into());
        }
        if !(r.mu_start > 0.0 && r.mu_decay > 0.0 && r.mu_decay <= 1.0 && r.mu_floor >= 0.0) {
            return bad("invalid mu schedule".into());
        }
        let w = &self.refine_weights;
        let weights = [
            w.lambda_chm,
            w.lambda_nor,
            w.lambda_lap,
            w.lambda_med,
            w.lambda_line,
            w.lambda_fed,
            self.lambda_reg,
            self.line_training.lambda_edge,
        ];
        if weights.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.bounds_margin >= 0.0 && self.bounds_pad >= 0.0) {
            return bad("bounds margin must be non-negative".into());
        }
        if self.line_training.batch_size == 0 || self.occupancy_training.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let c: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Trained models available to the learned stages.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub classifier: Option<Classifier>,
    pub lines: Option<LineRegressor>,
    pub occupancy: Option<Arc<OccupancyNet>>,
    pub refiner: Option<MeshRefiner>,
}

impl Models {
    pub fn load(paths: &ModelPaths) -> Result<Self, PipelineError> {
        Ok(Self {
            classifier: paths.classifier.as_deref().map(Classifier::load).transpose()?,
            lines: paths.lines.as_deref().map(LineRegressor::load).transpose()?,
            occupancy: paths.occupancy.as_deref().map(OccupancyNet::load).transpose()?.map(Arc::new),
            refiner: paths.refiner.as_deref().map(MeshRefiner::load).transpose()?,
        })
    }
}

/// Ground truth a pipeline run may draw on in place of learned stages.
#[derive(Clone)]
pub struct OracleBundle {
    pub category: ClothCategory,
    pub pose: Pose,
    pub occupancy: Arc<dyn OccupancyField>,
    pub lines: Vec<PredictedLine>,
}

impl fmt::Debug for OracleBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleBundle").field("category", &self.category).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineInput {
    pub id: String,
    pub descriptor: SilhouetteDescriptor,
    /// Annotated feature lines the pose is fitted to when no pose oracle is
    /// used.
    pub annotations: Vec<FeatureLineAnnotation>,
    pub oracle: Option<OracleBundle>,
}

impl PipelineInput {
    /// A synthetic garment with its silhouette and every oracle.
    pub fn from_garment(id: impl Into<String>, garment: &SynthGarment, descriptor: SilhouetteDescriptor) -> Self {
        Self {
            id: id.into(),
            descriptor,
            annotations: garment.annotations.clone(),
            oracle: Some(OracleBundle {
                category: garment.category,
                pose: garment.pose.clone(),
                occupancy: Arc::new(analytic_occupancy(garment)),
                lines: garment.line_truth.clone(),
            }),
        }
    }
}

/// Everything a run produced. A field is `Some` iff its stage ran.
#[derive(Debug, Clone, Default)]
pub struct StageArtifacts {
    pub id: String,
    pub classification: Option<Classification>,
    pub pose: Option<Pose>,
    /// Template connectivity restricted to the active regions, at rest.
    pub m_t: Option<Mesh>,
    pub m_p: Option<Mesh>,
    /// Active lines on the mesh entering the line stage.
    pub lines_p: Option<Vec<PredictedLine>>,
    pub lines_o: Option<Vec<PredictedLine>>,
    pub m_l: Option<Mesh>,
    pub m_i: Option<Mesh>,
    pub m_r: Option<Mesh>,
    /// Output of whole-mesh GCN refinement.
    pub m_g: Option<Mesh>,
    pub registration: Option<Vec<IterationDiagnostics>>,
    /// Wall-clock seconds per stage; excluded from [`Self::fingerprint`].
    pub timings: Vec<(Stage, f64)>,
}

impl StageArtifacts {
    /// Output of the last geometry stage that ran.
    pub fn final_mesh(&self) -> Option<&Mesh> {
        self.m_g.as_ref().or(self.m_r.as_ref()).or(self.m_l.as_ref()).or(self.m_p.as_ref()).or(self.m_t.as_ref())
    }

    pub fn category(&self) -> Option<ClothCategory> {
        self.classification.map(|c| c.category)
    }

    /// Every mesh present, by file stem.
    pub fn meshes(&self) -> Vec<(&'static str, &Mesh)> {
        [("m_t", &self.m_t), ("m_p", &self.m_p), ("m_l", &self.m_l), ("m_i", &self.m_i), ("m_r", &self.m_r), ("m_g", &self.m_g)]
            .into_iter()
            .filter_map(|(n, m)| m.as_ref().map(|m| (n, m)))
            .collect()
    }

    /// Byte-exact digest of every output except timings.
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        s.push_str(&serde_json::to_string(&self.classification).expect("serializes"));
        s.push_str(&serde_json::to_string(&self.pose).expect("serializes"));
        for (name, m) in self.meshes() {
            s.push_str(name);
            s.push_str(&crate::mesh::obj_to_string(m));
        }
        for lines in [&self.lines_p, &self.lines_o].into_iter().flatten() {
            s.push_str(&lines_json(lines));
        }
        s.push_str(&serde_json::to_string(&self.registration).expect("serializes"));
        s
    }

    /// Writes the present outputs under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in self.meshes() {
            write_obj(m, &dir.join(format!("{name}.obj"))).map_err(|e| PipelineError::Dataset(e.to_string()))?;
        }
        if let Some(c) = &self.classification {
            std::fs::write(dir.join("category.json"), serde_json::to_string_pretty(c).expect("serializes"))?;
        }
        if let Some(p) = &self.pose {
            std::fs::write(dir.join("pose.json"), p.to_json())?;
        }
        if let Some(l) = &self.lines_p {
            std::fs::write(dir.join("lines_p.json"), lines_json(l))?;
        }
        if let Some(l) = &self.lines_o {
            std::fs::write(dir.join("lines_o.json"), lines_json(l))?;
        }
        if let Some(r) = &self.registration {
            std::fs::write(dir.join("registration.json"), serde_json::to_string_pretty(r).expect("serializes"))?;
        }
        let timings: BTreeMap<&str, f64> = self.timings.iter().map(|(s, t)| (s.as_str(), *t)).collect();
        std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings).expect("serializes"))?;
        Ok(())
    }
}

fn lines_json(lines: &[PredictedLine]) -> String {
    let map: BTreeMap<String, Vec<[f64; 3]>> =
        lines.iter().map(|l| (l.id.to_string(), l.positions.iter().map(|p| [p.x, p.y, p.z]).collect())).collect();
    serde_json::to_string_pretty(&map).expect("lines serialize")
}

/// A stage error together with everything produced before it.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineFailure {
    pub id: String,
    pub stage: Stage,
    pub message: String,
    #[serde(skip)]
    pub artifacts: StageArtifacts,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: stage {} failed: {}", self.id, self.stage, self.message)
    }
}

impl std::error::Error for PipelineFailure {}

impl PipelineFailure {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("failure serializes")
    }
}

struct Run {
    artifacts: StageArtifacts,
}

impl Run {
    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce(&mut StageArtifacts) -> Result<T, String>) -> Result<T, Box<PipelineFailure>> {
        let t0 = Instant::now();
        let out = f(&mut self.artifacts);
        self.artifacts.timings.push((stage, t0.elapsed().as_secs_f64()));
        out.map_err(|message| {
            Box::new(PipelineFailure { id: self.artifacts.id.clone(), stage, message, artifacts: self.artifacts.clone() })
        })
    }
}

/// Runs the enabled stages on one input. With `config.out` set, the outputs
/// (and on error a `failure.json`) are written to `out/{id}`.
pub fn run_pipeline(
    template: &AdaptableTemplate,
    input: &PipelineInput,
    models: &Models,
    config: &PipelineConfig,
) -> Result<StageArtifacts, Box<PipelineFailure>> {
    let result = run_stages(template, input, models, config);
    if let Some(out) = &config.out {
        let dir = out.join(&input.id);
        let (artifacts, failure) = match &result {
            Ok(a) => (a, None),
            Err(f) => (&f.artifacts, Some(f)),
        };
        let persisted = artifacts.write(&dir).and_then(|_| match failure {
            Some(f) => std::fs::write(dir.join("failure.json"), f.to_json()).map_err(PipelineError::from),
            None => Ok(()),
        });
        if let Err(e) = persisted {
            log::warn!("{}: could not persist artifacts: {e}", input.id);
        }
    }
    result
}

fn run_stages(
    template: &AdaptableTemplate,
    input: &PipelineInput,
    models: &Models,
    config: &PipelineConfig,
) -> Result<StageArtifacts, Box<PipelineFailure>> {
    let oracle = input.oracle.as_ref();
    let use_oracle = |on: bool| if on { oracle } else { None };
    let stages = config.stages;
    let mut run = Run { artifacts: StageArtifacts { id: input.id.clone(), ..Default::default() } };

    let category = run.stage(Stage::Classify, |a| {
        let c = classify(&input.descriptor, models.classifier.as_ref(), use_oracle(config.oracle.category).map(|o| o.category))
            .map_err(|e| e.to_string())?;
        a.classification = Some(c);
        Ok(c.category)
    })?;

    let t = run.stage(Stage::Activate, |a| {
        let t = template.activate(category).map_err(|e| e.to_string())?;
        a.m_t = Some(extract_active(&t, t.mesh()).map_err(|e| e.to_string())?.mesh);
        Ok(t)
    })?;

    let mut full = t.mesh().clone();
    if stages.pose {
        full = run.stage(Stage::Pose, |a| {
            let posed = match use_oracle(config.oracle.pose) {
                Some(o) => {
                    a.pose = Some(o.pose.clone());
                    pose_mesh(t.body(), &o.pose).map_err(|e| e.to_string())?
                }
                None => {
                    let fit = fit_pose_to_annotations(t.body(), t.feature_lines(), &input.annotations).map_err(|e| e.to_string())?;
                    let m = fit.apply_mesh(&pose_mesh(t.body(), &fit.pose).map_err(|e| e.to_string())?);
                    a.pose = Some(fit.pose);
                    m
                }
            };
            a.m_p = Some(extract_active(&t, &posed).map_err(|e| e.to_string())?.mesh);
            Ok(posed)
        })?;
    }
    let active = extract_active(&t, &full).expect("activation already succeeded");
    let mut current = active.mesh.clone();

    if stages.lines {
        run.stage(Stage::Lines, |a| {
            let base: Vec<PredictedLine> = active
                .lines
                .iter()
                .map(|l| PredictedLine { id: l.id(), positions: l.positions(current.vertices()) })
                .collect();
            let out = match (use_oracle(config.oracle.lines), &models.lines) {
                (Some(o), _) => o.lines.clone(),
                (None, Some(reg)) => reg.predict(category, &input.descriptor, &base).map_err(|e| e.to_string())?,
                (None, None) => return Err("no line regressor and no line oracle".into()),
            };
            a.lines_p = Some(base);
            a.lines_o = Some(out);
            Ok(())
        })?;
    }

    if stages.deform {
        current = run.stage(Stage::Deform, |a| {
            let targets = a.lines_o.as_ref().ok_or("deformation needs the line stage")?;
            let mut handles = BTreeMap::new();
            for l in &active.lines {
                let target = targets.iter().find(|t| t.id == l.id()).ok_or_else(|| format!("no line {}", l.id()))?;
                if target.positions.len() != l.vertex_indices.len() {
                    return Err(format!("line {} has {} points for {} vertices", l.id(), target.positions.len(), l.vertex_indices.len()));
                }
                for (&v, p) in l.vertex_indices.iter().zip(&target.positions) {
                    handles.insert(v, *p);
                }
            }
            let m = deform(&current, &handles).map_err(|e| e.to_string())?;
            a.m_l = Some(m.clone());
            Ok(m)
        })?;
    }

    if stages.implicit {
        let m_i = run.stage(Stage::Implicit, |a| {
            let field: Arc<dyn OccupancyField> = match (use_oracle(config.oracle.occupancy), &models.occupancy) {
                (Some(o), _) => Arc::clone(&o.occupancy),
                (None, Some(net)) => Arc::new(net.field(input.descriptor.pyramid()).map_err(|e| e.to_string())?),
                (None, None) => return Err("no occupancy net and no occupancy oracle".into()),
            };
            let bounds = extraction_bounds(&current, config).ok_or("empty mesh")?;
            let grid = sample_grid(field.as_ref(), config.resolution, &bounds).map_err(|e| e.to_string())?;
            let m = marching_cubes(&grid, ISO_LEVEL);
            if m.is_empty() {
                return Err("occupancy field has no 0.5 level inside the bounds".into());
            }
            a.m_i = Some(m.clone());
            Ok(m)
        })?;
        if stages.register {
            current = run.stage(Stage::Register, |a| {
                let reg = nonrigid_register(&current, &m_i, &config.registration).map_err(|e| e.to_string())?;
                if reg.stalled {
                    log::warn!("{}: registration stalled", input.id);
                }
                a.registration = Some(reg.diagnostics);
                a.m_r = Some(reg.mesh.clone());
                Ok(reg.mesh)
            })?;
        }
    } else if stages.register {
        return Err(Box::new(PipelineFailure {
            id: input.id.clone(),
            stage: Stage::Register,
            message: "registration needs the implicit stage".into(),
            artifacts: run.artifacts,
        }));
    }

    if stages.refine {
        run.stage(Stage::Refine, |a| {
            let r = models.refiner.as_ref().ok_or("no mesh refiner")?;
            a.m_g = Some(r.refine(&current, category, &input.descriptor).map_err(|e| e.to_string())?);
            Ok(())
        })?;
    }
    Ok(run.artifacts)
}

/// Box around `mesh` grown by the configured margin and padding.
pub fn extraction_bounds(mesh: &Mesh, config: &PipelineConfig) -> Option<Aabb> {
    let b = mesh.bounding_box()?.inflated(config.bounds_margin);
    let pad = Vec3::repeat(config.bounds_pad);
    Some(Aabb::new(b.lo() - pad, b.hi() + pad))
}
