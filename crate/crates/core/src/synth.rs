//! Procedural garments with exact ground truth: posed, offset and wrinkled
//! copies of the activated template, plus closed shells, occupancy labels,
//! silhouettes and a dataset directory format.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{pose_mesh, Pose, PoseError, Region, POSE_SLOTS};
use crate::feature_line::{annotations_from_json, annotations_to_json, FeatureLineAnnotation, LineError, PredictedLine};
use crate::implicit::{ramp_occupancy, FnField, Provenance};
use crate::mesh::{self, compute_vertex_normals, read_obj, sample_surface, write_obj, Aabb, IoError, Mesh, MeshError, Vec3};
use crate::neural::{NeuralError, SilhouetteDescriptor, SILHOUETTE_SIZE};
use crate::spatial::TriangleBvh;
use crate::template::{extract_active, AdaptableTemplate, ClothCategory, TemplateError};

pub const BASE_OFFSET: f64 = 0.012;
pub const OFFSET_VARIATION: f64 = 0.003;
pub const MAX_JITTER: f64 = 0.002;
pub const SIGMA_PERTURB: f64 = 0.02;
/// Distance between the outer (ground truth) and inner walls of the closed
/// shell.
pub const SHELL_THICKNESS: f64 = 0.02;
/// Half-width of the analytic occupancy ramp.
pub const OCCUPANCY_BAND: f64 = 0.01;
pub const WRINKLE_OCTAVES: usize = 3;
/// Lowest wrinkle frequency in radians per unit length.
pub const WRINKLE_BASE_FREQUENCY: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("amplitudes must be non-negative and finite")]
    Amplitude,
    #[error("closed mesh is not watertight")]
    NotWatertight,
    #[error("bad dataset entry: {0}")]
    Entry(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Line(#[from] LineError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(IoError::Io(e))
    }
}

/// Downward stretch and outward flare of the part below the waist line,
/// growing linearly to the hem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drape {
    pub drop: f64,
    pub flare: f64,
}

pub fn drape_for(category: ClothCategory) -> Drape {
    use ClothCategory::*;
    match category {
        LongSkirt => Drape { drop: 0.22, flare: 0.5 },
        ShortSkirt => Drape { drop: 0.04, flare: 0.15 },
        LongSleeveDress | ShortSleeveDress | NoneSleeveDress => Drape { drop: 0.15, flare: 0.35 },
        _ => Drape { drop: 0.0, flare: 0.0 },
    }
}

#[derive(Debug, Clone)]
pub struct SynthGarment {
    pub category: ClothCategory,
    /// Open garment surface on the active template connectivity.
    pub ground_truth_mesh: Mesh,
    /// Outer wall = ground truth, inner wall offset inwards, rims stitched.
    pub closed_mesh: Mesh,
    pub pose: Pose,
    pub annotations: Vec<FeatureLineAnnotation>,
    /// Line vertices before jitter, in ground-truth coordinates.
    pub line_truth: Vec<PredictedLine>,
    pub wrinkle_seed: u64,
    pub seed: u64,
    pub pose_magnitude: f64,
    pub wrinkle_amplitude: f64,
}

/// Band-limited wrinkle heights: octave `k` has frequency
/// `WRINKLE_BASE_FREQUENCY * 2^k` and amplitude halved per octave.
#[derive(Debug, Clone)]
struct WrinkleField {
    octaves: Vec<(Vec3, Vec3, f64, f64)>,
    amplitude: f64,
    base: (Vec3, f64),
}

impl WrinkleField {
    fn new(amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = |rng: &mut ChaCha8Rng| {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() < 1e-3 {
                Vec3::x()
            } else {
                v.normalize()
            }
        };
        let octaves = (0..WRINKLE_OCTAVES)
            .map(|_| (dir(&mut rng), dir(&mut rng), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let base = (dir(&mut rng), rng.gen_range(0.0..std::f64::consts::TAU));
        Self { octaves, amplitude, base }
    }

    fn wrinkle(&self, p: &Vec3) -> f64 {
        let mut h = 0.0;
        for (k, (d1, d2, a, b)) in self.octaves.iter().enumerate() {
            let f = WRINKLE_BASE_FREQUENCY * (1 << k) as f64;
            h += 0.5f64.powi(k as i32) * (f * d1.dot(p) + a).sin() * (f * d2.dot(p) + b).cos();
        }
        self.amplitude * h
    }

    fn offset(&self, p: &Vec3) -> f64 {
        BASE_OFFSET + OFFSET_VARIATION * (4.0 * self.base.0.dot(p) + self.base.1).sin() + self.wrinkle(p)
    }
}

/// Per-joint rotations about random axes with angles uniform in
/// `[0, magnitude]`, on the default active joints.
pub fn random_pose(magnitude: f64, rng: &mut ChaCha8Rng) -> Pose {
    let base = Pose::zero();
    let mut theta = vec![[0.0; 3]; POSE_SLOTS];
    for (slot, active) in base.active_mask().iter().enumerate() {
        if !active {
            continue;
        }
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let angle = if magnitude > 0.0 { rng.gen_range(0.0..=magnitude) } else { 0.0 };
        let axis = if axis.norm() < 1e-6 { Vec3::y() } else { axis.normalize() };
        theta[slot] = (axis * angle).into();
    }
    Pose::new(theta, base.active_mask().to_vec()).expect("mask matches")
}

fn shared_template() -> &'static AdaptableTemplate {
    static T: OnceLock<AdaptableTemplate> = OnceLock::new();
    T.get_or_init(AdaptableTemplate::procedural)
}

/// [`generate_with`] on the procedural template.
pub fn generate(category: ClothCategory, pose_magnitude: f64, wrinkle_amplitude: f64, seed: u64) -> Result<SynthGarment, SynthError> {
    generate_with(shared_template(), category, pose_magnitude, wrinkle_amplitude, seed)
}

/// Activates `template` for `category`, displaces the rest surface
/// outwards by a smooth offset plus wrinkles (and drapes skirts), poses it
/// and records jittered line annotations.
pub fn generate_with(
    template: &AdaptableTemplate,
    category: ClothCategory,
    pose_magnitude: f64,
    wrinkle_amplitude: f64,
    seed: u64,
) -> Result<SynthGarment, SynthError> {
    if !(pose_magnitude >= 0.0 && wrinkle_amplitude >= 0.0 && pose_magnitude.is_finite() && wrinkle_amplitude.is_finite()) {
        return Err(SynthError::Amplitude);
    }
    let t = template.activate(category)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = random_pose(pose_magnitude, &mut rng);
    let wrinkle_seed = rng.gen::<u64>();
    let field = WrinkleField::new(wrinkle_amplitude, wrinkle_seed);

    let rest = t.mesh();
    let normals = compute_vertex_normals(rest);
    let drape = drape_for(category);
    let line_centroid = |kind| {
        t.feature_lines().iter().find(|l| l.kind == kind).map(|l| l.centroid(rest.vertices()))
    };
    let frame = match (line_centroid(crate::feature_line::LandmarkKind::Wa), line_centroid(crate::feature_line::LandmarkKind::He)) {
        (Some(top), Some(hem)) if drape.drop > 0.0 || drape.flare > 0.0 => Some((top, hem)),
        _ => None,
    };
    let displaced: Vec<Vec3> = rest
        .vertices()
        .iter()
        .zip(&normals)
        .zip(t.region_labels())
        .map(|((p, n), region)| {
            let mut q = p + n * field.offset(p);
            if let (Some((top, hem)), Region::Waist) = (frame, region) {
                let s = ((top.y - p.y) / (top.y - hem.y)).clamp(0.0, 1.0);
                let radial = Vec3::new(q.x - hem.x, 0.0, q.z - hem.z);
                q += radial * (drape.flare * s) - Vec3::y() * (drape.drop * s);
            }
            q
        })
        .collect();
    let model = t.body().with_mesh(rest.with_vertices(displaced), t.body().skin_weights().clone())?;
    let posed = pose_mesh(&model, &pose)?;
    let active = extract_active(&t, &posed)?;

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1177_e500);
    let mut line_truth = Vec::new();
    let mut annotations = Vec::new();
    for l in t.feature_lines() {
        let exact = l.positions(posed.vertices());
        let noisy = exact.iter().map(|p| p + jitter(&mut jitter_rng)).collect();
        annotations.push(FeatureLineAnnotation::new(l.kind, l.side, noisy)?);
        line_truth.push(PredictedLine { id: l.id(), positions: exact });
    }
    let closed_mesh = closed_shell(&active.mesh, SHELL_THICKNESS);
    if !closed_mesh.is_watertight() {
        return Err(SynthError::NotWatertight);
    }
    Ok(SynthGarment {
        category,
        ground_truth_mesh: active.mesh,
        closed_mesh,
        pose,
        annotations,
        line_truth,
        wrinkle_seed,
        seed,
        pose_magnitude,
        wrinkle_amplitude,
    })
}

/// Uniform in the cube of half-side `MAX_JITTER / sqrt(3)`, so the norm
/// never exceeds `MAX_JITTER`.
fn jitter(rng: &mut ChaCha8Rng) -> Vec3 {
    let h = MAX_JITTER / 3f64.sqrt();
    Vec3::new(rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h))
}

/// Closes an open surface into a shell: the surface itself, a copy moved
/// `thickness` against the vertex normals with flipped faces, and a quad
/// strip along every boundary edge.
pub fn closed_shell(open: &Mesh, thickness: f64) -> Mesh {
    let n = open.vertex_count();
    let normals = compute_vertex_normals(open);
    let mut verts = open.vertices().to_vec();
    verts.extend(open.vertices().iter().zip(&normals).map(|(p, nn)| p - nn * thickness));
    let mut faces = open.faces().to_vec();
    faces.extend(open.faces().iter().map(|f| [f[0] + n, f[2] + n, f[1] + n]));
    let counts = open.edge_face_counts();
    for f in open.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if counts[&mesh::sorted_pair(a, b)] == 1 {
                faces.push([b, a, a + n]);
                faces.push([b, a + n, b + n]);
            }
        }
    }
    Mesh::new(verts, faces).expect("shell indices are in range")
}

/// Offset of the ground truth halfway into the shell.
pub fn midsurface(garment: &SynthGarment) -> Mesh {
    let gt = &garment.ground_truth_mesh;
    let normals = compute_vertex_normals(gt);
    gt.with_vertices(gt.vertices().iter().zip(&normals).map(|(p, n)| p - n * (0.5 * SHELL_THICKNESS)).collect())
}

/// Occupancy of the shell as a linear ramp in the distance to the
/// midsurface; its 0.5 level sits half a shell thickness away.
pub fn analytic_occupancy(garment: &SynthGarment) -> FnField {
    let bvh = Arc::new(TriangleBvh::new(&midsurface(garment)));
    let half = 0.5 * SHELL_THICKNESS;
    let cutoff = half + OCCUPANCY_BAND;
    FnField::new(Provenance::Analytic, move |p| match bvh.closest_point_within(p, cutoff) {
        Some(s) => ramp_occupancy(s.dist2.sqrt() - half, OCCUPANCY_BAND),
        None => 0.0,
    })
}

/// `n` points, half uniform in the inflated bounds of the closed mesh and
/// half surface samples perturbed by `N(0, SIGMA_PERTURB^2)`, labelled by
/// ray parity.
pub fn occupancy_labels(garment: &SynthGarment, n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<f64>), SynthError> {
    occupancy_labels_for_mesh(&garment.closed_mesh, n, seed)
}

pub fn occupancy_labels_for_mesh(closed: &Mesh, n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<f64>), SynthError> {
    if !closed.is_watertight() {
        return Err(SynthError::NotWatertight);
    }
    let bounds = closed.bounding_box().ok_or(MeshError::ZeroArea)?.inflated(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut points: Vec<Vec3> = (0..n - half)
        .map(|_| {
            let (lo, hi) = (bounds.lo(), bounds.hi());
            Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z))
        })
        .collect();
    if half > 0 {
        let surface = sample_surface(closed, half, seed ^ 0x5a5a)?;
        let normal = Normal::new(0.0, SIGMA_PERTURB).expect("positive sigma");
        points.extend(
            surface
                .points()
                .iter()
                .map(|p| p + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))),
        );
    }
    let labels = label_points(closed, &points);
    Ok((points, labels))
}

/// Ray-parity inside test of every point against a closed mesh.
pub fn label_points(closed: &Mesh, points: &[Vec3]) -> Vec<f64> {
    let bvh = TriangleBvh::new(closed);
    points.par_iter().map(|p| f64::from(u8::from(bvh.contains(p)))).collect()
}

/// Front orthographic silhouette of the ground-truth surface.
pub fn render_silhouette(garment: &SynthGarment, size: usize) -> Result<SilhouetteDescriptor, SynthError> {
    Ok(SilhouetteDescriptor::rasterize(&garment.ground_truth_mesh, size)?)
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentMeta {
    pub id: String,
    pub category: ClothCategory,
    pub seed: u64,
    pub wrinkle_seed: u64,
    pub pose_magnitude: f64,
    pub wrinkle_amplitude: f64,
    pub shell_thickness: f64,
    pub line_truth: Vec<(String, Vec<[f64; 3]>)>,
}

/// Parameters of one dataset entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub category: ClothCategory,
    pub pose_magnitude: f64,
    pub wrinkle_amplitude: f64,
    pub seed: u64,
}

/// `count` entries cycling through the categories, seeded from `seed`.
pub fn family(count: usize, pose_magnitude: f64, wrinkle_amplitude: f64, seed: u64) -> Vec<GarmentSpec> {
    (0..count)
        .map(|i| GarmentSpec {
            category: ClothCategory::ALL[i % ClothCategory::ALL.len()],
            pose_magnitude,
            wrinkle_amplitude,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        })
        .collect()
}

pub fn generate_family(specs: &[GarmentSpec]) -> Result<Vec<SynthGarment>, SynthError> {
    specs.par_iter().map(|s| generate(s.category, s.pose_magnitude, s.wrinkle_amplitude, s.seed)).collect()
}

pub fn entry_id(index: usize) -> String {
    format!("{index:04}")
}

/// Writes one garment as `dir/{id}/...`.
pub fn write_garment(dir: &Path, id: &str, g: &SynthGarment) -> Result<(), SynthError> {
    let d = dir.join(id);
    std::fs::create_dir_all(&d)?;
    write_obj(&g.ground_truth_mesh, &d.join("garment.obj"))?;
    write_obj(&g.closed_mesh, &d.join("closed.obj"))?;
    std::fs::write(d.join("annotations.json"), annotations_to_json(g.category.as_str(), &g.annotations))?;
    std::fs::write(d.join("pose.json"), g.pose.to_json())?;
    std::fs::write(d.join("silhouette.pgm"), render_silhouette(g, SILHOUETTE_SIZE)?.to_pgm())?;
    let meta = GarmentMeta {
        id: id.to_string(),
        category: g.category,
        seed: g.seed,
        wrinkle_seed: g.wrinkle_seed,
        pose_magnitude: g.pose_magnitude,
        wrinkle_amplitude: g.wrinkle_amplitude,
        shell_thickness: SHELL_THICKNESS,
        line_truth: g
            .line_truth
            .iter()
            .map(|l| (l.id.to_string(), l.positions.iter().map(|p| [p.x, p.y, p.z]).collect()))
            .collect(),
    };
    std::fs::write(d.join("meta.json"), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    Ok(())
}

/// Writes every garment under `dir` with ids `0000`, `0001`, ...
pub fn write_dataset(dir: &Path, garments: &[SynthGarment]) -> Result<Vec<String>, SynthError> {
    std::fs::create_dir_all(dir)?;
    garments
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let id = entry_id(i);
            write_garment(dir, &id, g)?;
            Ok(id)
        })
        .collect()
}

/// One dataset entry read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedGarment {
    pub garment: SynthGarment,
    pub silhouette: SilhouetteDescriptor,
    pub meta: GarmentMeta,
}

pub fn read_garment(entry: &Path) -> Result<LoadedGarment, SynthError> {
    let text = std::fs::read_to_string(entry.join("meta.json"))?;
    let meta: GarmentMeta = serde_json::from_str(&text).map_err(|e| SynthError::Entry(e.to_string()))?;
    let ground_truth_mesh = read_obj(&entry.join("garment.obj"))?;
    let closed_mesh = read_obj(&entry.join("closed.obj"))?;
    let (cat, annotations) = annotations_from_json(&std::fs::read_to_string(entry.join("annotations.json"))?)?;
    if cat != meta.category.as_str() {
        return Err(SynthError::Entry(format!("annotation category {cat} disagrees with meta")));
    }
    let pose = Pose::from_json(&std::fs::read_to_string(entry.join("pose.json"))?).map_err(|e| SynthError::Entry(e.to_string()))?;
    let silhouette = SilhouetteDescriptor::from_pgm(&std::fs::read(entry.join("silhouette.pgm"))?)?;
    let line_truth = meta
        .line_truth
        .iter()
        .map(|(id, pts)| {
            let ann = annotations
                .iter()
                .find(|a| a.id().to_string() == *id)
                .ok_or_else(|| SynthError::Entry(format!("line {id} has no annotation")))?;
            Ok(PredictedLine { id: ann.id(), positions: pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect() })
        })
        .collect::<Result<_, SynthError>>()?;
    let garment = SynthGarment {
        category: meta.category,
        ground_truth_mesh,
        closed_mesh,
        pose,
        annotations,
        line_truth,
        wrinkle_seed: meta.wrinkle_seed,
        seed: meta.seed,
        pose_magnitude: meta.pose_magnitude,
        wrinkle_amplitude: meta.wrinkle_amplitude,
    };
    Ok(LoadedGarment { garment, silhouette, meta })
}

/// Entry directories of a dataset in name order.
pub fn dataset_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>, SynthError> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Bounds of the closed shell, for sampling and extraction.
pub fn shell_bounds(garment: &SynthGarment) -> Option<Aabb> {
    garment.closed_mesh.bounding_box()
}
