//! Python bindings: synthetic garments, the oracle pipeline and the
//! evaluation metrics.

use garment_core::mesh::{write_obj, Mesh, Vec3};
use garment_core::metrics::{chamfer_points, emd_points};
use garment_core::neural::SILHOUETTE_SIZE;
use garment_core::pipeline::{run_pipeline, stage_chamfer, Models, OracleToggles, PipelineConfig, PipelineInput};
use garment_core::synth::{generate, render_silhouette, SynthGarment, SIGMA_PERTURB};
use garment_core::template::{AdaptableTemplate, ClothCategory};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn points(p: Vec<[f64; 3]>) -> Vec<Vec3> {
    p.into_iter().map(Vec3::from).collect()
}

fn category(name: &str) -> PyResult<ClothCategory> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown category {name:?}")))
}

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Triangle mesh with vertex and face lists.
#[pyclass(name = "Mesh", module = "garment")]
#[derive(Clone)]
pub struct PyMesh {
    inner: Mesh,
}

#[pymethods]
impl PyMesh {
    #[new]
    fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> PyResult<Self> {
        Mesh::new(points(vertices), faces).map(|inner| Self { inner }).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices().iter().map(|v| [v.x, v.y, v.z]).collect()
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.inner.faces().to_vec()
    }

    fn area(&self) -> f64 {
        self.inner.total_area()
    }

    fn euler_characteristic(&self) -> i64 {
        self.inner.euler_characteristic()
    }

    fn is_watertight(&self) -> bool {
        self.inner.is_watertight()
    }

    fn write_obj(&self, path: std::path::PathBuf) -> PyResult<()> {
        write_obj(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.vertex_count()
    }

    fn __repr__(&self) -> String {
        format!("Mesh(vertices={}, faces={})", self.inner.vertex_count(), self.inner.faces().len())
    }
}

/// Names of the ten garment categories.
#[pyfunction]
fn categories() -> Vec<&'static str> {
    ClothCategory::ALL.iter().map(|c| c.as_str()).collect()
}

#[pyfunction]
fn chamfer_distance(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    chamfer_points(&points(a), &points(b)).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Exact for up to 1024 points per side, auction above.
#[pyfunction]
fn earth_movers_distance(py: Python<'_>, a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    let (a, b) = (points(a), points(b));
    py.allow_threads(|| emd_points(&a, &b)).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn synth(name: &str, seed: u64, pose_magnitude: f64, wrinkle: f64) -> PyResult<SynthGarment> {
    generate(category(name)?, pose_magnitude, wrinkle, seed).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Ground-truth mesh of a synthetic garment.
#[pyfunction]
#[pyo3(signature = (category, seed=0, pose_magnitude=0.3, wrinkle=0.003))]
fn synthetic_garment(category: &str, seed: u64, pose_magnitude: f64, wrinkle: f64) -> PyResult<PyMesh> {
    Ok(PyMesh { inner: synth(category, seed, pose_magnitude, wrinkle)?.ground_truth_mesh })
}

/// Runs the pipeline on a synthetic garment with ground-truth category,
/// pose, occupancy and feature lines. Returns `(meshes, chamfer)` keyed by
/// stage name.
#[pyfunction]
#[pyo3(signature = (category, seed=0, pose_magnitude=0.3, wrinkle=0.003, resolution=64))]
fn reconstruct_oracle(
    py: Python<'_>,
    category: &str,
    seed: u64,
    pose_magnitude: f64,
    wrinkle: f64,
    resolution: usize,
) -> PyResult<(Vec<(String, PyMesh)>, Vec<(String, f64)>)> {
    let g = synth(category, seed, pose_magnitude, wrinkle)?;
    let config = PipelineConfig { oracle: OracleToggles::all(), resolution, seed, ..PipelineConfig::default() };
    config.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.allow_threads(|| {
        let descriptor = render_silhouette(&g, SILHOUETTE_SIZE).map_err(runtime)?;
        let template = AdaptableTemplate::procedural();
        let input = PipelineInput::from_garment(format!("{category}-{seed}"), &g, descriptor);
        let art = run_pipeline(&template, &input, &Models::default(), &config).map_err(runtime)?;
        let cd = stage_chamfer(&art, &g.ground_truth_mesh, config.eval_samples, seed).map_err(runtime)?;
        let meshes = art.meshes().into_iter().map(|(n, m)| (n.to_string(), PyMesh { inner: m.clone() })).collect();
        Ok((meshes, cd.stages))
    })
}

#[pymodule]
fn garment(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_function(wrap_pyfunction!(categories, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(earth_movers_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_garment, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_oracle, m)?)?;
    m.add("SIGMA_PERTURB", SIGMA_PERTURB)?;
    Ok(())
}
