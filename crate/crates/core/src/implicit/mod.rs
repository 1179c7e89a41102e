//! Occupancy fields, lattice sampling and iso-surface extraction.

mod table;

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Aabb, Mesh, ScalarGrid, Vec3};

pub use table::{case_table, generate_case, table_to_text, EDGES};

pub const ISO_LEVEL: f64 = 0.5;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const MAX_RESOLUTION: usize = 256;
pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImplicitError {
    #[error("resolution {0} below minimum {MIN_RESOLUTION}")]
    Resolution(usize),
    #[error("bounds have non-positive extent")]
    DegenerateBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Trained,
    Analytic,
}

/// A function from 3-space to [0, 1]; values above 0.5 are inside.
pub trait OccupancyField: Send + Sync {
    fn evaluate(&self, p: &Vec3) -> f64;
    fn provenance(&self) -> Provenance;
}

/// Wraps a closure as a field.
#[derive(Clone)]
pub struct FnField {
    f: Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>,
    provenance: Provenance,
}

impl FnField {
    pub fn new(provenance: Provenance, f: impl Fn(&Vec3) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), provenance }
    }
}

impl std::fmt::Debug for FnField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnField").field("provenance", &self.provenance).finish_non_exhaustive()
    }
}

impl OccupancyField for FnField {
    fn evaluate(&self, p: &Vec3) -> f64 {
        (self.f)(p).clamp(0.0, 1.0)
    }

    fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// Occupancy that falls linearly from 1 to 0 across a band of half-width
/// `band` around the surface of a signed distance function.
pub fn ramp_occupancy(signed_distance: f64, band: f64) -> f64 {
    (0.5 - signed_distance / (2.0 * band)).clamp(0.0, 1.0)
}

/// Analytic ball occupancy with a linear ramp of half-width `band`.
pub fn sphere_field(center: Vec3, radius: f64, band: f64) -> FnField {
    FnField::new(Provenance::Analytic, move |p| ramp_occupancy((p - center).norm() - radius, band))
}

/// Evaluates the field on a `resolution`^3 lattice spanning `bounds`.
pub fn sample_grid(field: &dyn OccupancyField, resolution: usize, bounds: &Aabb) -> Result<ScalarGrid, ImplicitError> {
    if resolution < MIN_RESOLUTION {
        return Err(ImplicitError::Resolution(resolution));
    }
    let ext = bounds.extent();
    if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
        return Err(ImplicitError::DegenerateBounds);
    }
    let r = resolution;
    let spacing = [0, 1, 2].map(|k| ext[k] / (r - 1) as f64);
    let origin = bounds.lo();
    let mut values = vec![0.0; r * r * r];
    values.par_chunks_mut(r).enumerate().for_each(|(row, out)| {
        let (y, z) = (row % r, row / r);
        for (x, v) in out.iter_mut().enumerate() {
            let p = origin + Vec3::new(x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]);
            *v = field.evaluate(&p);
        }
    });
    Ok(ScalarGrid::new([r, r, r], origin, spacing, values).expect("lattice is consistent"))
}

/// Extracts the `iso` level set. Corners with value above `iso` are inside;
/// faces are oriented towards lower values. Vertices are shared per lattice
/// edge, so the output is watertight wherever the surface stays clear of the
/// grid boundary.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Mesh {
    let [nx, ny, nz] = grid.resolution();
    if nx < 2 || ny < 2 || nz < 2 {
        return Mesh::empty();
    }
    let table = case_table();
    let edge_key = |x: usize, y: usize, z: usize, e: usize| -> u64 {
        let (a, _) = EDGES[e];
        let [ox, oy, oz] = table::corner_offset(a);
        let idx = grid.index(x + ox, y + oy, z + oz) as u64;
        idx * 3 + table::edge_axis(e) as u64
    };
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let mut mask = 0usize;
                    for c in 0..8 {
                        let [ox, oy, oz] = table::corner_offset(c);
                        if grid.value(x + ox, y + oy, z + oz) > iso {
                            mask |= 1 << c;
                        }
                    }
                    for t in &table[mask] {
                        tris.push(t.map(|e| edge_key(x, y, z, e)));
                    }
                }
            }
            tris
        })
        .collect();

    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for tri in slabs.iter().flatten() {
        let f = tri.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                vertices.push(edge_vertex(grid, key, iso));
                vertices.len() - 1
            })
        });
        faces.push(f);
    }
    Mesh::new(vertices, faces).expect("edge ids are distinct per triangle")
}

fn edge_vertex(grid: &ScalarGrid, key: u64, iso: f64) -> Vec3 {
    let [nx, ny, _] = grid.resolution();
    let axis = (key % 3) as usize;
    let idx = (key / 3) as usize;
    let (x, y, z) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
    let (x1, y1, z1) = match axis {
        0 => (x + 1, y, z),
        1 => (x, y + 1, z),
        _ => (x, y, z + 1),
    };
    let (v0, v1) = (grid.value(x, y, z), grid.value(x1, y1, z1));
    let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
    let (p0, p1) = (grid.position(x, y, z), grid.position(x1, y1, z1));
    p0 + (p1 - p0) * t
}
