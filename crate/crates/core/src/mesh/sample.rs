use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Mesh, MeshError, PointCloud, Vec3};

/// Area-weighted uniform samples on the surface, with the sampled face's
/// normal attached. Each point draws from its own RNG stream, so the result
/// does not depend on thread count.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud, MeshError> {
    let (points, normals, _) = sample_surface_with_faces(mesh, n, seed)?;
    Ok(PointCloud::with_normals(points, normals).expect("face normals are unit"))
}

pub(crate) fn sample_surface_with_faces(
    mesh: &Mesh,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<usize>), MeshError> {
    if n == 0 {
        return Err(MeshError::ZeroSamples);
    }
    let mut cdf = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::ZeroArea);
    }
    let samples: Vec<(Vec3, Vec3, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let target = rng.gen::<f64>() * total;
            let face = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let r = u.sqrt();
            let [a, b, c] = mesh.triangle(face);
            let p = a * (1.0 - r) + b * (r * (1.0 - v)) + c * (r * v);
            (p, mesh.face_normal(face), face)
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for (p, nrm, f) in samples {
        points.push(p);
        normals.push(nrm);
        faces.push(f);
    }
    Ok((points, normals, faces))
}
