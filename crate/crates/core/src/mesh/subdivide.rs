use std::collections::HashMap;

use super::{sorted_pair, Mesh, MeshError};

/// Output of [`subdivide_region_tracked`].
#[derive(Debug, Clone)]
pub struct Subdivision {
    pub mesh: Mesh,
    /// For every vertex appended past the input vertex count, the edge
    /// whose midpoint it is (indices refer to the mesh at creation time).
    pub vertex_parents: Vec<(usize, usize)>,
    /// Per level, edge -> midpoint vertex.
    pub midpoints: Vec<HashMap<(usize, usize), usize>>,
    /// Faces descended from the selected region by 1-to-4 splits.
    pub selected: Vec<usize>,
}

/// Midpoint-subdivides the selected faces `levels` times.
///
/// Unselected faces that share a split edge are bisected (or split into three
/// or four when several of their edges are split) so that no hanging vertex
/// remains. Original vertex positions are untouched.
pub fn subdivide_region(mesh: &Mesh, face_subset: &[usize], levels: usize) -> Result<Mesh, MeshError> {
    subdivide_region_tracked(mesh, face_subset, levels).map(|s| s.mesh)
}

pub fn subdivide_region_tracked(mesh: &Mesh, face_subset: &[usize], levels: usize) -> Result<Subdivision, MeshError> {
    if face_subset.is_empty() {
        return Err(MeshError::EmptyFaceSubset);
    }
    if levels == 0 {
        return Err(MeshError::ZeroLevels);
    }
    if let Some(&f) = face_subset.iter().find(|&&f| f >= mesh.face_count()) {
        return Err(MeshError::FaceOutOfRange(f));
    }

    let mut vertices = mesh.vertices().to_vec();
    let mut faces = mesh.faces().to_vec();
    let mut selected = vec![false; faces.len()];
    for &f in face_subset {
        selected[f] = true;
    }
    let mut vertex_parents = Vec::new();
    let mut all_midpoints = Vec::with_capacity(levels);

    for _ in 0..levels {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        // Deterministic creation order: face order, then edge order.
        for (fi, f) in faces.iter().enumerate() {
            if !selected[fi] {
                continue;
            }
            for k in 0..3 {
                let key = sorted_pair(f[k], f[(k + 1) % 3]);
                midpoints.entry(key).or_insert_with(|| {
                    vertices.push(0.5 * (vertices[key.0] + vertices[key.1]));
                    vertex_parents.push(key);
                    vertices.len() - 1
                });
            }
        }

        let mut next_faces = Vec::with_capacity(faces.len() * 2);
        let mut next_selected = Vec::with_capacity(faces.len() * 2);
        for (fi, &f) in faces.iter().enumerate() {
            let mid = |k: usize| midpoints.get(&sorted_pair(f[k], f[(k + 1) % 3])).copied();
            let m = [mid(0), mid(1), mid(2)];
            let split_count = m.iter().filter(|x| x.is_some()).count();
            match split_count {
                0 => {
                    next_faces.push(f);
                    next_selected.push(false);
                }
                3 => {
                    let [a, b, c] = f;
                    let (mab, mbc, mca) = (m[0].unwrap(), m[1].unwrap(), m[2].unwrap());
                    for child in [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]] {
                        next_faces.push(child);
                        next_selected.push(selected[fi]);
                    }
                }
                1 => {
                    // Rotate so the split edge is (a, b).
                    let k = m.iter().position(|x| x.is_some()).unwrap();
                    let (a, b, c) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
                    let mm = m[k].unwrap();
                    next_faces.push([a, mm, c]);
                    next_faces.push([mm, b, c]);
                    next_selected.extend([false, false]);
                }
                _ => {
                    // Rotate so the unsplit edge is (c, a).
                    let k = (m.iter().position(|x| x.is_none()).unwrap() + 1) % 3;
                    let (a, b, c) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
                    let m1 = m[k].unwrap();
                    let m2 = m[(k + 1) % 3].unwrap();
                    next_faces.push([m1, b, m2]);
                    next_faces.push([a, m1, m2]);
                    next_faces.push([a, m2, c]);
                    next_selected.extend([false, false, false]);
                }
            }
        }
        faces = next_faces;
        selected = next_selected;
        all_midpoints.push(midpoints);
    }

    let selected_faces = selected.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect();
    Ok(Subdivision {
        mesh: Mesh::new(vertices, faces).expect("subdivision preserves validity"),
        vertex_parents,
        midpoints: all_midpoints,
        selected: selected_faces,
    })
}
