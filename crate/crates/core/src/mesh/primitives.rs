use super::{subdivide_region, Mesh, Vec3};

/// Icosahedron subdivided `level` times and projected onto a sphere.
pub fn icosphere(level: usize, radius: f64, center: Vec3) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    let mut mesh = Mesh::new(raw.iter().map(|p| Vec3::from(*p)).collect(), faces).unwrap();
    if level > 0 {
        let all: Vec<usize> = (0..mesh.face_count()).collect();
        mesh = subdivide_region(&mesh, &all, level).unwrap();
    }
    let verts = mesh.vertices().iter().map(|p| center + p.normalize() * radius).collect();
    mesh.with_vertices(verts)
}

/// Regular `nx` x `ny` cell grid in the z = 0 plane with +z normals.
pub fn grid(nx: usize, ny: usize, lo: [f64; 2], hi: [f64; 2]) -> Mesh {
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64;
            let y = lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64;
            vertices.push(Vec3::new(x, y, 0.0));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut faces = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Mesh::new(vertices, faces).unwrap()
}
