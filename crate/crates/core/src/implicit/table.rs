//! Marching-cubes case table, generated by walking the cube faces.
//!
//! Corner `i` sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`. On every face the
//! corners are visited counter-clockwise about the outward normal and one
//! segment is emitted per run of inside corners, from the crossing where the
//! run starts to the crossing where it ends. Inside corners that touch only
//! diagonally on a face are therefore always separated, which is the same
//! decision the neighbouring cube makes for that face. Segments chain into
//! closed loops that are fan-triangulated; triangles face away from the
//! inside corners.

use std::sync::OnceLock;

/// Corner pairs of the 12 cube edges, lower corner first.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

pub fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// Axis along which edge `e` runs.
pub fn edge_axis(e: usize) -> usize {
    e / 4
}

fn edge_between(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&p| p == key).expect("corners share an edge")
}

fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(6);
    for k in 0..3 {
        let (u, v) = ((k + 1) % 3, (k + 2) % 3);
        for s in 0..2 {
            let corner = |cu: usize, cv: usize| (s << k) | (cu << u) | (cv << v);
            let mut ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if s == 0 {
                ring.reverse();
            }
            out.push(ring);
        }
    }
    out
}

/// Triangles (as edge-index triples) for one inside-corner mask.
pub fn generate_case(mask: u8) -> Vec<[usize; 3]> {
    let inside = |c: usize| mask >> c & 1 == 1;
    let mut next = [usize::MAX; 12];
    for ring in faces() {
        for i in 0..4 {
            let (prev, cur) = (ring[(i + 3) % 4], ring[i]);
            if inside(prev) || !inside(cur) {
                continue;
            }
            let start = edge_between(prev, cur);
            let mut j = i;
            while inside(ring[(j + 1) % 4]) {
                j += 1;
            }
            let end = edge_between(ring[j % 4], ring[(j + 1) % 4]);
            next[start] = end;
        }
    }
    let mut visited = [false; 12];
    let mut tris = Vec::new();
    for e0 in 0..12 {
        if next[e0] == usize::MAX || visited[e0] {
            continue;
        }
        let mut lp = vec![e0];
        visited[e0] = true;
        let mut e = next[e0];
        while e != e0 {
            visited[e] = true;
            lp.push(e);
            e = next[e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i], lp[i + 1]]);
        }
    }
    tris
}

pub fn case_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(generate_case).collect())
}

/// One line per case: `mask: a b c; d e f; ...`.
pub fn table_to_text() -> String {
    let mut s = String::new();
    for (mask, tris) in case_table().iter().enumerate() {
        let body: Vec<String> = tris.iter().map(|t| format!("{} {} {}", t[0], t[1], t[2])).collect();
        s.push_str(&format!("{mask}: {}\n", body.join("; ")));
    }
    s
}
