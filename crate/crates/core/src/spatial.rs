//! Exact nearest-neighbour k-d tree and a triangle BVH for closest-point and
//! ray-parity queries.

use crate::mesh::{Aabb, Mesh, Vec3};

const KD_LEAF: usize = 8;
const BVH_LEAF: usize = 4;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 3-d tree over a point set. Ties in distance resolve to the lowest
/// point index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= KD_LEAF {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let bb = Aabb::from_points(&self.order[start..end].iter().map(|&i| self.points[i]).collect::<Vec<_>>()).unwrap();
        let ext = bb.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and squared distance of the nearest point, or `None` when empty.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Debug, Clone)]
struct BvhNode {
    bb: Aabb,
    // Leaf when `count > 0`: faces order[first..first+count]. Otherwise children first, first+1.
    first: usize,
    count: usize,
}

fn box_dist2(bb: &Aabb, p: &Vec3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if p[k] < bb.min[k] {
            bb.min[k] - p[k]
        } else if p[k] > bb.max[k] {
            p[k] - bb.max[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub face: usize,
    pub dist2: f64,
}

/// Bounding-volume hierarchy over the faces of a mesh.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

impl TriangleBvh {
    pub fn new(mesh: &Mesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.face_count()).map(|f| mesh.triangle(f)).collect();
        let mut bvh = TriangleBvh { order: (0..tris.len()).collect(), tris, nodes: Vec::new() };
        if !bvh.tris.is_empty() {
            let centroids: Vec<Vec3> = bvh.tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
            bvh.nodes.push(BvhNode { bb: Aabb::new(Vec3::zeros(), Vec3::zeros()), first: 0, count: 0 });
            bvh.build(0, 0, bvh.tris.len(), &centroids);
        }
        bvh
    }

    fn bounds(&self, start: usize, end: usize) -> Aabb {
        let pts: Vec<Vec3> = self.order[start..end].iter().flat_map(|&f| self.tris[f]).collect();
        Aabb::from_points(&pts).unwrap()
    }

    fn build(&mut self, node: usize, start: usize, end: usize, centroids: &[Vec3]) {
        let bb = self.bounds(start, end);
        if end - start <= BVH_LEAF {
            self.nodes[node] = BvhNode { bb, first: start, count: end - start };
            return;
        }
        let cb = Aabb::from_points(&self.order[start..end].iter().map(|&f| centroids[f]).collect::<Vec<_>>()).unwrap();
        let ext = cb.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = self.nodes.len();
        self.nodes.push(BvhNode { bb, first: 0, count: 0 });
        self.nodes.push(BvhNode { bb, first: 0, count: 0 });
        self.nodes[node] = BvhNode { bb, first: left, count: 0 };
        self.build(left, start, mid, centroids);
        self.build(left + 1, mid, end, centroids);
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Closest surface point. Ties resolve to the lowest face index.
    pub fn closest_point(&self, q: &Vec3) -> Option<SurfacePoint> {
        self.closest_point_within(q, f64::INFINITY)
    }

    /// Closest surface point strictly nearer than `cutoff`.
    pub fn closest_point_within(&self, q: &Vec3, cutoff: f64) -> Option<SurfacePoint> {
        if self.tris.is_empty() {
            return None;
        }
        let mut best = SurfacePoint { point: *q, face: usize::MAX, dist2: cutoff * cutoff };
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if box_dist2(&node.bb, q) > best.dist2 {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.first..node.first + node.count] {
                    let [a, b, c] = &self.tris[f];
                    let p = closest_point_on_triangle(q, a, b, c);
                    let d = (p - q).norm_squared();
                    if d < best.dist2 || (d == best.dist2 && f < best.face) {
                        best = SurfacePoint { point: p, face: f, dist2: d };
                    }
                }
            } else {
                let (l, r) = (node.first, node.first + 1);
                let (dl, dr) = (box_dist2(&self.nodes[l].bb, q), box_dist2(&self.nodes[r].bb, q));
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best.face != usize::MAX).then_some(best)
    }

    /// Number of faces hit by the ray `origin + t dir`, `t > 0`.
    pub fn ray_crossings(&self, origin: &Vec3, dir: &Vec3) -> usize {
        if self.tris.is_empty() {
            return 0;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut hits = 0;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !ray_hits_box(&node.bb, origin, &inv) {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.first..node.first + node.count] {
                    if ray_hits_triangle(origin, dir, &self.tris[f]) {
                        hits += 1;
                    }
                }
            } else {
                stack.push(node.first);
                stack.push(node.first + 1);
            }
        }
        hits
    }

    /// Point-in-mesh by majority vote of ray parity along three fixed,
    /// non-axis-aligned directions.
    pub fn contains(&self, p: &Vec3) -> bool {
        const DIRS: [[f64; 3]; 3] = [
            [0.5773, 0.5821, 0.5725],
            [-0.6131, 0.4217, 0.6683],
            [0.3719, -0.7907, 0.4864],
        ];
        let votes = DIRS
            .iter()
            .filter(|d| self.ray_crossings(p, &Vec3::new(d[0], d[1], d[2])) % 2 == 1)
            .count();
        votes >= 2
    }
}

fn ray_hits_box(bb: &Aabb, o: &Vec3, inv: &Vec3) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let a = (bb.min[k] - o[k]) * inv[k];
        let b = (bb.max[k] - o[k]) * inv[k];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return false;
        }
    }
    true
}

fn ray_hits_triangle(o: &Vec3, d: &Vec3, tri: &[Vec3; 3]) -> bool {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return false;
    }
    let inv = 1.0 / det;
    let s = o - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    e2.dot(&q) * inv > 0.0
}
