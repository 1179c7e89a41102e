//! Procedural stand-in for a headless, handless, footless human body.
//!
//! Built in metres (y up, +x the body's left, +z forward) and then scaled so
//! the bounding-box diagonal is 1 and centred at the origin.

use std::f64::consts::{PI, TAU};

use crate::feature_line::{FeatureLine, LandmarkKind, Side};
use crate::mesh::{Aabb, Mesh, Vec3};

use super::{BodyModel, Region, Skeleton, SkinWeights, JOINT_NAMES};

const RING: usize = 36;
const BRIDGE: usize = 4;

// Joint indices, matching `JOINT_NAMES`.
const PELVIS: usize = 0;
const SPINE: usize = 1;
const SHOULDER: [usize; 2] = [2, 3];
const ELBOW: [usize; 2] = [4, 5];
const WRIST: [usize; 2] = [6, 7];
const HIP: [usize; 2] = [8, 9];
const KNEE: [usize; 2] = [10, 11];
const ANKLE: [usize; 2] = [12, 13];

/// Region, weights and outline of every torso ring from the hip ring up.
struct TorsoRing {
    y: f64,
    rx: f64,
    rz: f64,
    region: Region,
    spine: f64,
}

const TORSO: [TorsoRing; 10] = [
    TorsoRing { y: 0.80, rx: 0.170, rz: 0.120, region: Region::Waist, spine: 0.0 },
    TorsoRing { y: 0.86, rx: 0.168, rz: 0.118, region: Region::Waist, spine: 0.0 },
    TorsoRing { y: 0.92, rx: 0.160, rz: 0.112, region: Region::Waist, spine: 0.0 },
    TorsoRing { y: 0.975, rx: 0.150, rz: 0.105, region: Region::Waist, spine: 0.0 },
    TorsoRing { y: 1.03, rx: 0.140, rz: 0.100, region: Region::Waist, spine: 0.0 },
    TorsoRing { y: 1.045, rx: 0.140, rz: 0.100, region: Region::Torso, spine: 0.0 },
    TorsoRing { y: 1.10, rx: 0.145, rz: 0.102, region: Region::Torso, spine: 0.4 },
    TorsoRing { y: 1.16, rx: 0.155, rz: 0.108, region: Region::Torso, spine: 0.8 },
    TorsoRing { y: 1.22, rx: 0.163, rz: 0.112, region: Region::Torso, spine: 1.0 },
    TorsoRing { y: 1.27, rx: 0.168, rz: 0.113, region: Region::Torso, spine: 1.0 },
];
const HIP_RING: usize = 0;
const WA_WAIST_RING: usize = 4;
const WA_TORSO_RING: usize = 5;

const TOP_Y: f64 = 1.31;
const TOP_RISE: f64 = 0.10;
const TOP_RX: f64 = 0.170;
const TOP_RZ: f64 = 0.110;

struct Station {
    s: f64,
    radius: f64,
    blend: f64,
    region: Region,
    weights: [(usize, f64); 2],
    parent_weight: f64,
}

fn arm_stations(side: usize) -> Vec<Station> {
    let (sh, el) = (SHOULDER[side], ELBOW[side]);
    let up = [Region::UpperLimbL, Region::UpperLimbR];
    let low = [Region::LowerLimbL, Region::LowerLimbR];
    let st = |s, radius, blend, lower: bool, weights, parent_weight| Station {
        s,
        radius,
        blend,
        region: if lower { low[side] } else { up[side] },
        weights,
        parent_weight,
    };
    vec![
        st(0.04, 0.050, 0.5, false, [(sh, 0.5), (el, 0.0)], 0.5),
        st(0.08, 0.049, 1.0, false, [(sh, 1.0), (el, 0.0)], 0.0),
        st(0.13, 0.047, 1.0, false, [(sh, 1.0), (el, 0.0)], 0.0),
        st(0.18, 0.045, 1.0, false, [(sh, 1.0), (el, 0.0)], 0.0),
        st(0.22, 0.044, 1.0, false, [(sh, 1.0), (el, 0.0)], 0.0),
        st(0.26, 0.042, 1.0, false, [(sh, 0.75), (el, 0.25)], 0.0),
        st(0.30, 0.040, 1.0, false, [(sh, 0.5), (el, 0.5)], 0.0),
        st(0.34, 0.038, 1.0, true, [(el, 1.0), (sh, 0.0)], 0.0),
        st(0.39, 0.036, 1.0, true, [(el, 1.0), (sh, 0.0)], 0.0),
        st(0.44, 0.034, 1.0, true, [(el, 1.0), (sh, 0.0)], 0.0),
        st(0.49, 0.032, 1.0, true, [(el, 1.0), (sh, 0.0)], 0.0),
        st(0.54, 0.030, 1.0, true, [(el, 1.0), (sh, 0.0)], 0.0),
    ]
}
const ELBOW_STATION: usize = 6;
const WRIST_STATION: usize = 11;

fn leg_stations(side: usize) -> Vec<Station> {
    let (hip, kn) = (HIP[side], KNEE[side]);
    let up = [Region::UpperLegL, Region::UpperLegR];
    let low = [Region::LowerLegL, Region::LowerLegR];
    let st = |s, radius, blend, lower: bool, weights, parent_weight| Station {
        s,
        radius,
        blend,
        region: if lower { low[side] } else { up[side] },
        weights,
        parent_weight,
    };
    vec![
        st(0.04, 0.080, 0.5, false, [(hip, 0.5), (kn, 0.0)], 0.5),
        st(0.08, 0.078, 1.0, false, [(hip, 1.0), (kn, 0.0)], 0.0),
        st(0.14, 0.073, 1.0, false, [(hip, 1.0), (kn, 0.0)], 0.0),
        st(0.20, 0.068, 1.0, false, [(hip, 1.0), (kn, 0.0)], 0.0),
        st(0.26, 0.062, 1.0, false, [(hip, 1.0), (kn, 0.0)], 0.0),
        st(0.31, 0.057, 1.0, false, [(hip, 0.75), (kn, 0.25)], 0.0),
        st(0.36, 0.052, 1.0, false, [(hip, 0.5), (kn, 0.5)], 0.0),
        st(0.42, 0.050, 1.0, true, [(kn, 1.0), (hip, 0.0)], 0.0),
        st(0.49, 0.046, 1.0, true, [(kn, 1.0), (hip, 0.0)], 0.0),
        st(0.56, 0.042, 1.0, true, [(kn, 1.0), (hip, 0.0)], 0.0),
        st(0.63, 0.038, 1.0, true, [(kn, 1.0), (hip, 0.0)], 0.0),
        st(0.70, 0.035, 1.0, true, [(kn, 1.0), (hip, 0.0)], 0.0),
    ]
}
const KNEE_STATION: usize = 6;
const ANKLE_STATION: usize = 11;

#[derive(Default)]
struct Builder {
    verts: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    regions: Vec<Region>,
    weights: SkinWeights,
}

impl Builder {
    fn add(&mut self, p: Vec3, region: Region, weights: &[(usize, f64)]) -> usize {
        self.verts.push(p);
        self.regions.push(region);
        let w: Vec<(usize, f64)> = weights.iter().copied().filter(|&(_, w)| w > 0.0).collect();
        self.weights.push(w);
        self.verts.len() - 1
    }

    /// Joins two closed rings of equal length with quads, each oriented so
    /// its normal points away from `axis_point(quad centre)`.
    fn strip(&mut self, a: &[usize], b: &[usize], axis_point: impl Fn(&Vec3) -> Vec3) {
        self.strip_spans(a, b, a.len(), axis_point);
    }

    /// Quads between rungs `(a[i], b[i])` and the next rung, for the first
    /// `spans` rungs (wrapping around).
    fn strip_spans(&mut self, a: &[usize], b: &[usize], spans: usize, axis_point: impl Fn(&Vec3) -> Vec3) {
        let k = a.len();
        assert_eq!(k, b.len());
        for i in 0..spans {
            let (a0, a1, b0, b1) = (a[i], a[(i + 1) % k], b[i], b[(i + 1) % k]);
            let [pa0, pa1, pb0, pb1] = [a0, a1, b0, b1].map(|v| self.verts[v]);
            let centre = (pa0 + pa1 + pb0 + pb1) / 4.0;
            let normal = (pa1 - pa0).cross(&(pb1 - pa0)) + (pb1 - pa0).cross(&(pb0 - pa0));
            if normal.dot(&(centre - axis_point(&centre))) >= 0.0 {
                self.faces.push([a0, a1, b1]);
                self.faces.push([a0, b1, b0]);
            } else {
                self.faces.push([a0, b1, a1]);
                self.faces.push([a0, b0, b1]);
            }
        }
    }

    /// Extrudes a tube from the closed loop `first` along `dir`, blending
    /// from the loop's outline to circles. Returns all rings, loop first.
    fn tube(&mut self, first: &[usize], dir: Vec3, stations: &[Station], parent: usize) -> Vec<Vec<usize>> {
        let k = first.len();
        let c0 = first.iter().fold(Vec3::zeros(), |a, &v| a + self.verts[v]) / k as f64;
        let helper = if dir.y.abs() < 0.9 { Vec3::y() } else { Vec3::z() };
        let e1 = (helper - dir * helper.dot(&dir)).normalize();
        let e2 = dir.cross(&e1);
        let angle = |p: &Vec3| {
            let q = p - c0;
            q.dot(&e2).atan2(q.dot(&e1))
        };
        let psi: Vec<f64> = first.iter().map(|&v| angle(&self.verts[v])).collect();
        let mut turn = 0.0;
        for i in 0..k {
            let mut d = psi[(i + 1) % k] - psi[i];
            if d > PI {
                d -= TAU;
            } else if d < -PI {
                d += TAU;
            }
            turn += d;
        }
        let sgn = turn.signum();
        let loop_pos: Vec<Vec3> = first.iter().map(|&v| self.verts[v]).collect();
        let mut rings = vec![first.to_vec()];
        for st in stations {
            let centre = c0 + dir * st.s;
            let ring: Vec<usize> = (0..k)
                .map(|i| {
                    let u = psi[0] + sgn * TAU * i as f64 / k as f64;
                    let circle = centre + (e1 * u.cos() + e2 * u.sin()) * st.radius;
                    let p = (loop_pos[i] + dir * st.s) * (1.0 - st.blend) + circle * st.blend;
                    let mut w = st.weights.to_vec();
                    w.push((parent, st.parent_weight));
                    self.add(p, st.region, &w)
                })
                .collect();
            rings.push(ring);
        }
        for j in 0..rings.len() - 1 {
            let (a, b) = (rings[j].clone(), rings[j + 1].clone());
            self.strip(&a, &b, |p| c0 + dir * (p - c0).dot(&dir));
        }
        rings
    }
}

fn top_point(phi: f64) -> Vec3 {
    Vec3::new(TOP_RX * phi.cos(), TOP_Y + TOP_RISE * phi.sin().powi(2), TOP_RZ * phi.sin())
}

/// Vertex loops produced alongside the body mesh, used as feature lines.
#[derive(Debug, Clone)]
pub struct BodyLayout {
    pub regions: Vec<Region>,
    /// Every candidate landmark loop; `wa` appears twice (torso side first).
    pub lines: Vec<FeatureLine>,
}

pub fn build() -> (BodyModel, BodyLayout) {
    let mut b = Builder::default();
    let phi = |k: usize| k as f64 * TAU / RING as f64;

    let mut rings: Vec<Vec<usize>> = Vec::new();
    for r in &TORSO {
        let w = [(PELVIS, 1.0 - r.spine), (SPINE, r.spine)];
        let ring = (0..RING)
            .map(|k| b.add(Vec3::new(r.rx * phi(k).cos(), r.y, r.rz * phi(k).sin()), r.region, &w))
            .collect();
        rings.push(ring);
    }
    let top: Vec<usize> = (0..RING).map(|k| b.add(top_point(phi(k)), Region::Torso, &[(SPINE, 1.0)])).collect();
    rings.push(top.clone());
    for j in 0..rings.len() - 1 {
        let (lo, hi) = (rings[j].clone(), rings[j + 1].clone());
        b.strip(&lo, &hi, |p| Vec3::new(0.0, p.y, 0.0));
    }

    // A strap over each shoulder joins the front and back of the top ring.
    // Its outer chain closes the arm hole, its inner chain the neck.
    // Arm holes span -60..60 and 120..240 degrees of the top ring.
    let (front_l, back_l) = (RING / 6, 5 * RING / 6);
    let (front_r, back_r) = (RING / 3, 2 * RING / 3);
    let mut chain = |from: usize, to: usize, outward: f64| -> Vec<usize> {
        let (pf, pb) = (b.verts[top[from]], b.verts[top[to]]);
        (1..=BRIDGE)
            .map(|i| {
                let t = i as f64 / (BRIDGE + 1) as f64;
                let lift = (PI * t).sin();
                let p = pf * (1.0 - t) + pb * t + Vec3::new(outward * lift, 0.045 * lift, 0.0);
                b.add(p, Region::Torso, &[(SPINE, 1.0)])
            })
            .collect()
    };
    let outer_l = chain(front_l, back_l, 0.03);
    let inner_l = chain(front_l + 1, back_l - 1, 0.0);
    let outer_r = chain(front_r, back_r, -0.03);
    let inner_r = chain(front_r - 1, back_r + 1, 0.0);
    for (outer, inner, front, back, sign) in
        [(&outer_l, &inner_l, front_l, back_l, 1.0), (&outer_r, &inner_r, front_r, back_r, -1.0)]
    {
        let step = |k: usize| if sign > 0.0 { k + 1 } else { k - 1 };
        let back_inner = if sign > 0.0 { back - 1 } else { back + 1 };
        let mut a = vec![top[front]];
        a.extend(outer);
        a.push(top[back]);
        let mut c = vec![top[step(front)]];
        c.extend(inner);
        c.push(top[back_inner]);
        let centre = Vec3::new(sign * 0.08, TOP_Y, 0.0);
        b.strip_spans(&a, &c, BRIDGE + 1, |_| centre);
    }

    let arc = |from: usize, to: usize| -> Vec<usize> {
        let mut v = Vec::new();
        let mut k = from;
        loop {
            v.push(top[k % RING]);
            if k % RING == to {
                break;
            }
            k += 1;
        }
        v
    };
    let mut arm_loop_l = arc(back_l, front_l);
    arm_loop_l.extend(&outer_l);
    let mut arm_loop_r = arc(front_r, back_r);
    arm_loop_r.extend(outer_r.iter().rev());
    let mut neck = arc(front_l + 1, front_r - 1);
    neck.extend(&inner_r);
    neck.extend(arc(back_r + 1, back_l - 1));
    neck.extend(inner_l.iter().rev());

    // Crotch chain splits the hip ring into two leg loops.
    let hip = rings[HIP_RING].clone();
    let crotch: Vec<usize> = [(0.785, 0.06), (0.78, 0.0), (0.785, -0.06)]
        .iter()
        .map(|&(y, z)| b.add(Vec3::new(0.0, y, z), Region::Waist, &[(PELVIS, 1.0)]))
        .collect();
    let quarter = RING / 4;
    let hip_arc = |from: usize, to: usize| -> Vec<usize> {
        let mut v = Vec::new();
        let mut k = from;
        loop {
            v.push(hip[k % RING]);
            if k % RING == to {
                break;
            }
            k += 1;
        }
        v
    };
    let mut leg_loop_l = hip_arc(3 * quarter, quarter);
    leg_loop_l.extend(&crotch);
    let mut leg_loop_r = hip_arc(quarter, 3 * quarter);
    leg_loop_r.extend(crotch.iter().rev());

    let arm_dirs = [Vec3::new(1.0, -0.25, 0.0).normalize(), Vec3::new(-1.0, -0.25, 0.0).normalize()];
    let arm_loops = [arm_loop_l.clone(), arm_loop_r.clone()];
    let leg_loops = [leg_loop_l.clone(), leg_loop_r.clone()];
    let mut arm_rings = Vec::new();
    let mut leg_rings = Vec::new();
    for side in 0..2 {
        arm_rings.push(b.tube(&arm_loops[side], arm_dirs[side], &arm_stations(side), SPINE));
        leg_rings.push(b.tube(&leg_loops[side], -Vec3::y(), &leg_stations(side), PELVIS));
    }

    // Joints.
    let centroid = |b: &Builder, l: &[usize]| l.iter().fold(Vec3::zeros(), |a, &v| a + b.verts[v]) / l.len() as f64;
    let mut joints = vec![Vec3::zeros(); JOINT_NAMES.len()];
    joints[PELVIS] = Vec3::new(0.0, 0.93, 0.0);
    joints[SPINE] = Vec3::new(0.0, 1.15, 0.0);
    for side in 0..2 {
        let c = centroid(&b, &arm_loops[side]);
        let d = arm_dirs[side];
        joints[SHOULDER[side]] = c + d * 0.03;
        joints[ELBOW[side]] = c + d * arm_stations(side)[ELBOW_STATION].s;
        joints[WRIST[side]] = c + d * arm_stations(side)[WRIST_STATION].s;
        let c = centroid(&b, &leg_loops[side]);
        joints[HIP[side]] = Vec3::new(c.x, 0.88, 0.0);
        joints[KNEE[side]] = c - Vec3::y() * leg_stations(side)[KNEE_STATION].s;
        joints[ANKLE[side]] = c - Vec3::y() * leg_stations(side)[ANKLE_STATION].s;
    }
    let parents = vec![
        PELVIS, PELVIS, SPINE, SPINE, SHOULDER[0], SHOULDER[1], ELBOW[0], ELBOW[1], PELVIS, PELVIS, HIP[0], HIP[1],
        KNEE[0], KNEE[1],
    ];

    // Canonical scale.
    let bb = Aabb::from_points(&b.verts).unwrap();
    let (centre, scale) = (bb.center(), 1.0 / bb.diagonal());
    let norm = |p: &Vec3| (p - centre) * scale;
    let verts: Vec<Vec3> = b.verts.iter().map(norm).collect();
    let joints: Vec<Vec3> = joints.iter().map(norm).collect();

    let mesh = Mesh::new(verts, b.faces).expect("procedural body is valid");
    let skeleton = Skeleton::new(joints, parents, JOINT_NAMES.iter().map(|s| s.to_string()).collect())
        .expect("procedural skeleton is a tree");

    let line = |kind, side, v: &[usize]| FeatureLine::new(kind, side, v.to_vec(), true).unwrap();
    use LandmarkKind::*;
    let sides = [Side::Left, Side::Right];
    let mut lines = vec![
        line(Ne, Side::Center, &neck),
        line(Wa, Side::Center, &rings[WA_TORSO_RING]),
        line(Wa, Side::Center, &rings[WA_WAIST_RING]),
    ];
    for s in 0..2 {
        lines.push(line(Sh, sides[s], &arm_loops[s]));
    }
    for s in 0..2 {
        lines.push(line(El, sides[s], &arm_rings[s][ELBOW_STATION + 1]));
    }
    for s in 0..2 {
        lines.push(line(Wr, sides[s], &arm_rings[s][WRIST_STATION + 1]));
    }
    for s in 0..2 {
        lines.push(line(Kn, sides[s], &leg_rings[s][KNEE_STATION + 1]));
    }
    for s in 0..2 {
        lines.push(line(An, sides[s], &leg_rings[s][ANKLE_STATION + 1]));
    }
    lines.push(line(He, Side::Center, &rings[HIP_RING]));

    let model = BodyModel::new(mesh, skeleton, b.weights).expect("procedural weights are valid");
    (model, BodyLayout { regions: b.regions, lines })
}
