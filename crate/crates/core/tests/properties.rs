//! Randomised invariants across the public API.

use std::collections::BTreeMap;
use std::sync::Arc;

use garment_core::body::{pose_loss, Pose, POSE_SLOTS};
use garment_core::detail::{find_correspondences, refine_loss, refine_terms, RefineWeights, Rejection};
use garment_core::implicit::{marching_cubes, ramp_occupancy, sample_grid, FnField, OccupancyField, Provenance, ISO_LEVEL};
use garment_core::laplacian::{build_system, cotangent_laplacian};
use garment_core::mesh::{icosphere, sample_surface, subdivide_region, Aabb, Mesh, PointCloud, ScalarGrid, Vec3};
use garment_core::metrics::{chamfer_points, emd_points, BenchmarkReport, ModelRecord};
use garment_core::neural::{OccupancyConfig, OccupancyNet, SilhouetteDescriptor, Tensor};
use garment_core::pipeline::PipelineConfig;
use garment_core::spatial::TriangleBvh;
use garment_core::synth::{generate, occupancy_labels};
use garment_core::template::{AdaptableTemplate, ClothCategory};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

/// Icosphere with every vertex pushed radially by a seeded amount.
fn lumpy_sphere(level: usize, seed: u64) -> Mesh {
    let m = icosphere(level, 0.5, Vec3::zeros());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.with_vertices(m.vertices().iter().map(|p| p * (1.0 + rng.gen_range(-0.15..0.15))).collect())
}

fn rigid(axis: (f64, f64, f64), angle: f64, t: (f64, f64, f64)) -> (Rotation3<f64>, Vec3) {
    let axis = Vector3::new(axis.0, axis.1, axis.2 + 1e-3);
    (Rotation3::new(axis.normalize() * angle), Vec3::new(t.0, t.1, t.2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mesh_rejects_bad_indices(n in 3usize..20, faces in prop::collection::vec((0usize..25, 0usize..25, 0usize..25), 1..30)) {
        let verts = points(n, 1);
        let faces: Vec<[usize; 3]> = faces.into_iter().map(|(a, b, c)| [a, b, c]).collect();
        let valid = faces.iter().all(|f| f.iter().all(|&i| i < n) && f[0] != f[1] && f[1] != f[2] && f[0] != f[2]);
        prop_assert_eq!(Mesh::new(verts, faces).is_ok(), valid);
    }

    #[test]
    fn sphere_edges_are_counted_once(level in 0usize..4, seed in 0u64..1000) {
        let m = lumpy_sphere(level, seed);
        let counts = m.edge_face_counts();
        prop_assert!(counts.values().all(|&c| c == 2));
        prop_assert_eq!(counts.len() * 2, m.face_count() * 3);
        prop_assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn region_subdivision_preserves_area(seed in 0u64..1000, levels in 1usize..3, keep in 0.05f64..1.0) {
        let m = lumpy_sphere(2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subset: Vec<usize> = (0..m.face_count()).filter(|_| rng.gen_bool(keep)).collect();
        let s = subdivide_region(&m, &subset, levels).unwrap();
        prop_assert!((s.total_area() - m.total_area()).abs() < 1e-9);
    }

    #[test]
    fn samples_lie_on_the_surface(seed in 0u64..1000, n in 1usize..300) {
        let m = lumpy_sphere(2, seed);
        let bvh = TriangleBvh::new(&m);
        for p in sample_surface(&m, n, seed).unwrap().points() {
            prop_assert!(bvh.closest_point(p).unwrap().dist2.sqrt() < 1e-9);
        }
    }

    #[test]
    fn cloud_normals_are_unit(seed in 0u64..1000, n in 1usize..50) {
        let raw: Vec<Vec3> = points(n, seed + 1).into_iter().map(|v| v * 3.0 + Vec3::new(0.0, 0.0, 7.0)).collect();
        prop_assert!(PointCloud::with_normals(points(n, seed), raw.clone()).is_err());
        let unit: Vec<Vec3> = raw.iter().map(|v| v.normalize()).collect();
        let c = PointCloud::with_normals(points(n, seed), unit).unwrap();
        prop_assert!(c.normals().unwrap().iter().all(|v| (v.norm() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn grid_value_count_is_checked(nx in 1usize..5, ny in 1usize..5, nz in 1usize..5, extra in 0usize..3) {
        let ok = ScalarGrid::new([nx, ny, nz], Vec3::zeros(), [0.1; 3], vec![0.0; nx * ny * nz + extra]);
        prop_assert_eq!(ok.is_ok(), extra == 0);
    }

    #[test]
    fn inactive_pose_entries_are_zero(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<[f64; 3]> = (0..POSE_SLOTS).map(|_| [rng.gen_range(-1.0..1.0), rng.gen(), rng.gen()]).collect();
        let mask: Vec<bool> = (0..POSE_SLOTS).map(|_| rng.gen_bool(0.5)).collect();
        let p = Pose::new(theta.clone(), mask.clone()).unwrap();
        for (k, t) in p.theta().iter().enumerate() {
            prop_assert_eq!(*t, if mask[k] { theta[k] } else { [0.0; 3] });
        }
        let q = Pose::new(theta.iter().map(|t| t.map(|x| x * 0.5)).collect(), mask).unwrap();
        prop_assert!(pose_loss(&p, &q, 1e-5).unwrap() >= 0.0);
        prop_assert!(pose_loss(&p, &p, 1e-5).unwrap() >= 0.0);
        prop_assert_eq!(pose_loss(&p, &p, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_and_emd_are_symmetric_and_rigid_invariant(
        seed in 0u64..1000,
        n in 1usize..60,
        axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        angle in 0.0f64..3.0,
        t in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
    ) {
        let (a, b) = (points(n, seed), points(n, seed + 7));
        let (cd, emd) = (chamfer_points(&a, &b).unwrap(), emd_points(&a, &b).unwrap());
        prop_assert!(cd >= 0.0 && emd >= 0.0);
        prop_assert!((cd - chamfer_points(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((emd - emd_points(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(chamfer_points(&a, &a).unwrap(), 0.0);
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert!(emd_points(&a, &shuffled).unwrap().abs() < 1e-15);
        let (r, t) = rigid(axis, angle, t);
        let move_all = |v: &[Vec3]| v.iter().map(|p| r * p + t).collect::<Vec<_>>();
        let (ra, rb) = (move_all(&a), move_all(&b));
        prop_assert!((chamfer_points(&ra, &rb).unwrap() - cd).abs() < 1e-9);
        prop_assert!((emd_points(&ra, &rb).unwrap() - emd).abs() < 1e-9);
    }

    #[test]
    fn report_aggregates_are_record_means(values in prop::collection::vec((0.0f64..1e-2, 0.0f64..1.0), 1..30)) {
        let records: Vec<ModelRecord> = values
            .iter()
            .enumerate()
            .map(|(i, (cd, emd))| ModelRecord {
                model_id: format!("{i}"),
                category: "long_skirt".into(),
                cd: *cd,
                emd: *emd,
                n_reconstruction: 10,
                n_ground_truth: 10,
                seed: 0,
            })
            .collect();
        let r = BenchmarkReport::new("m", records);
        let n = values.len() as f64;
        let cd = values.iter().map(|v| v.0).sum::<f64>() / n * 1e3;
        let emd = values.iter().map(|v| v.1).sum::<f64>() / n * 1e2;
        prop_assert!((r.aggregates.cd_e3 - cd).abs() <= 1e-12 * cd.max(1.0));
        prop_assert!((r.aggregates.emd_e2 - emd).abs() <= 1e-12 * emd.max(1.0));
        prop_assert_eq!(r.aggregates.count, values.len());
    }

    #[test]
    fn laplacian_rows_sum_to_zero(seed in 0u64..1000) {
        let (l, _) = cotangent_laplacian(&lumpy_sphere(2, seed));
        for r in 0..l.rows() {
            prop_assert!(l.row(r).map(|(_, w)| w).sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn laplacian_handles_exact_and_translation_equivariant(
        seed in 0u64..1000,
        t in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
    ) {
        let m = lumpy_sphere(2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut handles = BTreeMap::new();
        for _ in 0..6 {
            let v = rng.gen_range(0..m.vertex_count());
            handles.insert(v, m.vertices()[v] + Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.05));
        }
        let out = build_system(&m, &handles).unwrap().solve().unwrap();
        for (&h, p) in &handles {
            prop_assert_eq!(out.vertices()[h], *p);
        }
        let t = Vec3::new(t.0, t.1, t.2);
        let shifted: BTreeMap<usize, Vec3> = handles.iter().map(|(&h, p)| (h, p + t)).collect();
        let out_t = build_system(&m.translated(t), &shifted).unwrap().solve().unwrap();
        for (a, b) in out_t.vertices().iter().zip(out.vertices()) {
            prop_assert!((a - b - t).norm() < 1e-8);
        }
    }

    #[test]
    fn extracted_vertices_sit_on_the_iso_level(
        c in (-0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1),
        r in (0.15f64..0.4, 0.15f64..0.4, 0.15f64..0.4),
        res in 12usize..40,
    ) {
        let (c, r) = (Vec3::new(c.0, c.1, c.2), Vec3::new(r.0, r.1, r.2));
        let field = FnField::new(Provenance::Analytic, move |p| ramp_occupancy(((p - c).component_div(&r)).norm() - 1.0, 0.2));
        let grid = sample_grid(&field, res, &Aabb::new(Vec3::repeat(-0.5), Vec3::repeat(0.5))).unwrap();
        let m = marching_cubes(&grid, ISO_LEVEL);
        prop_assert!(m.vertex_count() > 0);
        for v in m.vertices() {
            prop_assert!((grid.interpolate(v) - ISO_LEVEL).abs() < 1e-6);
        }
        prop_assert!(m.edge_face_counts().values().all(|&k| k <= 2));
    }

    #[test]
    fn correspondence_valid_iff_both_gates_pass(seed in 0u64..1000, angle in 5.0f64..120.0, sigma in 0.001f64..0.05) {
        let src = lumpy_sphere(2, seed);
        let tgt = lumpy_sphere(2, seed + 1);
        for c in find_correspondences(&src, &tgt, angle, sigma).unwrap() {
            let cone = c.angle_deg < angle;
            let gate = c.distance < sigma && c.back_distance < sigma;
            prop_assert_eq!(c.valid, cone && gate);
            prop_assert_eq!(c.valid, c.reason == Rejection::None);
        }
    }

    #[test]
    fn refine_loss_decomposes_per_term(seed in 0u64..1000, k in 0usize..6, w in 0.01f64..5.0) {
        let m = lumpy_sphere(1, seed);
        let dirs: Vec<Vec3> = points(80, seed).iter().map(|p| (p + Vec3::new(0.0, 0.0, 1e-3)).normalize()).collect();
        let target = PointCloud::with_normals(dirs.iter().map(|d| d * 0.45).collect(), dirs).unwrap();
        let terms = refine_terms(&m, &target, &[], &[], true, 300, seed).unwrap();
        let mut weights = RefineWeights::zero();
        let (slot, term) = match k {
            0 => (&mut weights.lambda_chm, terms.chm),
            1 => (&mut weights.lambda_nor, terms.nor),
            2 => (&mut weights.lambda_lap, terms.lap),
            3 => (&mut weights.lambda_med, terms.med),
            4 => (&mut weights.lambda_line, terms.line),
            _ => (&mut weights.lambda_fed, terms.fed),
        };
        *slot = w;
        prop_assert_eq!(refine_loss(&m, &target, &[], &[], &weights, 300, seed).unwrap(), w * term);
    }

    #[test]
    fn occupancy_outputs_are_probabilities(seed in 0u64..1000) {
        let net = Arc::new(OccupancyNet::untrained(OccupancyConfig { hidden: 16, layers: 2, code_dim: 3, seed, ..Default::default() }));
        let field = net.field(&[0.2, -0.4, 1.0]).unwrap();
        for p in points(64, seed) {
            let v = field.evaluate(&(p * 5.0));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn silhouettes_are_binary(seed in 0u64..1000) {
        let d = SilhouetteDescriptor::rasterize(&lumpy_sphere(2, seed), 32).unwrap();
        prop_assert!(d.raster().iter().all(|&x| x <= 1));
        prop_assert!(d.pyramid().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn tensor_length_must_match_shape(r in 1usize..6, c in 1usize..6, extra in 0usize..2) {
        prop_assert_eq!(Tensor::new(vec![r, c], vec![0.0; r * c + extra]).is_ok(), extra == 0);
    }

    #[test]
    fn config_round_trip_is_byte_identical(seed in any::<u64>(), res in 8usize..=256, margin in 0.0f64..0.5) {
        let c = PipelineConfig { seed, resolution: res, bounds_margin: margin, ..PipelineConfig::default() };
        let text = c.to_json();
        prop_assert_eq!(PipelineConfig::from_json(&text).unwrap().to_json(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_garments_follow_the_category_table(cat in 0usize..10, seed in 0u64..10_000, wrinkle in 0.0f64..0.004) {
        let category = ClothCategory::ALL[cat];
        let g = generate(category, 0.3, wrinkle, seed).unwrap();
        let mut kinds: Vec<_> = g.annotations.iter().map(|a| a.kind).collect();
        kinds.sort();
        kinds.dedup();
        let mut want = category.feature_lines().to_vec();
        want.sort();
        prop_assert_eq!(kinds, want);
        prop_assert!(g.closed_mesh.is_watertight());
        // One handle per opening beyond the first.
        let openings = g.ground_truth_mesh.boundary_loops().len() as i64;
        prop_assert!(openings >= 1);
        prop_assert_eq!(g.closed_mesh.euler_characteristic(), 2 - 2 * (openings - 1));
        let (p1, l1) = occupancy_labels(&g, 200, seed).unwrap();
        let (p2, l2) = occupancy_labels(&g, 200, seed).unwrap();
        prop_assert_eq!(p1, p2);
        prop_assert_eq!(l1, l2);
    }

    #[test]
    fn activation_is_idempotent_and_region_constant(cat in 0usize..10) {
        let t = AdaptableTemplate::procedural();
        let a = t.activate(ClothCategory::ALL[cat]).unwrap();
        let b = a.activate(ClothCategory::ALL[cat]).unwrap();
        prop_assert_eq!(a.activation(), b.activation());
        let mut by_region = BTreeMap::new();
        for (label, on) in a.region_labels().iter().zip(a.activation()) {
            prop_assert_eq!(*by_region.entry(*label).or_insert(*on), *on);
        }
    }
}
