use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::feature_line::{FeatureLineAnnotation, LandmarkKind, LineId, PredictedLine, Side};
use crate::mesh::{Mesh, Vec3};
use crate::sparse::CsrMatrix;
use crate::template::ClothCategory;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out * r)` for a fixed random `r`, so no gradient cancels by symmetry.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, NeuralError> {
    let t = g.value(out).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap());
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

#[test]
fn tensor_shape_checks() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0], vec![]).is_err());
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NeuralError::Shape(_))));
}

#[test]
fn sum_of_squares_gradient_is_twice_the_values() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let sq = g.square(x);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn disconnected_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::filled(&[3], 2.0));
    let y = g.param(Tensor::filled(&[2, 2], 5.0));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(y).unwrap(), &Tensor::zeros(&[2, 2]).with_grad(false));
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 3]);
    let c = g.input(Tensor::scalar(1.0));
    assert!(grads.get(c).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(NeuralError::NotScalar(s)) if s == vec![2, 2]));
}

fn ring(n: usize, r: f64, y: f64) -> Vec<Vec3> {
    (0..n)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / n as f64 + 0.1;
            Vec3::new(r * a.cos(), y, r * a.sin())
        })
        .collect()
}

/// Every op, one at a time, against central differences.
fn check_ops(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(4, 3, &mut rng);
    let b = random(3, 5, &mut rng);
    let c = random(4, 3, &mut rng);
    let bias = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let sparse = Arc::new(CsrMatrix::from_triplets(
        4,
        4,
        &[(0, 1, 0.5), (0, 3, 0.5), (1, 0, 0.5), (1, 2, 0.5), (2, 1, 0.3), (2, 3, 0.7), (3, 2, 1.0)],
    ));
    let targets: Vec<f64> = (0..12).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let cloud: Vec<Vec3> = ring(7, 0.5, 0.1).iter().map(|p| p + Vec3::new(0.03, -0.02, 0.01) * rng.gen_range(-1.0..1.0)).collect();
    let pts = Tensor::matrix(6, 3, ring(6, 0.45, 0.0).iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap();
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NeuralError>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, seed)
        })),
        ("add_sub_mul", vec![a.clone(), c.clone()], Box::new(move |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            project(g, m, seed)
        })),
        ("add_row_scale", vec![a.clone(), bias.clone()], Box::new(move |g, v| {
            let o = g.add_row(v[0], v[1])?;
            let o = g.scale(o, -1.7);
            project(g, o, seed)
        })),
        ("relu_tanh_sigmoid_square", vec![a.clone()], Box::new(move |g, v| {
            let r = g.relu(v[0]);
            let t = g.tanh(v[0]);
            let s = g.sigmoid(v[0]);
            let q = g.square(v[0]);
            let o = g.add(r, t)?;
            let o = g.add(o, s)?;
            let o = g.add(o, q)?;
            project(g, o, seed)
        })),
        ("sparse_concat_rows_mean", vec![a.clone(), c.clone()], Box::new(move |g, v| {
            let s = g.sparse_mul(sparse.clone(), v[0])?;
            let cc = g.concat_cols(s, v[1])?;
            let r = g.rows(cc, 1, 3)?;
            let sq = g.square(r);
            Ok(g.mean(sq))
        })),
        ("bce", vec![random(12, 1, &mut rng)], Box::new(move |g, v| g.bce_with_logits(v[0], &targets))),
        ("line_edge", vec![pts], Box::new(move |g, v| {
            let l = g.line_loss(v[0], &cloud)?;
            let e = g.edge_reg(v[0])?;
            let e = g.scale(e, 0.2);
            g.add(l, e)
        })),
    ];
    for (name, params, build) in cases {
        let errs = gradient_check(&params, 1e-5, build).unwrap();
        for e in errs {
            assert!(e < 1e-4, "{name} seed {seed}: relative error {e}");
        }
    }
}

#[test]
fn op_gradients_match_finite_differences() {
    for seed in 0..20 {
        check_ops(seed);
    }
}

fn three_node_graph() -> LineGraph {
    let positions = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.2, 0.0), Vec3::new(-0.1, 0.0, 0.3)];
    let features = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let image = Tensor::matrix(3, 1, vec![0.5, 0.0, 1.0]).unwrap();
    LineGraph::from_parts(positions, features, image, &[vec![1, 2], vec![0, 2], vec![0, 1]]).unwrap()
}

fn small_cfg() -> GcnConfig {
    GcnConfig { input_dim: 2, image_dim: 1, hidden: 2, layers: 1 }
}

#[test]
fn zero_weights_give_zero_displacement() {
    let cfg = GcnConfig::default();
    let mut w = init_gcn(&cfg, 3);
    w.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
    let lines = vec![PredictedLine { id: LineId::new(LandmarkKind::Wa, Side::Center), positions: ring(8, 0.2, 0.0) }];
    let desc = SilhouetteDescriptor::rasterize(&Mesh::empty(), 64).unwrap();
    let graph = LineGraph::new(&lines, ClothCategory::ShortSkirt, &desc).unwrap();
    assert_eq!(graph.degrees(), vec![2; 8]);
    let d = gcn_forward(&graph, &w, &cfg).unwrap();
    assert!(d.iter().all(|v| *v == Vec3::zeros()));
    // A fresh network also starts at zero: its output layer is zeroed.
    let d = gcn_forward(&graph, &init_gcn(&cfg, 3), &cfg).unwrap();
    assert!(d.iter().all(|v| *v == Vec3::zeros()));
}

fn crafted_weights() -> ParamStore {
    let mut w = ParamStore::new();
    w.push("gcn0.w_self", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    w.push("gcn0.w_neigh", Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, -1.0]).unwrap());
    w.push("gcn0.w_img", Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap());
    w.push("gcn0.b", Tensor::new(vec![2], vec![-0.5, 0.25]).unwrap());
    w.push("out.w", Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap());
    w.push("out.b", Tensor::new(vec![3], vec![0.0, 0.1, 0.0]).unwrap());
    w
}

#[test]
fn three_node_forward_matches_hand_arithmetic() {
    let d = gcn_forward(&three_node_graph(), &crafted_weights(), &small_cfg()).unwrap();
    // Node 0: x=(1,0), mean(x1,x2)=(0.5,1), img=0.5.
    //   pre = (1 + 0.25 + 1 - 0.5, 0 - 1 + 0.5 + 0.25) = (1.75, -0.25) -> relu (1.75, 0)
    // Node 1: x=(0,1), mean(x0,x2)=(1,0.5), img=0.
    //   pre = (0 + 0.5 + 0 - 0.5, 1 - 0.5 + 0 + 0.25) = (0, 0.75)
    // Node 2: x=(1,1), mean(x0,x1)=(0.5,0.5), img=1.
    //   pre = (1 + 0.25 + 2 - 0.5, 1 - 0.5 + 1 + 0.25) = (2.75, 1.75)
    let h = [[1.75, 0.0], [0.0, 0.75], [2.75, 1.75]];
    for (i, hi) in h.iter().enumerate() {
        let expected = Vec3::new(hi[0], hi[1] + 0.1, 2.0 * hi[0] - hi[1]);
        assert!((d[i] - expected).norm() < 1e-15, "node {i}: {:?}", d[i]);
    }
}

#[test]
fn gcn_and_fitting_loss_gradients_on_three_nodes() {
    let graph = three_node_graph();
    let cfg = small_cfg();
    let target: Vec<Vec3> = graph.positions().iter().map(|p| p * 1.3 + Vec3::new(0.05, 0.0, -0.02)).collect();
    // Shift the bias off the exact relu kink at node 1.
    let mut params: Vec<Tensor> = crafted_weights().tensors().cloned().collect();
    params[3].data_mut()[0] += 0.05;
    let errs = gradient_check(&params, 1e-5, |g, v| {
        let f = g.input(graph.features().clone());
        let img = g.input(graph.image_features().clone());
        let disp = gcn_record(g, v, &cfg, f, img, graph.adjacency())?;
        let base = g.input(Tensor::matrix(3, 3, graph.positions().iter().flat_map(|p| [p.x, p.y, p.z]).collect())?);
        let pred = g.add(base, disp)?;
        let l = g.line_loss(pred, &target)?;
        let e = g.edge_reg(pred)?;
        let e = g.scale(e, 0.2);
        g.add(l, e)
    })
    .unwrap();
    assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
}

fn permuted(graph: &LineGraph, perm: &[usize]) -> LineGraph {
    // perm[new] = old
    let inv: Vec<usize> = {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        inv
    };
    let rows = |t: &Tensor| {
        let c = t.cols();
        Tensor::matrix(perm.len(), c, perm.iter().flat_map(|&o| t.data()[o * c..(o + 1) * c].to_vec()).collect()).unwrap()
    };
    let neighbors: Vec<Vec<usize>> =
        perm.iter().map(|&o| graph.adjacency().row(o).map(|(j, _)| inv[j]).collect()).collect();
    LineGraph::from_parts(
        perm.iter().map(|&o| graph.positions()[o]).collect(),
        rows(graph.features()),
        rows(graph.image_features()),
        &neighbors,
    )
    .unwrap()
}

mod props {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, Just, ProptestConfig, Strategy};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn gcn_is_permutation_equivariant(seed in 0u64..10_000, perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
            let cfg = GcnConfig { hidden: 8, layers: 2, ..GcnConfig::default() };
            let mut w = init_gcn(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in w.tensors_mut() {
                t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
            }
            let lines = vec![
                PredictedLine { id: LineId::new(LandmarkKind::Wa, Side::Center), positions: ring(5, 0.2, 0.0) },
                PredictedLine { id: LineId::new(LandmarkKind::Wr, Side::Left), positions: ring(7, 0.05, 0.3) },
            ];
            let mesh = crate::mesh::icosphere(1, 0.3, Vec3::zeros());
            let desc = SilhouetteDescriptor::rasterize(&mesh, 64).unwrap();
            let graph = LineGraph::new(&lines, ClothCategory::ShortSleeveDress, &desc).unwrap();
            let d = gcn_forward(&graph, &w, &cfg).unwrap();
            let dp = gcn_forward(&permuted(&graph, &perm), &w, &cfg).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((dp[new] - d[old]).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn mlp_bce_gradients() {
    let net = OccupancyNet::untrained(OccupancyConfig { hidden: 6, layers: 2, code_dim: 4, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<Vec3> = (0..10).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    let labels: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    let x = net.input_rows(&pts, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let params: Vec<Tensor> = net.weights.tensors().cloned().collect();
    let errs = gradient_check(&params, 1e-5, |g, v| {
        let xv = g.input(x.clone());
        let z = net.record(g, v, xv)?;
        g.bce_with_logits(z, &labels)
    })
    .unwrap();
    assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = ParamStore::new();
    p.push("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
    adam.step(&mut p, &[Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap()]);
    let x = p.get("x").unwrap().data();
    // Bias-corrected first step is lr * g / (|g| + eps).
    assert!((x[0] - 0.9).abs() < 1e-7 && (x[1] - 2.1).abs() < 1e-7 && x[2] == 3.0);
}

#[test]
fn weights_round_trip() {
    let w = init_gcn(&GcnConfig::default(), 4);
    let bytes = w.to_bytes(4, serde_json::json!({"k": 1}));
    let (back, header) = ParamStore::from_bytes(&bytes).unwrap();
    assert_eq!(back, w);
    assert_eq!(header.seed, 4);
    assert_eq!(header.layers[0], ("gcn0.w_self".to_string(), vec![NODE_FEATURE_DIM, 64]));
    assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(ParamStore::from_bytes(b"nonsense-header").is_err());
    let reg = LineRegressor::untrained(LineTrainConfig::default());
    assert_eq!(LineRegressor::from_bytes(&reg.to_bytes()).unwrap(), reg);
}

fn square(half: f64, z: f64) -> Mesh {
    Mesh::new(
        vec![
            Vec3::new(-half, -half, z),
            Vec3::new(half, -half, z),
            Vec3::new(half, half, z),
            Vec3::new(-half, half, z),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

#[test]
fn silhouette_basics() {
    let empty = SilhouetteDescriptor::rasterize(&Mesh::empty(), 64).unwrap();
    assert!(empty.raster().iter().all(|&v| v == 0));
    assert!(empty.pyramid().iter().all(|&v| v == 0.0));
    assert_eq!(empty.pyramid().len(), DESCRIPTOR_DIM);

    for half in [0.1, 0.23, 0.31] {
        let s = SilhouetteDescriptor::rasterize(&square(half, 0.0), 64).unwrap();
        let expected = (2.0 * half) * (2.0 * half) * 64.0 * 64.0;
        let got = s.occupied_fraction() * 64.0 * 64.0;
        assert!((got - expected).abs() <= 2.0 * 2.0 * half * 64.0 * 2.0, "half {half}: {got} vs {expected}");
        assert!(s.pyramid().iter().all(|v| (0.0..=1.0).contains(v)));
        let moved = SilhouetteDescriptor::rasterize(&square(half, 0.7), 64).unwrap();
        assert_eq!(moved, s);
        assert_eq!(SilhouetteDescriptor::from_pgm(&s.to_pgm()).unwrap(), s);
    }
    assert!(SilhouetteDescriptor::rasterize(&Mesh::empty(), 60).is_err());
}

fn loop_sample(offset: f64) -> LineSample {
    let base = ring(10, 0.2, 0.0);
    let ann: Vec<Vec3> = ring(10, 0.2 + offset, 0.02);
    LineSample {
        category: ClothCategory::ShortSkirt,
        descriptor: SilhouetteDescriptor::rasterize(&square(0.2, 0.0), 64).unwrap(),
        base_lines: vec![PredictedLine { id: LineId::new(LandmarkKind::Wa, Side::Center), positions: base }],
        annotations: vec![FeatureLineAnnotation::new(LandmarkKind::Wa, Side::Center, ann).unwrap()],
    }
}

fn tiny_config() -> LineTrainConfig {
    LineTrainConfig { gcn: GcnConfig { hidden: 16, layers: 2, ..GcnConfig::default() }, ..LineTrainConfig::default() }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let cfg = LineTrainConfig { lr: 0.0, epochs: 3, ..tiny_config() };
    let (_, hist) = train_line_regressor(&[loop_sample(0.02)], &cfg).unwrap();
    assert_eq!(hist.len(), 4);
    assert!(hist.iter().all(|h| h.total == hist[0].total));
    assert!(loss_history_csv(&hist).starts_with("epoch,L_line,L_edge,total\n0,"));
    assert!(matches!(train_line_regressor(&[], &cfg), Err(NeuralError::EmptyDataset)));
}

#[test]
fn duplicated_items_match_single_item() {
    let s = loop_sample(0.02);
    let one = LineTrainConfig { batch_size: 1, epochs: 4, lr: 1e-3, ..tiny_config() };
    let two = LineTrainConfig { batch_size: 2, ..one };
    let (a, _) = train_line_regressor(std::slice::from_ref(&s), &one).unwrap();
    let (b, _) = train_line_regressor(&[s.clone(), s], &two).unwrap();
    assert_eq!(a.weights, b.weights);
}

#[test]
fn single_item_converges() {
    let cfg = LineTrainConfig { lr: 1e-3, epochs: 150, ..tiny_config() };
    let (model, hist) = train_line_regressor(&[loop_sample(0.03)], &cfg).unwrap();
    let last = hist.last().unwrap();
    assert!(last.l_line < 0.1 * hist[0].l_line, "{} -> {}", hist[0].l_line, last.l_line);
    let (l, _) = model.evaluate(&[loop_sample(0.03)]).unwrap();
    assert_eq!(l, last.l_line);
}

fn ball_sample(n: usize, seed: u64, all_zero: bool) -> OccupancySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec3> =
        (0..n).map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))).collect();
    let labels = points.iter().map(|p| if all_zero { 0.0 } else { f64::from(p.norm() < 0.3) }).collect();
    OccupancySample { code: vec![0.5; 4], points, labels }
}

fn occ_config() -> OccupancyConfig {
    OccupancyConfig { hidden: 16, layers: 2, code_dim: 4, epochs: 5, batch_size: 64, ..Default::default() }
}

#[test]
fn occupancy_degenerate_target_and_validation() {
    let (net, _) = train_occupancy(&[ball_sample(1000, 1, true)], &occ_config()).unwrap();
    let held = ball_sample(500, 2, true);
    let logits = net.logits(&held.points, &held.code).unwrap();
    assert!(logits.iter().all(|z| *z < 0.0));
    let field = Arc::new(net).field(&held.code).unwrap();
    use crate::implicit::OccupancyField;
    assert!(held.points.iter().all(|p| field.evaluate(p) < 0.5));

    let mut bad = ball_sample(10, 3, false);
    bad.labels[3] = 0.5;
    assert!(matches!(train_occupancy(&[bad], &occ_config()), Err(NeuralError::Label(_))));
}

#[test]
fn occupancy_training_is_deterministic_and_field_matches_logits() {
    let s = ball_sample(2000, 5, false);
    let (a, ha) = train_occupancy(std::slice::from_ref(&s), &occ_config()).unwrap();
    let (b, hb) = train_occupancy(std::slice::from_ref(&s), &occ_config()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert!(ha.last().unwrap() < &ha[0]);
    let z = a.logits(&s.points[..50], &s.code).unwrap();
    let bytes = a.to_bytes();
    let f = Arc::new(a).field(&s.code).unwrap();
    for (p, z) in s.points[..50].iter().zip(z) {
        assert!((f.logit(p) - z).abs() < 1e-12);
    }
    let net = OccupancyNet::from_bytes(&bytes).unwrap();
    assert_eq!(net, b);
}
