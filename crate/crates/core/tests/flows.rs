mod common;

use std::f64::consts::PI;

use common::randomize;
use flowmix::flows::{base_log_prob, Bijection, FlowLayer, FlowStack, LayerSpec};
use flowmix::{rng, Graph, ParamStore, Tensor};

fn single_layer(spec: LayerSpec, dim: usize, seed: u64) -> (ParamStore, FlowStack) {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", dim, &[spec], &mut rng::seeded(seed)).unwrap();
    randomize(&mut store, seed + 100, 0.4);
    set_running_stats(&mut store, &stack, seed + 200);
    (store, stack)
}

/// Gives every batch-norm layer a non-trivial running mean and variance so
/// that its evaluation-mode map is not the identity.
fn set_running_stats(store: &mut ParamStore, stack: &FlowStack, seed: u64) {
    let mut r = rng::seeded(seed);
    for (i, layer) in stack.layers().iter().enumerate() {
        if let FlowLayer::BatchNorm(_) = layer {
            let d = stack.dim();
            let mean = rng::uniform(&mut r, [d], -1.0, 1.0);
            let var = rng::uniform(&mut r, [d], 0.3, 3.0);
            store.set(store.id_of(&format!("f.{i}.running_mean")).unwrap(), mean).unwrap();
            store.set(store.id_of(&format!("f.{i}.running_var")).unwrap(), var).unwrap();
        }
    }
}

fn all_kinds() -> Vec<(&'static str, LayerSpec)> {
    vec![
        ("plu", LayerSpec::Plu),
        ("prelu", LayerSpec::Prelu),
        ("batch_norm", LayerSpec::BatchNorm { eps: 1e-5, momentum: 0.1 }),
        ("coupling", LayerSpec::Coupling { hidden: vec![8] }),
        ("maf", LayerSpec::Maf { hidden: vec![12] }),
    ]
}

fn forward_values(layer: &FlowLayer, store: &ParamStore, z: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new(store);
    let zv = g.input(z.clone());
    let (x, ld) = layer.forward(&mut g, zv).unwrap();
    (g.value(x).clone(), g.value(ld).clone())
}

fn inverse_values(layer: &FlowLayer, store: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let (z, ld) = layer.inverse(&mut g, xv).unwrap();
    (g.value(z).clone(), g.value(ld).clone())
}

fn sum(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

#[test]
fn round_trip_and_log_det_antisymmetry() {
    for (name, spec) in all_kinds() {
        for seed in 0..3 {
            let (store, stack) = single_layer(spec.clone(), 3, seed);
            let layer = &stack.layers()[0];
            let z = rng::standard_normal(&mut rng::seeded(seed + 7), [1000, 3]);
            let (x, ld_f) = forward_values(layer, &store, &z);
            let (z_back, ld_i) = inverse_values(layer, &store, &x);
            assert!(z_back.max_abs_diff(&z) < 1e-8, "{name}: inverse(forward(z))");
            assert!(sum(&ld_f, &ld_i).data().iter().all(|v| v.abs() < 1e-8), "{name}: log-det antisymmetry");
            let (x_again, _) = forward_values(layer, &store, &z_back);
            assert!(x_again.max_abs_diff(&x) < 1e-8, "{name}: forward(inverse(x))");
        }
    }
}

#[test]
fn stack_round_trip() {
    let specs = vec![
        LayerSpec::Plu,
        LayerSpec::Coupling { hidden: vec![6] },
        LayerSpec::Prelu,
        LayerSpec::BatchNorm { eps: 1e-5, momentum: 0.1 },
        LayerSpec::Maf { hidden: vec![9] },
        LayerSpec::Coupling { hidden: vec![6] },
    ];
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 3, &specs, &mut rng::seeded(3)).unwrap();
    randomize(&mut store, 4, 0.3);
    set_running_stats(&mut store, &stack, 5);
    let z = rng::standard_normal(&mut rng::seeded(6), [1000, 3]);
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let (x, ld_f) = stack.forward(&mut g, zv).unwrap();
    let (zb, ld_i) = stack.inverse(&mut g, x).unwrap();
    assert!(g.value(zb).max_abs_diff(&z) < 1e-8);
    assert!(sum(g.value(ld_f), g.value(ld_i)).data().iter().all(|v| v.abs() < 1e-8));
}

/// `log|det|` of a small dense matrix by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        acc += pivot.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / pivot;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

fn numerical_jacobian(layer: &FlowLayer, store: &ParamStore, z: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = z.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[j] += h;
        down[j] -= h;
        let (xu, _) = forward_values(layer, store, &Tensor::new([1, d], up).unwrap());
        let (xd, _) = forward_values(layer, store, &Tensor::new([1, d], down).unwrap());
        for i in 0..d {
            jac[i][j] = (xu.data()[i] - xd.data()[i]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn log_det_matches_numerical_jacobian() {
    for (name, spec) in all_kinds() {
        for seed in 0..50 {
            let (store, stack) = single_layer(spec.clone(), 3, 1000 + seed);
            let layer = &stack.layers()[0];
            let mut z: Vec<f64> = rng::standard_normal(&mut rng::seeded(seed), [3]).into_data();
            // keep PReLU away from its kink
            z.iter_mut().filter(|v| v.abs() < 0.05).for_each(|v| *v += 0.1);
            let (_, ld) = forward_values(layer, &store, &Tensor::new([1, 3], z.clone()).unwrap());
            let closed = ld.item();
            let numeric = log_abs_det(numerical_jacobian(layer, &store, &z, 1e-5));
            let rel = (closed - numeric).abs() / closed.abs().max(1e-3);
            assert!(rel < 1e-3 || (closed - numeric).abs() < 1e-8, "{name} seed {seed}: {closed} vs {numeric}");
        }
    }
}

#[test]
fn maf_forward_is_autoregressive() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let stack = FlowStack::build(&mut store, "f", 4, &LayerSpec::maf(2, &[16, 16]), &mut rng::seeded(seed)).unwrap();
        randomize(&mut store, seed + 1, 0.5);
        for (li, layer) in stack.layers().iter().enumerate() {
            let FlowLayer::Maf(maf) = layer else { unreachable!() };
            let order = maf.ordering().to_vec();
            let z: Vec<f64> = rng::standard_normal(&mut rng::seeded(seed + 9), [4]).into_data();
            let jac = numerical_jacobian(layer, &store, &z, 1e-3);
            for (pi, &i) in order.iter().enumerate() {
                for (pj, &j) in order.iter().enumerate() {
                    if pj > pi {
                        assert!(jac[i][j].abs() < 1e-12, "layer {li}: dx{i}/dz{j} = {}", jac[i][j]);
                    } else if pj == pi {
                        assert!(jac[i][j].abs() > 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn identity_initialized_layers() {
    let specs = vec![
        LayerSpec::Coupling { hidden: vec![4] },
        LayerSpec::Coupling { hidden: vec![4] },
        LayerSpec::Maf { hidden: vec![6] },
        LayerSpec::Prelu,
    ];
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 2, &specs, &mut rng::seeded(1)).unwrap();
    let z = rng::standard_normal(&mut rng::seeded(2), [20, 2]);
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let (x, ld) = stack.forward(&mut g, zv).unwrap();
    assert!(g.value(x).max_abs_diff(&z) < 1e-15);
    assert!(g.value(ld).data().iter().all(|&v| v == 0.0));
    let (zi, ldi) = stack.inverse(&mut g, zv).unwrap();
    assert!(g.value(zi).max_abs_diff(&z) < 1e-15);
    assert!(g.value(ldi).data().iter().all(|&v| v == 0.0));
    let draws = stack.sample(&store, 50, 11).unwrap();
    let base = rng::standard_normal(&mut rng::seeded(11), [50, 2]);
    assert!(draws.max_abs_diff(&base) < 1e-15);
}

#[test]
fn prelu_example() {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 2, &[LayerSpec::Prelu], &mut rng::seeded(0)).unwrap();
    let FlowLayer::Prelu(p) = &stack.layers()[0] else { unreachable!() };
    p.set_alpha(&mut store, 0.5).unwrap();
    let layer = &stack.layers()[0];
    let (x, ld) = forward_values(layer, &store, &Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
    assert!((x.data()[0] - 1.0).abs() < 1e-15 && (x.data()[1] + 1.0).abs() < 1e-15);
    assert!((ld.item() - 0.5f64.ln()).abs() < 1e-12);
    let (z, _) = inverse_values(layer, &store, &Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
    assert!((z.data()[0] - 1.0).abs() < 1e-15 && (z.data()[1] + 2.0).abs() < 1e-12);
}

fn diagonal_plu() -> (ParamStore, FlowStack) {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 2, &[LayerSpec::Plu], &mut rng::seeded(0)).unwrap();
    let FlowLayer::Plu(p) = &stack.layers()[0] else { unreachable!() };
    p.set_factors(&mut store, &[0, 1], Tensor::zeros([2, 2]), Tensor::zeros([2, 2]), &[2.0, 3.0], &[0.0, 0.0])
        .unwrap();
    (store, stack)
}

#[test]
fn plu_diagonal_example() {
    let (store, stack) = diagonal_plu();
    let (x, ld) = forward_values(&stack.layers()[0], &store, &Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    assert!((x.data()[0] - 2.0).abs() < 1e-14 && (x.data()[1] - 3.0).abs() < 1e-14);
    assert!((ld.item() - 6f64.ln()).abs() < 1e-12);

    // linear change of variables: log f(x) = log N(A⁻¹x) − ln 6
    let x = rng::standard_normal(&mut rng::seeded(4), [30, 2]);
    let lp = stack.log_prob_values(&store, &x).unwrap();
    for r in 0..30 {
        let (u, v) = (x.get2(r, 0) / 2.0, x.get2(r, 1) / 3.0);
        let want = -(2.0 * PI).ln() - 0.5 * (u * u + v * v) - 6f64.ln();
        assert!((lp.data()[r] - want).abs() < 1e-12);
    }
}

#[test]
fn plu_reconstruction_is_exact() {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 4, &[LayerSpec::Plu], &mut rng::seeded(8)).unwrap();
    randomize(&mut store, 9, 0.5);
    let FlowLayer::Plu(p) = &stack.layers()[0] else { unreachable!() };
    let a = p.matrix(&store);
    let z = rng::standard_normal(&mut rng::seeded(10), [5, 4]);
    let (x, _) = forward_values(&stack.layers()[0], &store, &z);
    let (x0, _) = forward_values(&stack.layers()[0], &store, &Tensor::zeros([1, 4]));
    let bias = x0.row(0).to_vec();
    let az = z.matmul(&a.transpose2()).unwrap();
    for r in 0..5 {
        for c in 0..4 {
            assert!((az.get2(r, c) + bias[c] - x.get2(r, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn plu_sample_variance() {
    let (store, stack) = diagonal_plu();
    let s = stack.sample(&store, 100_000, 21).unwrap();
    for (c, want) in [(0, 4.0), (1, 9.0)] {
        let col: Vec<f64> = (0..100_000).map(|r| s.get2(r, c)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        assert!((var / want - 1.0).abs() < 0.05, "dim {c}: {var}");
    }
}

#[test]
fn batch_norm_unit_variance_example() {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 2, &[LayerSpec::BatchNorm { eps: 1e-5, momentum: 0.1 }], &mut rng::seeded(0))
        .unwrap();
    // biased variance exactly 1 in both columns
    let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
    let mut g = Graph::training(&store);
    let xv = g.input(x);
    let (_, ld) = stack.layers()[0].inverse(&mut g, xv).unwrap();
    let want = 2.0 * -0.5 * (1.0f64 + 1e-5).ln();
    assert!(g.value(ld).data().iter().all(|v| (v - want).abs() < 1e-15));
}

#[test]
fn base_log_prob_examples() {
    let mut store = ParamStore::new();
    let empty = FlowStack::build(&mut store, "f", 2, &[], &mut rng::seeded(0)).unwrap();
    let lp = empty.log_prob_values(&store, &Tensor::zeros([1, 2])).unwrap();
    assert!((lp.item() + (2.0 * PI).ln()).abs() < 1e-14);

    let mut g = Graph::new(&store);
    let z = g.input(Tensor::from_rows(&[vec![1.0]]).unwrap());
    let v = base_log_prob(&mut g, z).unwrap();
    assert!((g.value(v).item() - (-0.5 * (2.0 * PI).ln() - 0.5)).abs() < 1e-14);
}

fn grid_mass(stack: &FlowStack, store: &ParamStore, lo: f64, hi: f64, res: usize) -> f64 {
    let h = (hi - lo) / res as f64;
    let mut rows = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            rows.push(vec![lo + (j as f64 + 0.5) * h, lo + (i as f64 + 0.5) * h]);
        }
    }
    let lp = stack.log_prob_values(store, &Tensor::from_rows(&rows).unwrap()).unwrap();
    lp.data().iter().map(|v| v.exp()).sum::<f64>() * h * h
}

#[test]
fn base_density_integrates_to_one() {
    let mut store = ParamStore::new();
    let empty = FlowStack::build(&mut store, "f", 2, &[], &mut rng::seeded(0)).unwrap();
    assert!((grid_mass(&empty, &store, -8.0, 8.0, 600) - 1.0).abs() < 1e-6);
}

#[test]
fn random_stack_integrates_to_one() {
    let specs = vec![
        LayerSpec::Coupling { hidden: vec![8] },
        LayerSpec::Plu,
        LayerSpec::Coupling { hidden: vec![8] },
        LayerSpec::Prelu,
        LayerSpec::Maf { hidden: vec![8] },
    ];
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let stack = FlowStack::build(&mut store, "f", 2, &specs, &mut rng::seeded(seed)).unwrap();
        randomize(&mut store, seed + 30, 0.25);
        let mass = grid_mass(&stack, &store, -8.0, 8.0, 600);
        assert!((mass - 1.0).abs() < 0.02, "seed {seed}: {mass}");
    }
}

#[test]
fn sampling_is_deterministic_in_seed() {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 3, &LayerSpec::realnvp(4, &[5]), &mut rng::seeded(2)).unwrap();
    randomize(&mut store, 3, 0.3);
    let a = stack.sample(&store, 64, 99).unwrap();
    let b = stack.sample(&store, 64, 99).unwrap();
    let c = stack.sample(&store, 64, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn overflowing_scale_reports_layer() {
    let mut store = ParamStore::new();
    let stack = FlowStack::build(&mut store, "f", 2, &[LayerSpec::Plu, LayerSpec::Plu], &mut rng::seeded(0)).unwrap();
    let FlowLayer::Plu(p) = &stack.layers()[1] else { unreachable!() };
    p.set_factors(&mut store, &[0, 1], Tensor::zeros([2, 2]), Tensor::zeros([2, 2]), &[1e-300, 1e-300], &[0.0, 0.0])
        .unwrap();
    let err = stack.log_prob_values(&store, &Tensor::full([1, 2], 1e10)).unwrap_err();
    assert!(err.to_string().contains("layer 1"), "{err}");
}
