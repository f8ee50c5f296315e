//! Every differentiable op against central finite differences in f64.

use std::rc::Rc;

use egflow_autodiff::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

/// Weighted sum of the output with fixed random coefficients, so every
/// output element contributes a distinct gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = t.data(y).len();
    let shape = t.shape(y).to_vec();
    let c = t.constant(&shape, rand_vec(&mut rng, n))?;
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn run<F>(name: &str, mut case: F)
where
    F: FnMut(&mut ChaCha8Rng, u64) -> GradReport,
{
    let check = GradCheck::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let r = case(&mut rng, seed);
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(r.passed(check.tol), "{name} seed {seed}: {r:?}");
    }
}

#[test]
fn grad_linear() {
    run("linear", |rng, seed| {
        let (n, ci, co) = (dims(rng), dims(rng), dims(rng));
        let inputs = vec![
            (vec![n, ci], rand_vec(rng, n * ci)),
            (vec![ci, co], rand_vec(rng, ci * co)),
            (vec![co], rand_vec(rng, co)),
        ];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_linear_rank3() {
    run("linear3", |rng, seed| {
        let (m, k, ci, co) = (dims(rng), dims(rng), dims(rng), dims(rng));
        let inputs = vec![(vec![m, k, ci], rand_vec(rng, m * k * ci)), (vec![ci, co], rand_vec(rng, ci * co))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let y = t.linear(v[0], v[1], None)?;
                project(t, y, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_matmul_transpose() {
    run("matmul", |rng, seed| {
        let (m, k, n) = (dims(rng), dims(rng), dims(rng));
        let inputs = vec![(vec![k, m], rand_vec(rng, m * k)), (vec![k, n], rand_vec(rng, k * n))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let at = t.transpose(v[0])?;
                let y = t.matmul(at, v[1])?;
                project(t, y, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_elementwise() {
    run("elementwise", |rng, seed| {
        let (n, c) = (dims(rng), dims(rng));
        let inputs = vec![(vec![n, c], rand_vec(rng, n * c)), (vec![n, c], rand_vec(rng, n * c))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let b = t.scale(b, 1.7);
                let m = t.mul(b, v[1])?;
                let r = t.reshape(m, &[n * c])?;
                project(t, r, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_broadcasts() {
    run("broadcast", |rng, seed| {
        let (n, c) = (dims(rng), dims(rng));
        let inputs = vec![
            (vec![n, c], rand_vec(rng, n * c)),
            (vec![c], rand_vec(rng, c)),
            (vec![n], rand_vec(rng, n)),
        ];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let a = t.add_row(v[0], v[1])?;
                let b = t.mul_col(a, v[2])?;
                let s = t.sum_rows(b);
                project(t, s, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_activations() {
    run("activations", |rng, seed| {
        let (n, k) = (dims(rng), dims(rng));
        let inputs = vec![(vec![n, k], rand_vec(rng, n * k))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let a = t.activation(v[0], Activation::LeakyRelu(0.1))?;
                let b = t.activation(v[0], Activation::Sigmoid)?;
                let c = t.activation(v[0], Activation::SoftmaxOverNeighbors)?;
                let d = t.softplus(v[0])?;
                let e = t.abs(v[0]);
                let cat = t.concat(&[a, b, c, d, e])?;
                project(t, cat, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_sum_last_axis_and_div_scalar() {
    run("sum_last_div", |rng, seed| {
        let (n, c) = (dims(rng), dims(rng));
        let inputs = vec![(vec![n, c], rand_vec(rng, n * c)), (vec![1], vec![rng.random_range(0.5..2.0)])];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let s = t.sum_last_axis(v[0]);
                let d = t.div_scalar(s, v[1])?;
                project(t, d, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_row_norm() {
    run("row_norm", |rng, seed| {
        let (n, c) = (dims(rng), dims(rng));
        let inputs = vec![(vec![n, c], rand_vec(rng, n * c))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let y = t.row_norm(v[0]);
                project(t, y, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_gather_with_duplicates() {
    run("gather", |rng, seed| {
        let (n, c, m, k) = (dims(rng), dims(rng), dims(rng), dims(rng));
        let idx: Vec<usize> = (0..m * k).map(|_| rng.random_range(0..n)).collect();
        let idx: Rc<[usize]> = Rc::from(idx);
        let inputs = vec![(vec![n, c], rand_vec(rng, n * c))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let y = t.gather_neighbors(v[0], idx.clone(), m, k)?;
                project(t, y, seed)
            })
            .unwrap()
    });
}

#[test]
fn grad_reduce_neighbors() {
    run("reduce", |rng, seed| {
        let (m, k, c) = (dims(rng), dims(rng), dims(rng));
        let inputs = vec![(vec![m, k, c], rand_vec(rng, m * k * c)), (vec![m, k], rand_vec(rng, m * k))];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let mx = t.reduce_neighbors(v[0], Reduce::Max, None)?;
                let ws = t.reduce_neighbors(v[0], Reduce::WeightedSum, Some(v[1]))?;
                let ml = t.max_last_axis(v[0]);
                let a = project(t, mx, seed)?;
                let b = project(t, ws, seed + 1)?;
                let c = project(t, ml, seed + 2)?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            })
            .unwrap()
    });
}

#[test]
fn grad_normalize_features() {
    run("normalize", |rng, seed| {
        let (n, c) = (rng.random_range(2..=8), dims(rng));
        let mut store = ParamStore::new(Precision::F64);
        let g = store.register("g", &[c], rand_vec(rng, c)).unwrap();
        let b = store.register("b", &[c], rand_vec(rng, c)).unwrap();
        let rm = store.register_buffer("rm", &[c], rand_vec(rng, c)).unwrap();
        let rv = store.register_buffer("rv", &[c], vec![1.3; c]).unwrap();
        let x = rand_vec(rng, n * c);
        let check = GradCheck::default();
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(&[n, c], x.clone())?;
            let (gv, bv) = (t.param(s, g), t.param(s, b));
            let y = t.normalize_features(xv, gv, bv, (rm, rv), s)?;
            project(t, y, seed)
        };
        let pr = check.params(&store, f).unwrap();
        let inputs = vec![(vec![n, c], x.clone())];
        let xr = check
            .inputs(&inputs, |t, v| {
                let (gv, bv) = (t.param(&store, g), t.param(&store, b));
                let y = t.normalize_features(v[0], gv, bv, (rm, rv), &store)?;
                project(t, y, seed)
            })
            .unwrap();
        if pr.max_error > xr.max_error {
            pr
        } else {
            xr
        }
    });
}

#[test]
fn grad_polar_rotation() {
    run("polar", |rng, seed| {
        let mut h = rand_vec(rng, 9);
        // keep clear of the degenerate set σ_i + σ_j = 0
        for i in 0..3 {
            h[i * 4] += 2.0 * (i as f64 + 1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let inputs = vec![(vec![3, 3], h)];
        GradCheck::default()
            .inputs(&inputs, |t, v| {
                let r = t.polar_rotation(v[0], 1e-9)?;
                project(t, r, seed)
            })
            .unwrap()
    });
}

#[test]
fn checker_skips_kinks_and_catches_wrong_gradients() {
    let check = GradCheck::default();
    // |x| at 0 and the leaky ReLU corner have no derivative
    let r = check
        .inputs(&[(vec![3], vec![0.0, 1e-7, 0.5])], |t, v| {
            let a = t.abs(v[0]);
            Ok(t.sum(a))
        })
        .unwrap();
    assert_eq!((r.kinks, r.checked), (2, 1));
    assert!(r.passed(check.tol));

    // steep but smooth is not a kink
    let r = check
        .inputs(&[(vec![1], vec![0.002])], |t, v| {
            let y = t.scale(v[0], 200.0);
            let s = t.sigmoid(y)?;
            Ok(t.sum(s))
        })
        .unwrap();
    assert_eq!(r.kinks, 0);
    assert!(r.passed(check.tol), "{r:?}");

    // y = x·c with c built from x's data is treated as constant by the tape
    let r = check
        .inputs(&[(vec![2], vec![0.7, -1.3])], |t, v| {
            let c = t.constant(&[2], t.data(v[0]).to_vec())?;
            let y = t.mul(v[0], c)?;
            Ok(t.sum(y))
        })
        .unwrap();
    assert!(!r.passed(check.tol));
}
