//! Finite-difference gradient suite over every differentiable op, network
//! module and loss, on small random instances in f64.

use std::rc::Rc;
use std::time::{Duration, Instant};

use egflow_autodiff::{Activation, GradCheck, GradReport, ParamStore, Precision, Reduce, Tape, TensorError, Var};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{rc_indices, Lfa};
use crate::error::{Error, Result};
use crate::flow::{hybrid_warp, kabsch_on_tape, merge_final_flow, CostVolume, EgoHead, FeatureUpdate, Refine, Search};
use crate::geometry::{knn, Point, RigidTransform};
use crate::losses::{chamfer_masked, ego_loss, seg_loss, smoothness_masked};
use crate::nn::{Builder, Mlp};
use crate::pyramid::REL_WIDTH;

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    /// Worst `|analytic − fd| / max(1, |fd|)` over all instances.
    pub max_error: f64,
    pub checked: usize,
    /// Entries skipped as non-differentiable; at most 5% of `checked`.
    pub kinks: usize,
    pub passed: bool,
    pub elapsed: Duration,
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<GradReport>;

pub const CASES: &[(&str, Case)] = &[
    ("linear", case_linear),
    ("matmul_transpose", case_matmul),
    ("elementwise", case_elementwise),
    ("broadcast_rows_cols", case_broadcast),
    ("activations", case_activations),
    ("sum_last_axis_div_scalar", case_sum_div),
    ("row_norm", case_row_norm),
    ("gather", case_gather),
    ("neighbor_reductions", case_reduce),
    ("normalize_features", case_normalize),
    ("polar_rotation", case_polar),
    ("lfa", case_lfa),
    ("cost_volume", case_cost_volume),
    ("kabsch_on_tape", case_kabsch),
    ("ego_head", case_ego_head),
    ("hybrid_warp_merge", case_warp),
    ("feature_update", case_feature_update),
    ("attention_refine", case_refine),
    ("flow_predictor", case_predictor),
    ("seg_loss", case_seg_loss),
    ("ego_loss", case_ego_loss),
    ("chamfer_masked", case_chamfer),
    ("smoothness_masked", case_smoothness),
];

/// Runs every case on `instances` seeded instances.
pub fn run_suite(instances: usize) -> Result<Vec<CaseReport>> {
    CASES.iter().map(|&(name, case)| run_case(name, case, instances)).collect()
}

pub fn run_case(name: &'static str, case: Case, instances: usize) -> Result<CaseReport> {
    let tol = GradCheck::default().tol;
    let start = Instant::now();
    let mut rep = CaseReport {
        name,
        instances,
        max_error: 0.0,
        checked: 0,
        kinks: 0,
        passed: true,
        elapsed: Duration::ZERO,
    };
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) ^ name.len() as u64);
        let r = case(&mut rng, seed)?;
        rep.checked += r.checked;
        rep.kinks += r.kinks;
        rep.max_error = rep.max_error.max(r.max_error);
        rep.passed &= r.checked > 0 && r.passed(tol);
    }
    rep.passed &= rep.kinks * 20 <= rep.checked;
    rep.elapsed = start.elapsed();
    Ok(rep)
}

fn lift<T>(r: Result<T>) -> egflow_autodiff::Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidParameter(other.to_string()),
    })
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=6)
}

fn worst(a: GradReport, b: GradReport) -> GradReport {
    let (checked, kinks) = (a.checked + b.checked, a.kinks + b.kinks);
    let mut w = if a.max_error >= b.max_error { a } else { b };
    w.checked = checked;
    w.kinks = kinks;
    w
}

/// Random linear functional of `y`, so each output element gets its own weight.
fn project(t: &mut Tape, y: Var, seed: u64) -> egflow_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = t.data(y).len();
    let shape = t.shape(y).to_vec();
    let c = t.constant(&shape, rand_vec(&mut rng, n))?;
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn store_with<T>(seed: u64, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<(T, ParamStore)> {
    let mut store = ParamStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let m = f(&mut Builder::new(&mut store, &mut rng))?;
    Ok((m, store))
}

/// Redraws a score head at unit scale, away from the near-ties of its
/// damped initialization.
fn redraw_head(store: &mut ParamStore, mlp: &Mlp, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
    if let Some(head) = &mlp.head {
        for id in [Some(head.w), head.b].into_iter().flatten() {
            store.param_mut(id).data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

fn case_linear(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, ci, co) = (dims(rng), dims(rng), dims(rng));
    let inputs = vec![
        (vec![n, ci], rand_vec(rng, n * ci)),
        (vec![ci, co], rand_vec(rng, ci * co)),
        (vec![co], rand_vec(rng, co)),
    ];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, seed)
    })?)
}

fn case_matmul(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (m, k, n) = (dims(rng), dims(rng), dims(rng));
    let inputs = vec![(vec![k, m], rand_vec(rng, m * k)), (vec![k, n], rand_vec(rng, k * n))];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let at = t.transpose(v[0])?;
        let y = t.matmul(at, v[1])?;
        project(t, y, seed)
    })?)
}

fn case_elementwise(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, c) = (dims(rng), dims(rng));
    let inputs = vec![(vec![n, c], rand_vec(rng, n * c)), (vec![n, c], rand_vec(rng, n * c))];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let b = t.scale(b, 1.7);
        let m = t.mul(b, v[1])?;
        let cat = t.concat(&[m, v[0]])?;
        let r = t.reshape(cat, &[n * 2 * c])?;
        project(t, r, seed)
    })?)
}

fn case_broadcast(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, c) = (dims(rng), dims(rng));
    let inputs = vec![
        (vec![n, c], rand_vec(rng, n * c)),
        (vec![c], rand_vec(rng, c)),
        (vec![n], rand_vec(rng, n)),
    ];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let a = t.add_row(v[0], v[1])?;
        let b = t.mul_col(a, v[2])?;
        let s = t.sum_rows(b);
        let m = t.mean(b);
        let ps = project(t, s, seed)?;
        t.add(ps, m)
    })?)
}

fn case_activations(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, k) = (dims(rng), dims(rng));
    let inputs = vec![(vec![n, k], rand_vec(rng, n * k))];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let a = t.activation(v[0], Activation::LeakyRelu(0.1))?;
        let b = t.activation(v[0], Activation::Sigmoid)?;
        let c = t.activation(v[0], Activation::SoftmaxOverNeighbors)?;
        let d = t.softplus(v[0])?;
        let e = t.abs(v[0]);
        let cat = t.concat(&[a, b, c, d, e])?;
        project(t, cat, seed)
    })?)
}

fn case_sum_div(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, c) = (dims(rng), dims(rng));
    let inputs = vec![(vec![n, c], rand_vec(rng, n * c)), (vec![1], vec![rng.random_range(0.5..2.0)])];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let s = t.sum_last_axis(v[0]);
        let d = t.div_scalar(s, v[1])?;
        project(t, d, seed)
    })?)
}

fn case_row_norm(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, c) = (dims(rng), dims(rng));
    let inputs = vec![(vec![n, c], rand_vec(rng, n * c))];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let y = t.row_norm(v[0]);
        project(t, y, seed)
    })?)
}

fn case_gather(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, c, m, k) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let idx: Rc<[usize]> = (0..m * k).map(|_| rng.random_range(0..n)).collect();
    let flat: Rc<[usize]> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let inputs = vec![(vec![n, c], rand_vec(rng, n * c))];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let y = t.gather_neighbors(v[0], idx.clone(), m, k)?;
        let z = t.gather(v[0], flat.clone(), &[m])?;
        let a = project(t, y, seed)?;
        let b = project(t, z, seed + 1)?;
        t.add(a, b)
    })?)
}

fn case_reduce(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (m, k, c) = (dims(rng), dims(rng), dims(rng));
    let inputs = vec![(vec![m, k, c], rand_vec(rng, m * k * c)), (vec![m, k], rand_vec(rng, m * k))];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let mx = t.reduce_neighbors(v[0], Reduce::Max, None)?;
        let ws = t.reduce_neighbors(v[0], Reduce::WeightedSum, Some(v[1]))?;
        let ml = t.max_last_axis(v[0]);
        let a = project(t, mx, seed)?;
        let b = project(t, ws, seed + 1)?;
        let c = project(t, ml, seed + 2)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    })?)
}

fn case_normalize(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (n, c) = (rng.random_range(2..=6), dims(rng));
    let (norm, mut store) = store_with(seed, |b| crate::nn::Norm::new(b, c))?;
    for id in [norm.scale, norm.shift] {
        store.param_mut(id).data = rand_vec(rng, c);
    }
    let x = rand_vec(rng, n * c);
    let check = GradCheck::default();
    let pr = check.params(&store, |t, s| {
        let xv = t.constant(&[n, c], x.clone())?;
        let y = lift(norm.forward(t, s, xv))?;
        project(t, y, seed)
    })?;
    let xr = check.inputs(&[(vec![n, c], x.clone())], |t, v| {
        let y = lift(norm.forward(t, &store, v[0]))?;
        project(t, y, seed)
    })?;
    Ok(worst(pr, xr))
}

fn case_polar(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let mut h = rand_vec(rng, 9);
    // keep clear of the degenerate set σ_i + σ_j = 0
    for i in 0..3 {
        h[i * 4] += 2.0 * (i as f64 + 1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    Ok(GradCheck::default().inputs(&[(vec![3, 3], h)], |t, v| {
        let r = t.polar_rotation(v[0], 1e-9)?;
        project(t, r, seed)
    })?)
}

fn case_lfa(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (l, k, cin, cout) = (rng.random_range(2..=6), rng.random_range(1..=4), dims(rng), dims(rng));
    let (lfa, store) = store_with(seed, |b| Lfa::new(b, cin, cout))?;
    let nbr: Rc<[usize]> = (0..l * k).map(|_| rng.random_range(0..l)).collect();
    let feats = rand_vec(rng, l * cin);
    let rel = rand_vec(rng, l * k * REL_WIDTH);
    let check = GradCheck::default();
    let pr = check.params(&store, |t, s| {
        let f = t.constant(&[l, cin], feats.clone())?;
        let r = t.constant(&[l, k, REL_WIDTH], rel.clone())?;
        let y = lift(lfa.forward(t, s, f, r, nbr.clone()))?;
        project(t, y, seed)
    })?;
    let inputs = vec![(vec![l, cin], feats.clone()), (vec![l, k, REL_WIDTH], rel.clone())];
    let xr = check.inputs(&inputs, |t, v| {
        let y = lift(lfa.forward(t, &store, v[0], v[1], nbr.clone()))?;
        project(t, y, seed)
    })?;
    Ok(worst(pr, xr))
}

fn case_cost_volume(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (l, m, c, h) = (rng.random_range(2..=6), rng.random_range(2..=8), dims(rng), dims(rng));
    let (cv, mut store) = store_with(seed, |b| CostVolume::new(b, c, h))?;
    redraw_head(&mut store, &cv.score, seed);
    let src = points(rng, l).concat();
    let dst = points(rng, m).concat();
    let hs = rand_vec(rng, l * c);
    let hq = rand_vec(rng, m * c);
    let check = GradCheck::default();
    let out = |t: &mut Tape, s: &ParamStore, v: [Var; 4]| -> egflow_autodiff::Result<Var> {
        let o = lift(cv.forward(t, s, v[0], v[1], v[2], v[3], Search::Euclidean, 0))?;
        let a = project(t, o.feat, seed)?;
        let b = project(t, o.corr, seed + 1)?;
        t.add(a, b)
    };
    let pr = check.params(&store, |t, s| {
        let v = [
            t.constant(&[l, 3], src.clone())?,
            t.constant(&[m, 3], dst.clone())?,
            t.constant(&[l, c], hs.clone())?,
            t.constant(&[m, c], hq.clone())?,
        ];
        out(t, s, v)
    })?;
    // point perturbations do not change the neighbor table for generic data
    let inputs = vec![
        (vec![l, 3], src.clone()),
        (vec![m, 3], dst.clone()),
        (vec![l, c], hs.clone()),
        (vec![m, c], hq.clone()),
    ];
    let xr = check.inputs(&inputs, |t, v| out(t, &store, [v[0], v[1], v[2], v[3]]))?;
    Ok(worst(pr, xr))
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    RigidTransform::from_axis_angle(axis, rng.random_range(-1.0..1.0)).with_translation([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ])
}

fn case_kabsch(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let n = rng.random_range(4..=10);
    let src = points(rng, n);
    let tr = random_rigid(rng);
    let dst: Vec<f64> = src
        .iter()
        .flat_map(|p| {
            let q = tr.apply(p);
            [q[0] + rng.random_range(-0.05..0.05), q[1] + rng.random_range(-0.05..0.05), q[2] + rng.random_range(-0.05..0.05)]
        })
        .collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let inputs = vec![(vec![n, 3], src.concat()), (vec![n, 3], dst), (vec![n], w)];
    let prior = if seed.is_multiple_of(2) { 0.0 } else { 0.5 };
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let (r, tt) = lift(kabsch_on_tape(t, v[0], v[1], v[2], prior))?;
        let a = project(t, r, seed)?;
        let b = project(t, tt, seed + 1)?;
        t.add(a, b)
    })?)
}

fn case_ego_head(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (l, m, c) = (rng.random_range(4..=8), rng.random_range(4..=8), dims(rng));
    let (heads, mut store) = store_with(seed, |b| {
        let cv = b.scope("cost", |b| CostVolume::new(b, c, 4))?;
        let ego = b.scope("ego", |b| EgoHead::new(b, c, 4))?;
        Ok((cv, ego))
    })?;
    redraw_head(&mut store, &heads.0.score, seed);
    let src = points(rng, l).concat();
    let dst = points(rng, m).concat();
    let hs = rand_vec(rng, l * c);
    let hq = rand_vec(rng, m * c);
    let bg: Vec<f64> = (0..l).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 }).collect();
    let prior = if seed.is_multiple_of(2) { 0.0 } else { 0.5 };
    Ok(GradCheck::default().params(&store, |t, s| {
        let sv = t.constant(&[l, 3], src.clone())?;
        let dv = t.constant(&[m, 3], dst.clone())?;
        let a = t.constant(&[l, c], hs.clone())?;
        let b = t.constant(&[m, c], hq.clone())?;
        let cv = lift(heads.0.forward(t, s, sv, dv, a, b, Search::Euclidean, 0))?;
        let e = lift(heads.1.forward(t, s, &cv, sv, Some(&bg), prior))?;
        let x = project(t, e.rotation, seed)?;
        let y = project(t, e.translation, seed + 1)?;
        t.add(x, y)
    })?)
}

fn case_warp(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let n = dims(rng);
    let fg: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let inputs = vec![
        (vec![n, 3], rand_vec(rng, n * 3)),
        (vec![n, 3], rand_vec(rng, n * 3)),
        (vec![3, 3], rand_vec(rng, 9)),
        (vec![3], rand_vec(rng, 3)),
    ];
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let w = lift(hybrid_warp(t, v[0], v[1], v[2], v[3], &fg))?;
        let f = lift(merge_final_flow(t, v[1], v[2], v[3], v[0], &fg))?;
        let a = project(t, w, seed)?;
        let b = project(t, f, seed + 1)?;
        t.add(a, b)
    })?)
}

fn case_feature_update(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (l, cin, cout) = (rng.random_range(2..=8), dims(rng), dims(rng));
    let (fu, store) = store_with(seed, |b| FeatureUpdate::new(b, cin, cout))?;
    let f = rand_vec(rng, l * cin);
    // the feature-space table depends on the input, so only parameters are perturbed
    let pr = GradCheck::default().params(&store, |t, s| {
        let x = t.constant(&[l, cin], f.clone())?;
        let y = lift(fu.forward(t, s, x))?;
        project(t, y, seed)
    })?;
    let table = knn(&f, &f, cin, crate::pyramid::NEIGHBORS.min(l))?;
    let k = table.k();
    let idx = rc_indices(&table);
    let xr = GradCheck::default().inputs(&[(vec![l, cin], f.clone())], |t, v| {
        let h = lift(fu.mlp.forward(t, &store, v[0]))?;
        let g = t.gather_neighbors(h, idx.clone(), l, k)?;
        let y = t.reduce_neighbors(g, Reduce::Max, None)?;
        project(t, y, seed)
    })?;
    Ok(worst(pr, xr))
}

fn case_refine(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (l, k, cin, w) = (rng.random_range(2..=6), rng.random_range(1..=4), dims(rng), dims(rng));
    let (refine, store) = store_with(seed, |b| Refine::new(b, cin, w, true))?;
    let nbr: Rc<[usize]> = (0..l * k).map(|_| rng.random_range(0..l)).collect();
    let x = rand_vec(rng, l * cin);
    let check = GradCheck::default();
    let pr = check.params(&store, |t, s| {
        let xv = t.constant(&[l, cin], x.clone())?;
        let y = lift(refine.forward(t, s, xv, nbr.clone(), k))?;
        project(t, y, seed)
    })?;
    let xr = check.inputs(&[(vec![l, cin], x.clone())], |t, v| {
        let y = lift(refine.forward(t, &store, v[0], nbr.clone(), k))?;
        project(t, y, seed)
    })?;
    Ok(worst(pr, xr))
}

fn case_predictor(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let (l, c) = (rng.random_range(2..=6), dims(rng));
    let (mlp, store) = store_with(seed, |b| Mlp::new(b, &[c, 6, 4, 3], true))?;
    let x = rand_vec(rng, l * c);
    let check = GradCheck::default();
    let pr = check.params(&store, |t, s| {
        let xv = t.constant(&[l, c], x.clone())?;
        let y = lift(mlp.forward(t, s, xv))?;
        project(t, y, seed)
    })?;
    let xr = check.inputs(&[(vec![l, c], x.clone())], |t, v| {
        let y = lift(mlp.forward(t, &store, v[0]))?;
        project(t, y, seed)
    })?;
    Ok(worst(pr, xr))
}

fn case_seg_loss(rng: &mut ChaCha8Rng, _seed: u64) -> Result<GradReport> {
    let n = dims(rng);
    let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    Ok(GradCheck::default().inputs(&[(vec![n, 1], z)], |t, v| lift(seg_loss(t, v[0], &labels, 20.0)))?)
}

fn case_ego_loss(rng: &mut ChaCha8Rng, _seed: u64) -> Result<GradReport> {
    let gt = random_rigid(rng);
    let scales = rng.random_range(1..=4);
    let mut inputs = Vec::new();
    for _ in 0..scales {
        let mut h = rand_vec(rng, 9);
        for i in 0..3 {
            h[i * 4] += 3.0;
        }
        inputs.push((vec![3, 3], h));
        inputs.push((vec![3], rand_vec(rng, 3)));
    }
    Ok(GradCheck::default().inputs(&inputs, |t, v| {
        let est = v
            .chunks(2)
            .map(|p| Ok((t.polar_rotation(p[0], 1e-9)?, p[1])))
            .collect::<egflow_autodiff::Result<Vec<_>>>()?;
        lift(ego_loss(t, &est, &gt, 1.8))
    })?)
}

fn case_chamfer(rng: &mut ChaCha8Rng, _seed: u64) -> Result<GradReport> {
    let (n, m) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let q = points(rng, m);
    let mp: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
    let mq: Vec<f64> = (0..m).map(|_| rng.random_range(0..2) as f64).collect();
    let w = rand_vec(rng, n * 3);
    Ok(GradCheck::default().inputs(&[(vec![n, 3], w)], |t, v| lift(chamfer_masked(t, v[0], &q, &mp, &mq)))?)
}

fn case_smoothness(rng: &mut ChaCha8Rng, _seed: u64) -> Result<GradReport> {
    let n = rng.random_range(3..=10);
    let pts = points(rng, n);
    let mask: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
    let nk = rng.random_range(1..=4);
    let flow = rand_vec(rng, n * 3);
    Ok(GradCheck::default().inputs(&[(vec![n, 3], flow)], |t, v| lift(smoothness_masked(t, v[0], &pts, &mask, nk)))?)
}
