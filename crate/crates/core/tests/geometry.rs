use egflow_core::geometry::*;
use egflow_core::Error;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
        .collect()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Full sort by (distance, index).
fn brute_knn(q: &[Point], r: &[Point], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for a in q {
        let mut all: Vec<(f64, usize)> = r.iter().enumerate().map(|(j, b)| (d2(a, b), j)).collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        out.extend(all[..k].iter().map(|&(_, j)| j));
    }
    out
}

/// Recomputes every min-distance from scratch at each step.
fn brute_fps(p: &[Point], m: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..p.len() {
            if sel.contains(&i) {
                continue;
            }
            let md = sel.iter().map(|&s| d2(&p[i], &p[s])).fold(f64::INFINITY, f64::min);
            if md > best.0 {
                best = (md, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0)).with_translation([
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
    ])
}

fn rae_deg(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let c = (((a.rotation.transpose() * b.rotation).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[test]
fn knn_matches_brute_force() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..80);
        let m = rng.random_range(1..40);
        let k = rng.random_range(1..=n.min(16));
        let mut r = cloud(&mut rng, n);
        // duplicates exercise the tie rule
        if n > 2 {
            r[n - 1] = r[0];
        }
        let q = cloud(&mut rng, m);
        let t = knn_points(&q, &r, k).unwrap();
        assert_eq!(t.indices(), brute_knn(&q, &r, k).as_slice(), "seed {seed}");
    }
}

#[test]
fn knn_in_feature_space_matches_brute_force() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let dim = rng.random_range(1..9);
        let (n, m) = (rng.random_range(2..40), rng.random_range(1..20));
        let r: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(1..=n);
        let t = knn(&q, &r, dim, k).unwrap();
        for (i, qa) in q.chunks(dim).enumerate() {
            let mut all: Vec<(f64, usize)> = r
                .chunks(dim)
                .enumerate()
                .map(|(j, ra)| (qa.iter().zip(ra).map(|(x, y)| (x - y).powi(2)).sum(), j))
                .collect();
            all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let want: Vec<usize> = all[..k].iter().map(|a| a.1).collect();
            assert_eq!(t.row(i), want.as_slice());
        }
    }
}

#[test]
fn knn_examples() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
    let t = knn_points(&pts, &pts, 1).unwrap();
    assert_eq!(t.indices(), &[0, 1, 2]);
    let t = knn_points(&[[0.9, 0.0, 0.0]], &pts, 2).unwrap();
    assert_eq!(t.row(0), &[1, 0]);
    assert!(matches!(knn_points(&pts, &pts, 4), Err(Error::TooFew { .. })));
}

#[test]
fn fps_matches_brute_force() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let n = rng.random_range(1..120);
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        let p = cloud(&mut rng, n);
        assert_eq!(fps(&p, m, start).unwrap(), brute_fps(&p, m, start), "seed {seed}");
    }
}

#[test]
fn fps_examples() {
    let line = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
    assert_eq!(fps(&line, 2, 0).unwrap(), vec![0, 3]);
    assert_eq!(fps(&line, 1, 2).unwrap(), vec![2]);
    let mut all = fps(&line, 4, 1).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 1, 2, 3]);
    // equal distances resolve to the lowest index
    let sym = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
    assert_eq!(fps(&sym, 2, 0).unwrap(), vec![0, 1]);
    assert!(fps(&line, 5, 0).is_err());
    assert!(fps(&line, 2, 4).is_err());
}

#[test]
fn upsample_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fine = cloud(&mut rng, 10);
    let vals: Vec<f64> = (0..20).map(|i| i as f64).collect();
    assert_eq!(upsample_assign(&fine, &fine, &vals, 2).unwrap(), vals);
    let one = upsample_assign(&fine, &fine[..1], &[7.0, 8.0], 2).unwrap();
    assert!(one.chunks(2).all(|c| c == [7.0, 8.0]));
    assert!(upsample_assign(&fine, &fine[..2], &[1.0], 2).is_err());
}

#[test]
fn transform_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pc = PointCloud::new(cloud(&mut rng, 20)).unwrap();
    assert_eq!(apply_transform(&RigidTransform::identity(), &pc), pc);
    let t = random_rigid(&mut rng);
    let back = apply_transform(&t.inverse(), &apply_transform(&t, &pc));
    for (a, b) in back.points().iter().zip(pc.points()) {
        assert!(d2(a, b).sqrt() < 1e-9);
    }
    let r = RigidTransform::about_axis(2, 90.0).apply(&[1.0, 0.0, 0.0]);
    assert!(d2(&r, &[0.0, 1.0, 0.0]) < 1e-24);
    assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    assert!(PointCloud::new(vec![]).is_err());
}

#[test]
fn kabsch_recovers_random_rigid_motions() {
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    for seed in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let n = rng.random_range(10..=100);
        let src = cloud(&mut rng, n);
        let t = random_rigid(&mut rng);
        let dst: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
        let est = kabsch_weighted(&src, &dst, &vec![1.0; n]).unwrap();
        worst_r = worst_r.max(rae_deg(&est, &t));
        worst_t = worst_t.max((est.translation - t.translation).norm());
    }
    assert!(worst_r < 1e-5, "RAE {worst_r}");
    assert!(worst_t < 1e-8, "RTE {worst_t}");
}

#[test]
fn kabsch_examples() {
    let tet = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let id = kabsch_weighted(&tet, &tet, &[1.0; 4]).unwrap();
    assert!((id.rotation - nalgebra::Matrix3::identity()).norm() < 1e-9);
    assert!(id.translation.norm() < 1e-9);
    let t = RigidTransform::about_axis(2, 30.0).with_translation([1.0, 2.0, 3.0]);
    let dst: Vec<Point> = tet.iter().map(|p| t.apply(p)).collect();
    let est = kabsch_weighted(&tet, &dst, &[1.0; 4]).unwrap();
    assert!(rae_deg(&est, &t) < 1e-6);
    assert!((est.translation - t.translation).norm() < 1e-9);
}

#[test]
fn kabsch_zero_weights_equal_subset_solve() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 31);
        let n = rng.random_range(10..=60);
        let src = cloud(&mut rng, n);
        let t = random_rigid(&mut rng);
        let mut dst: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
        let keep: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        for (i, d) in dst.iter_mut().enumerate() {
            if !keep[i] {
                *d = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 99.0];
            }
        }
        let w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let masked = kabsch_weighted(&src, &dst, &w).unwrap();
        let sub = |v: &[Point]| v.iter().zip(&keep).filter(|p| *p.1).map(|p| *p.0).collect::<Vec<_>>();
        let (ss, ds) = (sub(&src), sub(&dst));
        let subset = kabsch_weighted(&ss, &ds, &vec![1.0; ss.len()]).unwrap();
        assert_eq!(masked, subset, "seed {seed}");
        assert!(rae_deg(&masked, &t) < 1e-5);
    }
}

#[test]
fn kabsch_flags_degenerate_support() {
    let line: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
    assert!(matches!(kabsch_weighted(&line, &line, &[1.0; 10]), Err(Error::Degenerate(_))));
    let tet = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(matches!(kabsch_weighted(&tet, &tet, &[0.0; 4]), Err(Error::BadWeights)));
    assert!(matches!(kabsch_weighted(&tet, &tet, &[1.0, -1.0, 1.0, 1.0]), Err(Error::BadWeights)));
}

#[test]
fn transform_rows_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = random_rigid(&mut rng);
    assert_eq!(RigidTransform::from_rows(&t.to_rows()), t);
    let c = t.compose(&t.inverse());
    assert!((c.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);
    assert!(RigidTransform::new(nalgebra::Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
}
