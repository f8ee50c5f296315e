use egflow_core::geometry::{Point, RigidTransform};
use egflow_core::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vecs(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<Point> {
    (0..n).map(|_| [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)]).collect()
}

#[test]
fn flow_metrics_match_direct_counts() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..200);
        let gt = vecs(&mut rng, n, 1.0);
        let pred: Vec<Point> = gt
            .iter()
            .map(|g| {
                let s = rng.random_range(0.0..0.4);
                [g[0] + rng.random_range(-s..s), g[1] + rng.random_range(-s..s), g[2]]
            })
            .collect();
        let m = flow_metrics(&pred, &gt).unwrap();
        let (mut sum, mut s, mut r, mut o) = (0.0, 0, 0, 0);
        for (p, g) in pred.iter().zip(&gt) {
            let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
            let rel = e / (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            sum += e;
            s += (e < 0.05 || rel < 0.05) as usize;
            r += (e < 0.1 || rel < 0.1) as usize;
            o += (e > 0.3 || rel > 0.1) as usize;
        }
        let nf = n as f64;
        assert!((m.epe3d - sum / nf).abs() < 1e-12, "seed {seed}");
        assert_eq!(m.acc3ds, s as f64 / nf);
        assert_eq!(m.acc3dr, r as f64 / nf);
        assert_eq!(m.out3d, o as f64 / nf);
        assert_eq!(m.count, n);
    }
}

#[test]
fn mask_metrics_match_direct_counts() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let n = rng.random_range(1..100);
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let m = mask_metrics(&pred, &gt).unwrap();
        let count = |p: bool, g: bool| pred.iter().zip(&gt).filter(|&(&a, &b)| a == p && b == g).count();
        let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        assert_eq!(m.prec_fg, ratio(tp, tp + fp));
        assert_eq!(m.rec_fg, ratio(tp, tp + fn_));
        assert_eq!(m.prec_bg, ratio(tn, tn + fn_));
        assert_eq!(m.rec_bg, ratio(tn, tn + fp));
    }
}

#[test]
fn ego_metrics_match_direct_angle() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 600);
        let gt = RigidTransform::about_axis(rng.random_range(0..3), rng.random_range(-20.0..20.0))
            .with_translation([rng.random(), rng.random(), rng.random()]);
        let deg = rng.random_range(0.5..90.0);
        let err = RigidTransform::about_axis(rng.random_range(0..3), deg);
        let est = RigidTransform {
            rotation: err.rotation * gt.rotation,
            translation: gt.translation,
        };
        let m = ego_metrics(&est, &gt);
        assert!((m.rae_deg - deg).abs() < 1e-6, "seed {seed}: {} vs {deg}", m.rae_deg);
        assert_eq!(m.rte, 0.0);
    }
}

#[test]
fn metric_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = vecs(&mut rng, 30, 2.0);
    let m = flow_metrics(&gt, &gt).unwrap();
    assert_eq!((m.epe3d, m.acc3ds, m.acc3dr, m.out3d), (0.0, 1.0, 1.0, 0.0));

    let m = flow_metrics(&[[1.04, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(m.acc3ds, 1.0);

    let gt = RigidTransform::about_axis(0, 12.0).with_translation([1.0, 2.0, 3.0]);
    assert_eq!(ego_metrics(&gt, &gt), EgoMetrics { rae_deg: 0.0, rte: 0.0 });
    let est = RigidTransform {
        rotation: RigidTransform::about_axis(2, 1.0).rotation * gt.rotation,
        translation: gt.translation,
    };
    assert!((ego_metrics(&est, &gt).rae_deg - 1.0).abs() < 1e-6);
    let est = gt.with_translation([1.03, 2.04, 3.0]);
    assert!((ego_metrics(&est, &gt).rte - 0.05).abs() < 1e-12);

    let perfect = mask_metrics(&[true, false], &[true, false]).unwrap();
    assert_eq!((perfect.prec_fg, perfect.rec_fg, perfect.prec_bg, perfect.rec_bg), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(mask_metrics(&[false, false], &[true, false]).unwrap().rec_fg, 0.0);
    let hand = mask_metrics(&[true, true, false], &[true, false, true]).unwrap();
    assert_eq!((hand.prec_fg, hand.rec_fg), (0.5, 0.5));
    let empty = mask_metrics(&[false, false], &[false, false]).unwrap();
    assert!(empty.empty_denominator);
    assert_eq!(empty.prec_fg, 1.0);
    assert!(mask_metrics(&[true], &[true, false]).is_err());
}

#[test]
fn pooled_aggregate_weights_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scenes = Vec::new();
    let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
    for i in 0..5 {
        let n = 10 + 7 * i;
        let gt = vecs(&mut rng, n, 1.0);
        let pred = vecs(&mut rng, n, 1.0);
        let labels: Vec<bool> = (0..n).map(|j| j % 3 == 0).collect();
        let id = RigidTransform::identity();
        scenes.push(SceneEval::compute(&format!("s{i}"), &pred, &gt, &labels, &labels, &id, &id).unwrap());
        all_pred.extend(pred);
        all_gt.extend(gt);
    }
    let pooled = aggregate(&scenes, true);
    let direct = flow_metrics(&all_pred, &all_gt).unwrap();
    assert!((pooled.epe3d - direct.epe3d).abs() < 1e-12);
    assert_eq!(pooled.points, all_gt.len());
    let per_scene = aggregate(&scenes, false);
    let mean: f64 = scenes.iter().map(|s| s.row().epe3d).sum::<f64>() / 5.0;
    assert!((per_scene.epe3d - mean).abs() < 1e-12);

    let mut buf = Vec::new();
    write_report(&mut buf, &scenes, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("scene,points,epe3d"));
    assert!(lines[6].starts_with("aggregate,"));
}

#[test]
fn fg_bg_split_partitions_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = vecs(&mut rng, 50, 1.0);
    let pred = vecs(&mut rng, 50, 1.0);
    let labels: Vec<bool> = (0..50).map(|i| i < 20).collect();
    let id = RigidTransform::identity();
    let s = SceneEval::compute("x", &pred, &gt, &labels, &labels, &id, &id).unwrap();
    assert_eq!(s.fg.count + s.bg.count, s.all.count);
    assert!((s.fg.epe_sum + s.bg.epe_sum - s.all.epe_sum).abs() < 1e-12);
    let fg = flow_metrics(&pred[..20], &gt[..20]).unwrap();
    assert!((s.row().epe3d_fg - fg.epe3d).abs() < 1e-12);
}
