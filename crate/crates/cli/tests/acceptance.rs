//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use egflow_autodiff::{Mode, Precision, Tape, Var};
use egflow_core::backbone::{hybrid_features, level_vars, Backbone, SegMask};
use egflow_core::data::*;
use egflow_core::geometry::*;
use egflow_core::losses::*;
use egflow_core::metrics::*;
use egflow_core::nn::Builder;
use egflow_core::pyramid::build_pyramid;
use egflow_core::train::*;
use egflow_core::{gradsuite, Config, Profile};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<Point> {
    (0..n).map(|_| [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)]).collect()
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0)).with_translation([
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
    ])
}

fn rae_oracle(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let c = (((a.rotation.transpose() * b.rotation).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = gradsuite::run_suite(20).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed || r.instances < 20).map(|r| r.name).collect();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    check(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} cases x 20 instances, worst rel err {worst:.2e}, {:.1}s, failing: {failed:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn kabsch() -> Outcome {
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    let mut mask_mismatch = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..=100);
        let src = cloud(&mut rng, n, 5.0);
        let t = random_rigid(&mut rng);
        let mut dst: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
        let est = kabsch_weighted(&src, &dst, &vec![1.0; n]).map_err(|e| e.to_string())?;
        worst_r = worst_r.max(rae_oracle(&est, &t));
        worst_t = worst_t.max((est.translation - t.translation).norm());

        // zero weights must behave exactly like dropping the rows
        let keep: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        for (i, d) in dst.iter_mut().enumerate() {
            if !keep[i] {
                *d = [rng.random_range(-50.0..50.0), 7.0, -3.0];
            }
        }
        let w: Vec<f64> = keep.iter().map(|&k| f64::from(u8::from(k))).collect();
        let masked = kabsch_weighted(&src, &dst, &w).map_err(|e| e.to_string())?;
        let (ss, ds): (Vec<Point>, Vec<Point>) =
            src.iter().zip(&dst).zip(&keep).filter(|x| *x.1).map(|(x, _)| (*x.0, *x.1)).unzip();
        let subset = kabsch_weighted(&ss, &ds, &vec![1.0; ss.len()]).map_err(|e| e.to_string())?;
        if masked != subset {
            mask_mismatch += 1;
        }
    }
    check(
        worst_r < 1e-5 && worst_t < 1e-8 && mask_mismatch == 0,
        format!("1000 pairs, worst RAE {worst_r:.2e} deg, worst RTE {worst_t:.2e} m, mask mismatches {mask_mismatch}"),
    )
}

fn brute_knn(q: &[Point], r: &[Point], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for a in q {
        let mut all: Vec<(f64, usize)> = r.iter().enumerate().map(|(j, b)| (d2(a, b), j)).collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        out.extend(all[..k].iter().map(|&(_, j)| j));
    }
    out
}

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

fn brute_flow(pred: &[Point], gt: &[Point]) -> [f64; 4] {
    let (mut sum, mut s, mut r, mut o) = (0.0, 0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let e = d2(p, g).sqrt();
        let gn = d2(g, &[0.0; 3]).sqrt();
        let rel = e / gn;
        sum += e;
        s += usize::from(e < 0.05 || rel < 0.05);
        r += usize::from(e < 0.1 || rel < 0.1);
        o += usize::from(e > 0.3 || rel > 0.1);
    }
    let n = pred.len() as f64;
    [sum / n, s as f64 / n, r as f64 / n, o as f64 / n]
}

fn brute_force() -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10_000);
        let n = rng.random_range(2..120);
        let mut r = cloud(&mut rng, n, 5.0);
        r[n - 1] = r[0];
        let nq = rng.random_range(1..40);
        let q = cloud(&mut rng, nq, 5.0);
        let k = rng.random_range(1..=n.min(16));
        if knn_points(&q, &r, k).map(|t| t.indices().to_vec()).ok() != Some(brute_knn(&q, &r, k)) {
            bad.push(format!("knn {seed}"));
        }
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        if fps(&r, m, start).ok() != Some(brute_fps(&r, m, start)) {
            bad.push(format!("fps {seed}"));
        }
        let gt = cloud(&mut rng, n, 1.0);
        let pred: Vec<Point> = gt
            .iter()
            .map(|g| {
                let s = rng.random_range(0.0..0.4);
                [g[0] + rng.random_range(-s..s), g[1] + rng.random_range(-s..s), g[2]]
            })
            .collect();
        let fm = flow_metrics(&pred, &gt).map_err(|e| e.to_string())?;
        if [fm.epe3d, fm.acc3ds, fm.acc3dr, fm.out3d] != brute_flow(&pred, &gt) {
            bad.push(format!("flow metrics {seed}"));
        }
        let lg: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let lp: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let mm = mask_metrics(&lp, &lg).map_err(|e| e.to_string())?;
        let tp = lp.iter().zip(&lg).filter(|&(&a, &b)| a && b).count();
        let pp = lp.iter().filter(|&&a| a).count();
        let gp = lg.iter().filter(|&&b| b).count();
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        if (mm.prec_fg, mm.rec_fg) != (ratio(tp, pp), ratio(tp, gp)) {
            bad.push(format!("mask metrics {seed}"));
        }
    }
    check(bad.is_empty(), format!("100 instances each of knn, fps, flow and mask metrics; mismatches {bad:?}"))
}

fn encoder_grad(stop: bool) -> Result<f64, String> {
    let err = |e: egflow_core::Error| e.to_string();
    let pair = generate_set(&SceneConfig::desk(), 256, 1, 1).map_err(err)?.remove(0);
    let pyr = build_pyramid(&PointCloud::new(pair.p.clone()).map_err(err)?).map_err(err)?;
    let mut store = egflow_autodiff::ParamStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng), &[8, 8, 8, 8], true).map_err(err)?;
    let mut t = Tape::new(Precision::F64, Mode::Train);
    let lv = level_vars(&mut t, &pyr).map_err(err)?;
    let ff = bb.forward(&mut t, &store, &lv, &pyr).map_err(err)?;
    let mask = SegMask::from_labels(&pair.labels_p, &pyr);
    let hf = hybrid_features(&mut t, &ff.enc, ff.ctx.as_ref().expect("context encoder"), &mask, stop).map_err(err)?;
    let mut total: Option<Var> = None;
    for h in hf {
        let sq = t.mul(h, h).map_err(|e| e.to_string())?;
        let s = t.sum(sq);
        total = Some(match total {
            Some(a) => t.add(a, s).map_err(|e| e.to_string())?,
            None => s,
        });
    }
    let grads = t.backward(total.expect("four scales")).map_err(|e| e.to_string())?.params(&store);
    Ok(grads
        .iter()
        .filter(|(id, _)| store.param(**id).name.starts_with("encoder."))
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.abs())
        .sum())
}

fn stop_gradient() -> Outcome {
    let on = encoder_grad(true)?;
    let off = encoder_grad(false)?;
    check(on == 0.0 && off > 0.0, format!("encoder |grad| through hybrid features: on {on:e}, off {off:.3e}"))
}

fn closed_forms() -> Outcome {
    let err = |e: egflow_core::Error| e.to_string();
    let mut t = Tape::new(Precision::F64, Mode::Train);
    let z = t.constant(&[8, 1], vec![0.0; 8]).map_err(|e| e.to_string())?;
    let labels: Vec<bool> = (0..8).map(|i| i < 4).collect();
    let l = seg_loss(&mut t, z, &labels, 20.0).map_err(err)?;
    let seg = t.item(l);

    let gt = RigidTransform::about_axis(2, 5.0).with_translation([1.0, 0.5, 0.0]);
    let est = gt.with_translation([2.0, 0.5, 0.0]);
    let r: Vec<f64> = (0..9).map(|i| est.rotation[(i / 3, i % 3)]).collect();
    let rv = t.constant(&[3, 3], r).map_err(|e| e.to_string())?;
    let tv = t.constant(&[3], est.translation.iter().copied().collect()).map_err(|e| e.to_string())?;
    let l = ego_loss(&mut t, &[(rv, tv)], &gt, 1.8).map_err(err)?;
    let ego = t.item(l);

    let w = t.constant(&[1, 3], vec![0.0; 3]).map_err(|e| e.to_string())?;
    let l = chamfer_masked(&mut t, w, &[[0.1, 0.0, 0.0]], &[1.0], &[1.0]).map_err(err)?;
    let cd = t.item(l);

    let f = t.constant(&[2, 3], vec![0.0, 0.0, 0.0, 0.3, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let l = smoothness_masked(&mut t, f, &[[0.0; 3], [1.0, 0.0, 0.0]], &[1.0, 1.0], 1).map_err(err)?;
    let sm = t.item(l);

    let want_seg = 10.5 * std::f64::consts::LN_2;
    check(
        (seg - want_seg).abs() <= 1e-9 && (ego - 1.0).abs() <= 1e-12 && (cd - 0.2).abs() <= 1e-12 && (sm - 0.6).abs() <= 1e-12,
        format!("seg {seg:.12} (want {want_seg:.12}), ego {ego:.15}, chamfer {cd:.15}, smoothness {sm:.15}"),
    )
}

fn desk_config(seed: u64) -> Config {
    let mut cfg = Config::profile(Profile::Desk);
    cfg.seed = seed;
    cfg
}

fn overfit(work: &Path) -> Outcome {
    let start = Instant::now();
    let mut cfg = desk_config(42);
    cfg.train.max_steps = 1000;
    cfg.train.epochs = 1000usize.div_ceil(16);
    cfg.train.augment = false;
    let scene = SceneConfig {
        movers: 2,
        noise: 0.01,
        ..cfg.scene.clone()
    };
    let pairs = generate_set(&scene, 1024, 16, derive_seed(42, 100, 0)).map_err(|e| e.to_string())?;
    let mut tr = Trainer::new(&cfg).map_err(|e| e.to_string())?;
    tr.run(&pairs, None, &work.join("overfit"), |_| {}).map_err(|e| e.to_string())?;
    let named: Vec<(String, ScenePair)> = pairs.iter().cloned().enumerate().map(|(i, p)| (format!("{i}"), p)).collect();
    let agg = aggregate(&evaluate(&tr.model, &tr.store, &named, false).map_err(|e| e.to_string())?, true);
    let zero = zero_flow_epe(&pairs);
    let elapsed = start.elapsed();
    let ratio = agg.epe3d / zero;
    let parts = [
        (ratio < 0.25, format!("EPE3D {:.4} = {:.1}% of zero-flow {zero:.4}", agg.epe3d, 100.0 * ratio)),
        (agg.rec_fg > 0.85, format!("FG recall {:.3}", agg.rec_fg)),
        (agg.rae_deg < 1.0, format!("RAE {:.3} deg", agg.rae_deg)),
        (agg.rte < 0.05, format!("RTE {:.3} m", agg.rte)),
        (elapsed < Duration::from_secs(15 * 60), format!("{} steps in {:.0}s", tr.step, elapsed.as_secs_f64())),
    ];
    let detail = parts
        .iter()
        .map(|(ok, s)| format!("{s} [{}]", if *ok { "ok" } else { "miss" }))
        .collect::<Vec<_>>()
        .join(", ");
    check(parts.iter().all(|p| p.0) && tr.step <= 1000, detail)
}

fn ablation(work: &Path) -> Outcome {
    let mut cfg = desk_config(42);
    cfg.train.max_steps = 400;
    cfg.train.epochs = 400usize.div_ceil(32);
    cfg.train.augment = false;
    let train = generate_set(&cfg.scene, 1024, 32, derive_seed(42, 100, 0)).map_err(|e| e.to_string())?;
    let test: Vec<(String, ScenePair)> = generate_set(&cfg.scene, 1024, 32, derive_seed(42, 101, 0))
        .map_err(|e| e.to_string())?
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("{i}"), p))
        .collect();
    let rows = ablate(&cfg, &[1, 2, 3], &train, &test, &work.join("ablation"), |_| {}).map_err(|e| e.to_string())?;
    let (r1, r2, r3) = (&rows[0], &rows[1], &rows[2]);
    check(
        r2.epe3d_bg < r1.epe3d_bg && r3.epe3d < r2.epe3d,
        format!(
            "EPE3D_bg row1 {:.4} -> row2 {:.4}; EPE3D row2 {:.4} -> row3 {:.4}",
            r1.epe3d_bg, r2.epe3d_bg, r2.epe3d, r3.epe3d
        ),
    )
}

fn egflow(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_egflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("egflow {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn determinism(work: &Path) -> Outcome {
    let dir = work.join("determinism");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let ini = "seed = 7\n[data]\npoints = 256\ntrain = data/train.txt\n[train]\nepochs = 2\n[model]\nchannels = 8, 8, 16, 16\n";
    fs::write(dir.join("det.ini"), ini).map_err(|e| e.to_string())?;
    let read = |p: &str| fs::read(dir.join(p)).map_err(|e| e.to_string());

    egflow(&dir, &["gen-data", "--config", "det.ini", "--out", "data", "--count", "4", "--val-count", "0"])?;
    let first = read("data/train/pair_00003.egpr")?;
    egflow(&dir, &["gen-data", "--config", "det.ini", "--out", "data", "--count", "4", "--val-count", "0"])?;
    let same_data = first == read("data/train/pair_00003.egpr")?;

    egflow(&dir, &["train", "--config", "det.ini", "--out", "a"])?;
    egflow(&dir, &["train", "--config", "det.ini", "--out", "b"])?;
    let ca = read("a/checkpoint.egfk")?;
    let same_ckpt = ca == read("b/checkpoint.egfk")?;

    let pair = load_pair(&dir.join("data/train/pair_00000.egpr")).map_err(|e| e.to_string())?;
    let mut same_ops = true;
    for i in 0..2 {
        let sub = subsample_shuffle(&pair, 200, 5).map_err(|e| e.to_string())?;
        save_pair(&dir.join(format!("sub{i}.egpr")), &sub).map_err(|e| e.to_string())?;
        save_pair(&dir.join(format!("aug{i}.egpr")), &augment_rotation(&sub, 6)).map_err(|e| e.to_string())?;
    }
    for f in ["sub", "aug"] {
        same_ops &= read(&format!("{f}0.egpr"))? == read(&format!("{f}1.egpr"))?;
    }
    check(
        same_data && same_ckpt && same_ops,
        format!(
            "gen-data identical {same_data}, train checkpoints identical {same_ckpt} ({} bytes), subsample/augment identical {same_ops}",
            ca.len()
        ),
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Box::new(gradients)),
        ("kabsch recovery and mask equivalence", Box::new(kabsch)),
        ("knn/fps/metrics vs brute force", Box::new(brute_force)),
        ("stop-gradient isolation", Box::new(stop_gradient)),
        ("loss closed forms", Box::new(closed_forms)),
        ("desk overfit, seed 42", Box::new(move || overfit(w))),
        ("ablation: mask-in-ego and hybrid warp", Box::new(move || ablation(w))),
        ("determinism", Box::new(move || determinism(w))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {name}: {detail} ({:.1}s)", i + 1, start.elapsed().as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
