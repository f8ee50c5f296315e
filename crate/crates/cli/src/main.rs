use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use egflow_core::data::{derive_seed, export_error_map, generate_set, load_pair, save_pair, write_manifest};
use egflow_core::metrics::{write_report, SceneEval};
use egflow_core::train::{ablate, evaluate, load_dataset, load_model, oracle_prediction, predict, Prepared, Trainer};
use egflow_core::{gradsuite, Config, Error, Profile};

#[derive(Parser, Debug)]
#[command(name = "egflow", version, about = "Ego-motion guided scene flow on point clouds")]
struct Cli {
    /// Key=value config file with sections; overrides the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to resume from (train) or to load (eval, infer).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic training and validation pairs plus manifests.
    GenData {
        /// Training pairs (default: data.train_pairs).
        #[arg(long)]
        count: Option<usize>,
        /// Validation pairs (default: data.val_pairs).
        #[arg(long)]
        val_count: Option<usize>,
    },
    /// Train on the data.train manifest.
    Train,
    /// Evaluate a checkpoint on a manifest and write a metrics CSV.
    Eval {
        /// Manifest to evaluate (default: data.val, then data.train).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate ground truth as the prediction.
        #[arg(long)]
        oracle: bool,
        /// Average scene rows instead of pooling points.
        #[arg(long)]
        per_scene: bool,
    },
    /// Run one pair and export flow, masks, transform and an error map.
    Infer { pair: PathBuf },
    /// Finite-difference check of every op, module and loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Train and evaluate the component rows on data.train / data.val.
    Ablate {
        /// Comma-separated 1-based rows (default: all).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
    },
}

/// Failures that exit with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Validation(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<Validation>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<Error>(),
        Some(
            Error::Config(_)
                | Error::Dataset(_)
                | Error::Format { .. }
                | Error::TooFew { .. }
                | Error::LengthMismatch { .. }
                | Error::NonFinite(_)
                | Error::BadTransform(_)
        )
    )
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let profile: Option<Profile> = cli.profile.as_deref().map(str::parse).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path, profile)?,
        None => Config::profile(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { count, val_count } => gen_data(
            &cfg,
            count.unwrap_or(cfg.data.train_pairs),
            val_count.unwrap_or(cfg.data.val_pairs),
        ),
        Command::Train => train(&cfg, cli.checkpoint.as_deref()),
        Command::Eval { data, oracle, per_scene } => eval(&cfg, cli.checkpoint.as_deref(), data.as_deref(), *oracle, !per_scene),
        Command::Infer { pair } => infer(&cfg, cli.checkpoint.as_deref(), pair),
        Command::GradCheck { instances } => grad_check(*instances),
        Command::Ablate { rows } => run_ablation(&cfg, rows),
    }
}

fn write_split(cfg: &Config, name: &str, count: usize, stream: u64) -> anyhow::Result<(f64, f64)> {
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir)?;
    let pairs = generate_set(&cfg.scene, cfg.data.points, count, derive_seed(cfg.seed, stream, 0))?;
    let mut entries = Vec::with_capacity(count);
    let (mut fg, mut mag) = (0.0, 0.0);
    for (i, pair) in pairs.iter().enumerate() {
        let file = format!("{name}/pair_{i:05}.egpr");
        save_pair(&cfg.out_dir.join(&file), pair)?;
        entries.push(file);
        fg += pair.fg_fraction();
        mag += pair.mean_flow();
    }
    write_manifest(&cfg.out_dir.join(format!("{name}.txt")), &entries)?;
    let n = count.max(1) as f64;
    Ok((fg / n, mag / n))
}

fn gen_data(cfg: &Config, count: usize, val_count: usize) -> anyhow::Result<()> {
    if count == 0 {
        bail!(Validation("gen-data needs at least one training pair".into()));
    }
    let start = Instant::now();
    let (fg, mag) = write_split(cfg, "train", count, 100)?;
    println!("train: {count} pairs, {} points, fg fraction {fg:.4}, mean flow {mag:.4} m", cfg.data.points);
    if val_count > 0 {
        let (fg, mag) = write_split(cfg, "val", val_count, 101)?;
        println!("val: {val_count} pairs, fg fraction {fg:.4}, mean flow {mag:.4} m");
    }
    println!("wrote {} in {:.1}s", cfg.out_dir.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn manifest<'a>(what: &str, path: Option<&'a Path>) -> anyhow::Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!(Validation(format!("no {what} dataset configured (set [data] {what} = <manifest>)"))),
    }
}

fn train(cfg: &Config, resume: Option<&Path>) -> anyhow::Result<()> {
    let train: Vec<_> = load_dataset(manifest("train", cfg.data.train.as_deref())?)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let val = match &cfg.data.val {
        Some(v) => Some(load_dataset(v)?),
        None => None,
    };
    let mut trainer = Trainer::new(cfg)?;
    if let Some(ck) = resume {
        trainer.resume(ck).with_context(|| format!("resuming from {}", ck.display()))?;
        println!("resumed at epoch {} step {}", trainer.epoch, trainer.step);
    }
    let start = Instant::now();
    trainer.run(&train, val.as_deref(), &cfg.out_dir, |r| {
        let val = r.val_epe3d.map(|e| format!(" val_epe3d {e:.4}")).unwrap_or_default();
        println!(
            "epoch {:>3} lr {:.6} loss {:.4} (seg {:.4} ego {:.4} flow {:.4}){val} [{:.0}s]",
            r.epoch,
            r.lr,
            r.loss_total,
            r.loss_seg,
            r.loss_ego,
            r.loss_flow,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("checkpoint: {}", cfg.out_dir.join("checkpoint.egfk").display());
    Ok(())
}

fn eval(cfg: &Config, checkpoint: Option<&Path>, data: Option<&Path>, oracle: bool, pooled: bool) -> anyhow::Result<()> {
    let path = match data {
        Some(p) => p,
        None => manifest("val", cfg.data.val.as_deref().or(cfg.data.train.as_deref()))?,
    };
    let pairs = load_dataset(path)?;
    let scenes: Vec<SceneEval> = if oracle {
        pairs
            .iter()
            .map(|(name, pair)| {
                let p = oracle_prediction(pair);
                SceneEval::compute(name, &p.flow, &pair.flow, &pair.labels_p, &p.fg, &p.ego, &pair.ego)
            })
            .collect::<Result<_, _>>()?
    } else {
        let ck = checkpoint.ok_or_else(|| Validation("eval needs --checkpoint (or --oracle)".into()))?;
        let (model, store) = load_model(cfg, ck)?;
        evaluate(&model, &store, &pairs, false)?
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("eval.csv");
    let agg = write_report(File::create(&out)?, &scenes, pooled)?;
    println!(
        "{} pairs: EPE3D {:.4} (fg {:.4}, bg {:.4}) Acc3DS {:.4} Acc3DR {:.4} Out3D {:.4} RAE {:.4} deg RTE {:.4} m FG prec {:.4} rec {:.4}",
        scenes.len(),
        agg.epe3d,
        agg.epe3d_fg,
        agg.epe3d_bg,
        agg.acc3ds,
        agg.acc3dr,
        agg.out3d,
        agg.rae_deg,
        agg.rte,
        agg.prec_fg,
        agg.rec_fg
    );
    println!("report: {}", out.display());
    Ok(())
}

fn infer(cfg: &Config, checkpoint: Option<&Path>, pair_path: &Path) -> anyhow::Result<()> {
    let ck = checkpoint.ok_or_else(|| Validation("infer needs --checkpoint".into()))?;
    let (model, store) = load_model(cfg, ck)?;
    let pair = load_pair(pair_path)?;
    let prep = Prepared::new(pair)?;
    let pred = predict(&model, &store, &prep)?;
    let pair = &prep.pair;
    fs::create_dir_all(&cfg.out_dir)?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("prediction.csv"))?;
    w.write_record(["x", "y", "z", "flow_x", "flow_y", "flow_z", "fg_prob", "fg"])?;
    for i in 0..pair.p.len() {
        let mut rec: Vec<String> = pair.p[i].iter().chain(&pred.flow[i]).map(f64::to_string).collect();
        rec.push(pred.fg_prob[i].to_string());
        rec.push(u8::from(pred.fg[i]).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut t = File::create(cfg.out_dir.join("transform.txt"))?;
    for row in pred.ego.to_rows().chunks(4) {
        writeln!(t, "{} {} {} {}", row[0], row[1], row[2], row[3])?;
    }
    export_error_map(&pair.p, &pred.flow, &pair.flow, &cfg.out_dir.join("error_map.ply"))?;

    let name = pair_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let row = SceneEval::compute(&name, &pred.flow, &pair.flow, &pair.labels_p, &pred.fg, &pred.ego, &pair.ego)?.row();
    println!(
        "{name}: EPE3D {:.4} RAE {:.4} deg RTE {:.4} m FG recall {:.4}{}",
        row.epe3d,
        row.rae_deg,
        row.rte,
        row.rec_fg,
        if pred.fallback { " (ego fallback used)" } else { "" }
    );
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn grad_check(instances: usize) -> anyhow::Result<()> {
    if instances == 0 {
        bail!(Validation("--instances must be positive".into()));
    }
    let start = Instant::now();
    let mut failed = Vec::new();
    for &(name, case) in gradsuite::CASES {
        let r = gradsuite::run_case(name, case, instances)?;
        println!(
            "{} {:<26} max_err {:.2e} over {} entries, {} kinks ({:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.checked,
            r.kinks,
            r.elapsed.as_secs_f64()
        );
        if !r.passed {
            failed.push(name);
        }
    }
    println!("{} cases in {:.1}s", gradsuite::CASES.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        bail!(Validation(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn run_ablation(cfg: &Config, rows: &[usize]) -> anyhow::Result<()> {
    let train: Vec<_> = load_dataset(manifest("train", cfg.data.train.as_deref())?)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let test = load_dataset(manifest("val", cfg.data.val.as_deref())?)?;
    let rows: Vec<usize> = if rows.is_empty() {
        (1..=egflow_core::Toggles::ablation_rows().len()).collect()
    } else {
        rows.to_vec()
    };
    println!("{:<4} {:<18} {:>8} {:>8} {:>8} {:>8} {:>8}", "row", "config", "EPE3D", "EPE_fg", "EPE_bg", "RAE", "RTE");
    ablate(cfg, &rows, &train, &test, &cfg.out_dir, |r| {
        println!(
            "{:<4} {:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.row, r.name, r.epe3d, r.epe3d_fg, r.epe3d_bg, r.rae_deg, r.rte
        );
    })?;
    println!("table: {}", cfg.out_dir.join("ablation.csv").display());
    Ok(())
}
