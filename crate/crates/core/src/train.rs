//! Training, evaluation and ablation drivers.

use std::fs::File;
use std::path::{Path, PathBuf};

use egflow_autodiff::checkpoint::{self, Entry};
use egflow_autodiff::{decayed_lr, Adam, Mode, ParamStore, Precision, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::SegMask;
use crate::config::{Config, Toggles};
use crate::data::{augment_rotation, derive_seed, load_pair, read_manifest, ScenePair};
use crate::error::{Error, Result};
use crate::flow::EgoFallback;
use crate::geometry::{Point, PointCloud, RigidTransform};
use crate::losses::{total_loss, LossTerms, Target};
use crate::metrics::{aggregate, ReportRow, SceneEval};
use crate::model::{transform_of, Model};
use crate::pyramid::{build_pyramid, Pyramid};

const EPOCH_KEY: &str = "trainer#epoch";
const STEP_KEY: &str = "trainer#step";

/// A pair with both pyramids built.
pub struct Prepared {
    pub pair: ScenePair,
    pub p: Pyramid,
    pub q: Pyramid,
}

impl Prepared {
    pub fn new(pair: ScenePair) -> Result<Self> {
        let p = build_pyramid(&PointCloud::new(pair.p.clone())?)?;
        let q = build_pyramid(&PointCloud::new(pair.q.clone())?)?;
        Ok(Self { pair, p, q })
    }
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<(String, ScenePair)>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|path| {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_pair(&path)?))
        })
        .collect()
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_ego: f64,
    pub loss_flow: f64,
    pub loss_cd0: f64,
    pub loss_cd1: f64,
    pub loss_cd2: f64,
    pub loss_cd3: f64,
    pub loss_sm0: f64,
    pub loss_sm1: f64,
    pub loss_sm2: f64,
    pub loss_sm3: f64,
    pub ego_fallbacks: usize,
    pub val_epe3d: Option<f64>,
    pub val_epe3d_fg: Option<f64>,
    pub val_epe3d_bg: Option<f64>,
    pub val_acc3ds: Option<f64>,
    pub val_acc3dr: Option<f64>,
    pub val_out3d: Option<f64>,
    pub val_rae_deg: Option<f64>,
    pub val_rte: Option<f64>,
    pub val_rec_fg: Option<f64>,
    pub val_prec_fg: Option<f64>,
}

impl EpochRecord {
    fn add_terms(&mut self, t: &LossTerms, alpha: &[f64; 4]) {
        self.loss_total += t.total;
        self.loss_seg += t.seg;
        self.loss_ego += t.ego;
        self.loss_flow += t.flow(alpha);
        for (dst, v) in [&mut self.loss_cd0, &mut self.loss_cd1, &mut self.loss_cd2, &mut self.loss_cd3]
            .into_iter()
            .zip(t.chamfer)
        {
            *dst += v;
        }
        for (dst, v) in [&mut self.loss_sm0, &mut self.loss_sm1, &mut self.loss_sm2, &mut self.loss_sm3]
            .into_iter()
            .zip(t.smooth)
        {
            *dst += v;
        }
    }

    fn scale(&mut self, s: f64) {
        for v in [
            &mut self.loss_total,
            &mut self.loss_seg,
            &mut self.loss_ego,
            &mut self.loss_flow,
            &mut self.loss_cd0,
            &mut self.loss_cd1,
            &mut self.loss_cd2,
            &mut self.loss_cd3,
            &mut self.loss_sm0,
            &mut self.loss_sm1,
            &mut self.loss_sm2,
            &mut self.loss_sm3,
        ] {
            *v *= s;
        }
    }

    fn set_val(&mut self, r: &ReportRow) {
        self.val_epe3d = Some(r.epe3d);
        self.val_epe3d_fg = Some(r.epe3d_fg);
        self.val_epe3d_bg = Some(r.epe3d_bg);
        self.val_acc3ds = Some(r.acc3ds);
        self.val_acc3dr = Some(r.acc3dr);
        self.val_out3d = Some(r.out3d);
        self.val_rae_deg = Some(r.rae_deg);
        self.val_rte = Some(r.rte);
        self.val_rec_fg = Some(r.rec_fg);
        self.val_prec_fg = Some(r.prec_fg);
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        let (model, store) = Model::init(&cfg.model, cfg.seed, Precision::F32)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            adam: Adam::default(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        let t = &self.cfg.train;
        decayed_lr(t.lr, t.decay_rate, t.decay_epochs, self.epoch)
    }

    /// One optimizer step on one pair.
    pub fn train_step(&mut self, prep: &Prepared, lr: f64) -> Result<(LossTerms, usize)> {
        let mut tape = Tape::new(Precision::F32, Mode::Train);
        let out = self.model.forward(&mut tape, &self.store, &prep.p, &prep.q, None)?;
        let target = Target {
            labels_p: &prep.pair.labels_p,
            labels_q: &prep.pair.labels_q,
            ego: &prep.pair.ego,
        };
        let (loss, terms) = total_loss(&mut tape, &out, &prep.p, &prep.q, &target, &self.cfg.loss)?;
        if !terms.total.is_finite() {
            return Err(Error::Tensor(egflow_autodiff::TensorError::NonFinite("training loss")));
        }
        let fallbacks = out.scales.iter().filter(|s| s.fallback != EgoFallback::None).count();
        let grads = tape.backward(loss)?.params(&self.store);
        self.adam.step(&mut self.store, &grads, lr);
        self.store.apply_stat_updates(tape.stat_updates());
        self.step += 1;
        Ok((terms, fallbacks))
    }

    /// Trains until `cfg.train.epochs` epochs are complete (or the step cap
    /// is hit), appending one log row per epoch and checkpointing into
    /// `out_dir`. `val` is evaluated after every epoch when present.
    pub fn run(
        &mut self,
        train: &[ScenePair],
        val: Option<&[(String, ScenePair)]>,
        out_dir: &Path,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        std::fs::create_dir_all(out_dir)?;
        let tc = self.cfg.train.clone();
        let cached: Option<Vec<Prepared>> = if tc.augment {
            None
        } else {
            Some(train.iter().cloned().map(Prepared::new).collect::<Result<_>>()?)
        };
        let val_prep: Option<Vec<(String, Prepared)>> = match val {
            Some(v) => Some(
                v.iter()
                    .map(|(n, p)| Ok((n.clone(), Prepared::new(p.clone())?)))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        let log_path = out_dir.join("train_log.csv");
        let mut records = if self.epoch > 0 && log_path.exists() {
            read_log(&log_path, self.epoch)?
        } else {
            Vec::new()
        };
        while self.epoch < tc.epochs && (tc.max_steps == 0 || self.step < tc.max_steps as u64) {
            let lr = self.lr();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 1, self.epoch as u64)));
            let mut rec = EpochRecord {
                epoch: self.epoch,
                lr,
                ..Default::default()
            };
            let mut n = 0usize;
            for &i in &order {
                if tc.max_steps > 0 && self.step >= tc.max_steps as u64 {
                    break;
                }
                let (terms, fb) = match &cached {
                    Some(c) => self.train_step(&c[i], lr)?,
                    None => {
                        let seed = derive_seed(self.cfg.seed, 2, (self.epoch * train.len() + i) as u64);
                        let prep = Prepared::new(augment_rotation(&train[i], seed))?;
                        self.train_step(&prep, lr)?
                    }
                };
                rec.add_terms(&terms, &self.cfg.loss.alpha);
                rec.ego_fallbacks += fb;
                n += 1;
            }
            rec.scale(1.0 / n.max(1) as f64);
            rec.steps = self.step;
            self.epoch += 1;
            if let Some(v) = &val_prep {
                let scenes = evaluate_prepared(&self.model, &self.store, v, false)?;
                rec.set_val(&aggregate(&scenes, true));
            }
            on_epoch(&rec);
            records.push(rec);
            write_log(&log_path, &records)?;
            if self.epoch.is_multiple_of(tc.checkpoint_every.max(1)) || self.epoch == tc.epochs {
                self.save(&out_dir.join("checkpoint.egfk"))?;
            }
        }
        self.save(&out_dir.join("checkpoint.egfk"))?;
        Ok(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.to_entries(true);
        entries.push(Entry {
            name: EPOCH_KEY.into(),
            dims: vec![1],
            data: vec![self.epoch as f32],
        });
        entries.push(Entry {
            name: STEP_KEY.into(),
            dims: vec![1],
            data: vec![self.step as f32],
        });
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    /// Restores parameters, optimizer state and progress counters.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let extra = self.store.load_entries(&checkpoint::load(path)?)?;
        for e in extra {
            match e.name.as_str() {
                EPOCH_KEY => self.epoch = e.data[0] as usize,
                STEP_KEY => self.step = e.data[0] as u64,
                _ => {}
            }
        }
        Ok(())
    }
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps the first `epochs` rows of an existing log, as raw records.
fn read_log(path: &Path, epochs: usize) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for row in rdr.records().take(epochs) {
        let row = row?;
        let get = |k: &str| -> Option<f64> {
            headers
                .iter()
                .position(|h| h == k)
                .and_then(|i| row.get(i))
                .and_then(|s| s.parse().ok())
        };
        let num = |k: &str| get(k).unwrap_or(0.0);
        out.push(EpochRecord {
            epoch: num("epoch") as usize,
            lr: num("lr"),
            steps: num("steps") as u64,
            loss_total: num("loss_total"),
            loss_seg: num("loss_seg"),
            loss_ego: num("loss_ego"),
            loss_flow: num("loss_flow"),
            loss_cd0: num("loss_cd0"),
            loss_cd1: num("loss_cd1"),
            loss_cd2: num("loss_cd2"),
            loss_cd3: num("loss_cd3"),
            loss_sm0: num("loss_sm0"),
            loss_sm1: num("loss_sm1"),
            loss_sm2: num("loss_sm2"),
            loss_sm3: num("loss_sm3"),
            ego_fallbacks: num("ego_fallbacks") as usize,
            val_epe3d: get("val_epe3d"),
            val_epe3d_fg: get("val_epe3d_fg"),
            val_epe3d_bg: get("val_epe3d_bg"),
            val_acc3ds: get("val_acc3ds"),
            val_acc3dr: get("val_acc3dr"),
            val_out3d: get("val_out3d"),
            val_rae_deg: get("val_rae_deg"),
            val_rte: get("val_rte"),
            val_rec_fg: get("val_rec_fg"),
            val_prec_fg: get("val_prec_fg"),
        });
    }
    Ok(out)
}

/// Network output for one pair, as plain values.
pub struct Prediction {
    pub flow: Vec<Point>,
    pub fg_prob: Vec<f64>,
    pub fg: Vec<bool>,
    pub ego: RigidTransform,
    pub fallback: bool,
}

pub fn predict(model: &Model, store: &ParamStore, prep: &Prepared) -> Result<Prediction> {
    let mut tape = Tape::new(store.precision(), Mode::Eval);
    let out = model.forward(&mut tape, store, &prep.p, &prep.q, None)?;
    let flow = tape.data(out.final_flow).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let s0 = &out.scales[0];
    Ok(Prediction {
        flow,
        fg_prob: out.masks[0].probs.clone(),
        fg: out.masks[0].fg_bits(),
        ego: transform_of(&tape, s0.rotation, s0.translation),
        fallback: out.scales.iter().any(|s| s.fallback != EgoFallback::None),
    })
}

/// Ground truth dressed up as a prediction; evaluating it must give zero error.
pub fn oracle_prediction(pair: &ScenePair) -> Prediction {
    Prediction {
        flow: pair.flow.clone(),
        fg_prob: pair.labels_p.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        fg: pair.labels_p.clone(),
        ego: pair.ego,
        fallback: false,
    }
}

pub fn evaluate_prepared(
    model: &Model,
    store: &ParamStore,
    pairs: &[(String, Prepared)],
    oracle: bool,
) -> Result<Vec<SceneEval>> {
    pairs
        .iter()
        .map(|(name, prep)| {
            let pred = if oracle {
                oracle_prediction(&prep.pair)
            } else {
                predict(model, store, prep)?
            };
            let pair = &prep.pair;
            SceneEval::compute(name, &pred.flow, &pair.flow, &pair.labels_p, &pred.fg, &pred.ego, &pair.ego)
        })
        .collect()
}

pub fn evaluate(model: &Model, store: &ParamStore, pairs: &[(String, ScenePair)], oracle: bool) -> Result<Vec<SceneEval>> {
    let prepared = pairs
        .iter()
        .map(|(n, p)| Ok((n.clone(), Prepared::new(p.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(model, store, &prepared, oracle)
}

/// Model plus store restored from a checkpoint written by [`Trainer`].
pub fn load_model(cfg: &Config, path: &Path) -> Result<(Model, ParamStore)> {
    let mut t = Trainer::new(cfg)?;
    t.resume(path)?;
    Ok((t.model, t.store))
}

/// Zero-flow baseline over a set of pairs, pooled over points.
pub fn zero_flow_epe(pairs: &[ScenePair]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        for f in &p.flow {
            sum += (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: String,
    pub mask_in_ego: bool,
    pub hybrid_warp: bool,
    pub feature_update: bool,
    pub attention_refine: bool,
    pub hybrid_features: bool,
    pub stop_gradient: bool,
    pub epe3d: f64,
    pub epe3d_fg: f64,
    pub epe3d_bg: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub out3d: f64,
    pub rae_deg: f64,
    pub rte: f64,
}

/// Trains one model per selected component row on `train` and evaluates
/// each on `test`. Rows are 1-based indices into [`Toggles::ablation_rows`].
pub fn ablate(
    cfg: &Config,
    rows: &[usize],
    train: &[ScenePair],
    test: &[(String, ScenePair)],
    out_dir: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let table = Toggles::ablation_rows();
    let test_prep = test
        .iter()
        .map(|(n, p)| Ok((n.clone(), Prepared::new(p.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &r in rows {
        let (name, toggles) = *table
            .get(r.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("ablation row {r} out of 1..={}", table.len())))?;
        let mut c = cfg.clone();
        c.model.toggles = toggles;
        let dir: PathBuf = out_dir.join(format!("row{r}"));
        let mut trainer = Trainer::new(&c)?;
        trainer.run(train, None, &dir, |_| {})?;
        let scenes = evaluate_prepared(&trainer.model, &trainer.store, &test_prep, false)?;
        let agg = aggregate(&scenes, true);
        let row = AblationRow {
            row: r,
            name: name.to_string(),
            mask_in_ego: toggles.mask_in_ego,
            hybrid_warp: toggles.hybrid_warp,
            feature_update: toggles.feature_update,
            attention_refine: toggles.attention_refine,
            hybrid_features: toggles.hybrid_features,
            stop_gradient: toggles.stop_gradient,
            epe3d: agg.epe3d,
            epe3d_fg: agg.epe3d_fg,
            epe3d_bg: agg.epe3d_bg,
            acc3ds: agg.acc3ds,
            acc3dr: agg.acc3dr,
            out3d: agg.out3d,
            rae_deg: agg.rae_deg,
            rte: agg.rte,
        };
        progress(&row);
        out.push(row);
    }
    let mut w = csv::Writer::from_writer(File::create(out_dir.join("ablation.csv"))?);
    for r in &out {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(out)
}

/// Replaces predicted masks by labels; used by oracle-mask experiments.
pub fn label_masks(prep: &Prepared) -> [SegMask; 2] {
    [
        SegMask::from_labels(&prep.pair.labels_p, &prep.p),
        SegMask::from_labels(&prep.pair.labels_q, &prep.q),
    ]
}
