//! Run configuration: an INI-style `key = value` file with sections, layered
//! over a named profile.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::data::SceneConfig;
use crate::error::{Error, Result};

/// Independently switchable pipeline components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub mask_in_ego: bool,
    pub hybrid_warp: bool,
    pub feature_update: bool,
    pub attention_refine: bool,
    pub hybrid_features: bool,
    pub stop_gradient: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            mask_in_ego: true,
            hybrid_warp: true,
            feature_update: true,
            attention_refine: true,
            hybrid_features: true,
            stop_gradient: true,
        }
    }
}

impl Toggles {
    pub fn none() -> Self {
        Self {
            mask_in_ego: false,
            hybrid_warp: false,
            feature_update: false,
            attention_refine: false,
            hybrid_features: false,
            stop_gradient: false,
        }
    }

    /// The seven cumulative component rows of the ablation table: each row
    /// enables one more component than the previous one, except that the
    /// second-to-last row has hybrid features without the stop-gradient.
    pub fn ablation_rows() -> Vec<(&'static str, Toggles)> {
        let r1 = Toggles::none();
        let r2 = Toggles { mask_in_ego: true, ..r1 };
        let r3 = Toggles { hybrid_warp: true, ..r2 };
        let r4 = Toggles { feature_update: true, ..r3 };
        let r5 = Toggles { attention_refine: true, ..r4 };
        let r6 = Toggles { hybrid_features: true, ..r5 };
        let r7 = Toggles { stop_gradient: true, ..r6 };
        vec![
            ("baseline", r1),
            ("+mask_in_ego", r2),
            ("+hybrid_warp", r3),
            ("+feature_update", r4),
            ("+attention_refine", r5),
            ("+hybrid_features", r6),
            ("+stop_gradient", r7),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature widths C0..C3.
    pub channels: [usize; 4],
    pub flow_channels: usize,
    pub cost_hidden: usize,
    pub ego_hidden: usize,
    /// Identity pull on the coarsest rigid solve.
    pub ego_prior: f64,
    pub toggles: Toggles,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            channels: [32, 128, 256, 512],
            flow_channels: 64,
            cost_hidden: 64,
            ego_hidden: 64,
            ego_prior: 0.5,
            toggles: Toggles::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            cost_hidden: 32,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta: f64,
    pub alpha: [f64; 4],
    pub smooth_k: [usize; 4],
    /// When false the flow losses are applied to every point.
    pub masked_flow: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 20.0,
            beta: 1.8,
            alpha: [0.02, 0.04, 0.08, 0.16],
            smooth_k: [16, 12, 8, 4],
            masked_flow: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_epochs: usize,
    pub augment: bool,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 150,
            max_steps: 0,
            lr: 0.001,
            decay_rate: 0.7,
            decay_epochs: 10,
            augment: true,
            checkpoint_every: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 30,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub points: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub out_dir: PathBuf,
}

impl Config {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                profile,
                seed: 0,
                model: ModelConfig::paper(),
                loss: LossConfig::default(),
                train: TrainConfig::paper(),
                data: DataConfig {
                    train: None,
                    val: None,
                    points: 8192,
                    train_pairs: 1024,
                    val_pairs: 128,
                },
                scene: SceneConfig::paper(),
                out_dir: PathBuf::from("runs"),
            },
            Profile::Desk => Self {
                profile,
                seed: 0,
                model: ModelConfig::desk(),
                loss: LossConfig::default(),
                train: TrainConfig::desk(),
                data: DataConfig {
                    train: None,
                    val: None,
                    points: 1024,
                    train_pairs: 64,
                    val_pairs: 16,
                },
                scene: SceneConfig::desk(),
                out_dir: PathBuf::from("runs"),
            },
        }
    }

    /// Reads `path` over the profile defaults. Relative dataset paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, profile, base)
    }

    pub fn parse(text: &str, profile: Option<Profile>, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let file_profile = ini
            .section(None::<String>)
            .and_then(|s| s.get("profile"))
            .map(str::parse::<Profile>)
            .transpose()?;
        let mut cfg = Config::profile(profile.or(file_profile).unwrap_or(Profile::Desk));
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                cfg.set(section.unwrap_or(""), key, value, base)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, base: &Path) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key [{section}] {key}"));
        match section {
            "" => match key {
                "profile" => {}
                "seed" => self.seed = parse(key, v)?,
                "out_dir" => self.out_dir = base.join(v),
                _ => return Err(unknown()),
            },
            "model" => {
                let m = &mut self.model;
                let t = &mut m.toggles;
                match key {
                    "channels" => m.channels = parse_array(key, v)?,
                    "flow_channels" => m.flow_channels = parse(key, v)?,
                    "cost_hidden" => m.cost_hidden = parse(key, v)?,
                    "ego_prior" => m.ego_prior = parse(key, v)?,
                    "ego_hidden" => m.ego_hidden = parse(key, v)?,
                    "mask_in_ego" => t.mask_in_ego = parse(key, v)?,
                    "hybrid_warp" => t.hybrid_warp = parse(key, v)?,
                    "feature_update" => t.feature_update = parse(key, v)?,
                    "attention_refine" => t.attention_refine = parse(key, v)?,
                    "hybrid_features" => t.hybrid_features = parse(key, v)?,
                    "stop_gradient" => t.stop_gradient = parse(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "loss" => {
                let l = &mut self.loss;
                match key {
                    "gamma" => l.gamma = parse(key, v)?,
                    "beta" => l.beta = parse(key, v)?,
                    "alpha" => l.alpha = parse_array(key, v)?,
                    "smooth_k" => l.smooth_k = parse_array(key, v)?,
                    "masked_flow" => l.masked_flow = parse(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "epochs" => t.epochs = parse(key, v)?,
                    "max_steps" => t.max_steps = parse(key, v)?,
                    "lr" => t.lr = parse(key, v)?,
                    "decay_rate" => t.decay_rate = parse(key, v)?,
                    "decay_epochs" => t.decay_epochs = parse(key, v)?,
                    "augment" => t.augment = parse(key, v)?,
                    "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "train" => d.train = Some(base.join(v)),
                    "val" => d.val = Some(base.join(v)),
                    "points" => d.points = parse(key, v)?,
                    "train_pairs" => d.train_pairs = parse(key, v)?,
                    "val_pairs" => d.val_pairs = parse(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "scene" => self.scene.set(key, v)?,
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.model.channels.contains(&0) || self.model.flow_channels == 0 || self.model.cost_hidden == 0 {
            return bad("channel widths must be positive");
        }
        if !(self.model.ego_prior >= 0.0 && self.model.ego_prior.is_finite()) {
            return bad("ego_prior must be a finite non-negative number");
        }
        let l = &self.loss;
        if !(l.gamma > 0.0 && l.beta > 0.0 && l.alpha.iter().all(|&a| a > 0.0)) || l.smooth_k.contains(&0) {
            return bad("loss weights and neighborhood sizes must be positive");
        }
        let t = &self.train;
        if t.lr.is_nan() || t.lr <= 0.0 || !(0.0..=1.0).contains(&t.decay_rate) || t.decay_rate == 0.0 || t.decay_epochs == 0 {
            return bad("learning-rate schedule must be positive with decay rate in (0, 1]");
        }
        if self.data.points < crate::pyramid::MIN_INPUT {
            return bad("data.points must be at least 64");
        }
        self.scene.validate()
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

pub(crate) fn parse_array<T: FromStr + Copy + Default, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if parts.len() != N {
        return Err(Error::Config(format!("{key} needs {N} comma-separated values, got {v:?}")));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(key, p)?;
    }
    Ok(out)
}
