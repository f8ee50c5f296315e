//! Per-scale flow modules: cost volume, hybrid warping, ego-motion head,
//! flow-feature update, dual-attention refinement and flow predictor.

use std::rc::Rc;

use egflow_autodiff::{ParamStore, Reduce, Tape, TensorError, Var};

use crate::backbone::rc_indices;
use crate::error::{Error, Result};
use crate::geometry::{knn, IndexTable, DEGENERACY_TOL};
use crate::nn::{Builder, Dense, Linear, Mlp};
use crate::pyramid::{NEIGHBORS, SCALES};

/// `[l, C]` → `[l, k, C]` with every neighbor slot holding the row itself.
pub fn expand_rows(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let l = tape.shape(x)[0];
    let idx: Rc<[usize]> = (0..l).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    Ok(tape.gather_neighbors(x, idx, l, k)?)
}

/// Where cost-volume correspondences are searched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    FeatureSpace,
    Euclidean,
}

pub struct CostVolumeOut {
    /// Weighted sum of (geometric ⊕ feature) differences, `l×(3+C)`.
    pub feat: Var,
    /// Softmax weights over the neighbors, `l×K`.
    pub weights: Var,
    pub neighbors: IndexTable,
    /// Soft corresponding points in the target cloud, `l×3`.
    pub corr: Var,
}

const SCORE_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct CostVolume {
    pub score: Mlp,
}

impl CostVolume {
    pub fn new(bld: &mut Builder, c: usize, hidden: usize) -> Result<Self> {
        let score = bld.scope("score", |b| Mlp::new(b, &[3 + c, hidden, hidden], true))?;
        // near-uniform attention at initialization
        if let Some(head) = &score.head {
            for id in [Some(head.w), head.b].into_iter().flatten() {
                bld.store.param_mut(id).data.iter_mut().for_each(|v| *v *= SCORE_INIT_SCALE);
            }
        }
        Ok(Self { score })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: Var,
        target: Var,
        hf_src: Var,
        hf_target: Var,
        search: Search,
        scale: usize,
    ) -> Result<CostVolumeOut> {
        if search == Search::FeatureSpace && scale != SCALES - 1 {
            return Err(Error::SearchMode { scale });
        }
        let l = tape.shape(src)[0];
        let m = tape.shape(target)[0];
        let k = NEIGHBORS.min(m);
        let neighbors = match search {
            Search::FeatureSpace => {
                let c = tape.shape(hf_src)[1];
                knn(tape.data(hf_src), tape.data(hf_target), c, k)?
            }
            Search::Euclidean => knn(tape.data(src), tape.data(target), 3, k)?,
        };
        let idx = rc_indices(&neighbors);
        let q = tape.gather_neighbors(target, idx.clone(), l, k)?;
        let p = expand_rows(tape, src, k)?;
        let geo = tape.sub(q, p)?;
        let hq = tape.gather_neighbors(hf_target, idx, l, k)?;
        let hp = expand_rows(tape, hf_src, k)?;
        let fd = tape.sub(hq, hp)?;
        let x = tape.concat(&[geo, fd])?;
        let s = self.score.forward(tape, store, x)?;
        let s = tape.max_last_axis(s);
        let weights = tape.softmax(s)?;
        let feat = tape.reduce_neighbors(x, Reduce::WeightedSum, Some(weights))?;
        let corr = tape.reduce_neighbors(q, Reduce::WeightedSum, Some(weights))?;
        Ok(CostVolumeOut {
            feat,
            weights,
            neighbors,
            corr,
        })
    }
}

/// `p·Rᵀ + t` for row points `p`.
pub fn transform_points(tape: &mut Tape, r: Var, t: Var, p: Var) -> Result<Var> {
    let rt = tape.transpose(r)?;
    let rp = tape.matmul(p, rt)?;
    Ok(tape.add_row(rp, t)?)
}

/// Foreground rows move by their flow, background rows by the rigid
/// transform `(r, t)`.
pub fn hybrid_warp(tape: &mut Tape, p: Var, flow: Var, r: Var, t: Var, fg: &[f64]) -> Result<Var> {
    let n = fg.len();
    let moved = tape.add(p, flow)?;
    let rigid = transform_points(tape, r, t, p)?;
    let mfg = tape.constant(&[n], fg.to_vec())?;
    let mbg = tape.constant(&[n], fg.iter().map(|v| 1.0 - v).collect())?;
    let a = tape.mul_col(moved, mfg)?;
    let b = tape.mul_col(rigid, mbg)?;
    Ok(tape.add(a, b)?)
}

/// Final flow: predicted flow on foreground rows, rigid ego flow elsewhere.
pub fn merge_final_flow(tape: &mut Tape, flow: Var, r: Var, t: Var, p: Var, fg: &[f64]) -> Result<Var> {
    let n = fg.len();
    let rigid = transform_points(tape, r, t, p)?;
    let ego = tape.sub(rigid, p)?;
    let mfg = tape.constant(&[n], fg.to_vec())?;
    let mbg = tape.constant(&[n], fg.iter().map(|v| 1.0 - v).collect())?;
    let a = tape.mul_col(flow, mfg)?;
    let b = tape.mul_col(ego, mbg)?;
    Ok(tape.add(a, b)?)
}

/// Differentiable weighted Kabsch: `(R, t)` aligning `src` onto `dst`.
///
/// A positive `prior` solves as if every source point also matched itself
/// with weight `prior·w`: the cross-covariance gains `prior·Σ w (s−s̄)(s−s̄)ᵀ`
/// and the target centroid moves toward the source one, so the transform is
/// pulled toward identity when the correspondences carry little structure.
pub fn kabsch_on_tape(tape: &mut Tape, src: Var, dst: Var, w: Var, prior: f64) -> Result<(Var, Var)> {
    let total = tape.sum(w);
    let wn = tape.div_scalar(w, total)?;
    let ws = tape.mul_col(src, wn)?;
    let sbar = tape.sum_rows(ws);
    let wd = tape.mul_col(dst, wn)?;
    let dbar = tape.sum_rows(wd);
    let neg_s = tape.scale(sbar, -1.0);
    let sc = tape.add_row(src, neg_s)?;
    let neg_d = tape.scale(dbar, -1.0);
    let dc = tape.add_row(dst, neg_d)?;
    let dcw = tape.mul_col(dc, wn)?;
    let dct = tape.transpose(dcw)?;
    let mut h = tape.matmul(dct, sc)?;
    if prior > 0.0 {
        let scw = tape.mul_col(sc, wn)?;
        let sct = tape.transpose(scw)?;
        let css = tape.matmul(sct, sc)?;
        let css = tape.scale(css, prior);
        h = tape.add(h, css)?;
    }
    let r = tape.polar_rotation(h, DEGENERACY_TOL)?;
    let scol = tape.reshape(sbar, &[3, 1])?;
    let rs = tape.matmul(r, scol)?;
    let rs = tape.reshape(rs, &[3])?;
    let dbar = if prior > 0.0 {
        let ps = tape.scale(sbar, prior);
        let mix = tape.add(dbar, ps)?;
        tape.scale(mix, 1.0 / (1.0 + prior))
    } else {
        dbar
    };
    let t = tape.sub(dbar, rs)?;
    Ok((r, t))
}

/// How the ego head arrived at its transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EgoFallback {
    None,
    /// The background mask was empty or left a degenerate support, so the
    /// confidences were used without it.
    Unmasked,
    /// Even the unmasked solve was degenerate; identity was returned.
    Identity,
}

pub struct EgoOut {
    pub rotation: Var,
    pub translation: Var,
    pub confidence: Var,
    pub fallback: EgoFallback,
}

#[derive(Clone, Debug)]
pub struct EgoHead {
    pub conf: Mlp,
}

impl EgoHead {
    pub fn new(bld: &mut Builder, c: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conf: bld.scope("conf", |b| Mlp::new(b, &[3 + c, hidden, 1], true))?,
        })
    }

    /// `bg` multiplies the confidences when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cv: &CostVolumeOut,
        src: Var,
        bg: Option<&[f64]>,
        prior: f64,
    ) -> Result<EgoOut> {
        let l = tape.shape(src)[0];
        let c = self.conf.forward(tape, store, cv.feat)?;
        let c = tape.reshape(c, &[l])?;
        let confidence = tape.sigmoid(c)?;
        let mut fallback = EgoFallback::None;
        if let Some(bg) = bg {
            if bg.iter().any(|&v| v > 0.0) {
                let m = tape.constant(&[l], bg.to_vec())?;
                let w = tape.mul(confidence, m)?;
                match kabsch_on_tape(tape, src, cv.corr, w, prior) {
                    Ok((rotation, translation)) => {
                        return Ok(EgoOut {
                            rotation,
                            translation,
                            confidence,
                            fallback,
                        })
                    }
                    Err(Error::Tensor(TensorError::Degenerate { .. })) => {}
                    Err(e) => return Err(e),
                }
            }
            fallback = EgoFallback::Unmasked;
        }
        match kabsch_on_tape(tape, src, cv.corr, confidence, prior) {
            Ok((rotation, translation)) => Ok(EgoOut {
                rotation,
                translation,
                confidence,
                fallback,
            }),
            Err(Error::Tensor(TensorError::Degenerate { .. })) => Ok(EgoOut {
                rotation: tape.constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?,
                translation: tape.zeros(&[3]),
                confidence,
                fallback: EgoFallback::Identity,
            }),
            Err(e) => Err(e),
        }
    }
}

/// Graph-style update: each row takes the channel-wise max of a shared
/// dense layer over its nearest rows in feature space.
#[derive(Clone, Debug)]
pub struct FeatureUpdate {
    pub mlp: Dense,
}

impl FeatureUpdate {
    pub fn new(bld: &mut Builder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            mlp: bld.scope("mlp", |b| Dense::new(b, cin, cout))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let (l, c) = (tape.shape(f)[0], tape.shape(f)[1]);
        let k = NEIGHBORS.min(l);
        let table = knn(tape.data(f), tape.data(f), c, k)?;
        // the dense layer is pointwise, so it is applied once per row before grouping
        let h = self.mlp.forward(tape, store, f)?;
        let g = tape.gather_neighbors(h, rc_indices(&table), l, k)?;
        Ok(tape.reduce_neighbors(g, Reduce::Max, None)?)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub score1: Linear,
    pub score2: Linear,
    pub out: Dense,
}

/// Embeds the concatenated refinement input and, when attention is on,
/// runs two softmax-weighted passes over the Euclidean neighborhood: the
/// first scores neighbors against the center feature, the second against
/// the first pass's aggregate.
#[derive(Clone, Debug)]
pub struct Refine {
    pub embed: Dense,
    pub attention: Option<Attention>,
}

impl Refine {
    pub fn new(bld: &mut Builder, cin: usize, width: usize, attention: bool) -> Result<Self> {
        let embed = bld.scope("embed", |b| Dense::new(b, cin, width))?;
        let attention = if attention {
            Some(Attention {
                score1: bld.scope("score1", |b| Linear::new(b, width, 1, false))?,
                score2: bld.scope("score2", |b| Linear::new(b, width, 1, false))?,
                out: bld.scope("out", |b| Dense::new(b, 2 * width, width))?,
            })
        } else {
            None
        };
        Ok(Self { embed, attention })
    }

    fn pass(tape: &mut Tape, store: &ParamStore, score: &Linear, nb: Var, center: Var) -> Result<Var> {
        let s = tape.shape(nb).to_vec();
        let (l, k) = (s[0], s[1]);
        let c = expand_rows(tape, center, k)?;
        let d = tape.sub(nb, c)?;
        let sc = score.forward(tape, store, d)?;
        let sc = tape.reshape(sc, &[l, k])?;
        let a = tape.softmax(sc)?;
        Ok(tape.reduce_neighbors(nb, Reduce::WeightedSum, Some(a))?)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, nbr: Rc<[usize]>, k: usize) -> Result<Var> {
        let h = self.embed.forward(tape, store, x)?;
        let Some(att) = &self.attention else { return Ok(h) };
        let l = tape.shape(h)[0];
        let nb = tape.gather_neighbors(h, nbr, l, k)?;
        let g = Self::pass(tape, store, &att.score1, nb, h)?;
        let o = Self::pass(tape, store, &att.score2, nb, g)?;
        let cat = tape.concat(&[o, h])?;
        att.out.forward(tape, store, cat)
    }
}

/// Per-scale flow-engine parameters.
#[derive(Clone, Debug)]
pub struct ScaleHead {
    pub cost: CostVolume,
    pub ego: EgoHead,
    pub update: Option<FeatureUpdate>,
    pub refine: Refine,
    pub predictor: Mlp,
}

impl ScaleHead {
    pub fn new(bld: &mut Builder, c: usize, cfg: &crate::config::ModelConfig) -> Result<Self> {
        let fc = cfg.flow_channels;
        let cost = bld.scope("cost", |b| CostVolume::new(b, c, cfg.cost_hidden))?;
        let ego = bld.scope("ego", |b| EgoHead::new(b, c, cfg.ego_hidden))?;
        let update = if cfg.toggles.feature_update {
            Some(bld.scope("update", |b| FeatureUpdate::new(b, 3 + c, fc))?)
        } else {
            None
        };
        let upd_width = if update.is_some() { fc } else { 3 + c };
        let refine = bld.scope("refine", |b| Refine::new(b, upd_width + c + fc + 3, fc, cfg.toggles.attention_refine))?;
        let predictor = bld.scope("predictor", |b| Mlp::new(b, &[fc, 64, 32, 3], true))?;
        Ok(Self {
            cost,
            ego,
            update,
            refine,
            predictor,
        })
    }
}
