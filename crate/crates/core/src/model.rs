//! The full two-frame network and its coarse-to-fine forward pass.

use egflow_autodiff::{ParamStore, Precision, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{hybrid_features, level_vars, Backbone, LevelVars, SegMask};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::flow::{hybrid_warp, merge_final_flow, EgoFallback, ScaleHead, Search};
use crate::nn::Builder;
use crate::pyramid::{Pyramid, SCALES};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    /// Indexed by scale, 0 = finest.
    pub heads: Vec<ScaleHead>,
}

pub struct ScaleOutput {
    /// Total flow estimate `Ŝ_k`, `l_k×3`.
    pub flow: Var,
    pub flow_feat: Var,
    pub rotation: Var,
    pub translation: Var,
    pub weights: Var,
    pub fallback: EgoFallback,
    /// Cloud warped by this scale's own estimates; the flow losses read it.
    pub warped: Var,
}

pub struct ForwardOutput {
    pub logits: [Var; 2],
    pub masks: [SegMask; 2],
    /// Indexed by scale.
    pub scales: Vec<ScaleOutput>,
    pub final_flow: Var,
    pub hybrid: [Vec<Var>; 2],
    pub encoder: [Vec<Var>; 2],
}

impl Model {
    /// Registers every parameter in a fresh store, initialized from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64, precision: Precision) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(precision);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(cfg, &mut Builder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn build(cfg: &ModelConfig, bld: &mut Builder) -> Result<Self> {
        let backbone = bld.scope("backbone", |b| Backbone::new(b, &cfg.channels, cfg.toggles.hybrid_features))?;
        let heads = (0..SCALES)
            .map(|k| bld.scope(&format!("flow{k}"), |b| ScaleHead::new(b, cfg.channels[k], cfg)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            heads,
        })
    }

    /// Runs the network on a pair of pyramids. `masks` replaces the
    /// predicted segmentation, for oracle experiments.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: &Pyramid,
        q: &Pyramid,
        masks: Option<[SegMask; 2]>,
    ) -> Result<ForwardOutput> {
        let tg = self.cfg.toggles;
        let lp = level_vars(tape, p)?;
        let lq = level_vars(tape, q)?;
        let fp = self.backbone.forward(tape, store, &lp, p)?;
        let fq = self.backbone.forward(tape, store, &lq, q)?;
        let masks = match masks {
            Some(m) => m,
            None => [
                SegMask::from_logits(tape.data(fp.logits), p),
                SegMask::from_logits(tape.data(fq.logits), q),
            ],
        };
        let (hp, hq) = match (&fp.ctx, &fq.ctx) {
            (Some(cp), Some(cq)) => (
                hybrid_features(tape, &fp.enc, cp, &masks[0], tg.stop_gradient)?,
                hybrid_features(tape, &fq.enc, cq, &masks[1], tg.stop_gradient)?,
            ),
            _ => (fp.enc.clone(), fq.enc.clone()),
        };

        let mut scales: Vec<Option<ScaleOutput>> = (0..SCALES).map(|_| None).collect();
        for k in (0..SCALES).rev() {
            let coarse = scales.get(k + 1).and_then(|s| s.as_ref());
            let out = self.scale_step(tape, store, k, &lp[k], &lq[k], hp[k], hq[k], &masks[0], p, coarse)?;
            scales[k] = Some(out);
        }
        let scales: Vec<ScaleOutput> = scales.into_iter().map(|s| s.expect("every scale computed")).collect();
        let s0 = &scales[0];
        let final_flow = merge_final_flow(tape, s0.flow, s0.rotation, s0.translation, lp[0].pos, &masks[0].fg[0])?;
        Ok(ForwardOutput {
            logits: [fp.logits, fq.logits],
            masks,
            scales,
            final_flow,
            hybrid: [hp, hq],
            encoder: [fp.enc, fq.enc],
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn scale_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        k: usize,
        lp: &LevelVars,
        lq: &LevelVars,
        hp: Var,
        hq: Var,
        mask: &SegMask,
        p: &Pyramid,
        coarse: Option<&ScaleOutput>,
    ) -> Result<ScaleOutput> {
        let tg = self.cfg.toggles;
        let head = &self.heads[k];
        let fc = self.cfg.flow_channels;
        let fg = &mask.fg[k];
        let (src, flow_up, feat_up, search) = match coarse {
            None => {
                let zf = tape.zeros(&[lp.len, 3]);
                let zh = tape.zeros(&[lp.len, fc]);
                (lp.pos, zf, zh, Search::FeatureSpace)
            }
            Some(c) => {
                let up = &p.up[k];
                let idx = crate::backbone::rc_indices(up);
                let flow_up = tape.gather(c.flow, idx.clone(), &[lp.len])?;
                let feat_up = tape.gather(c.flow_feat, idx, &[lp.len])?;
                let src = if tg.hybrid_warp {
                    hybrid_warp(tape, lp.pos, flow_up, c.rotation, c.translation, fg)?
                } else {
                    tape.add(lp.pos, flow_up)?
                };
                (src, flow_up, feat_up, Search::Euclidean)
            }
        };
        let cv = head.cost.forward(tape, store, src, lq.pos, hp, hq, search, k)?;
        let bg = mask.bg(k);
        let prior = if coarse.is_none() { self.cfg.ego_prior } else { 0.0 };
        let ego = head
            .ego
            .forward(tape, store, &cv, lp.pos, if tg.mask_in_ego { Some(&bg) } else { None }, prior)?;
        let upd = match &head.update {
            Some(u) => u.forward(tape, store, cv.feat)?,
            None => cv.feat,
        };
        let x = tape.concat(&[upd, hp, feat_up, flow_up])?;
        let flow_feat = head.refine.forward(tape, store, x, lp.neighbors.clone(), lp.k)?;
        let residual = head.predictor.forward(tape, store, flow_feat)?;
        let flow = tape.add(flow_up, residual)?;
        let warped = if tg.hybrid_warp {
            hybrid_warp(tape, lp.pos, flow, ego.rotation, ego.translation, fg)?
        } else {
            tape.add(lp.pos, flow)?
        };
        Ok(ScaleOutput {
            flow,
            flow_feat,
            rotation: ego.rotation,
            translation: ego.translation,
            weights: cv.weights,
            fallback: ego.fallback,
            warped,
        })
    }
}

/// Plain-value transform read off the tape.
pub fn transform_of(tape: &Tape, r: Var, t: Var) -> crate::geometry::RigidTransform {
    let rd = tape.data(r);
    let td = tape.data(t);
    crate::geometry::RigidTransform {
        rotation: nalgebra::Matrix3::from_row_slice(rd),
        translation: nalgebra::Vector3::new(td[0], td[1], td[2]),
    }
}
