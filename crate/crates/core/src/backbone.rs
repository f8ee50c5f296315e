//! Feature extraction: attentive local aggregation encoder, 1-NN decoder,
//! context encoder, segmentation head and hybrid features.

use std::rc::Rc;

use egflow_autodiff::{ParamStore, Reduce, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::IndexTable;
use crate::nn::{Builder, Dense, Linear, Mlp};
use crate::pyramid::{Pyramid, REL_WIDTH, SCALES};

pub fn rc_indices(t: &IndexTable) -> Rc<[usize]> {
    Rc::from(t.indices())
}

/// Per-level tape constants shared by every module that reads a pyramid.
pub struct LevelVars {
    pub pos: Var,
    pub rel: Var,
    pub neighbors: Rc<[usize]>,
    pub k: usize,
    pub len: usize,
}

pub fn level_vars(tape: &mut Tape, pyr: &Pyramid) -> Result<Vec<LevelVars>> {
    pyr.levels
        .iter()
        .map(|lv| {
            let (len, k) = (lv.len(), lv.neighbors.k());
            Ok(LevelVars {
                pos: tape.constant(&[len, 3], lv.flat())?,
                rel: tape.constant(&[len, k, REL_WIDTH], lv.rel.clone())?,
                neighbors: rc_indices(&lv.neighbors),
                k,
                len,
            })
        })
        .collect()
}

/// Attentive pooling unit: per-neighbor scores from a shared linear map,
/// softmax over the neighborhood, weighted sum, then a dense layer.
#[derive(Clone, Debug)]
pub struct Lfa {
    pub score: Linear,
    pub out: Dense,
}

impl Lfa {
    pub fn new(bld: &mut Builder, cin: usize, cout: usize) -> Result<Self> {
        let d = REL_WIDTH + cin;
        Ok(Self {
            score: bld.scope("score", |b| Linear::new(b, d, 1, false))?,
            out: bld.scope("out", |b| Dense::new(b, d, cout))?,
        })
    }

    /// `feats` is `l×C`, `rel` is `l×K×7` and `nbr` the matching `l×K` table.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feats: Var, rel: Var, nbr: Rc<[usize]>) -> Result<Var> {
        let rs = tape.shape(rel).to_vec();
        let (l, k) = (rs[0], rs[1]);
        if tape.shape(feats)[0] != l {
            return Err(Error::LengthMismatch {
                what: "lfa feature rows",
                a: tape.shape(feats)[0],
                b: l,
            });
        }
        let g = tape.gather_neighbors(feats, nbr, l, k)?;
        let x = tape.concat(&[rel, g])?;
        let s = self.score.forward(tape, store, x)?;
        let s = tape.reshape(s, &[l, k])?;
        let a = tape.softmax(s)?;
        let agg = tape.reduce_neighbors(x, Reduce::WeightedSum, Some(a))?;
        self.out.forward(tape, store, agg)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Dense,
    pub units: Vec<[Lfa; 2]>,
}

impl Encoder {
    pub fn new(bld: &mut Builder, channels: &[usize; 4]) -> Result<Self> {
        let stem = bld.scope("stem", |b| Dense::new(b, 3, channels[0]))?;
        let mut units = Vec::with_capacity(SCALES);
        let mut cin = channels[0];
        for (k, &c) in channels.iter().enumerate() {
            let pair = bld.scope(&format!("s{k}"), |b| {
                Ok([
                    b.scope("lfa0", |b| Lfa::new(b, cin, c))?,
                    b.scope("lfa1", |b| Lfa::new(b, c, c))?,
                ])
            })?;
            units.push(pair);
            cin = c;
        }
        Ok(Self { stem, units })
    }

    /// Per-scale features; between scales a point takes the channel-wise
    /// max over its finer-scale neighbors.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, lv: &[LevelVars], pyr: &Pyramid) -> Result<Vec<Var>> {
        let mut f = self.stem.forward(tape, store, lv[0].pos)?;
        let mut out = Vec::with_capacity(SCALES);
        for (k, [a, b]) in self.units.iter().enumerate() {
            if k > 0 {
                let t = &pyr.down[k - 1];
                let g = tape.gather_neighbors(f, rc_indices(t), t.rows(), t.k())?;
                f = tape.reduce_neighbors(g, Reduce::Max, None)?;
            }
            f = a.forward(tape, store, f, lv[k].rel, lv[k].neighbors.clone())?;
            f = b.forward(tape, store, f, lv[k].rel, lv[k].neighbors.clone())?;
            out.push(f);
        }
        Ok(out)
    }
}

/// Top-down decoder: 1-NN upsampling, skip concatenation, dense layer.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `levels[k]` produces the level-k output.
    pub levels: Vec<Dense>,
}

impl Decoder {
    pub fn new(bld: &mut Builder, channels: &[usize; 4]) -> Result<Self> {
        let levels = (0..SCALES - 1)
            .map(|k| bld.scope(&format!("s{k}"), |b| Dense::new(b, channels[k + 1] + channels[k], channels[k])))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, enc: &[Var], pyr: &Pyramid) -> Result<Var> {
        let mut d = enc[SCALES - 1];
        for k in (0..SCALES - 1).rev() {
            let up = &pyr.up[k];
            let u = tape.gather(d, rc_indices(up), &[up.rows()])?;
            let x = tape.concat(&[u, enc[k]])?;
            d = self.levels[k].forward(tape, store, x)?;
        }
        Ok(d)
    }
}

pub struct FrameFeatures {
    pub enc: Vec<Var>,
    pub ctx: Option<Vec<Var>>,
    /// Segmentation logits, shape `[l0]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub context: Option<Encoder>,
    pub seg_head: Mlp,
}

impl Backbone {
    pub fn new(bld: &mut Builder, channels: &[usize; 4], with_context: bool) -> Result<Self> {
        let encoder = bld.scope("encoder", |b| Encoder::new(b, channels))?;
        let decoder = bld.scope("decoder", |b| Decoder::new(b, channels))?;
        let context = if with_context {
            Some(bld.scope("context", |b| Encoder::new(b, channels))?)
        } else {
            None
        };
        let seg_head = bld.scope("seg_head", |b| Mlp::new(b, &[channels[0], 64, 32, 1], true))?;
        Ok(Self {
            encoder,
            decoder,
            context,
            seg_head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, lv: &[LevelVars], pyr: &Pyramid) -> Result<FrameFeatures> {
        let enc = self.encoder.forward(tape, store, lv, pyr)?;
        let dec = self.decoder.forward(tape, store, &enc, pyr)?;
        let ctx = match &self.context {
            Some(c) => Some(c.forward(tape, store, lv, pyr)?),
            None => None,
        };
        let logits = self.seg_head.forward(tape, store, dec)?;
        let logits = tape.reshape(logits, &[lv[0].len])?;
        Ok(FrameFeatures { enc, ctx, logits })
    }
}

/// Hard foreground mask at every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub probs: Vec<f64>,
    /// Per scale, 1.0 for foreground rows and 0.0 otherwise.
    pub fg: Vec<Vec<f64>>,
}

impl SegMask {
    pub fn from_logits(logits: &[f64], pyr: &Pyramid) -> Self {
        let probs: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let fg: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
        Self::build(probs, &fg, pyr)
    }

    pub fn from_labels(labels: &[bool], pyr: &Pyramid) -> Self {
        let probs = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        Self::build(probs, labels, pyr)
    }

    fn build(probs: Vec<f64>, fg: &[bool], pyr: &Pyramid) -> Self {
        let fg = (0..pyr.levels.len())
            .map(|k| pyr.subsample(k, fg).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { probs, fg }
    }

    pub fn fg_bits(&self) -> Vec<bool> {
        self.fg[0].iter().map(|&v| v > 0.5).collect()
    }

    pub fn bg(&self, k: usize) -> Vec<f64> {
        self.fg[k].iter().map(|v| 1.0 - v).collect()
    }
}

/// Foreground rows from the context encoder, background rows from the main
/// encoder (gradient-stopped when `stop_gradient`).
pub fn hybrid_features(
    tape: &mut Tape,
    enc: &[Var],
    ctx: &[Var],
    mask: &SegMask,
    stop_gradient: bool,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(enc.len());
    for k in 0..enc.len() {
        let n = mask.fg[k].len();
        let mfg = tape.constant(&[n], mask.fg[k].clone())?;
        let mbg = tape.constant(&[n], mask.bg(k))?;
        let fg = tape.mul_col(ctx[k], mfg)?;
        let e = if stop_gradient { tape.stop_gradient(enc[k]) } else { enc[k] };
        let bg = tape.mul_col(e, mbg)?;
        out.push(tape.add(fg, bg)?);
    }
    Ok(out)
}
