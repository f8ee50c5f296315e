//! Training objective: weighted BCE segmentation, hierarchical ego-motion,
//! and masked Chamfer plus smoothness flow terms per scale.

use egflow_autodiff::{Tape, Var};
use nalgebra::{Matrix3, Vector3};

use crate::backbone::rc_indices;
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::flow::expand_rows;
use crate::geometry::{knn, knn_points, IndexTable, Point, RigidTransform};
use crate::model::ForwardOutput;
use crate::pyramid::Pyramid;

/// `−(1/N) Σ [γ·y·log σ(z) + (1−y)·log(1−σ(z))]` from logits `z`, via
/// `−log σ(z) = softplus(−z)`.
pub fn seg_loss(tape: &mut Tape, logits: Var, labels: &[bool], gamma: f64) -> Result<Var> {
    let n = labels.len();
    if tape.data(logits).len() != n {
        return Err(Error::LengthMismatch {
            what: "segmentation labels",
            a: tape.data(logits).len(),
            b: n,
        });
    }
    let sign = labels.iter().map(|&y| if y { -1.0 } else { 1.0 }).collect();
    let weight = labels
        .iter()
        .map(|&y| if y { gamma } else { 1.0 } / n as f64)
        .collect();
    let z = tape.reshape(logits, &[n])?;
    let sign = tape.constant(&[n], sign)?;
    let zs = tape.mul(z, sign)?;
    let sp = tape.softplus(zs)?;
    let weight = tape.constant(&[n], weight)?;
    let wl = tape.mul(sp, weight)?;
    Ok(tape.sum(wl))
}

/// `(1/S) Σ_k [β·‖R̂_kᵀR − I‖_F + ‖t̂_k − t‖₂]` over the `S` given scales.
pub fn ego_loss(tape: &mut Tape, estimates: &[(Var, Var)], gt: &RigidTransform, beta: f64) -> Result<Var> {
    let r = gt.rotation;
    let rd: Vec<f64> = (0..9).map(|i| r[(i / 3, i % 3)]).collect();
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let mut total: Option<Var> = None;
    for &(rh, th) in estimates {
        let rc = tape.constant(&[3, 3], rd.clone())?;
        let ic = tape.constant(&[3, 3], eye.clone())?;
        let tc = tape.constant(&[3], gt.translation.iter().copied().collect())?;
        let rht = tape.transpose(rh)?;
        let m = tape.matmul(rht, rc)?;
        let m = tape.sub(m, ic)?;
        let m = tape.reshape(m, &[1, 9])?;
        let fro = tape.row_norm(m);
        let fro = tape.scale(fro, beta);
        let dt = tape.sub(th, tc)?;
        let dt = tape.reshape(dt, &[1, 3])?;
        let tn = tape.row_norm(dt);
        let term = tape.add(fro, tn)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.ok_or(Error::TooFew {
        what: "ego estimates",
        need: 1,
        got: 0,
    })?;
    let mean = tape.scale(total, 1.0 / estimates.len() as f64);
    Ok(tape.reshape(mean, &[1])?)
}

/// Bidirectional nearest-neighbor distance with the outer sums weighted by
/// the foreground masks; the inner minimum ranges over all points.
pub fn chamfer_masked(tape: &mut Tape, warped: Var, q: &[Point], mask_p: &[f64], mask_q: &[f64]) -> Result<Var> {
    let n = tape.shape(warped)[0];
    let m = q.len();
    if mask_p.len() != n || mask_q.len() != m {
        return Err(Error::LengthMismatch {
            what: "chamfer masks",
            a: mask_p.len() + mask_q.len(),
            b: n + m,
        });
    }
    let qflat = q.as_flattened().to_vec();
    let qv = tape.constant(&[m, 3], qflat.clone())?;
    let fwd = knn(tape.data(warped), &qflat, 3, 1)?;
    let g = tape.gather(qv, rc_indices(&fwd), &[n])?;
    let d = tape.sub(warped, g)?;
    let d1 = tape.row_norm(d);
    let mp = tape.constant(&[n], mask_p.to_vec())?;
    let t1 = tape.mul(d1, mp)?;
    let t1 = tape.sum(t1);

    let bwd = knn(&qflat, tape.data(warped), 3, 1)?;
    let g = tape.gather(warped, rc_indices(&bwd), &[m])?;
    let d = tape.sub(g, qv)?;
    let d2 = tape.row_norm(d);
    let mq = tape.constant(&[m], mask_q.to_vec())?;
    let t2 = tape.mul(d2, mq)?;
    let t2 = tape.sum(t2);
    Ok(tape.add(t1, t2)?)
}

/// Nearest `k` other points of every point (self excluded, even when
/// duplicated coordinates make the self match tie with another index).
pub fn neighbors_excluding_self(points: &[Point], k: usize) -> Result<IndexTable> {
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return Err(Error::TooFew {
            what: "smoothness points",
            need: 2,
            got: n,
        });
    }
    let t = knn_points(points, points, k + 1)?;
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = t.row(i);
        let drop = row.iter().position(|&j| j == i).unwrap_or(k);
        out.extend(row.iter().enumerate().filter(|&(c, _)| c != drop).map(|(_, &j)| j));
    }
    IndexTable::new(n, k, out)
}

/// `Σ_i m_i·(1/N)·Σ_{j∈N(i)} ‖Ŝ_j − Ŝ_i‖₁` over Euclidean neighborhoods of
/// the unwarped points.
pub fn smoothness_masked(tape: &mut Tape, flow: Var, points: &[Point], mask: &[f64], nk: usize) -> Result<Var> {
    let n = points.len();
    if tape.shape(flow)[0] != n || mask.len() != n {
        return Err(Error::LengthMismatch {
            what: "smoothness rows",
            a: tape.shape(flow)[0],
            b: n,
        });
    }
    let table = neighbors_excluding_self(points, nk)?;
    let k = table.k();
    let g = tape.gather_neighbors(flow, rc_indices(&table), n, k)?;
    let c = expand_rows(tape, flow, k)?;
    let d = tape.sub(g, c)?;
    let d = tape.abs(d);
    let d = tape.reshape(d, &[n, 3 * k])?;
    let per = tape.sum_last_axis(d);
    let w = tape.constant(&[n], mask.iter().map(|m| m / k as f64).collect())?;
    let wp = tape.mul(per, w)?;
    Ok(tape.sum(wp))
}

/// Ground truth a training step needs.
pub struct Target<'a> {
    pub labels_p: &'a [bool],
    pub labels_q: &'a [bool],
    pub ego: &'a RigidTransform,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub seg: f64,
    pub ego: f64,
    pub chamfer: [f64; 4],
    pub smooth: [f64; 4],
    pub total: f64,
}

impl LossTerms {
    pub fn flow(&self, alpha: &[f64; 4]) -> f64 {
        (0..4).map(|k| alpha[k] * (self.chamfer[k] + self.smooth[k])).sum()
    }
}

/// `L_seg(P) + L_seg(Q) + L_ego + Σ_k α_k (L_cd,k + L_sm,k)`.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    p: &Pyramid,
    q: &Pyramid,
    target: &Target,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let mut terms = LossTerms::default();
    let sp = seg_loss(tape, out.logits[0], target.labels_p, cfg.gamma)?;
    let sq = seg_loss(tape, out.logits[1], target.labels_q, cfg.gamma)?;
    let seg = tape.add(sp, sq)?;
    terms.seg = tape.item(seg);
    let est: Vec<(Var, Var)> = out.scales.iter().map(|s| (s.rotation, s.translation)).collect();
    let ego = ego_loss(tape, &est, target.ego, cfg.beta)?;
    terms.ego = tape.item(ego);
    let mut total = tape.add(seg, ego)?;
    for (k, s) in out.scales.iter().enumerate() {
        let (mp, mq) = if cfg.masked_flow {
            (
                to_unit(&p.subsample(k, target.labels_p)),
                to_unit(&q.subsample(k, target.labels_q)),
            )
        } else {
            (vec![1.0; p.levels[k].len()], vec![1.0; q.levels[k].len()])
        };
        let cd = chamfer_masked(tape, s.warped, &q.levels[k].points, &mp, &mq)?;
        let sm = smoothness_masked(tape, s.flow, &p.levels[k].points, &mp, cfg.smooth_k[k])?;
        terms.chamfer[k] = tape.item(cd);
        terms.smooth[k] = tape.item(sm);
        let both = tape.add(cd, sm)?;
        let scaled = tape.scale(both, cfg.alpha[k]);
        total = tape.add(total, scaled)?;
    }
    terms.total = tape.item(total);
    Ok((total, terms))
}

fn to_unit(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// `β·‖R̂ᵀR − I‖_F + ‖t̂ − t‖₂` on plain values.
pub fn ego_term(est: &RigidTransform, gt: &RigidTransform, beta: f64) -> f64 {
    let m: Matrix3<f64> = est.rotation.transpose() * gt.rotation - Matrix3::identity();
    let dt: Vector3<f64> = est.translation - gt.translation;
    beta * m.norm() + dt.norm()
}
