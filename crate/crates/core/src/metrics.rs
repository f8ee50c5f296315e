//! Evaluation metrics: end-point error family, ego-motion errors and mask
//! precision/recall, plus the CSV report.

use std::io::Write;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Point, RigidTransform};

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Per-point end-point error and relative error. Relative error is 0 when
/// both the ground truth and the error vanish and +∞ when only the ground
/// truth does.
pub fn point_errors(pred: &Point, gt: &Point) -> (f64, f64) {
    let e = norm([pred[0] - gt[0], pred[1] - gt[1], pred[2] - gt[2]]);
    let g = norm(*gt);
    let r = if g > 0.0 {
        e / g
    } else if e == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    (e, r)
}

/// Running sums over points, so scenes can be pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowAccumulator {
    pub count: usize,
    pub epe_sum: f64,
    pub strict: usize,
    pub relaxed: usize,
    pub outliers: usize,
}

impl FlowAccumulator {
    pub fn push(&mut self, pred: &Point, gt: &Point) {
        let (e, r) = point_errors(pred, gt);
        self.count += 1;
        self.epe_sum += e;
        self.strict += usize::from(e < 0.05 || r < 0.05);
        self.relaxed += usize::from(e < 0.1 || r < 0.1);
        self.outliers += usize::from(e > 0.3 || r > 0.1);
    }

    pub fn merge(&mut self, other: &FlowAccumulator) {
        self.count += other.count;
        self.epe_sum += other.epe_sum;
        self.strict += other.strict;
        self.relaxed += other.relaxed;
        self.outliers += other.outliers;
    }

    pub fn finish(&self) -> FlowMetrics {
        let n = self.count.max(1) as f64;
        FlowMetrics {
            epe3d: self.epe_sum / n,
            acc3ds: self.strict as f64 / n,
            acc3dr: self.relaxed as f64 / n,
            out3d: self.outliers as f64 / n,
            count: self.count,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub epe3d: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub out3d: f64,
    pub count: usize,
}

impl FlowMetrics {
    /// Unweighted mean over scenes (the non-pooled aggregate).
    pub fn mean_of(items: &[FlowMetrics]) -> FlowMetrics {
        let n = items.len().max(1) as f64;
        let mut m = FlowMetrics::default();
        for it in items {
            m.epe3d += it.epe3d / n;
            m.acc3ds += it.acc3ds / n;
            m.acc3dr += it.acc3dr / n;
            m.out3d += it.out3d / n;
            m.count += it.count;
        }
        m
    }
}

pub fn flow_accumulate(pred: &[Point], gt: &[Point], select: Option<&[bool]>) -> Result<FlowAccumulator> {
    if pred.len() != gt.len() || select.is_some_and(|s| s.len() != gt.len()) {
        return Err(Error::LengthMismatch {
            what: "flow metrics",
            a: pred.len(),
            b: gt.len(),
        });
    }
    let mut acc = FlowAccumulator::default();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if select.is_none_or(|s| s[i]) {
            acc.push(p, g);
        }
    }
    Ok(acc)
}

pub fn flow_metrics(pred: &[Point], gt: &[Point]) -> Result<FlowMetrics> {
    Ok(flow_accumulate(pred, gt, None)?.finish())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EgoMetrics {
    pub rae_deg: f64,
    pub rte: f64,
}

/// Angular error `arccos((tr(R̂ᵀR) − 1)/2)` in degrees and translation
/// error in meters. Evaluated as `atan2(sin, cos)` of the relative
/// rotation, which is exact for identical inputs and stable near zero.
pub fn ego_metrics(est: &RigidTransform, gt: &RigidTransform) -> EgoMetrics {
    let m = est.rotation.transpose() * gt.rotation;
    let cos = (m.trace() - 1.0) / 2.0;
    let sin = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    EgoMetrics {
        rae_deg: sin.atan2(cos).to_degrees(),
        rte: (est.translation - gt.translation).norm(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn finish(&self) -> MaskMetrics {
        let ratio = |num: usize, den: usize| if den == 0 { (1.0, true) } else { (num as f64 / den as f64, false) };
        let (prec_fg, a) = ratio(self.tp, self.tp + self.fp);
        let (rec_fg, b) = ratio(self.tp, self.tp + self.fn_);
        let (prec_bg, c) = ratio(self.tn, self.tn + self.fn_);
        let (rec_bg, d) = ratio(self.tn, self.tn + self.fp);
        MaskMetrics {
            prec_fg,
            rec_fg,
            prec_bg,
            rec_bg,
            empty_denominator: a || b || c || d,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MaskMetrics {
    pub prec_fg: f64,
    pub rec_fg: f64,
    pub prec_bg: f64,
    pub rec_bg: f64,
    /// Some ratio had an empty denominator and was reported as 1.0.
    pub empty_denominator: bool,
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "mask metrics",
            a: pred.len(),
            b: gt.len(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn mask_metrics(pred: &[bool], gt: &[bool]) -> Result<MaskMetrics> {
    Ok(confusion(pred, gt)?.finish())
}

/// One report row: a scene or the aggregate.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReportRow {
    pub scene: String,
    pub points: usize,
    pub epe3d: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub out3d: f64,
    pub epe3d_fg: f64,
    pub epe3d_bg: f64,
    pub rae_deg: f64,
    pub rte: f64,
    pub prec_fg: f64,
    pub rec_fg: f64,
    pub prec_bg: f64,
    pub rec_bg: f64,
}

/// Per-scene evaluation with everything needed for pooling.
#[derive(Clone, Debug, Default)]
pub struct SceneEval {
    pub name: String,
    pub all: FlowAccumulator,
    pub fg: FlowAccumulator,
    pub bg: FlowAccumulator,
    pub ego: EgoMetrics,
    pub mask: Confusion,
}

impl SceneEval {
    pub fn compute(
        name: &str,
        pred: &[Point],
        gt: &[Point],
        labels: &[bool],
        pred_mask: &[bool],
        est: &RigidTransform,
        gt_ego: &RigidTransform,
    ) -> Result<Self> {
        let bg: Vec<bool> = labels.iter().map(|b| !b).collect();
        Ok(Self {
            name: name.to_string(),
            all: flow_accumulate(pred, gt, None)?,
            fg: flow_accumulate(pred, gt, Some(labels))?,
            bg: flow_accumulate(pred, gt, Some(&bg))?,
            ego: ego_metrics(est, gt_ego),
            mask: confusion(pred_mask, labels)?,
        })
    }

    pub fn row(&self) -> ReportRow {
        row(&self.name, &self.all, &self.fg, &self.bg, self.ego, &self.mask)
    }
}

fn row(
    name: &str,
    all: &FlowAccumulator,
    fg: &FlowAccumulator,
    bg: &FlowAccumulator,
    ego: EgoMetrics,
    mask: &Confusion,
) -> ReportRow {
    let f = all.finish();
    let m = mask.finish();
    ReportRow {
        scene: name.to_string(),
        points: f.count,
        epe3d: f.epe3d,
        acc3ds: f.acc3ds,
        acc3dr: f.acc3dr,
        out3d: f.out3d,
        epe3d_fg: fg.finish().epe3d,
        epe3d_bg: bg.finish().epe3d,
        rae_deg: ego.rae_deg,
        rte: ego.rte,
        prec_fg: m.prec_fg,
        rec_fg: m.rec_fg,
        prec_bg: m.prec_bg,
        rec_bg: m.rec_bg,
    }
}

/// Aggregate over scenes. Pooled mode weights every point equally; the
/// per-scene mode averages scene rows. Ego errors are always scene means.
pub fn aggregate(scenes: &[SceneEval], pooled: bool) -> ReportRow {
    let n = scenes.len().max(1) as f64;
    let ego = EgoMetrics {
        rae_deg: scenes.iter().map(|s| s.ego.rae_deg).sum::<f64>() / n,
        rte: scenes.iter().map(|s| s.ego.rte).sum::<f64>() / n,
    };
    if pooled {
        let (mut all, mut fg, mut bg, mut mask) = Default::default();
        for s in scenes {
            FlowAccumulator::merge(&mut all, &s.all);
            FlowAccumulator::merge(&mut fg, &s.fg);
            FlowAccumulator::merge(&mut bg, &s.bg);
            Confusion::merge(&mut mask, &s.mask);
        }
        return row("aggregate", &all, &fg, &bg, ego, &mask);
    }
    let rows: Vec<ReportRow> = scenes.iter().map(SceneEval::row).collect();
    let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ReportRow {
        scene: "aggregate".into(),
        points: rows.iter().map(|r| r.points).sum(),
        epe3d: mean(|r| r.epe3d),
        acc3ds: mean(|r| r.acc3ds),
        acc3dr: mean(|r| r.acc3dr),
        out3d: mean(|r| r.out3d),
        epe3d_fg: mean(|r| r.epe3d_fg),
        epe3d_bg: mean(|r| r.epe3d_bg),
        rae_deg: ego.rae_deg,
        rte: ego.rte,
        prec_fg: mean(|r| r.prec_fg),
        rec_fg: mean(|r| r.rec_fg),
        prec_bg: mean(|r| r.prec_bg),
        rec_bg: mean(|r| r.rec_bg),
    }
}

/// CSV with one row per scene followed by the aggregate row.
pub fn write_report<W: Write>(w: W, scenes: &[SceneEval], pooled: bool) -> Result<ReportRow> {
    let mut csv = csv::Writer::from_writer(w);
    for s in scenes {
        csv.serialize(s.row())?;
    }
    let agg = aggregate(scenes, pooled);
    csv.serialize(&agg)?;
    csv.flush()?;
    Ok(agg)
}
