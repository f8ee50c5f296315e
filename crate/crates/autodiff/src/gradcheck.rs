//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Mode, Precision, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Bound on `|analytic − fd| / max(1, |fd|)`.
    pub tol: f64,
    /// Entries whose one-sided slopes differ by more than this (scaled like
    /// `tol`) straddle a kink and are skipped.
    pub kink_tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            kink_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_error: f64,
    pub checked: usize,
    /// Entries skipped as non-differentiable.
    pub kinks: usize,
    /// (input or parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
}

fn scaled_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_error < tol
    }

    fn new() -> Self {
        Self {
            max_error: 0.0,
            checked: 0,
            kinks: 0,
            worst: (0, 0),
        }
    }

    /// `at(d)` evaluates the function with the entry shifted by `d`.
    fn record<A>(&mut self, check: &GradCheck, analytic: f64, center: f64, pos: (usize, usize), mut at: A) -> Result<()>
    where
        A: FnMut(f64) -> Result<f64>,
    {
        let h = check.step;
        let (plus, minus) = (at(h)?, at(-h)?);
        if scaled_err((plus - center) / h, (center - minus) / h) > check.kink_tol {
            self.kinks += 1;
            return Ok(());
        }
        let coarse = (plus - minus) / (2.0 * h);
        let mut err = scaled_err(analytic, coarse);
        // strongly curved entries: Richardson extrapolation, then a smaller step
        let mut step = h;
        let mut wide = coarse;
        while err > check.tol && step > h / 20.0 {
            let narrow = (at(step / 2.0)? - at(-step / 2.0)?) / step;
            err = err.min(scaled_err(analytic, narrow)).min(scaled_err(analytic, (4.0 * narrow - wide) / 3.0));
            step /= 10.0;
            wide = (at(step)? - at(-step)?) / (2.0 * step);
            err = err.min(scaled_err(analytic, wide));
        }
        self.checked += 1;
        if err > self.max_error {
            self.max_error = err;
            self.worst = pos;
        }
        Ok(())
    }
}

impl GradCheck {
    /// Checks d f / d inputs where `f` builds a scalar from differentiable
    /// leaves holding `inputs`. The tape runs in f64, train mode.
    pub fn inputs<F>(&self, inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[(Vec<usize>, Vec<f64>)]| -> Result<(Tape, Vec<Var>, Var)> {
            let mut tape = Tape::new(Precision::F64, Mode::Train);
            let vars = vals
                .iter()
                .map(|(s, d)| tape.input(s, d.clone()))
                .collect::<Result<Vec<_>>>()?;
            let out = f(&mut tape, &vars)?;
            Ok((tape, vars, out))
        };
        let (tape, vars, out) = eval(inputs)?;
        let center = tape.item(out);
        let grads = tape.backward(out)?;
        let mut report = GradReport::new();
        let mut work = inputs.to_vec();
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.wrt(&tape, v);
            for (e, &a) in analytic.iter().enumerate() {
                let orig = work[i].1[e];
                report.record(self, a, center, (i, e), |d| {
                    work[i].1[e] = orig + d;
                    let (t, _, o) = eval(&work)?;
                    Ok(t.item(o))
                })?;
                work[i].1[e] = orig;
            }
        }
        Ok(report)
    }

    /// Checks d f / d parameters for every parameter in `store`.
    pub fn params<F>(&self, store: &ParamStore, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new(Precision::F64, Mode::Train);
            let out = f(&mut tape, s)?;
            Ok(tape.item(out))
        };
        let mut tape = Tape::new(Precision::F64, Mode::Train);
        let out = f(&mut tape, store)?;
        let center = tape.item(out);
        let grads = tape.backward(out)?.params(store);
        let mut report = GradReport::new();
        let mut work = store.clone();
        let ids: Vec<_> = store.params().map(|(id, _)| id).collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let n = store.param(id).data.len();
            let analytic = grads.get(&id).cloned().unwrap_or_else(|| vec![0.0; n]);
            for (e, &a) in analytic.iter().enumerate() {
                let orig = store.param(id).data[e];
                report.record(self, a, center, (pi, e), |d| {
                    work.param_mut(id).data[e] = orig + d;
                    eval(&work)
                })?;
                work.param_mut(id).data[e] = orig;
            }
        }
        Ok(report)
    }
}
