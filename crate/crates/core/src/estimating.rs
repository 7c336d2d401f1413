//! Design-weighted estimating equations `Σ c_k U(η; y_k) = 0` for scalar
//! targets, on complete samples and on fractionally imputed samples.
//!
//! Indicators are strict: `I{y < c}` and `I{y < η}` do not count ties.

use std::fmt;
use std::sync::Arc;

use crate::dataset::{FractionalDataset, SurveyDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Smooth,
    Step,
}

/// The built-in targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimandKind {
    Mean,
    ProportionBelow(f64),
    Median,
    Quantile(f64),
}

/// Restricts an estimating function to units whose categorical `item`
/// equals `code` (domain estimation, e.g. a stratum mean).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub item: usize,
    pub code: f64,
}

type CustomFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Form {
    Builtin(EstimandKind),
    Custom { f: CustomFn, smoothness: Smoothness },
}

#[derive(Clone)]
pub struct EstimatingFunction {
    form: Form,
    item: usize,
    domain: Option<Domain>,
}

impl fmt::Debug for EstimatingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("EstimatingFunction");
        match &self.form {
            Form::Builtin(k) => s.field("kind", k),
            Form::Custom { smoothness, .. } => s.field("custom", smoothness),
        };
        s.field("item", &self.item).field("domain", &self.domain).finish()
    }
}

/// Estimating function for a built-in target on item `item`.
///
/// Forms: mean `η − y`; proportion `η − I{y < c}`; quantile
/// `p − I{y < η}` (median is `p = 0.5`).
pub fn builtin_u(kind: EstimandKind, item: usize) -> Result<EstimatingFunction> {
    match kind {
        EstimandKind::ProportionBelow(c) if !c.is_finite() => {
            return Err(Error::Contract(format!("threshold {c} is not finite")))
        }
        EstimandKind::Quantile(p) if !(p > 0.0 && p < 1.0) => {
            return Err(Error::Contract(format!("quantile level {p} outside (0, 1)")))
        }
        _ => {}
    }
    Ok(EstimatingFunction {
        form: Form::Builtin(kind),
        item,
        domain: None,
    })
}

impl EstimatingFunction {
    pub fn mean(item: usize) -> Self {
        builtin_u(EstimandKind::Mean, item).expect("mean is always valid")
    }

    /// A user-supplied `U(η; y)`. Smooth functions must be increasing in
    /// η for the bracketing solver; step functions must change sign once.
    pub fn custom(
        item: usize,
        smoothness: Smoothness,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        EstimatingFunction {
            form: Form::Custom {
                f: Arc::new(f),
                smoothness,
            },
            item,
            domain: None,
        }
    }

    pub fn in_domain(mut self, item: usize, code: f64) -> Self {
        self.domain = Some(Domain { item, code });
        self
    }

    pub fn item(&self) -> usize {
        self.item
    }

    pub fn domain(&self) -> Option<Domain> {
        self.domain
    }

    pub fn kind(&self) -> Option<EstimandKind> {
        match self.form {
            Form::Builtin(k) => Some(k),
            Form::Custom { .. } => None,
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match &self.form {
            Form::Builtin(EstimandKind::Median | EstimandKind::Quantile(_)) => Smoothness::Step,
            Form::Builtin(_) => Smoothness::Smooth,
            Form::Custom { smoothness, .. } => *smoothness,
        }
    }

    /// Items whose values the function reads.
    pub fn referenced_items(&self) -> Vec<usize> {
        let mut v = vec![self.item];
        if let Some(d) = self.domain {
            if d.item != self.item {
                v.push(d.item);
            }
        }
        v
    }

    fn in_scope(&self, y: &[f64]) -> bool {
        self.domain.is_none_or(|d| y[d.item] == d.code)
    }

    pub fn eval(&self, eta: f64, y: &[f64]) -> f64 {
        if !self.in_scope(y) {
            return 0.0;
        }
        let v = y[self.item];
        match &self.form {
            Form::Builtin(EstimandKind::Mean) => eta - v,
            Form::Builtin(EstimandKind::ProportionBelow(c)) => eta - indicator(v < *c),
            Form::Builtin(EstimandKind::Median) => 0.5 - indicator(v < eta),
            Form::Builtin(EstimandKind::Quantile(p)) => p - indicator(v < eta),
            Form::Custom { f, .. } => f(eta, y),
        }
    }

    /// dU/dη where it is known in closed form.
    fn derivative(&self, y: &[f64]) -> Option<f64> {
        match &self.form {
            Form::Builtin(EstimandKind::Mean | EstimandKind::ProportionBelow(_)) => {
                Some(indicator(self.in_scope(y)))
            }
            _ => None,
        }
    }

    fn quantile_level(&self) -> Option<f64> {
        match self.form {
            Form::Builtin(EstimandKind::Median) => Some(0.5),
            Form::Builtin(EstimandKind::Quantile(p)) => Some(p),
            _ => None,
        }
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EEEstimate {
    pub eta: f64,
    /// |Σ c U(η̂)| at the returned root.
    pub residual: f64,
    pub iterations: usize,
}

/// Relative tolerance on |Σ c U| for smooth equations, scaled by Σ|c|.
pub const SMOOTH_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: usize = 60;
const MAX_ITER: usize = 200;

/// Solves `Σ_k c_k U(η; y_k) = 0` over weighted points.
pub fn solve_points(points: &[(f64, &[f64])], u: &EstimatingFunction) -> Result<EEEstimate> {
    if points.is_empty() {
        return Err(Error::NoSolution("no data points".into()));
    }
    if let Some(p) = u.quantile_level() {
        return weighted_quantile_crossing(points, u, p);
    }
    let scale: f64 = points
        .iter()
        .filter(|(_, y)| u.in_scope(y))
        .map(|(c, _)| c.abs())
        .sum();
    if scale == 0.0 {
        return Err(Error::NoSolution("no points carry weight in the estimand's domain".into()));
    }
    let g = |eta: f64| -> f64 { points.iter().map(|(c, y)| c * u.eval(eta, y)).sum() };
    match u.smoothness() {
        Smoothness::Smooth => {
            let dg = |_: f64| -> Option<f64> {
                points
                    .iter()
                    .map(|(c, y)| u.derivative(y).map(|d| c * d))
                    .sum::<Option<f64>>()
            };
            solve_smooth(&g, &dg, SMOOTH_TOL * scale)
        }
        Smoothness::Step => solve_step_bisection(&g),
    }
}

/// Safeguarded Newton with bisection fallback inside an auto-expanded
/// bracket.
fn solve_smooth(g: &dyn Fn(f64) -> f64, dg: &dyn Fn(f64) -> Option<f64>, tol: f64) -> Result<EEEstimate> {
    let mut iterations = 1;
    let mut eta = 0.0;
    let mut val = g(eta);
    if val.abs() <= tol {
        return Ok(EEEstimate { eta, residual: val.abs(), iterations });
    }
    // One Newton step from the origin solves every linear U exactly.
    if let Some(d) = dg(eta).filter(|d| *d != 0.0 && d.is_finite()) {
        let trial = eta - val / d;
        let tv = g(trial);
        iterations += 1;
        if tv.abs() <= tol {
            return Ok(EEEstimate { eta: trial, residual: tv.abs(), iterations });
        }
        if tv.abs() < val.abs() {
            eta = trial;
            val = tv;
        }
    }
    let (mut lo, mut hi) = bracket(g, eta, val)?;
    let (mut glo, _ghi) = (g(lo), g(hi));
    for _ in 0..MAX_ITER {
        iterations += 1;
        let mut next = f64::NAN;
        if let Some(d) = dg(eta).filter(|d| *d != 0.0 && d.is_finite()) {
            next = eta - val / d;
        }
        if !(next > lo.min(hi) && next < lo.max(hi)) {
            next = 0.5 * (lo + hi);
        }
        let nv = g(next);
        eta = next;
        val = nv;
        if nv.abs() <= tol {
            break;
        }
        if (nv > 0.0) == (glo > 0.0) {
            lo = next;
            glo = nv;
        } else {
            hi = next;
        }
        if (hi - lo).abs() <= 4.0 * f64::EPSILON * eta.abs().max(1.0) {
            break;
        }
    }
    if !val.is_finite() {
        return Err(Error::NoSolution("estimating function is not finite near the root".into()));
    }
    Ok(EEEstimate { eta, residual: val.abs(), iterations })
}

/// Finds `[lo, hi]` with a sign change, doubling the half-width up to 60
/// times around `center`.
fn bracket(g: &dyn Fn(f64) -> f64, center: f64, gc: f64) -> Result<(f64, f64)> {
    let mut step = center.abs().max(1.0);
    for _ in 0..MAX_DOUBLINGS {
        for cand in [center - step, center + step] {
            let v = g(cand);
            if v == 0.0 || (v > 0.0) != (gc > 0.0) {
                return Ok((center, cand));
            }
        }
        step *= 2.0;
    }
    Err(Error::NoSolution("no sign change found in search bracket".into()))
}

fn solve_step_bisection(g: &dyn Fn(f64) -> f64) -> Result<EEEstimate> {
    let g0 = g(0.0);
    let (mut lo, mut hi) = bracket(g, 0.0, g0)?;
    let glo = g(lo);
    let mut iterations = 0;
    while iterations < MAX_ITER && (hi - lo).abs() > 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm != 0.0 && (gm > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(EEEstimate { eta: hi, residual: g(hi).abs(), iterations })
}

/// For `U = p − I{y < η}`: the smallest sorted value at which the
/// cumulative weight reaches `p` of the total. `Σ c U` is positive just
/// below it and nonpositive just above it.
fn weighted_quantile_crossing(points: &[(f64, &[f64])], u: &EstimatingFunction, p: f64) -> Result<EEEstimate> {
    let mut vals: Vec<(f64, f64)> = points
        .iter()
        .filter(|(c, y)| *c != 0.0 && u.in_scope(y))
        .map(|(c, y)| (y[u.item], *c))
        .collect();
    let total: f64 = vals.iter().map(|v| v.1).sum();
    if vals.is_empty() || total <= 0.0 {
        return Err(Error::NoSolution("no positive weight for quantile".into()));
    }
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let target = p * total;
    let slack = 1e-12 * total;
    let mut cum = 0.0;
    let n = vals.len();
    for (k, &(v, c)) in vals.iter().enumerate() {
        cum += c;
        let tie_next = k + 1 < n && vals[k + 1].0 == v;
        if !tie_next && cum >= target - slack {
            let residual = (target - (cum - tie_mass(&vals, k))).abs();
            return Ok(EEEstimate { eta: v, residual, iterations: k + 1 });
        }
    }
    Err(Error::NoSolution("cumulative weight never reaches the quantile level".into()))
}

fn tie_mass(vals: &[(f64, f64)], k: usize) -> f64 {
    let v = vals[k].0;
    vals[..=k].iter().rev().take_while(|x| x.0 == v).map(|x| x.1).sum()
}

/// Solves the complete-data equation `Σ_i w_i U(η; y_i) = 0`.
pub fn solve_complete(data: &SurveyDataset, u: &EstimatingFunction) -> Result<EEEstimate> {
    let needed = u.referenced_items();
    let mut filled = Vec::with_capacity(data.len());
    for unit in data.units() {
        if needed.iter().any(|&j| !unit.responded(j)) {
            return Err(Error::Contract(format!(
                "unit {} is missing an item the estimating function reads",
                unit.id
            )));
        }
        filled.push((unit.weight, unit.filled(f64::NAN)));
    }
    let points: Vec<(f64, &[f64])> = filled.iter().map(|(w, y)| (*w, y.as_slice())).collect();
    solve_points(&points, u)
}

/// Solves the imputed equation `Σ_i w_i Σ_j w*_ij U(η; y*_ij) = 0`.
pub fn solve_fractional(fdata: &FractionalDataset, u: &EstimatingFunction) -> Result<EEEstimate> {
    let w = fdata.analysis_weights();
    let points: Vec<(f64, &[f64])> = fdata
        .rows()
        .iter()
        .zip(&w)
        .map(|(r, &c)| (c, r.values.as_slice()))
        .collect();
    solve_points(&points, u)
}

/// Solves several separable targets over the same imputed data.
pub fn solve_fractional_many(fdata: &FractionalDataset, us: &[EstimatingFunction]) -> Result<Vec<EEEstimate>> {
    us.iter().map(|u| solve_fractional(fdata, u)).collect()
}
