//! Parametric models `f(y; θ)` with analytic scores, weighted pseudo
//! maximum likelihood, and conditional samplers for the missing part.
//!
//! Variances are carried as `log σ²` so unconstrained Newton steps keep them
//! positive. Covariates are items of the same record that the model
//! conditions on; their marginal law is never modelled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FractionalDataset, SurveyDataset};
use crate::error::{Error, Result};
use crate::linalg::solve_symmetric;
use crate::rng::StreamRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A joint (conditional-on-covariates) model for one record.
pub trait ParametricModel: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    /// Items the model treats as random; only these may be imputed.
    fn modelled_items(&self) -> Vec<usize>;
    /// Items the model conditions on; they must be observed.
    fn covariate_items(&self) -> Vec<usize>;

    fn log_density(&self, y: &[f64], theta: &[f64]) -> f64;
    /// ∂ log f / ∂θ written into `out` (length `dim`).
    fn score(&self, y: &[f64], theta: &[f64], out: &mut [f64]);
    /// ∂S/∂θᵀ written row-major into `out` (length `dim²`).
    fn score_jacobian(&self, y: &[f64], theta: &[f64], out: &mut [f64]);

    /// `m` completed records drawn from `f(y_mis | y_obs; θ)`.
    fn sample_missing(
        &self,
        values: &[Option<f64>],
        theta: &[f64],
        m: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<Vec<f64>>>;

    /// Normalized `log f(y_mis | y_obs; θ)`, where available.
    fn conditional_log_density(&self, _completed: &[f64], _observed: &[bool], _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Mean and standard deviation of a single missing modelled item.
    fn conditional_moments(&self, _values: &[Option<f64>], _theta: &[f64]) -> Option<(f64, f64)> {
        None
    }

    /// Closed-form maximizer of `Σ c log f(y; θ)`, where one exists.
    fn weighted_mle(&self, _points: &[(f64, &[f64])]) -> Option<Result<Vec<f64>>> {
        None
    }

    /// Starting value for Newton iterations.
    fn start(&self, _points: &[(f64, &[f64])]) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// True when Newton iterates are running off to infinity (e.g. logistic
    /// separation).
    fn diverging(&self, _points: &[(f64, &[f64])], _theta: &[f64]) -> bool {
        false
    }
}

pub fn score_vector(model: &dyn ParametricModel, y: &[f64], theta: &[f64]) -> DVector<f64> {
    let mut out = vec![0.0; model.dim()];
    model.score(y, theta, &mut out);
    DVector::from_vec(out)
}

pub fn jacobian_matrix(model: &dyn ParametricModel, y: &[f64], theta: &[f64]) -> DMatrix<f64> {
    let p = model.dim();
    let mut out = vec![0.0; p * p];
    model.score_jacobian(y, theta, &mut out);
    DMatrix::from_row_slice(p, p, &out)
}

/// `Σ c S(θ; y)` and `Σ c Ṡ(θ; y)` over weighted points.
pub fn weighted_score_and_jacobian(
    model: &dyn ParametricModel,
    points: &[(f64, &[f64])],
    theta: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let p = model.dim();
    let mut s = vec![0.0; p];
    let mut j = vec![0.0; p * p];
    let mut sb = vec![0.0; p];
    let mut jb = vec![0.0; p * p];
    for &(c, y) in points {
        if c == 0.0 {
            continue;
        }
        model.score(y, theta, &mut sb);
        model.score_jacobian(y, theta, &mut jb);
        for k in 0..p {
            s[k] += c * sb[k];
        }
        for k in 0..p * p {
            j[k] += c * jb[k];
        }
    }
    (DVector::from_vec(s), DMatrix::from_row_slice(p, p, &j))
}

fn weighted_loglik(model: &dyn ParametricModel, points: &[(f64, &[f64])], theta: &[f64]) -> f64 {
    points
        .iter()
        .filter(|(c, _)| *c != 0.0)
        .map(|(c, y)| c * model.log_density(y, theta))
        .sum()
}

pub const MLE_TOL: f64 = 1e-10;
pub const MLE_MAX_ITER: usize = 200;

/// Newton's method with step-halving on `Σ c log f`, converging when
/// `‖Σ c S‖∞ ≤ 1e-10 Σ|c|`. Non-concave regions get a Levenberg shift.
pub fn newton_mle(model: &dyn ParametricModel, points: &[(f64, &[f64])], start: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = points.iter().map(|(c, _)| c.abs()).sum();
    if total == 0.0 {
        return Err(Error::Identifiability("no weighted observations".into()));
    }
    let names = model.param_names();
    let p = model.dim();
    let mut theta = start.to_vec();
    let mut ll = weighted_loglik(model, points, &theta);
    let mut grad_norm = f64::INFINITY;
    for iter in 0..MLE_MAX_ITER {
        let (s, h) = weighted_score_and_jacobian(model, points, &theta);
        grad_norm = s.amax();
        if grad_norm <= MLE_TOL * total {
            return Ok(theta);
        }
        if model.diverging(points, &theta) {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: grad_norm / total,
            });
        }
        // ascent direction from -H (+ λI when -H is not positive definite)
        let neg_h = -h;
        let mut lambda = 0.0;
        let dir = loop {
            let mut m = neg_h.clone();
            for k in 0..p {
                m[(k, k)] += lambda;
            }
            if let Some(ch) = m.clone().cholesky() {
                break ch.solve(&s);
            }
            if lambda > 1e12 * neg_h.amax().max(1.0) {
                // Report the flat direction of the information matrix.
                solve_symmetric(&neg_h, &s, &names)?;
                return Err(Error::Singular("information matrix is not positive definite".into()));
            }
            lambda = if lambda == 0.0 { 1e-8 * neg_h.amax().max(1e-8) } else { lambda * 10.0 };
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            let tl = weighted_loglik(model, points, &trial);
            if tl.is_finite() && tl >= ll - 1e-12 * ll.abs().max(1.0) {
                theta = trial;
                ll = tl;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let (s, _) = weighted_score_and_jacobian(model, points, &theta);
    grad_norm = grad_norm.min(s.amax());
    if s.amax() <= 1e-8 * total {
        return Ok(theta);
    }
    Err(Error::NonConvergence {
        iterations: MLE_MAX_ITER,
        residual: grad_norm / total,
    })
}

/// Weighted pseudo-MLE: closed form when the model has one, else Newton.
pub fn fit_weighted(model: &dyn ParametricModel, points: &[(f64, &[f64])]) -> Result<Vec<f64>> {
    let points: Vec<(f64, &[f64])> = points.iter().copied().filter(|(c, _)| *c != 0.0).collect();
    match model.weighted_mle(&points) {
        Some(r) => r,
        None => {
            let start = model.start(&points);
            newton_mle(model, &points, &start)
        }
    }
}

fn referenced_items(model: &dyn ParametricModel) -> Vec<usize> {
    let mut v = model.modelled_items();
    v.extend(model.covariate_items());
    v
}

/// Solves `Σ_i w_i S(θ; y_i) = 0` on a sample whose referenced items are
/// fully observed.
pub fn pseudo_mle(data: &SurveyDataset, model: &dyn ParametricModel) -> Result<Vec<f64>> {
    let needed = referenced_items(model);
    let mut filled = Vec::with_capacity(data.len());
    for u in data.units() {
        if needed.iter().any(|&j| !u.responded(j)) {
            return Err(Error::Contract(format!("unit {} is missing a modelled item", u.id)));
        }
        filled.push((u.weight, u.filled(0.0)));
    }
    let points: Vec<(f64, &[f64])> = filled.iter().map(|(w, y)| (*w, y.as_slice())).collect();
    fit_weighted(model, &points)
}

/// `Σ_i w_i Σ_j w*_ij S(θ; y*_ij)`.
pub fn imputed_mean_score(fdata: &FractionalDataset, model: &dyn ParametricModel, theta: &[f64]) -> Result<DVector<f64>> {
    if theta.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: theta.len(),
        });
    }
    let p = model.dim();
    let mut total = vec![0.0; p];
    let mut buf = vec![0.0; p];
    for r in fdata.rows() {
        let c = fdata.base().unit(r.unit).weight * r.weight;
        if c == 0.0 {
            continue;
        }
        model.score(&r.values, theta, &mut buf);
        for k in 0..p {
            total[k] += c * buf[k];
        }
    }
    Ok(DVector::from_vec(total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Bernoulli,
}

/// Linear-predictor model for one item given others:
/// `N(β₀ + βᵀx, σ²)` or `Bernoulli(logit⁻¹(β₀ + βᵀx))`.
/// Parameters: intercept, slopes, then `log σ²` for the normal family.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearComponent {
    pub family: Family,
    pub target: usize,
    pub covariates: Vec<usize>,
}

impl LinearComponent {
    pub fn new(family: Family, target: usize, covariates: Vec<usize>) -> Self {
        LinearComponent {
            family,
            target,
            covariates,
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.covariates.len() + usize::from(self.family == Family::Normal)
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        let mut v = vec![format!("{prefix}intercept")];
        v.extend(self.covariates.iter().map(|c| format!("{prefix}slope[{c}]")));
        if self.family == Family::Normal {
            v.push(format!("{prefix}log_sigma2"));
        }
        v
    }

    #[inline]
    fn design(&self, y: &[f64], k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            y[self.covariates[k - 1]]
        }
    }

    #[inline]
    pub fn linear_predictor(&self, y: &[f64], theta: &[f64]) -> f64 {
        let mut eta = theta[0];
        for (k, &c) in self.covariates.iter().enumerate() {
            eta += theta[k + 1] * y[c];
        }
        eta
    }

    #[inline]
    pub fn log_density(&self, y: &[f64], theta: &[f64]) -> f64 {
        let eta = self.linear_predictor(y, theta);
        let t = y[self.target];
        match self.family {
            Family::Normal => {
                let s = theta[self.covariates.len() + 1];
                let r = t - eta;
                -0.5 * (LN_2PI + s) - 0.5 * r * r * (-s).exp()
            }
            Family::Bernoulli => {
                if t == 1.0 {
                    -softplus(-eta)
                } else if t == 0.0 {
                    -softplus(eta)
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn score(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        let eta = self.linear_predictor(y, theta);
        let t = y[self.target];
        let q = self.covariates.len() + 1;
        match self.family {
            Family::Normal => {
                let inv = (-theta[q]).exp();
                let r = t - eta;
                for k in 0..q {
                    out[k] = r * inv * self.design(y, k);
                }
                out[q] = -0.5 + 0.5 * r * r * inv;
            }
            Family::Bernoulli => {
                let r = t - logistic(eta);
                for k in 0..q {
                    out[k] = r * self.design(y, k);
                }
            }
        }
    }

    /// Writes the component Jacobian into the `dim × dim` block of a
    /// row-major matrix with leading dimension `ld`, starting at `off`.
    pub fn jacobian_block(&self, y: &[f64], theta: &[f64], out: &mut [f64], ld: usize, off: usize) {
        let eta = self.linear_predictor(y, theta);
        let t = y[self.target];
        let q = self.covariates.len() + 1;
        let at = |a: usize, b: usize| (off + a) * ld + off + b;
        match self.family {
            Family::Normal => {
                let inv = (-theta[q]).exp();
                let r = t - eta;
                for a in 0..q {
                    let za = self.design(y, a);
                    for b in 0..q {
                        out[at(a, b)] = -za * self.design(y, b) * inv;
                    }
                    out[at(a, q)] = -r * za * inv;
                    out[at(q, a)] = -r * za * inv;
                }
                out[at(q, q)] = -0.5 * r * r * inv;
            }
            Family::Bernoulli => {
                let pr = logistic(eta);
                let v = pr * (1.0 - pr);
                for a in 0..q {
                    let za = self.design(y, a);
                    for b in 0..q {
                        out[at(a, b)] = -v * za * self.design(y, b);
                    }
                }
            }
        }
    }

    pub fn sample(&self, y: &[f64], theta: &[f64], rng: &mut StreamRng) -> f64 {
        let eta = self.linear_predictor(y, theta);
        match self.family {
            Family::Normal => {
                let sd = (0.5 * theta[self.covariates.len() + 1]).exp();
                let z: f64 = StandardNormal.sample(rng);
                eta + sd * z
            }
            Family::Bernoulli => {
                if rng.random::<f64>() < logistic(eta) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Mean and standard deviation of the target.
    pub fn moments(&self, y: &[f64], theta: &[f64]) -> (f64, f64) {
        let eta = self.linear_predictor(y, theta);
        match self.family {
            Family::Normal => (eta, (0.5 * theta[self.covariates.len() + 1]).exp()),
            Family::Bernoulli => {
                let p = logistic(eta);
                (p, (p * (1.0 - p)).sqrt())
            }
        }
    }

    /// Weighted least squares for the normal family; `None` otherwise.
    pub fn closed_form(&self, points: &[(f64, &[f64])], names: &[String]) -> Option<Result<Vec<f64>>> {
        if self.family != Family::Normal {
            return None;
        }
        Some(weighted_least_squares(
            points.iter().map(|(c, y)| {
                let z: Vec<f64> = (0..=self.covariates.len()).map(|k| self.design(y, k)).collect();
                (*c, z, y[self.target])
            }),
            self.covariates.len() + 1,
            names,
        )
        .and_then(|(beta, sigma2)| {
            if sigma2 <= 0.0 {
                return Err(Error::Identifiability(
                    "residual variance is zero; the fit is exact".into(),
                ));
            }
            let mut v = beta;
            v.push(sigma2.ln());
            Ok(v)
        }))
    }

    fn diverging(&self, points: &[(f64, &[f64])], theta: &[f64]) -> bool {
        self.family == Family::Bernoulli
            && points
                .iter()
                .any(|(c, y)| *c != 0.0 && self.linear_predictor(y, theta).abs() > SEPARATION_LOGIT)
    }
}

/// Fitted logits beyond this magnitude are treated as separation.
pub const SEPARATION_LOGIT: f64 = 30.0;

/// `(β, σ̂²)` with `σ̂² = Σ c r² / Σ c`.
pub fn weighted_least_squares(
    rows: impl Iterator<Item = (f64, Vec<f64>, f64)>,
    q: usize,
    names: &[String],
) -> Result<(Vec<f64>, f64)> {
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    let mut cache = Vec::new();
    let mut total = 0.0;
    for (c, z, t) in rows {
        if c == 0.0 {
            continue;
        }
        for a in 0..q {
            xty[a] += c * z[a] * t;
            for b in 0..q {
                xtx[(a, b)] += c * z[a] * z[b];
            }
        }
        total += c;
        cache.push((c, z, t));
    }
    if total <= 0.0 {
        return Err(Error::Identifiability("no positive weight".into()));
    }
    let beta = solve_symmetric(&xtx, &xty, names)?;
    let rss: f64 = cache
        .iter()
        .map(|(c, z, t)| {
            let r = t - z.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
            c * r * r
        })
        .sum();
    Ok((beta.iter().copied().collect(), rss / total))
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// A single conditional regression `f(y | x; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub component: LinearComponent,
}

impl RegressionModel {
    pub fn normal(target: usize, covariates: Vec<usize>) -> Self {
        RegressionModel {
            component: LinearComponent::new(Family::Normal, target, covariates),
        }
    }

    /// Normal model for a single item with no covariates: `θ = (μ, log σ²)`.
    pub fn normal_mean(target: usize) -> Self {
        Self::normal(target, Vec::new())
    }

    pub fn logistic(target: usize, covariates: Vec<usize>) -> Self {
        RegressionModel {
            component: LinearComponent::new(Family::Bernoulli, target, covariates),
        }
    }
}

impl ParametricModel for RegressionModel {
    fn name(&self) -> String {
        match self.component.family {
            Family::Normal => "normal_regression".into(),
            Family::Bernoulli => "logistic_regression".into(),
        }
    }

    fn dim(&self) -> usize {
        self.component.dim()
    }

    fn param_names(&self) -> Vec<String> {
        self.component.names("")
    }

    fn modelled_items(&self) -> Vec<usize> {
        vec![self.component.target]
    }

    fn covariate_items(&self) -> Vec<usize> {
        self.component.covariates.clone()
    }

    fn log_density(&self, y: &[f64], theta: &[f64]) -> f64 {
        self.component.log_density(y, theta)
    }

    fn score(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.component.score(y, theta, out)
    }

    fn score_jacobian(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.component.jacobian_block(y, theta, out, self.dim(), 0)
    }

    fn sample_missing(&self, values: &[Option<f64>], theta: &[f64], m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        let c = &self.component;
        if values[c.target].is_some() {
            return Err(Error::Contract("target is observed; nothing to impute".into()));
        }
        if c.covariates.iter().any(|&k| values[k].is_none()) {
            return Err(Error::Contract("covariate missing; the regression cannot impute it".into()));
        }
        let base: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        Ok((0..m)
            .map(|_| {
                let mut y = base.clone();
                y[c.target] = c.sample(&base, theta, rng);
                y
            })
            .collect())
    }

    fn conditional_log_density(&self, completed: &[f64], observed: &[bool], theta: &[f64]) -> Option<f64> {
        if observed[self.component.target] {
            return Some(0.0);
        }
        Some(self.component.log_density(completed, theta))
    }

    fn conditional_moments(&self, values: &[Option<f64>], theta: &[f64]) -> Option<(f64, f64)> {
        let c = &self.component;
        if values[c.target].is_some() || c.covariates.iter().any(|&k| values[k].is_none()) {
            return None;
        }
        let y: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        Some(c.moments(&y, theta))
    }

    fn weighted_mle(&self, points: &[(f64, &[f64])]) -> Option<Result<Vec<f64>>> {
        self.component.closed_form(points, &self.param_names())
    }

    fn diverging(&self, points: &[(f64, &[f64])], theta: &[f64]) -> bool {
        self.component.diverging(points, theta)
    }
}

/// `log y_hi = β0h + β1h log x_hi + ε`, `ε ~ N(0, σ²_h)`, stratum-specific
/// parameters laid out `[β0h, β1h, log σ²h]` for h = 0..H.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedLogNormalRegression {
    /// Categorical item holding the stratum code 0..H.
    pub stratum: usize,
    pub x: usize,
    pub y: usize,
    pub strata: usize,
}

impl StratifiedLogNormalRegression {
    pub fn new(stratum: usize, x: usize, y: usize, strata: usize) -> Self {
        StratifiedLogNormalRegression { stratum, x, y, strata }
    }

    #[inline]
    fn block(&self, rec: &[f64]) -> usize {
        rec[self.stratum] as usize
    }

    #[inline]
    fn residual(&self, rec: &[f64], theta: &[f64]) -> (usize, f64, f64) {
        let h = self.block(rec);
        let lx = rec[self.x].ln();
        let r = rec[self.y].ln() - theta[3 * h] - theta[3 * h + 1] * lx;
        (h, lx, r)
    }

    /// Conditional mean and variance of `log y`.
    pub fn log_moments(&self, rec: &[f64], theta: &[f64]) -> (f64, f64) {
        let h = self.block(rec);
        (
            theta[3 * h] + theta[3 * h + 1] * rec[self.x].ln(),
            theta[3 * h + 2].exp(),
        )
    }
}

impl ParametricModel for StratifiedLogNormalRegression {
    fn name(&self) -> String {
        "stratified_lognormal_regression".into()
    }

    fn dim(&self) -> usize {
        3 * self.strata
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.strata)
            .flat_map(|h| [format!("beta0[{h}]"), format!("beta1[{h}]"), format!("log_sigma2[{h}]")])
            .collect()
    }

    fn modelled_items(&self) -> Vec<usize> {
        vec![self.y]
    }

    fn covariate_items(&self) -> Vec<usize> {
        vec![self.stratum, self.x]
    }

    fn log_density(&self, rec: &[f64], theta: &[f64]) -> f64 {
        let yv = rec[self.y];
        if yv <= 0.0 || rec[self.x] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let (h, _, r) = self.residual(rec, theta);
        let s = theta[3 * h + 2];
        -yv.ln() - 0.5 * (LN_2PI + s) - 0.5 * r * r * (-s).exp()
    }

    fn score(&self, rec: &[f64], theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (h, lx, r) = self.residual(rec, theta);
        let inv = (-theta[3 * h + 2]).exp();
        out[3 * h] = r * inv;
        out[3 * h + 1] = r * lx * inv;
        out[3 * h + 2] = -0.5 + 0.5 * r * r * inv;
    }

    fn score_jacobian(&self, rec: &[f64], theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.dim();
        let (h, lx, r) = self.residual(rec, theta);
        let inv = (-theta[3 * h + 2]).exp();
        let o = 3 * h;
        let z = [1.0, lx];
        for a in 0..2 {
            for b in 0..2 {
                out[(o + a) * p + o + b] = -z[a] * z[b] * inv;
            }
            out[(o + a) * p + o + 2] = -r * z[a] * inv;
            out[(o + 2) * p + o + a] = -r * z[a] * inv;
        }
        out[(o + 2) * p + o + 2] = -0.5 * r * r * inv;
    }

    fn sample_missing(&self, values: &[Option<f64>], theta: &[f64], m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        if values[self.y].is_some() {
            return Err(Error::Contract("y is observed; nothing to impute".into()));
        }
        let (Some(_), Some(x)) = (values[self.stratum], values[self.x]) else {
            return Err(Error::Contract("stratum and x must be observed".into()));
        };
        if x <= 0.0 {
            return Err(Error::Contract(format!("x = {x} must be positive")));
        }
        let base: Vec<f64> = values.iter().map(|v| v.unwrap_or(1.0)).collect();
        let (mu, var) = self.log_moments(&base, theta);
        let sd = var.sqrt();
        Ok((0..m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                let mut y = base.clone();
                y[self.y] = (mu + sd * z).exp();
                y
            })
            .collect())
    }

    fn conditional_log_density(&self, completed: &[f64], observed: &[bool], theta: &[f64]) -> Option<f64> {
        if observed[self.y] {
            return Some(0.0);
        }
        Some(self.log_density(completed, theta))
    }

    fn conditional_moments(&self, values: &[Option<f64>], theta: &[f64]) -> Option<(f64, f64)> {
        if values[self.y].is_some() {
            return None;
        }
        let base: Vec<f64> = values.iter().map(|v| v.unwrap_or(1.0)).collect();
        let (mu, var) = self.log_moments(&base, theta);
        let mean = (mu + 0.5 * var).exp();
        Some((mean, mean * var.exp_m1().sqrt()))
    }

    fn weighted_mle(&self, points: &[(f64, &[f64])]) -> Option<Result<Vec<f64>>> {
        let names = self.param_names();
        let mut theta = vec![0.0; self.dim()];
        for h in 0..self.strata {
            let rows = points
                .iter()
                .filter(|(_, rec)| self.block(rec) == h)
                .map(|(c, rec)| (*c, vec![1.0, rec[self.x].ln()], rec[self.y].ln()));
            let fit = weighted_least_squares(rows, 2, &names[3 * h..3 * h + 2]);
            match fit {
                Ok((beta, s2)) if s2 > 0.0 => {
                    theta[3 * h] = beta[0];
                    theta[3 * h + 1] = beta[1];
                    theta[3 * h + 2] = s2.ln();
                }
                Ok(_) => {
                    return Some(Err(Error::Identifiability(format!(
                        "stratum {h}: residual variance is zero"
                    ))))
                }
                Err(Error::Identifiability(_)) => {
                    return Some(Err(Error::Identifiability(format!("stratum {h} has no observations"))))
                }
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(theta))
    }
}

/// `f(y1, y2 | x) = f1(y1 | x; θ1) f2(y2 | x, y1; θ2)` with `θ = (θ1, θ2)`.
/// The marginal of `x` is deliberately left unmodelled.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateSequentialModel {
    pub x: Vec<usize>,
    pub y1: usize,
    pub y2: usize,
    pub f1: LinearComponent,
    pub f2: LinearComponent,
    /// Pool size for sampling-importance-resampling of `y1 | x, y2`.
    pub sir_pool: usize,
}

pub const DEFAULT_SIR_POOL: usize = 100;

impl BivariateSequentialModel {
    pub fn new(x: Vec<usize>, y1: usize, y2: usize, family1: Family, family2: Family) -> Self {
        let mut cov2 = x.clone();
        cov2.push(y1);
        BivariateSequentialModel {
            f1: LinearComponent::new(family1, y1, x.clone()),
            f2: LinearComponent::new(family2, y2, cov2),
            x,
            y1,
            y2,
            sir_pool: DEFAULT_SIR_POOL,
        }
    }

    pub fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        theta.split_at(self.f1.dim())
    }

    /// `m` independent SIR draws of `y1` given `x` and `y2`: each draws a
    /// pool of `b` from `f1`, then keeps one with probability ∝ `f2`.
    pub fn sir_draws(&self, base: &[f64], theta: &[f64], b: usize, m: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if b == 0 {
            return Err(Error::Contract("SIR pool size must be at least 1".into()));
        }
        let (t1, t2) = self.split(theta);
        let mut rec = base.to_vec();
        let mut pool = vec![0.0; b];
        let mut logw = vec![0.0; b];
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            for k in 0..b {
                pool[k] = self.f1.sample(base, t1, rng);
                rec[self.y1] = pool[k];
                logw[k] = self.f2.log_density(&rec, t2);
            }
            let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::Sampler {
                    unit: String::new(),
                    message: "all SIR pool weights are zero".into(),
                });
            }
            let total: f64 = logw.iter().map(|l| (l - mx).exp()).sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = b - 1;
            for k in 0..b {
                acc += (logw[k] - mx).exp();
                if u < acc {
                    pick = k;
                    break;
                }
            }
            out.push(pool[pick]);
        }
        Ok(out)
    }
}

impl ParametricModel for BivariateSequentialModel {
    fn name(&self) -> String {
        "bivariate_sequential".into()
    }

    fn dim(&self) -> usize {
        self.f1.dim() + self.f2.dim()
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = self.f1.names("f1.");
        v.extend(self.f2.names("f2."));
        v
    }

    fn modelled_items(&self) -> Vec<usize> {
        vec![self.y1, self.y2]
    }

    fn covariate_items(&self) -> Vec<usize> {
        self.x.clone()
    }

    fn log_density(&self, y: &[f64], theta: &[f64]) -> f64 {
        let (t1, t2) = self.split(theta);
        self.f1.log_density(y, t1) + self.f2.log_density(y, t2)
    }

    fn score(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        let (t1, t2) = self.split(theta);
        let (o1, o2) = out.split_at_mut(self.f1.dim());
        self.f1.score(y, t1, o1);
        self.f2.score(y, t2, o2);
    }

    fn score_jacobian(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (t1, t2) = self.split(theta);
        let p = self.dim();
        self.f1.jacobian_block(y, t1, out, p, 0);
        self.f2.jacobian_block(y, t2, out, p, self.f1.dim());
    }

    fn sample_missing(&self, values: &[Option<f64>], theta: &[f64], m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        if self.x.iter().any(|&k| values[k].is_none()) {
            return Err(Error::Contract("covariates must be observed".into()));
        }
        let (t1, t2) = self.split(theta);
        let base: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        match (values[self.y1].is_some(), values[self.y2].is_some()) {
            (true, true) => Err(Error::Contract("no missing item to impute".into())),
            (true, false) => Ok((0..m)
                .map(|_| {
                    let mut y = base.clone();
                    y[self.y2] = self.f2.sample(&base, t2, rng);
                    y
                })
                .collect()),
            (false, true) => {
                let draws = self.sir_draws(&base, theta, self.sir_pool, m, rng)?;
                Ok(draws
                    .into_iter()
                    .map(|d| {
                        let mut y = base.clone();
                        y[self.y1] = d;
                        y
                    })
                    .collect())
            }
            (false, false) => Ok((0..m)
                .map(|_| {
                    let mut y = base.clone();
                    y[self.y1] = self.f1.sample(&y, t1, rng);
                    y[self.y2] = self.f2.sample(&y, t2, rng);
                    y
                })
                .collect()),
        }
    }

    fn weighted_mle(&self, points: &[(f64, &[f64])]) -> Option<Result<Vec<f64>>> {
        let fit = |c: &LinearComponent, prefix: &str| -> Result<Vec<f64>> {
            let model = RegressionModel { component: c.clone() };
            match c.closed_form(points, &c.names(prefix)) {
                Some(r) => r,
                None => newton_mle(&model, points, &vec![0.0; c.dim()]),
            }
        };
        Some(fit(&self.f1, "f1.").and_then(|mut a| {
            a.extend(fit(&self.f2, "f2.")?);
            Ok(a)
        }))
    }

    fn diverging(&self, points: &[(f64, &[f64])], theta: &[f64]) -> bool {
        let (t1, t2) = self.split(theta);
        self.f1.diverging(points, t1) || self.f2.diverging(points, t2)
    }
}

/// Initial `(θ1, θ2)` from the complete cases (pattern `11`).
pub fn fit_conditional_components(data: &SurveyDataset, model: &BivariateSequentialModel) -> Result<Vec<f64>> {
    let mut filled = Vec::new();
    for u in data.units() {
        if u.responded(model.y1) && u.responded(model.y2) && model.x.iter().all(|&k| u.responded(k)) {
            filled.push((u.weight, u.filled(0.0)));
        }
    }
    let min = model.f1.dim().max(model.f2.dim());
    if filled.len() < min {
        return Err(Error::Identifiability(format!(
            "{} complete cases; at least {min} needed to fit the components",
            filled.len()
        )));
    }
    let points: Vec<(f64, &[f64])> = filled.iter().map(|(w, y)| (*w, y.as_slice())).collect();
    fit_weighted(model, &points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateTransform {
    Identity,
    Log,
}

/// Logistic response propensity `P(δ = 1 | x) = logit⁻¹(φ₀ + φᵀ g(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticPropensity {
    pub covariates: Vec<(usize, CovariateTransform)>,
    pub phi: Vec<f64>,
}

impl LogisticPropensity {
    pub fn design(&self, values: &[Option<f64>]) -> Option<Vec<f64>> {
        let mut z = Vec::with_capacity(self.covariates.len() + 1);
        z.push(1.0);
        for &(k, t) in &self.covariates {
            let v = values[k]?;
            z.push(match t {
                CovariateTransform::Identity => v,
                CovariateTransform::Log => v.ln(),
            });
        }
        Some(z)
    }

    pub fn probability(&self, values: &[Option<f64>]) -> Option<f64> {
        let z = self.design(values)?;
        Some(logistic(z.iter().zip(&self.phi).map(|(a, b)| a * b).sum()))
    }

    /// Weighted logistic pseudo-MLE of `δ` (response to `item`) on the
    /// covariates.
    pub fn fit(data: &SurveyDataset, item: usize, covariates: Vec<(usize, CovariateTransform)>) -> Result<Self> {
        let mut rows = Vec::with_capacity(data.len());
        let shell = LogisticPropensity {
            covariates,
            phi: Vec::new(),
        };
        for u in data.units() {
            let z = shell
                .design(&u.values)
                .ok_or_else(|| Error::Contract(format!("unit {} is missing a propensity covariate", u.id)))?;
            let mut rec = vec![if u.responded(item) { 1.0 } else { 0.0 }];
            rec.extend(z.into_iter().skip(1));
            rows.push((u.weight, rec));
        }
        let responders = rows.iter().filter(|r| r.1[0] == 1.0).count();
        if responders == 0 || responders == rows.len() {
            return Err(Error::Validation("propensity needs both respondents and nonrespondents".into()));
        }
        let model = RegressionModel::logistic(0, (1..=shell.covariates.len()).collect());
        let points: Vec<(f64, &[f64])> = rows.iter().map(|(w, r)| (*w, r.as_slice())).collect();
        let phi = newton_mle(&model, &points, &vec![0.0; model.dim()])?;
        Ok(LogisticPropensity { phi, ..shell })
    }
}

/// Model parameters as named reals, for export and warm starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterFile {
    pub model: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ParameterFile {
    pub fn new(model: &dyn ParametricModel, theta: &[f64]) -> Self {
        ParameterFile {
            model: model.name(),
            names: model.param_names(),
            values: theta.to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Parameter vector, checked against `model`'s layout.
    pub fn theta_for(&self, model: &dyn ParametricModel) -> Result<Vec<f64>> {
        if self.model != model.name() || self.names != model.param_names() {
            return Err(Error::Validation(format!(
                "parameter file for {} does not match model {}",
                self.model,
                model.name()
            )));
        }
        Ok(self.values.clone())
    }
}

/// Finite-difference gradient helper shared by the model tests.
#[cfg(test)]
pub(crate) fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let mut a = theta.to_vec();
            let mut b = theta.to_vec();
            a[k] += h;
            b[k] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Item, UnitRecord};
    use crate::linalg::max_abs;
    use rand::Rng;
    use crate::rng::{domain, substream};
    use proptest::prelude::*;

    fn check_derivatives(model: &dyn ParametricModel, y: &[f64], theta: &[f64]) {
        let mut s = vec![0.0; model.dim()];
        model.score(y, theta, &mut s);
        let fd = fd_gradient(|t| model.log_density(y, t), theta);
        let tol = 1e-6 * (1.0 + max_abs(&s));
        for (a, b) in s.iter().zip(&fd) {
            assert!((a - b).abs() < tol, "score {s:?} vs fd {fd:?}");
        }
        let j = jacobian_matrix(model, y, theta);
        for k in 0..model.dim() {
            let col = fd_gradient(
                |t| {
                    let mut o = vec![0.0; model.dim()];
                    model.score(y, t, &mut o);
                    o[k]
                },
                theta,
            );
            for (l, v) in col.iter().enumerate() {
                assert!((j[(k, l)] - v).abs() < 1e-6 * (1.0 + j.amax()), "jacobian ({k},{l})");
            }
        }
    }

    proptest! {
        #[test]
        fn regression_derivatives(x in -3f64..3.0, y in -5f64..5.0, b0 in -2f64..2.0, b1 in -2f64..2.0, s in -1f64..1.0) {
            check_derivatives(&RegressionModel::normal(1, vec![0]), &[x, y], &[b0, b1, s]);
            let t = if y > 0.0 { 1.0 } else { 0.0 };
            check_derivatives(&RegressionModel::logistic(1, vec![0]), &[x, t], &[b0, b1]);
        }

        #[test]
        fn lognormal_derivatives(h in 0usize..3, x in 0.5f64..50.0, y in 0.1f64..100.0, th in proptest::collection::vec(-1f64..1.0, 9)) {
            let m = StratifiedLogNormalRegression::new(0, 1, 2, 3);
            check_derivatives(&m, &[h as f64, x, y], &th);
        }

        #[test]
        fn bivariate_derivatives(x in -2f64..2.0, y1 in -2f64..2.0, y2 in 0u8..2, th in proptest::collection::vec(-1f64..1.0, 6)) {
            let m = BivariateSequentialModel::new(vec![0], 1, 2, Family::Normal, Family::Bernoulli);
            check_derivatives(&m, &[x, y1, y2 as f64], &th);
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let m = RegressionModel::normal_mean(0);
        let theta = [0.7, (1.3f64).powi(2).ln()];
        let (a, b, n) = (-12.0, 13.0, 20_000);
        let h = (b - a) / n as f64;
        let integral: f64 = (0..=n)
            .map(|k| {
                let x = a + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * m.log_density(&[x], &theta).exp()
            })
            .sum::<f64>()
            * h;
        assert!((integral - 1.0).abs() < 1e-8);
        let ln = StratifiedLogNormalRegression::new(0, 1, 2, 1);
        let th = [0.2, 0.5, (0.4f64).ln()];
        let (a, b, n) = (1e-6, 80.0, 400_000);
        let h = (b - a) / n as f64;
        let integral: f64 = (0..n)
            .map(|k| ln.log_density(&[0.0, 2.0, a + (k as f64 + 0.5) * h], &th).exp())
            .sum::<f64>()
            * h;
        assert!((integral - 1.0).abs() < 1e-5, "{integral}");
    }

    fn sample(w: &[f64], rows: &[[f64; 2]]) -> SurveyDataset {
        let units = rows
            .iter()
            .zip(w)
            .enumerate()
            .map(|(i, (r, &w))| UnitRecord::new(i.to_string(), w, vec![Some(r[0]), Some(r[1])]))
            .collect();
        SurveyDataset::new(vec![Item::continuous("x"), Item::continuous("y")], units, None).unwrap()
    }

    #[test]
    fn normal_mean_equals_sample_mean() {
        let d = sample(&[1.0; 4], &[[0.0, 1.0], [0.0, 2.0], [0.0, 4.0], [0.0, 9.0]]);
        let th = pseudo_mle(&d, &RegressionModel::normal_mean(1)).unwrap();
        assert!((th[0] - 4.0).abs() < 1e-12);
        let var: f64 = [1.0f64, 2.0, 4.0, 9.0].iter().map(|y| (y - 4.0).powi(2)).sum::<f64>() / 4.0;
        assert!((th[1] - var.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_regression_matches_normal_equations() {
        let w = [1.0, 2.0, 0.5, 3.0, 1.5];
        let rows = [[0.0, 1.0], [1.0, 2.9], [2.0, 5.2], [3.0, 6.8], [4.0, 9.4]];
        let d = sample(&w, &rows);
        let model = RegressionModel::normal(1, vec![0]);
        let th = pseudo_mle(&d, &model).unwrap();
        // 2x2 normal equations by hand
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (r, c) in rows.iter().zip(&w) {
            s0 += c;
            s1 += c * r[0];
            s2 += c * r[0] * r[0];
            t0 += c * r[1];
            t1 += c * r[0] * r[1];
        }
        let det = s0 * s2 - s1 * s1;
        let b0 = (s2 * t0 - s1 * t1) / det;
        let b1 = (s0 * t1 - s1 * t0) / det;
        assert!((th[0] - b0).abs() < 1e-10 && (th[1] - b1).abs() < 1e-10);
        // Newton from a remote start agrees with the closed form
        let filled: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        let pts: Vec<(f64, &[f64])> = w.iter().zip(&filled).map(|(c, y)| (*c, y.as_slice())).collect();
        let nt = newton_mle(&model, &pts, &[0.0, 0.0, 0.0]).unwrap();
        for (a, b) in nt.iter().zip(&th) {
            assert!((a - b).abs() < 1e-9, "{nt:?} vs {th:?}");
        }
    }

    #[test]
    fn separable_logistic_fails_to_converge() {
        let d = sample(&[1.0; 6], &[[-3.0, 0.0], [-2.0, 0.0], [-1.0, 0.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0]]);
        let err = pseudo_mle(&d, &RegressionModel::logistic(1, vec![0])).unwrap_err();
        assert_eq!(err.code(), "E_NONCONVERGENCE");
    }

    #[test]
    fn flat_information_is_named() {
        // x constant: intercept and slope are confounded
        let d = sample(&[1.0; 3], &[[2.0, 1.0], [2.0, 2.0], [2.0, 4.0]]);
        let err = pseudo_mle(&d, &RegressionModel::normal(1, vec![0])).unwrap_err();
        assert_eq!(err.code(), "E_SINGULAR");
        assert!(err.to_string().contains("slope"), "{err}");
    }

    #[test]
    fn components_fit_on_complete_cases_only() {
        let items = vec![Item::continuous("x"), Item::continuous("y1"), Item::continuous("y2")];
        let mut units = Vec::new();
        let mut rng = substream(3, domain::SAMPLE, 0);
        let mut complete = Vec::new();
        for i in 0..60 {
            let x: f64 = rng.random::<f64>() * 4.0;
            let y1 = 1.0 + 0.5 * x + rng.random::<f64>();
            let y2 = -1.0 + y1 - 0.3 * x + rng.random::<f64>();
            let w = 1.0 + (i % 3) as f64;
            let (o1, o2) = match i % 4 {
                0 => (None, Some(y2)),
                1 => (Some(y1), None),
                _ => (Some(y1), Some(y2)),
            };
            if o1.is_some() && o2.is_some() {
                complete.push((w, [x, y1, y2]));
            }
            units.push(UnitRecord::new(i.to_string(), w, vec![Some(x), o1, o2]));
        }
        let d = SurveyDataset::new(items.clone(), units, None).unwrap();
        let m = BivariateSequentialModel::new(vec![0], 1, 2, Family::Normal, Family::Normal);
        let th = fit_conditional_components(&d, &m).unwrap();
        let (b1, _) = weighted_least_squares(
            complete.iter().map(|(w, r)| (*w, vec![1.0, r[0]], r[1])),
            2,
            &[],
        )
        .unwrap();
        let (b2, _) = weighted_least_squares(
            complete.iter().map(|(w, r)| (*w, vec![1.0, r[0], r[1]], r[2])),
            3,
            &[],
        )
        .unwrap();
        assert!((th[0] - b1[0]).abs() < 1e-10 && (th[1] - b1[1]).abs() < 1e-10);
        assert!((th[3] - b2[0]).abs() < 1e-10 && (th[5] - b2[2]).abs() < 1e-10);

        let none = SurveyDataset::new(
            items,
            vec![UnitRecord::new("a", 1.0, vec![Some(1.0), None, Some(2.0)])],
            None,
        )
        .unwrap();
        assert_eq!(fit_conditional_components(&none, &m).unwrap_err().code(), "E_IDENTIFIABILITY");
    }

    #[test]
    fn parameter_file_round_trip() {
        let m = StratifiedLogNormalRegression::new(0, 1, 2, 2);
        let theta = vec![0.1, 0.2, -0.3, 1.0, 0.5, -1.25];
        let pf = ParameterFile::new(&m, &theta);
        let back = ParameterFile::from_json(&pf.to_json().unwrap()).unwrap();
        assert_eq!(back.theta_for(&m).unwrap(), theta);
        assert!(back.theta_for(&RegressionModel::normal_mean(0)).is_err());
    }

    #[test]
    fn conditional_sampler_moments() {
        let m = RegressionModel::normal(1, vec![0]);
        let theta = [1.0, 2.0, (0.25f64).ln()];
        let mut rng = substream(11, domain::IMPUTATION, 0);
        let draws = m.sample_missing(&[Some(1.5), None], &theta, 100_000, &mut rng).unwrap();
        let n = draws.len() as f64;
        let mean = draws.iter().map(|d| d[1]).sum::<f64>() / n;
        let var = draws.iter().map(|d| (d[1] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // analytic: mean 4, variance 0.25
        assert!((mean - 4.0).abs() < 4.0 * (0.25 / n).sqrt());
        assert!((var - 0.25).abs() < 4.0 * 0.25 * (2.0 / n).sqrt());
    }
}
