//! Nonparametric and semiparametric fractional imputation for a scalar
//! item `y` with fully observed covariates: kernel weights over all
//! respondents, hot-deck donors reweighted under a parametric model, and
//! the doubly robust residual-donor scheme.

use rayon::prelude::*;

use crate::dataset::{FractionalDataset, FractionalRow, SurveyDataset};
use crate::error::{Error, Result};
use crate::estimating::{solve_fractional, EEEstimate, EstimatingFunction};
use crate::models::{weighted_least_squares, CovariateTransform, LogisticPropensity, ParametricModel};
use crate::pfi::{m_step, normalize_log_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * z * z).exp(),
            Kernel::Epanechnikov => (0.75 * (1.0 - z * z)).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// `0.9 min(sd, IQR/1.34) r^{-1/5}` on the respondents' covariate.
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
    /// Allow several covariates through a product kernel.
    pub product: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kernel: Kernel::Gaussian,
            bandwidth: Bandwidth::Silverman,
            product: false,
        }
    }
}

/// Silverman's rule of thumb, falling back to 1 for constant data.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 1.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return 1.0,
    };
    0.9 * spread * n.powf(-0.2)
}

fn respondents(data: &SurveyDataset, y: usize) -> (Vec<usize>, Vec<usize>) {
    (0..data.len()).partition(|&i| data.unit(i).responded(y))
}

fn check_covariates(data: &SurveyDataset, x: &[usize]) -> Result<()> {
    for u in data.units() {
        if x.iter().any(|&j| !u.responded(j)) {
            return Err(Error::Contract(format!("unit {} is missing a covariate", u.id)));
        }
    }
    Ok(())
}

fn observed_row(data: &SurveyDataset, i: usize) -> FractionalRow {
    FractionalRow {
        unit: i,
        donor: 0,
        values: data.unit(i).values.iter().map(|v| v.unwrap_or(0.0)).collect(),
        weight: 1.0,
    }
}

/// Completed record for recipient `i` with `y` set to `value`.
fn donor_row(data: &SurveyDataset, i: usize, y: usize, d: usize, value: f64, weight: f64) -> FractionalRow {
    let mut values: Vec<f64> = data.unit(i).values.iter().map(|v| v.unwrap_or(0.0)).collect();
    values[y] = value;
    FractionalRow {
        unit: i,
        donor: d,
        values,
        weight,
    }
}

fn check_other_missing(data: &SurveyDataset, y: usize) -> Result<()> {
    for u in data.units() {
        if u.values.iter().enumerate().any(|(j, v)| j != y && v.is_none()) {
            return Err(Error::Contract(format!(
                "unit {} is missing an item other than the one being imputed",
                u.id
            )));
        }
    }
    Ok(())
}

/// Kernel weights `K_h(x_i − x_j) / Σ_k K_h(x_i − x_k)` over respondents,
/// one vector per recipient.
pub fn kernel_weights(
    data: &SurveyDataset,
    x: &[usize],
    y: usize,
    spec: &KernelSpec,
) -> Result<(Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> {
    if x.is_empty() || (x.len() > 1 && !spec.product) {
        return Err(Error::Validation(
            "kernel imputation takes one covariate unless the product kernel is enabled".into(),
        ));
    }
    check_covariates(data, x)?;
    let (resp, miss) = respondents(data, y);
    if resp.is_empty() {
        return Err(Error::Identifiability("no respondents to serve as donors".into()));
    }
    let h: Vec<f64> = x
        .iter()
        .map(|&j| match spec.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Silverman => {
                let xs: Vec<f64> = resp.iter().map(|&i| data.unit(i).values[j].unwrap()).collect();
                silverman_bandwidth(&xs)
            }
        })
        .collect();
    if h.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Validation("bandwidth must be positive".into()));
    }
    let weights = miss
        .par_iter()
        .map(|&i| {
            let ui = data.unit(i);
            let mut k: Vec<f64> = resp
                .iter()
                .map(|&j| {
                    let uj = data.unit(j);
                    x.iter()
                        .zip(&h)
                        .map(|(&c, &hc)| spec.kernel.eval((ui.values[c].unwrap() - uj.values[c].unwrap()) / hc))
                        .product()
                })
                .collect();
            let total: f64 = k.iter().sum();
            if !(total > 0.0) {
                return Err(Error::BandwidthTooSmall { unit: ui.id.clone() });
            }
            k.iter_mut().for_each(|v| *v /= total);
            Ok(k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((resp, miss, weights))
}

/// Kernel fractional imputation: every respondent donates to every
/// nonrespondent with kernel weights, and `U` is solved on the result.
pub fn kernel_fi(
    data: &SurveyDataset,
    x: &[usize],
    y: usize,
    u: &EstimatingFunction,
    spec: &KernelSpec,
) -> Result<(EEEstimate, FractionalDataset)> {
    check_other_missing(data, y)?;
    let (resp, miss, weights) = kernel_weights(data, x, y, spec)?;
    let mut rows = Vec::with_capacity(resp.len() + miss.len() * resp.len());
    for &i in &resp {
        rows.push(observed_row(data, i));
    }
    for (&i, w) in miss.iter().zip(&weights) {
        for (d, (&j, &wj)) in resp.iter().zip(w).enumerate() {
            rows.push(donor_row(data, i, y, d, data.unit(j).values[y].unwrap(), wj));
        }
    }
    let fd = FractionalDataset::new(data.clone(), rows)?;
    Ok((solve_fractional(&fd, u)?, fd))
}

/// Nadaraya–Watson regression of `g(y)` on `x`, evaluated at `x0`.
pub fn nadaraya_watson(xs: &[f64], gs: &[f64], x0: f64, h: f64, kernel: Kernel) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, g) in xs.iter().zip(gs) {
        let k = kernel.eval((x0 - x) / h);
        num += k * g;
        den += k;
    }
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone)]
pub struct SfiResult {
    pub theta: Vec<f64>,
    pub fdata: FractionalDataset,
    /// Design-weighted mean of the imputed item.
    pub mean: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Hot-deck-proposal weights `w*_ij ∝ f(y_j | x_i; θ) / Σ_k w_k f(y_j | x_k; θ)`.
pub fn sfi_weights(
    data: &SurveyDataset,
    model: &dyn ParametricModel,
    y: usize,
    resp: &[usize],
    miss: &[usize],
    theta: &[f64],
) -> Result<Vec<Vec<f64>>> {
    // log Σ_k w_k f(y_j | x_k) for every donor j
    let record = |i: usize, yv: f64| -> Vec<f64> {
        let mut r: Vec<f64> = data.unit(i).values.iter().map(|v| v.unwrap_or(0.0)).collect();
        r[y] = yv;
        r
    };
    let log_den: Vec<f64> = resp
        .par_iter()
        .map(|&j| {
            let yj = data.unit(j).values[y].unwrap();
            let terms: Vec<f64> = resp
                .iter()
                .map(|&k| data.unit(k).weight.ln() + model.log_density(&record(k, yj), theta))
                .collect();
            let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::DegenerateWeights {
                    unit: data.unit(j).id.clone(),
                    message: "donor has zero density under every respondent's covariates".into(),
                });
            }
            Ok(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
        })
        .collect::<Result<_>>()?;
    miss.par_iter()
        .map(|&i| {
            let mut lw: Vec<f64> = resp
                .iter()
                .zip(&log_den)
                .map(|(&j, ld)| model.log_density(&record(i, data.unit(j).values[y].unwrap()), theta) - ld)
                .collect();
            normalize_log_weights(&mut lw).ok_or_else(|| Error::DegenerateWeights {
                unit: data.unit(i).id.clone(),
                message: "every donor has zero weight".into(),
            })?;
            Ok(lw)
        })
        .collect()
}

/// Semiparametric FI by EM: donors are all respondents' `y`, reweighted
/// under the conditional model `f(y | x; θ)`.
pub fn sfi_em(
    data: &SurveyDataset,
    model: &dyn ParametricModel,
    theta_init: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<SfiResult> {
    let items = model.modelled_items();
    if items.len() != 1 {
        return Err(Error::Validation("SFI imputes a single item".into()));
    }
    let y = items[0];
    check_other_missing(data, y)?;
    check_covariates(data, &model.covariate_items())?;
    let (resp, miss) = respondents(data, y);
    if resp.is_empty() {
        return Err(Error::Identifiability("no respondents to serve as donors".into()));
    }
    let build = |w: &[Vec<f64>]| -> Result<FractionalDataset> {
        let mut rows: Vec<FractionalRow> = resp.iter().map(|&i| observed_row(data, i)).collect();
        for (&i, wi) in miss.iter().zip(w) {
            for (d, (&j, &v)) in resp.iter().zip(wi).enumerate() {
                rows.push(donor_row(data, i, y, d, data.unit(j).values[y].unwrap(), v));
            }
        }
        FractionalDataset::new(data.clone(), rows)
    };
    let mut theta = theta_init.to_vec();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let w = sfi_weights(data, model, y, &resp, &miss, &theta)?;
        let next = m_step(&build(&w)?, model, &theta)?;
        let change = next.iter().zip(&theta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        theta = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    let fdata = build(&sfi_weights(data, model, y, &resp, &miss, &theta)?)?;
    let mean = solve_fractional(&fdata, &EstimatingFunction::mean(y))?.eta;
    Ok(SfiResult {
        theta,
        fdata,
        mean,
        iterations,
        converged,
    })
}

/// Fitted response propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub model: LogisticPropensity,
    /// `π(x_i; φ̂)` for every unit.
    pub pi: Vec<f64>,
    /// Set when the intercept was shifted so that `Σ_R w/π = Σ_A w`.
    pub normalized: bool,
}

/// Design-weighted logistic fit of the response indicator of `y`.
pub fn fit_propensity(
    data: &SurveyDataset,
    y: usize,
    covariates: Vec<(usize, CovariateTransform)>,
) -> Result<PropensityFit> {
    let model = LogisticPropensity::fit(data, y, covariates)?;
    let pi = data
        .units()
        .iter()
        .map(|u| model.probability(&u.values).expect("covariates checked in fit"))
        .collect();
    Ok(PropensityFit {
        model,
        pi,
        normalized: false,
    })
}

impl PropensityFit {
    /// Shifts the logit intercept so that the respondents' inverse
    /// propensities reproduce the full-sample weight total. Since
    /// `1/π = 1 + exp(−η)`, the shift has a closed form.
    pub fn normalized(&self, data: &SurveyDataset, y: usize) -> Result<PropensityFit> {
        let (resp, miss) = respondents(data, y);
        let target: f64 = miss.iter().map(|&i| data.unit(i).weight).sum();
        let current: f64 = resp
            .iter()
            .map(|&i| data.unit(i).weight * (1.0 / self.pi[i] - 1.0))
            .sum();
        if miss.is_empty() || !(current > 0.0) {
            return Err(Error::Validation("normalization needs nonrespondents and propensities below one".into()));
        }
        let shift = (current / target).ln();
        let mut model = self.model.clone();
        model.phi[0] += shift;
        let pi = data
            .units()
            .iter()
            .map(|u| model.probability(&u.values).expect("covariates checked in fit"))
            .collect();
        Ok(PropensityFit {
            model,
            pi,
            normalized: true,
        })
    }
}

/// Linear outcome regression `m(x) = β₀ + βᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRegression {
    pub covariates: Vec<usize>,
    pub beta: Vec<f64>,
}

impl OutcomeRegression {
    /// Weighted least squares on the respondents of `y`.
    pub fn fit(data: &SurveyDataset, y: usize, covariates: Vec<usize>) -> Result<Self> {
        let names: Vec<String> = std::iter::once("intercept".to_string())
            .chain(covariates.iter().map(|&c| data.items()[c].name.clone()))
            .collect();
        let rows = data.units().iter().filter(|u| u.responded(y)).map(|u| {
            let mut z = vec![1.0];
            z.extend(covariates.iter().map(|&c| u.values[c].unwrap_or(f64::NAN)));
            (u.weight, z, u.values[y].unwrap())
        });
        let (beta, _) = weighted_least_squares(rows, covariates.len() + 1, &names)?;
        Ok(OutcomeRegression { covariates, beta })
    }

    pub fn predict(&self, values: &[Option<f64>]) -> f64 {
        self.beta[0]
            + self
                .covariates
                .iter()
                .zip(&self.beta[1..])
                .map(|(&c, b)| b * values[c].unwrap_or(f64::NAN))
                .sum::<f64>()
    }
}

/// Doubly robust FI. Each nonrespondent receives `m(x_i) + (y_j − m(x_j))`
/// from every respondent `j`, with the recipient-free weight
/// `w_j (1/π_j − 1) / Σ_R w_k (1/π_k − 1)`.
pub fn dr_fi(
    data: &SurveyDataset,
    y: usize,
    outcome: &OutcomeRegression,
    propensity: &PropensityFit,
    u: &EstimatingFunction,
) -> Result<(EEEstimate, FractionalDataset)> {
    check_other_missing(data, y)?;
    check_covariates(data, &outcome.covariates)?;
    let (resp, miss) = respondents(data, y);
    if resp.is_empty() {
        return Err(Error::Identifiability("no respondents to serve as donors".into()));
    }
    let raw: Vec<f64> = resp
        .iter()
        .map(|&j| data.unit(j).weight * (1.0 / propensity.pi[j] - 1.0))
        .collect();
    let total: f64 = raw.iter().sum();
    if !miss.is_empty() && !(total > 0.0) {
        return Err(Error::DegenerateWeights {
            unit: String::new(),
            message: "every respondent has propensity one, so all donor weights are zero".into(),
        });
    }
    let resid: Vec<f64> = resp
        .iter()
        .map(|&j| data.unit(j).values[y].unwrap() - outcome.predict(&data.unit(j).values))
        .collect();
    let mut rows: Vec<FractionalRow> = resp.iter().map(|&i| observed_row(data, i)).collect();
    for &i in &miss {
        let mi = outcome.predict(&data.unit(i).values);
        for (d, (r, e)) in raw.iter().zip(&resid).enumerate() {
            rows.push(donor_row(data, i, y, d, mi + e, r / total));
        }
    }
    let fd = FractionalDataset::new(data.clone(), rows)?;
    Ok((solve_fractional(&fd, u)?, fd))
}

/// `Σ_A w_i [m(x_i) + δ_i/π_i (y_i − m(x_i))]`.
pub fn dr_total(data: &SurveyDataset, y: usize, outcome: &OutcomeRegression, propensity: &PropensityFit) -> f64 {
    data.units()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let m = outcome.predict(&u.values);
            u.weight
                * match u.values[y] {
                    Some(v) => m + (v - m) / propensity.pi[i],
                    None => m,
                }
        })
        .sum()
}

/// `Σ_i w_i Σ_j w*_ij y*_ij` over a fractional dataset.
pub fn fractional_total(fd: &FractionalDataset, y: usize) -> f64 {
    fd.rows()
        .iter()
        .map(|r| fd.base().unit(r.unit).weight * r.weight * r.values[y])
        .sum()
}
