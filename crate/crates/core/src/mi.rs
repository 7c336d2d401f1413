//! Multiple imputation under the stratified log-normal regression, Rubin's
//! combining rules, and the large-sample variances of MI and FI.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SurveyDataset;
use crate::error::{Error, Result};
use crate::linalg::symmetric_inverse;
use crate::models::StratifiedLogNormalRegression;
use crate::rng::{domain, substream, StreamRng};

/// Prior on `(β_h, σ²_h)` within each stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// `p(β, σ²) ∝ σ⁻²`: `σ² | data ~ (n − 2) s² / χ²_{n−2}`.
    #[default]
    Jeffreys,
    /// `p(β, σ²) ∝ 1`: `σ² | data ~ (n − 2) s² / χ²_{n−4}`.
    Flat,
}

/// Unweighted least-squares summary of the respondents in one stratum,
/// on the `(log x, log y)` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumPosterior {
    pub beta: [f64; 2],
    /// `(ZᵀZ)⁻¹`, row-major.
    pub xtx_inv: [f64; 4],
    pub s2: f64,
    pub respondents: usize,
}

impl StratumPosterior {
    fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        let n = pairs.len();
        let (mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for &(x, y) in pairs {
            sx += x;
            sxx += x * x;
            sy += y;
            sxy += x * y;
        }
        let nf = n as f64;
        let det = nf * sxx - sx * sx;
        if !(det > 1e-12 * nf * sxx.max(1.0)) {
            return Err(Error::Singular("respondent log x values are constant within a stratum".into()));
        }
        let b1 = (nf * sxy - sx * sy) / det;
        let b0 = (sy - b1 * sx) / nf;
        let rss: f64 = pairs.iter().map(|&(x, y)| (y - b0 - b1 * x).powi(2)).sum();
        Ok(StratumPosterior {
            beta: [b0, b1],
            xtx_inv: [sxx / det, -sx / det, -sx / det, nf / det],
            s2: rss / (nf - 2.0),
            respondents: n,
        })
    }

    /// One posterior draw of `(β₀, β₁, σ)`.
    pub fn draw(&self, prior: Prior, rng: &mut StreamRng) -> Result<(f64, f64, f64)> {
        let df = match prior {
            Prior::Jeffreys => self.respondents as f64 - 2.0,
            Prior::Flat => self.respondents as f64 - 4.0,
        };
        let sigma2 = if self.s2 == 0.0 {
            0.0
        } else {
            let chi = ChiSquared::new(df).map_err(|e| Error::Sampler {
                unit: String::new(),
                message: e.to_string(),
            })?;
            (self.respondents as f64 - 2.0) * self.s2 / chi.sample(rng)
        };
        // β ~ N(β̂, σ² (ZᵀZ)⁻¹) through the 2×2 Cholesky factor
        let a = self.xtx_inv[0].sqrt();
        let b = self.xtx_inv[2] / a;
        let c = (self.xtx_inv[3] - b * b).max(0.0).sqrt();
        let s = sigma2.sqrt();
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        Ok((self.beta[0] + s * a * z0, self.beta[1] + s * (b * z0 + c * z1), s))
    }
}

/// Per-stratum posterior summaries from the respondents.
pub fn stratum_posteriors(data: &SurveyDataset, model: &StratifiedLogNormalRegression, prior: Prior) -> Result<Vec<StratumPosterior>> {
    let min = match prior {
        Prior::Jeffreys => 3,
        Prior::Flat => 5,
    };
    let mut pairs = vec![Vec::new(); model.strata];
    for u in data.units() {
        let (Some(h), Some(x)) = (u.values[model.stratum], u.values[model.x]) else {
            return Err(Error::Contract(format!("unit {} lacks stratum or x", u.id)));
        };
        if let Some(y) = u.values[model.y] {
            if x <= 0.0 || y <= 0.0 {
                return Err(Error::Contract(format!("unit {}: x and y must be positive", u.id)));
            }
            pairs[h as usize].push((x.ln(), y.ln()));
        }
    }
    pairs
        .iter()
        .enumerate()
        .map(|(h, p)| {
            if p.len() < min {
                let label = data.items()[model.stratum]
                    .labels()
                    .and_then(|l| l.get(h).cloned())
                    .unwrap_or_else(|| h.to_string());
                return Err(Error::Identifiability(format!(
                    "stratum {label} has {} respondents; the posterior needs at least {min}",
                    p.len()
                )));
            }
            StratumPosterior::fit(p)
        })
        .collect()
}

/// `m` completed datasets. Each draws `(β*, σ*)` per stratum from the
/// posterior given the respondents, then `log y ~ N(β*ᵀ(1, log x), σ*²)`
/// for every nonrespondent.
pub fn mi_impute(
    data: &SurveyDataset,
    model: &StratifiedLogNormalRegression,
    m: usize,
    prior: Prior,
    seed: u64,
) -> Result<Vec<SurveyDataset>> {
    if m == 0 {
        return Err(Error::Validation("m must be at least 1".into()));
    }
    let post = stratum_posteriors(data, model, prior)?;
    (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, domain::MI, k as u64);
            let draws: Vec<(f64, f64, f64)> = post.iter().map(|p| p.draw(prior, &mut rng)).collect::<Result<_>>()?;
            let units = data
                .units()
                .iter()
                .map(|u| {
                    let mut u = u.clone();
                    if u.values[model.y].is_none() {
                        let h = u.values[model.stratum].unwrap() as usize;
                        let lx = u.values[model.x].unwrap().ln();
                        let (b0, b1, s) = draws[h];
                        let z: f64 = StandardNormal.sample(&mut rng);
                        u.values[model.y] = Some((b0 + b1 * lx + s * z).exp());
                    }
                    u
                })
                .collect();
            data.with_units(units)
        })
        .collect()
}

/// Stratified estimate with its design variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub variance: f64,
}

/// Method-of-moments estimators on a complete stratified SRS: each stratum
/// mean `ȳ_h` with `(1 − n_h/N_h) s²_h / n_h`, then the population mean
/// `N⁻¹ Σ N_h ȳ_h` with `N⁻² Σ N_h² (1 − n_h/N_h) s²_h / n_h`.
/// `N_h` is the stratum weight total. Returns H + 1 estimates.
pub fn stratified_srs_estimates(data: &SurveyDataset, y: usize) -> Result<Vec<Estimate>> {
    let strata = data
        .strata()
        .ok_or_else(|| Error::Contract("stratified estimators need a stratum column".into()))?;
    let h = data.stratum_labels().len();
    let mut vals = vec![Vec::new(); h];
    let mut big_n = vec![0.0; h];
    for (u, &s) in data.units().iter().zip(strata) {
        let v = u.values[y].ok_or_else(|| Error::Contract(format!("unit {} has no value of the target", u.id)))?;
        vals[s].push(v);
        big_n[s] += u.weight;
    }
    let mut out = Vec::with_capacity(h + 1);
    let (mut total, mut var_total) = (0.0, 0.0);
    for (v, &nh_pop) in vals.iter().zip(&big_n) {
        let n = v.len() as f64;
        if v.len() < 2 {
            return Err(Error::Validation("every stratum needs at least two units".into()));
        }
        let mean = v.iter().sum::<f64>() / n;
        let s2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let fpc = (1.0 - n / nh_pop).max(0.0);
        let var = fpc * s2 / n;
        out.push(Estimate { estimate: mean, variance: var });
        total += nh_pop * mean;
        var_total += nh_pop * nh_pop * var;
    }
    let pop: f64 = big_n.iter().sum();
    out.push(Estimate {
        estimate: total / pop,
        variance: var_total / (pop * pop),
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubinResult {
    pub estimate: f64,
    /// `W_m`, the mean within-imputation variance.
    pub within: f64,
    /// `B_m`, the sample variance of the point estimates.
    pub between: f64,
    /// `W_m + (1 + 1/m) B_m`.
    pub total: f64,
    pub m: usize,
}

pub fn rubin_combine(estimates: &[f64], variances: &[f64]) -> Result<RubinResult> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::Validation("Rubin's rules need at least two imputations".into()));
    }
    if variances.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: variances.len(),
        });
    }
    let mf = m as f64;
    let estimate = estimates.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e - estimate).powi(2)).sum::<f64>() / (mf - 1.0);
    Ok(RubinResult {
        estimate,
        within,
        between,
        total: within + (1.0 + 1.0 / mf) * between,
        m,
    })
}

/// `m` imputations, each analysed with the stratified estimators, combined
/// per target.
pub fn mi_estimates(data: &SurveyDataset, model: &StratifiedLogNormalRegression, m: usize, prior: Prior, seed: u64) -> Result<Vec<RubinResult>> {
    let completed = mi_impute(data, model, m, prior, seed)?;
    let per: Vec<Vec<Estimate>> = completed
        .par_iter()
        .map(|d| stratified_srs_estimates(d, model.y))
        .collect::<Result<_>>()?;
    (0..per[0].len())
        .map(|t| {
            let e: Vec<f64> = per.iter().map(|p| p[t].estimate).collect();
            let v: Vec<f64> = per.iter().map(|p| p[t].variance).collect();
            rubin_combine(&e, &v)
        })
        .collect()
}

/// Complete-data and observed-data information matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationTriple {
    pub i_com: DMatrix<f64>,
    pub i_obs: DMatrix<f64>,
}

impl InformationTriple {
    /// Checks symmetry and that `I_com − I_obs` and `I_obs` are positive
    /// semidefinite.
    pub fn new(i_com: DMatrix<f64>, i_obs: DMatrix<f64>) -> Result<Self> {
        if !i_com.is_square() || i_com.shape() != i_obs.shape() {
            return Err(Error::Dimension {
                expected: i_com.nrows(),
                got: i_obs.nrows(),
            });
        }
        let scale = i_com.amax().max(f64::MIN_POSITIVE);
        for (name, m) in [("I_com", &i_com), ("I_obs", &i_obs)] {
            if (m - m.transpose()).amax() > 1e-12 * scale {
                return Err(Error::Validation(format!("{name} is not symmetric")));
            }
        }
        let mis = &i_com - &i_obs;
        for (name, m) in [("I_obs", &i_obs), ("I_com - I_obs", &mis)] {
            let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if min < -1e-10 * scale {
                return Err(Error::Validation(format!("{name} is not positive semidefinite")));
            }
        }
        Ok(InformationTriple { i_com, i_obs })
    }

    pub fn i_mis(&self) -> DMatrix<f64> {
        &self.i_com - &self.i_obs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticVariances {
    pub v_mi: DMatrix<f64>,
    pub v_fi: DMatrix<f64>,
    /// Fraction of missing information `I_mis I_com⁻¹`.
    pub j: DMatrix<f64>,
}

/// `V_FI = I_obs⁻¹ + m⁻¹ I_com⁻¹ I_mis I_com⁻¹` and
/// `V_MI = V_FI + m⁻¹ Jᵀ I_obs⁻¹ J`.
pub fn asymptotic_variances(info: &InformationTriple, m: usize) -> Result<AsymptoticVariances> {
    if m == 0 {
        return Err(Error::Validation("m must be at least 1".into()));
    }
    let obs_inv = symmetric_inverse(&info.i_obs)?;
    let com_inv = symmetric_inverse(&info.i_com)?;
    let mis = info.i_mis();
    let mf = m as f64;
    let j = &mis * &com_inv;
    let v_fi = &obs_inv + (&com_inv * &mis * &com_inv) / mf;
    let extra = j.transpose() * &obs_inv * &j / mf;
    let sym = |a: DMatrix<f64>| (&a + a.transpose()) * 0.5;
    let v_fi = sym(v_fi);
    let v_mi = &v_fi + sym(extra);
    Ok(AsymptoticVariances { v_mi, v_fi, j })
}
