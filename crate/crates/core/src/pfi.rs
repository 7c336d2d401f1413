//! Parametric fractional imputation.
//!
//! Imputed values are drawn once from a proposal `h` (the I-step) and kept
//! fixed. EM then alternates between importance weights
//! `w*_ij ∝ f(y*_ij; θ) / h(y*_ij)` (the W-step) and solving the weighted
//! score equation (the M-step).

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_complete, FractionalDataset, FractionalRow, SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::models::{fit_weighted, newton_mle, pseudo_mle, BivariateSequentialModel, ParametricModel};
use crate::rng::{domain, substream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    PluginInitial,
    PriorMixture,
    UnnormalizedProduct,
    Optimal,
}

/// Proposal `h(y_mis | y_obs)` for the I-step.
///
/// `log_density` may omit any factor that is constant within a unit, since
/// it cancels when the weights are normalized.
pub trait Proposal: Send + Sync {
    fn kind(&self) -> ProposalKind;
    fn sample(&self, unit: &UnitRecord, m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>>;
    fn log_density(&self, completed: &[f64], observed: &[bool]) -> f64;

    /// `log h` for all of a unit's draws.
    fn log_densities(&self, unit: &UnitRecord, draws: &[Vec<f64>]) -> Vec<f64> {
        let observed: Vec<bool> = unit.values.iter().map(Option::is_some).collect();
        draws.iter().map(|d| self.log_density(d, &observed)).collect()
    }
}

/// Draws from the model itself at a fixed parameter `θ₀`; the log density is
/// the joint `log f(y; θ₀)`.
pub struct PluginProposal {
    model: Arc<dyn ParametricModel>,
    theta: Vec<f64>,
    kind: ProposalKind,
}

impl PluginProposal {
    pub fn new(model: Arc<dyn ParametricModel>, theta: Vec<f64>) -> Result<Self> {
        check_dim(model.as_ref(), &theta)?;
        Ok(PluginProposal {
            model,
            theta,
            kind: ProposalKind::PluginInitial,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

impl Proposal for PluginProposal {
    fn kind(&self) -> ProposalKind {
        self.kind
    }

    fn sample(&self, unit: &UnitRecord, m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        self.model.sample_missing(&unit.values, &self.theta, m, rng)
    }

    fn log_density(&self, completed: &[f64], _observed: &[bool]) -> f64 {
        self.model.log_density(completed, &self.theta)
    }
}

/// `h = ∫ f(y_mis | y_obs; θ) π(θ) dθ`, represented by a finite set of
/// parameter draws from the user's prior. No default prior is provided.
pub struct PriorMixtureProposal {
    model: Arc<dyn ParametricModel>,
    draws: Vec<Vec<f64>>,
}

impl PriorMixtureProposal {
    pub fn new(model: Arc<dyn ParametricModel>, draws: Vec<Vec<f64>>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Validation("prior mixture needs at least one parameter draw".into()));
        }
        for d in &draws {
            check_dim(model.as_ref(), d)?;
        }
        Ok(PriorMixtureProposal { model, draws })
    }
}

impl Proposal for PriorMixtureProposal {
    fn kind(&self) -> ProposalKind {
        ProposalKind::PriorMixture
    }

    fn sample(&self, unit: &UnitRecord, m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            let k = rng.random_range(0..self.draws.len());
            out.extend(self.model.sample_missing(&unit.values, &self.draws[k], 1, rng)?);
        }
        Ok(out)
    }

    fn log_density(&self, completed: &[f64], observed: &[bool]) -> f64 {
        let logs: Vec<f64> = self
            .draws
            .iter()
            .map(|t| {
                self.model
                    .conditional_log_density(completed, observed, t)
                    .unwrap_or(f64::NAN)
            })
            .collect();
        log_mean_exp(&logs)
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + (v.iter().map(|x| (x - mx).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn check_dim(model: &dyn ParametricModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Pattern-dispatched proposal for the bivariate sequential model: a direct
/// `f₂` draw when only `y₂` is missing, SIR from `f₁·f₂` when only `y₁` is
/// missing, and sequential `f₁` then `f₂` draws when both are missing. The
/// log density is the unnormalized product `f₁ f₂` at the initial fit.
pub fn build_proposal_example1(model: Arc<BivariateSequentialModel>, theta0: Vec<f64>) -> Result<PluginProposal> {
    let model: Arc<dyn ParametricModel> = model;
    let mut p = PluginProposal::new(model, theta0)?;
    p.kind = ProposalKind::UnnormalizedProduct;
    Ok(p)
}

/// Minimum-variance proposal for the mean of a single missing item:
/// `h*(y) ∝ f(y | y_obs; θ̂) |y − E(y | y_obs; θ̂)|`, sampled by rejection
/// from a normal envelope with twice the conditional standard deviation.
pub struct OptimalMeanProposal {
    model: Arc<dyn ParametricModel>,
    theta: Vec<f64>,
}

const ENVELOPE_INFLATION: f64 = 2.0;
const ENVELOPE_SPAN: f64 = 14.0;
const ENVELOPE_GRID: usize = 4000;

/// Per-unit constants of the optimal proposal.
#[derive(Debug, Clone, Copy)]
struct OptimalUnit {
    mean: f64,
    sd: f64,
    /// `log ∫ f |y − μ| dy`
    log_norm: f64,
    /// `log sup h*/g`
    log_bound: f64,
}

pub fn optimal_proposal_scalar_mean(model: Arc<dyn ParametricModel>, theta: Vec<f64>) -> Result<OptimalMeanProposal> {
    check_dim(model.as_ref(), &theta)?;
    if model.modelled_items().len() != 1 {
        return Err(Error::Validation(
            "the optimal proposal is defined for a single missing item only".into(),
        ));
    }
    Ok(OptimalMeanProposal { model, theta })
}

impl OptimalMeanProposal {
    fn target(&self) -> usize {
        self.model.modelled_items()[0]
    }

    fn log_f(&self, base: &mut [f64], observed: &[bool], y: f64) -> f64 {
        base[self.target()] = y;
        self.model
            .conditional_log_density(base, observed, &self.theta)
            .unwrap_or(f64::NAN)
    }

    fn unit_constants(&self, values: &[Option<f64>]) -> Result<OptimalUnit> {
        let fail = |m: &str| Error::Sampler {
            unit: String::new(),
            message: format!("optimal proposal envelope: {m}"),
        };
        let (mean, sd) = self
            .model
            .conditional_moments(values, &self.theta)
            .ok_or_else(|| fail("model has no conditional moments for this unit"))?;
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(fail("degenerate conditional distribution"));
        }
        let observed: Vec<bool> = values.iter().map(Option::is_some).collect();
        let mut base: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let env_sd = ENVELOPE_INFLATION * sd;
        let env = Normal::new(mean, env_sd).map_err(|e| fail(&e.to_string()))?;
        let lo = mean - ENVELOPE_SPAN * sd;
        let step = 2.0 * ENVELOPE_SPAN * sd / ENVELOPE_GRID as f64;
        let mut vals = Vec::with_capacity(ENVELOPE_GRID + 1);
        let mut log_ratio = Vec::with_capacity(ENVELOPE_GRID + 1);
        for k in 0..=ENVELOPE_GRID {
            let y = lo + k as f64 * step;
            let lf = self.log_f(&mut base, &observed, y);
            let lh = lf + (y - mean).abs().ln();
            vals.push(lh.exp());
            log_ratio.push(lh - normal_log_pdf(&env, y));
        }
        // Simpson's rule for the normalizer
        let mut s = vals[0] + vals[ENVELOPE_GRID];
        for (k, v) in vals.iter().enumerate().take(ENVELOPE_GRID).skip(1) {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * v;
        }
        let norm = s * step / 3.0;
        let peak = log_ratio.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let edge = log_ratio[0].max(log_ratio[ENVELOPE_GRID]);
        if !(norm > 0.0 && norm.is_finite() && peak.is_finite()) {
            return Err(fail("conditional density could not be evaluated"));
        }
        if edge > peak - 7.0 {
            return Err(fail("target tails are heavier than the normal envelope"));
        }
        Ok(OptimalUnit {
            mean,
            sd,
            log_norm: norm.ln(),
            // margin for the grid maximum
            log_bound: peak + 0.05,
        })
    }

    /// Normalized `log h*` for a unit, given its observed values.
    pub fn unit_log_density(&self, values: &[Option<f64>], y: f64) -> Result<f64> {
        let c = self.unit_constants(values)?;
        let observed: Vec<bool> = values.iter().map(Option::is_some).collect();
        let mut base: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        Ok(self.log_f(&mut base, &observed, y) + (y - c.mean).abs().ln() - c.log_norm)
    }
}

fn normal_log_pdf(n: &Normal<f64>, y: f64) -> f64 {
    let z = (y - n.mean()) / n.std_dev();
    -0.5 * z * z - n.std_dev().ln() - 0.918_938_533_204_672_7
}

impl Proposal for OptimalMeanProposal {
    fn kind(&self) -> ProposalKind {
        ProposalKind::Optimal
    }

    fn sample(&self, unit: &UnitRecord, m: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        let target = self.target();
        if unit.values[target].is_some() {
            return Err(Error::Contract("target is observed; nothing to impute".into()));
        }
        let c = self.unit_constants(&unit.values).map_err(|e| match e {
            Error::Sampler { message, .. } => Error::Sampler {
                unit: unit.id.clone(),
                message,
            },
            other => other,
        })?;
        let env = Normal::new(c.mean, ENVELOPE_INFLATION * c.sd).expect("validated above");
        let observed: Vec<bool> = unit.values.iter().map(Option::is_some).collect();
        let mut base: Vec<f64> = unit.values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let mut out = Vec::with_capacity(m);
        let max_tries = 10_000 * m.max(1);
        let mut tries = 0;
        while out.len() < m {
            tries += 1;
            if tries > max_tries {
                return Err(Error::Sampler {
                    unit: unit.id.clone(),
                    message: "rejection sampler for the optimal proposal stalled".into(),
                });
            }
            let y = env.sample(rng);
            let lr = self.log_f(&mut base, &observed, y) + (y - c.mean).abs().ln() - normal_log_pdf(&env, y);
            let u: f64 = rng.random();
            if u.ln() < lr - c.log_bound {
                let mut rec = base.clone();
                rec[target] = y;
                out.push(rec);
            }
        }
        Ok(out)
    }

    fn log_density(&self, completed: &[f64], observed: &[bool]) -> f64 {
        let values: Vec<Option<f64>> = completed
            .iter()
            .zip(observed)
            .map(|(v, &o)| if o { Some(*v) } else { None })
            .collect();
        self.unit_log_density(&values, completed[self.target()])
            .unwrap_or(f64::NAN)
    }

    fn log_densities(&self, unit: &UnitRecord, draws: &[Vec<f64>]) -> Vec<f64> {
        let Ok(c) = self.unit_constants(&unit.values) else {
            return vec![f64::NAN; draws.len()];
        };
        let observed: Vec<bool> = unit.values.iter().map(Option::is_some).collect();
        let mut base: Vec<f64> = unit.values.iter().map(|v| v.unwrap_or(0.0)).collect();
        draws
            .iter()
            .map(|d| {
                let y = d[self.target()];
                self.log_f(&mut base, &observed, y) + (y - c.mean).abs().ln() - c.log_norm
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PFIConfig {
    pub m: usize,
    pub max_em_iter: usize,
    pub em_tol: f64,
    pub sir_pool: usize,
    pub ess_warn: f64,
}

impl Default for PFIConfig {
    fn default() -> Self {
        PFIConfig {
            m: 100,
            max_em_iter: 500,
            em_tol: 1e-8,
            sir_pool: 100,
            ess_warn: 0.1,
        }
    }
}

impl PFIConfig {
    /// Defaults with `M = m`; the SIR pool is raised to `m` when smaller.
    pub fn with_m(m: usize) -> Self {
        let d = PFIConfig::default();
        PFIConfig {
            m,
            sir_pool: d.sir_pool.max(m),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Validation("M must be at least 1".into()));
        }
        if self.sir_pool < self.m {
            return Err(Error::Validation(format!(
                "SIR pool B = {} must be at least M = {}",
                self.sir_pool, self.m
            )));
        }
        if !(self.ess_warn > 0.0 && self.ess_warn <= 1.0) {
            return Err(Error::Validation("ess_warn must lie in (0, 1]".into()));
        }
        if !(self.em_tol > 0.0) || self.max_em_iter == 0 {
            return Err(Error::Validation("em_tol must be positive and max_em_iter at least 1".into()));
        }
        Ok(())
    }
}

/// Draws from the I-step, fixed for the whole EM run.
#[derive(Debug, Clone)]
pub struct Imputations {
    pub base: SurveyDataset,
    /// Units needing imputation, in unit order.
    pub units: Vec<usize>,
    /// `draws[k][j]` is the j-th completed record of unit `units[k]`.
    pub draws: Vec<Vec<Vec<f64>>>,
    /// `log h` of each draw.
    pub log_h: Vec<Vec<f64>>,
}

fn needs_imputation(unit: &UnitRecord, model: &dyn ParametricModel) -> bool {
    model.modelled_items().iter().any(|&j| !unit.responded(j))
}

/// Rejects units whose missing items the model does not cover.
fn check_coverage(data: &SurveyDataset, model: &dyn ParametricModel) -> Result<()> {
    let modelled = model.modelled_items();
    for u in data.units() {
        for (j, v) in u.values.iter().enumerate() {
            if v.is_none() && !modelled.contains(&j) {
                return Err(Error::Contract(format!(
                    "unit {} is missing item {}, which the model does not impute",
                    u.id,
                    data.items()[j].name
                )));
            }
        }
    }
    Ok(())
}

/// I-step: `m` draws per incomplete unit, each unit on its own substream.
pub fn i_step(data: &SurveyDataset, h: &dyn Proposal, model: &dyn ParametricModel, m: usize, seed: u64) -> Result<Imputations> {
    check_coverage(data, model)?;
    let units: Vec<usize> = (0..data.len()).filter(|&i| needs_imputation(data.unit(i), model)).collect();
    let results: Vec<Result<(Vec<Vec<f64>>, Vec<f64>)>> = units
        .par_iter()
        .map(|&i| {
            let unit = data.unit(i);
            let mut rng = substream(seed, domain::IMPUTATION, i as u64);
            let draws = h.sample(unit, m, &mut rng).map_err(|e| match e {
                Error::Sampler { message, .. } => Error::Sampler {
                    unit: unit.id.clone(),
                    message,
                },
                Error::Contract(msg) => Error::Sampler {
                    unit: unit.id.clone(),
                    message: msg,
                },
                other => other,
            })?;
            if draws.len() != m {
                return Err(Error::Sampler {
                    unit: unit.id.clone(),
                    message: format!("proposal returned {} draws, expected {m}", draws.len()),
                });
            }
            let log_h = h.log_densities(unit, &draws);
            Ok((draws, log_h))
        })
        .collect();
    let mut draws = Vec::with_capacity(units.len());
    let mut log_h = Vec::with_capacity(units.len());
    for r in results {
        let (d, l) = r?;
        draws.push(d);
        log_h.push(l);
    }
    Ok(Imputations {
        base: data.clone(),
        units,
        draws,
        log_h,
    })
}

/// Normalizes log weights in place after subtracting their maximum.
pub fn normalize_log_weights(logw: &mut [f64]) -> Option<()> {
    let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() || logw.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut total = 0.0;
    for v in logw.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in logw.iter_mut() {
        *v /= total;
    }
    Some(())
}

/// W-step: per-unit normalized weights `∝ f(y*; θ) / h(y*)`.
pub fn w_step(imp: &Imputations, model: &dyn ParametricModel, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_dim(model, theta)?;
    imp.draws
        .par_iter()
        .zip(imp.log_h.par_iter())
        .zip(imp.units.par_iter())
        .map(|((draws, log_h), &i)| {
            let mut lw: Vec<f64> = draws
                .iter()
                .zip(log_h)
                .map(|(d, lh)| model.log_density(d, theta) - lh)
                .collect();
            normalize_log_weights(&mut lw).ok_or_else(|| Error::DegenerateWeights {
                unit: imp.base.unit(i).id.clone(),
                message: "every importance weight underflowed; use a proposal closer to the model".into(),
            })?;
            Ok(lw)
        })
        .collect()
}

impl Imputations {
    /// Fractional dataset holding these draws with the given weights;
    /// units needing no imputation get a single row of weight one.
    pub fn to_fractional(&self, weights: &[Vec<f64>]) -> Result<FractionalDataset> {
        let mut rows = Vec::new();
        let mut k = 0;
        for (i, u) in self.base.units().iter().enumerate() {
            if k < self.units.len() && self.units[k] == i {
                for (j, (d, w)) in self.draws[k].iter().zip(&weights[k]).enumerate() {
                    rows.push(FractionalRow {
                        unit: i,
                        donor: j,
                        values: d.clone(),
                        weight: *w,
                    });
                }
                k += 1;
            } else {
                rows.push(FractionalRow {
                    unit: i,
                    donor: 0,
                    values: u.values.iter().map(|v| v.unwrap_or(0.0)).collect(),
                    weight: 1.0,
                });
            }
        }
        FractionalDataset::new(self.base.clone(), rows)
    }
}

/// M-step: solves `Σ_i w_i Σ_j w*_ij S(θ; y*_ij) = 0`, from `θ_t` when no
/// closed form exists.
pub fn m_step(fdata: &FractionalDataset, model: &dyn ParametricModel, theta_t: &[f64]) -> Result<Vec<f64>> {
    let points: Vec<(f64, &[f64])> = fdata
        .rows()
        .iter()
        .map(|r| (fdata.base().unit(r.unit).weight * r.weight, r.values.as_slice()))
        .filter(|(c, _)| *c != 0.0)
        .collect();
    match model.weighted_mle(&points) {
        Some(r) => r,
        None => newton_mle(model, &points, theta_t),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTraceRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub max_change: f64,
    pub max_weight: f64,
    pub ess_min: f64,
    pub ess_median: f64,
    pub ess_max: f64,
}

pub struct PFIResult {
    pub fdata: FractionalDataset,
    pub theta: Vec<f64>,
    pub trace: Vec<EmTraceRow>,
    pub converged: bool,
    pub imputations: Imputations,
}

/// Full EM. The returned weights are those of the W-step at the final θ̂.
pub fn run_em(
    data: &SurveyDataset,
    model: &dyn ParametricModel,
    h: &dyn Proposal,
    theta_init: &[f64],
    config: &PFIConfig,
    seed: u64,
) -> Result<PFIResult> {
    config.validate()?;
    check_dim(model, theta_init)?;
    check_coverage(data, model)?;
    if !data.units().iter().any(|u| needs_imputation(u, model)) {
        let theta = pseudo_mle(data, model)?;
        let fdata = augment_complete(data)?;
        return Ok(PFIResult {
            imputations: Imputations {
                base: data.clone(),
                units: Vec::new(),
                draws: Vec::new(),
                log_h: Vec::new(),
            },
            trace: vec![trace_row(1, &theta, 0.0, &[])],
            fdata,
            theta,
            converged: true,
        });
    }
    let imp = i_step(data, h, model, config.m, seed)?;
    let mut theta = theta_init.to_vec();
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 1..=config.max_em_iter {
        let w = w_step(&imp, model, &theta)?;
        let fdata = imp.to_fractional(&w)?;
        let next = m_step(&fdata, model, &theta)?;
        let change = next
            .iter()
            .zip(&theta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        trace.push(trace_row(it, &next, change, &w));
        theta = next;
        if change < config.em_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {} iterations without meeting em_tol", config.max_em_iter);
    }
    let w = w_step(&imp, model, &theta)?;
    let fdata = imp.to_fractional(&w)?;
    Ok(PFIResult {
        fdata,
        theta,
        trace,
        converged,
        imputations: imp,
    })
}

fn trace_row(iteration: usize, theta: &[f64], change: f64, w: &[Vec<f64>]) -> EmTraceRow {
    let mut ess: Vec<f64> = w.iter().map(|u| effective_sample_size(u)).collect();
    ess.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        if ess.is_empty() {
            f64::NAN
        } else {
            ess[((ess.len() - 1) as f64 * p).round() as usize]
        }
    };
    EmTraceRow {
        iteration,
        theta: theta.to_vec(),
        max_change: change,
        max_weight: w.iter().flatten().copied().fold(0.0, f64::max),
        ess_min: q(0.0),
        ess_median: q(0.5),
        ess_max: q(1.0),
    }
}

/// Writes the EM trace as CSV.
pub fn write_trace_csv<W: Write>(trace: &[EmTraceRow], names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string()];
    header.extend(names.iter().cloned());
    header.extend(["max_change", "max_weight", "ess_min", "ess_median", "ess_max"].map(String::from));
    w.write_record(&header)?;
    for r in trace {
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(r.theta.iter().map(|v| v.to_string()));
        rec.extend([r.max_change, r.max_weight, r.ess_min, r.ess_median, r.ess_max].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<em trace>", e))?;
    Ok(())
}

/// `M` SIR draws of `y₁` for a record with observed `x` and `y₂`.
pub fn sir_sample(
    model: &BivariateSequentialModel,
    record: &[f64],
    theta: &[f64],
    b: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = substream(seed, domain::SIR, 0);
    model.sir_draws(record, theta, b, m, &mut rng)
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitWeightSummary {
    pub unit: usize,
    pub ess: f64,
    pub max_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDiagnostics {
    pub units: Vec<UnitWeightSummary>,
    /// Units with `ESS < ess_warn · M`.
    pub warnings: Vec<usize>,
}

/// Effective sample size and largest weight per imputed unit.
pub fn weight_diagnostics(fdata: &FractionalDataset, ess_warn: f64) -> WeightDiagnostics {
    let mut units = Vec::new();
    let mut warnings = Vec::new();
    for i in 0..fdata.base().len() {
        let rows = fdata.unit_rows(i);
        if rows.len() <= 1 {
            continue;
        }
        let w: Vec<f64> = rows.iter().map(|r| r.weight).collect();
        let ess = effective_sample_size(&w);
        if ess < ess_warn * w.len() as f64 {
            warnings.push(i);
        }
        units.push(UnitWeightSummary {
            unit: i,
            ess,
            max_weight: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    if !warnings.is_empty() {
        log::warn!("{} units have low effective sample size", warnings.len());
    }
    WeightDiagnostics { units, warnings }
}

/// Initial fit on the complete cases for any model.
pub fn complete_case_fit(data: &SurveyDataset, model: &dyn ParametricModel) -> Result<Vec<f64>> {
    let mut needed = model.modelled_items();
    needed.extend(model.covariate_items());
    let filled: Vec<(f64, Vec<f64>)> = data
        .units()
        .iter()
        .filter(|u| needed.iter().all(|&j| u.responded(j)))
        .map(|u| (u.weight, u.values.iter().map(|v| v.unwrap_or(0.0)).collect()))
        .collect();
    if filled.is_empty() {
        return Err(Error::Identifiability("no complete cases for the initial fit".into()));
    }
    let points: Vec<(f64, &[f64])> = filled.iter().map(|(w, y)| (*w, y.as_slice())).collect();
    fit_weighted(model, &points)
}
