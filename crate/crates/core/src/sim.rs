//! Monte Carlo harness for comparing full-sample, multiple-imputation and
//! parametric fractional-imputation estimators of stratum means under a
//! stratified log-normal superpopulation with stratified SRS and
//! covariate-dependent nonresponse.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Item, SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::estimating::EstimatingFunction;
use crate::linalg::compensated_sum;
use crate::mi::{mi_estimates, stratified_srs_estimates, Prior};
use crate::models::StratifiedLogNormalRegression;
use crate::pfi::{complete_case_fit, run_em, PFIConfig, PluginProposal};
use crate::rng::{derive_seed, domain, substream};
use crate::variance::{confidence_interval, jackknife_pfi, ReplicateMethod};

/// Superpopulation: `log y = β₀h + β₁h log x + σ_h ε` with
/// `log x ~ N(μ_h, τ_h²)` within stratum `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationSpec {
    pub sizes: Vec<usize>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub sigma: Vec<f64>,
    pub log_x_mean: Vec<f64>,
    pub log_x_sd: Vec<f64>,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            sizes: vec![352, 566, 1963, 2181, 2198],
            beta0: vec![-3.818, -3.9245, -4.7389, -4.8768, -5.3142],
            beta1: vec![0.5; 5],
            sigma: vec![0.45; 5],
            log_x_mean: vec![16.42, 16.02, 15.02, 14.62, 13.92],
            log_x_sd: vec![0.5; 5],
        }
    }
}

impl PopulationSpec {
    pub fn strata(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.sizes.len();
        if h == 0 {
            return Err(Error::Validation("population needs at least one stratum".into()));
        }
        for (name, len) in [
            ("beta0", self.beta0.len()),
            ("beta1", self.beta1.len()),
            ("sigma", self.sigma.len()),
            ("log_x_mean", self.log_x_mean.len()),
            ("log_x_sd", self.log_x_sd.len()),
        ] {
            if len != h {
                return Err(Error::Validation(format!("{name} has {len} entries for {h} strata")));
            }
        }
        if self.sizes.contains(&0) {
            return Err(Error::Validation("stratum sizes must be positive".into()));
        }
        let all = self.beta0.iter().chain(&self.beta1).chain(&self.log_x_mean);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Validation("coefficients must be finite".into()));
        }
        if self.sigma.iter().chain(&self.log_x_sd).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("standard deviations must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSpec {
    pub sample_sizes: Vec<usize>,
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec {
            sample_sizes: vec![28, 32, 46, 46, 48],
        }
    }
}

/// `π = 1 / (1 + exp(a − b log x))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseSpec {
    pub a: f64,
    pub b: f64,
}

impl Default for ResponseSpec {
    fn default() -> Self {
        ResponseSpec { a: 4.0, b: 0.3 }
    }
}

impl ResponseSpec {
    pub fn probability(&self, x: f64) -> f64 {
        1.0 / (1.0 + (self.a - self.b * x.ln()).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub stratum: Vec<usize>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub strata: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub stratum_means: Vec<f64>,
    pub mean: f64,
}

impl TrueParameters {
    /// Stratum means followed by the population mean.
    pub fn as_vec(&self) -> Vec<f64> {
        let mut v = self.stratum_means.clone();
        v.push(self.mean);
        v
    }
}

/// Finite population drawn from the superpopulation; truths are the
/// realized means.
pub fn generate_population(spec: &PopulationSpec, seed: u64) -> Result<(Population, TrueParameters)> {
    spec.validate()?;
    let mut pop = Population {
        stratum: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        strata: spec.strata(),
    };
    let mut means = Vec::with_capacity(spec.strata());
    for h in 0..spec.strata() {
        let mut rng = substream(seed, domain::POPULATION, h as u64);
        let mut ys = Vec::with_capacity(spec.sizes[h]);
        for _ in 0..spec.sizes[h] {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let lx = spec.log_x_mean[h] + spec.log_x_sd[h] * z1;
            let ly = spec.beta0[h] + spec.beta1[h] * lx + spec.sigma[h] * z2;
            pop.stratum.push(h);
            pop.x.push(lx.exp());
            ys.push(ly.exp());
        }
        means.push(compensated_sum(ys.iter().copied()) / ys.len() as f64);
        pop.y.extend(ys);
    }
    let mean = compensated_sum(pop.y.iter().copied()) / pop.y.len() as f64;
    Ok((
        pop,
        TrueParameters {
            stratum_means: means,
            mean,
        },
    ))
}

/// Mean response probability over the population.
pub fn population_response_rate(pop: &Population, rspec: &ResponseSpec) -> f64 {
    compensated_sum(pop.x.iter().map(|&x| rspec.probability(x))) / pop.x.len() as f64
}

fn items(strata: usize) -> Vec<Item> {
    vec![
        Item::categorical("stratum", (1..=strata).map(|h| h.to_string()).collect()),
        Item::continuous("x"),
        Item::continuous("y"),
    ]
}

pub const STRATUM: usize = 0;
pub const X: usize = 1;
pub const Y: usize = 2;

/// Stratified SRS without replacement, weight `N_h / n_h`. Columns are
/// `stratum, x, y`.
pub fn draw_sample(pop: &Population, design: &DesignSpec, seed: u64) -> Result<SurveyDataset> {
    if design.sample_sizes.len() != pop.strata {
        return Err(Error::Validation(format!(
            "design has {} strata, population has {}",
            design.sample_sizes.len(),
            pop.strata
        )));
    }
    let mut members = vec![Vec::new(); pop.strata];
    for (i, &h) in pop.stratum.iter().enumerate() {
        members[h].push(i);
    }
    let mut units = Vec::new();
    let mut labels = Vec::new();
    for (h, idx) in members.iter().enumerate() {
        let n = design.sample_sizes[h];
        if n < 2 || n > idx.len() {
            return Err(Error::Validation(format!(
                "stratum {} needs 2 <= n_h <= N_h, got n_h = {n}, N_h = {}",
                h + 1,
                idx.len()
            )));
        }
        let mut rng = substream(seed, domain::SAMPLE, h as u64);
        let mut picked: Vec<usize> = sample(&mut rng, idx.len(), n).into_iter().map(|k| idx[k]).collect();
        picked.sort_unstable();
        let w = idx.len() as f64 / n as f64;
        for i in picked {
            units.push(UnitRecord::new(i.to_string(), w, vec![Some(h as f64), Some(pop.x[i]), Some(pop.y[i])]));
            labels.push((h + 1).to_string());
        }
    }
    SurveyDataset::new(items(pop.strata), units, Some(labels))
}

/// Masks `y` for units with `δ = 0`, `δ ~ Bernoulli(π(x))`. Each unit uses
/// the stream indexed by its position.
pub fn apply_response(sample: &SurveyDataset, rspec: &ResponseSpec, seed: u64) -> Result<SurveyDataset> {
    let keep: Vec<bool> = sample
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let x = u.values[X].ok_or_else(|| Error::Contract(format!("unit {} has no x", u.id)))?;
            let mut rng = substream(seed, domain::RESPONSE, i as u64);
            Ok(rng.random::<f64>() < rspec.probability(x))
        })
        .collect::<Result<_>>()?;
    sample.mask_item(Y, &keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Mi,
    Pfi,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Full => "FULL",
            Method::Mi => "MI",
            Method::Pfi => "PFI",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub mi_m: usize,
    pub mi_prior: Prior,
    pub pfi: PFIConfig,
    pub replicate_method: ReplicateMethod,
    pub population_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replicates: 500,
            methods: vec![Method::Full, Method::Mi, Method::Pfi],
            mi_m: 100,
            mi_prior: Prior::Jeffreys,
            pfi: PFIConfig::default(),
            replicate_method: ReplicateMethod::OneStepNewton,
            population_seed: 20_150_601,
        }
    }
}

/// Point and variance estimates of every parameter, one method, one sample.
pub type Estimates = Vec<(f64, f64)>;

/// The study targets: each stratum mean, then the overall mean.
pub fn targets_for_strata(strata: usize) -> Vec<EstimatingFunction> {
    let mut t: Vec<EstimatingFunction> = (0..strata)
        .map(|h| EstimatingFunction::mean(Y).in_domain(STRATUM, h as f64))
        .collect();
    t.push(EstimatingFunction::mean(Y));
    t
}

/// Full-sample estimators with their design variances.
pub fn estimate_full(sample: &SurveyDataset) -> Result<Estimates> {
    Ok(stratified_srs_estimates(sample, Y)?
        .into_iter()
        .map(|e| (e.estimate, e.variance))
        .collect())
}

/// MI with Rubin's variance.
pub fn estimate_mi(data: &SurveyDataset, strata: usize, m: usize, prior: Prior, seed: u64) -> Result<Estimates> {
    let model = StratifiedLogNormalRegression::new(STRATUM, X, Y, strata);
    Ok(mi_estimates(data, &model, m, prior, seed)?
        .into_iter()
        .map(|r| (r.estimate, r.total))
        .collect())
}

/// PFI with the plug-in proposal at the respondent fit, and jackknife
/// variances.
pub fn estimate_pfi(data: &SurveyDataset, strata: usize, config: &PFIConfig, method: ReplicateMethod, seed: u64) -> Result<Estimates> {
    let model = Arc::new(StratifiedLogNormalRegression::new(STRATUM, X, Y, strata));
    let theta0 = complete_case_fit(data, model.as_ref())?;
    let h = PluginProposal::new(model.clone(), theta0.clone())?;
    let fit = run_em(data, model.as_ref(), &h, &theta0, config, seed)?;
    let jk = jackknife_pfi(&fit, model.as_ref(), &targets_for_strata(strata), method, config)?;
    Ok(jk.estimates.into_iter().zip(jk.variances).collect())
}

/// One replicate: sample, response, then every configured method.
pub struct ReplicateOutcome {
    pub response_rate: f64,
    pub results: Vec<(Method, Result<Estimates>)>,
}

pub fn run_replicate(
    pop: &Population,
    design: &DesignSpec,
    rspec: &ResponseSpec,
    config: &StudyConfig,
    master_seed: u64,
    r: usize,
) -> Result<ReplicateOutcome> {
    let seed = derive_seed(master_seed, domain::REPLICATE, r as u64);
    let full = draw_sample(pop, design, seed)?;
    let data = apply_response(&full, rspec, seed)?;
    let response_rate = data.units().iter().filter(|u| u.responded(Y)).count() as f64 / data.len() as f64;
    let results = config
        .methods
        .iter()
        .map(|&m| {
            let res = match m {
                Method::Full => estimate_full(&full),
                Method::Mi => estimate_mi(&data, pop.strata, config.mi_m, config.mi_prior, seed),
                Method::Pfi => {
                    let cfg = PFIConfig {
                        m: config.pfi.m,
                        ..config.pfi.clone()
                    };
                    estimate_pfi(&data, pop.strata, &cfg, config.replicate_method, seed)
                }
            };
            (m, res)
        })
        .collect();
    Ok(ReplicateOutcome { response_rate, results })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub var: f64,
    pub rb_pct: f64,
    pub ci_width: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub rows: Vec<ParameterSummary>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replicates: usize,
    pub truth: TrueParameters,
    pub population_response_rate: f64,
    pub mean_response_rate: f64,
    pub methods: Vec<MethodSummary>,
}

/// `(ve − var) / var × 100`.
pub fn relative_bias_pct(mean_variance_estimate: f64, monte_carlo_variance: f64) -> f64 {
    (mean_variance_estimate - monte_carlo_variance) / monte_carlo_variance * 100.0
}

pub fn parameter_names(strata: usize) -> Vec<String> {
    (1..=strata + 1).map(|k| format!("eta{k}")).collect()
}

/// Summaries over the successful replicates of one method.
pub fn summarize(method: Method, per_rep: &[Option<Estimates>], truth: &[f64]) -> MethodSummary {
    let ok: Vec<&Estimates> = per_rep.iter().flatten().collect();
    let failures = per_rep.len() - ok.len();
    let names = parameter_names(truth.len() - 1);
    let n = ok.len() as f64;
    let rows = truth
        .iter()
        .enumerate()
        .map(|(t, &tv)| {
            let est: Vec<f64> = ok.iter().map(|e| e[t].0).collect();
            let ve: Vec<f64> = ok.iter().map(|e| e[t].1).collect();
            let mean = compensated_sum(est.iter().copied()) / n;
            let var = compensated_sum(est.iter().map(|e| (e - mean).powi(2))) / (n - 1.0);
            let mean_ve = compensated_sum(ve.iter().copied()) / n;
            let mut width = Vec::with_capacity(est.len());
            let mut hits = 0usize;
            for (e, v) in est.iter().zip(&ve) {
                let (lo, hi) = confidence_interval(*e, *v);
                width.push(hi - lo);
                if lo <= tv && tv <= hi {
                    hits += 1;
                }
            }
            ParameterSummary {
                parameter: names[t].clone(),
                truth: tv,
                mean,
                var,
                rb_pct: relative_bias_pct(mean_ve, var),
                ci_width: compensated_sum(width) / n,
                coverage: hits as f64 / n,
            }
        })
        .collect();
    MethodSummary { method, rows, failures }
}

/// Runs `config.replicates` independent samples over one population.
pub fn run_study(
    pop_spec: &PopulationSpec,
    design: &DesignSpec,
    rspec: &ResponseSpec,
    config: &StudyConfig,
    master_seed: u64,
) -> Result<SimulationReport> {
    if config.replicates < 2 {
        return Err(Error::Validation("a study needs at least two replicates".into()));
    }
    let (pop, truth) = generate_population(pop_spec, config.population_seed)?;
    let outcomes: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(&pop, design, rspec, config, master_seed, r))
        .collect::<Result<_>>()?;
    let tv = truth.as_vec();
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let per: Vec<Option<Estimates>> = outcomes
                .iter()
                .enumerate()
                .map(|(r, o)| match &o.results[k].1 {
                    Ok(e) => Some(e.clone()),
                    Err(err) => {
                        log::warn!("replicate {r}: {} failed: {err}", m.label());
                        None
                    }
                })
                .collect();
            summarize(m, &per, &tv)
        })
        .collect();
    Ok(SimulationReport {
        replicates: config.replicates,
        population_response_rate: population_response_rate(&pop, rspec),
        mean_response_rate: compensated_sum(outcomes.iter().map(|o| o.response_rate)) / outcomes.len() as f64,
        truth,
        methods,
    })
}

impl SimulationReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    /// Long CSV: `method,parameter,truth,Mean,Var,RB_pct,CI_width,Coverage`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "parameter", "truth", "Mean", "Var", "RB_pct", "CI_width", "Coverage"])?;
        for s in &self.methods {
            for r in &s.rows {
                w.write_record([
                    s.method.label().to_string(),
                    r.parameter.clone(),
                    r.truth.to_string(),
                    r.mean.to_string(),
                    r.var.to_string(),
                    r.rb_pct.to_string(),
                    r.ci_width.to_string(),
                    r.coverage.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io {
            path: "<report>".into(),
            source: e.into_error(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned text table, one block per method.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "replicates: {}  population response rate: {:.3}  mean sample response rate: {:.3}",
            self.replicates, self.population_response_rate, self.mean_response_rate
        );
        for s in &self.methods {
            let _ = writeln!(out);
            let _ = writeln!(out, "{} (failed replicates: {})", s.method.label(), s.failures);
            let _ = writeln!(
                out,
                "{:<10}{:>12}{:>12}{:>12}{:>10}{:>12}{:>10}",
                "parameter", "truth", "Mean", "Var", "RB_pct", "CI_width", "Coverage"
            );
            for r in &s.rows {
                let _ = writeln!(
                    out,
                    "{:<10}{:>12.3}{:>12.3}{:>12.4}{:>10.2}{:>12.3}{:>10.3}",
                    r.parameter, r.truth, r.mean, r.var, r.rb_pct, r.ci_width, r.coverage
                );
            }
        }
        out
    }
}
