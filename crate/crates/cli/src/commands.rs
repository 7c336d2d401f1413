//! The four commands. Each returns its output files in memory; `main`
//! writes them once the command has succeeded.

use std::sync::Arc;

use fracimp::dataset::{load_csv, FractionalDataset, FractionalRow, SurveyDataset, UnitRecord};
use fracimp::estimating::{builtin_u, solve_fractional_many, EstimandKind, EstimatingFunction};
use fracimp::fhdi::{categorical_em, discretize, fefi_categorical, fhdi_continuous};
use fracimp::mi::{mi_estimates, mi_impute};
use fracimp::models::{CovariateTransform, ParametricModel, RegressionModel, StratifiedLogNormalRegression};
use fracimp::pfi::{complete_case_fit, run_em, weight_diagnostics, write_trace_csv, PFIResult, PluginProposal};
use fracimp::semiparam::{
    dr_fi, fit_propensity, kernel_fi, sfi_em, silverman_bandwidth, Bandwidth, Kernel, KernelSpec, OutcomeRegression,
};
use fracimp::sim::{parameter_names, run_study};
use fracimp::variance::{confidence_interval, jackknife_pfi, write_replicates_csv};
use serde::Serialize;

use crate::config::{Config, DataConfig, ImputeMethod, KernelName, ModelConfig, ModelKind, TargetConfig, TargetKind};
use crate::error::CliError;
use crate::output::Outputs;

#[derive(Debug, Serialize)]
struct ParameterFile {
    method: &'static str,
    names: Vec<String>,
    theta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
}

fn load(d: &DataConfig) -> Result<SurveyDataset, CliError> {
    if !d.path.exists() {
        return Err(CliError::Input {
            path: d.path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    let data = load_csv(&d.path, &d.schema()?, &d.missing)?;
    log::info!("loaded {} units and {} items from {}", data.len(), data.n_items(), d.path.display());
    Ok(data)
}

fn data_config(cfg: &Config) -> Result<&DataConfig, CliError> {
    cfg.data
        .as_ref()
        .ok_or_else(|| CliError::Config("no input data: pass --input with a [data] section, or set [data]".into()))
}

fn index(data: &SurveyDataset, name: &str) -> Result<usize, CliError> {
    Ok(data.item_index(name)?)
}

fn indices(data: &SurveyDataset, names: &[String]) -> Result<Vec<usize>, CliError> {
    names.iter().map(|n| index(data, n)).collect()
}

/// The imputed item: the model target, or the only item with missing
/// values.
fn target_item(data: &SurveyDataset, model: &ModelConfig) -> Result<usize, CliError> {
    if let Some(t) = &model.target {
        return index(data, t);
    }
    let missing: Vec<usize> = (0..data.n_items())
        .filter(|&j| data.units().iter().any(|u| !u.responded(j)))
        .collect();
    match missing.as_slice() {
        [j] => Ok(*j),
        [] => Err(CliError::Config("no item has missing values; set impute.model.target".into())),
        _ => Err(CliError::Config("several items have missing values; set impute.model.target".into())),
    }
}

fn stratified_model(data: &SurveyDataset, m: &ModelConfig) -> Result<StratifiedLogNormalRegression, CliError> {
    let y = target_item(data, m)?;
    let stratum_name = m
        .stratum
        .as_ref()
        .ok_or_else(|| CliError::Config("the stratified_lognormal model needs impute.model.stratum".into()))?;
    let stratum = index(data, stratum_name)?;
    let strata = data.items()[stratum]
        .labels()
        .ok_or_else(|| CliError::Config(format!("stratum item {stratum_name} must be categorical")))?
        .len();
    let [x] = m.covariates.as_slice() else {
        return Err(CliError::Config("the stratified_lognormal model takes exactly one covariate".into()));
    };
    Ok(StratifiedLogNormalRegression::new(stratum, index(data, x)?, y, strata))
}

fn build_model(data: &SurveyDataset, m: &ModelConfig) -> Result<Arc<dyn ParametricModel>, CliError> {
    Ok(match m.kind {
        ModelKind::Normal => Arc::new(RegressionModel::normal(target_item(data, m)?, indices(data, &m.covariates)?)),
        ModelKind::Logistic => Arc::new(RegressionModel::logistic(target_item(data, m)?, indices(data, &m.covariates)?)),
        ModelKind::StratifiedLognormal => Arc::new(stratified_model(data, m)?),
    })
}

fn target_name(t: &TargetConfig) -> String {
    if let Some(n) = &t.name {
        return n.clone();
    }
    let mut s = match (t.kind, t.value) {
        (TargetKind::Mean, _) => format!("mean_{}", t.item),
        (TargetKind::Median, _) => format!("median_{}", t.item),
        (TargetKind::Quantile, Some(p)) => format!("q{p}_{}", t.item),
        (TargetKind::ProportionBelow, Some(c)) => format!("p_below_{c}_{}", t.item),
        (_, None) => format!("{}", t.item),
    };
    if let (Some(d), Some(c)) = (&t.domain_item, t.domain_code) {
        s.push_str(&format!("_{d}={c}"));
    }
    s
}

fn build_targets(data: &SurveyDataset, cfg: &Config) -> Result<(Vec<EstimatingFunction>, Vec<String>), CliError> {
    let specs = if cfg.impute.targets.is_empty() {
        let y = target_item(data, &cfg.impute.model)?;
        vec![TargetConfig {
            name: None,
            kind: TargetKind::Mean,
            item: data.items()[y].name.clone(),
            value: None,
            domain_item: None,
            domain_code: None,
        }]
    } else {
        cfg.impute.targets.clone()
    };
    let mut us = Vec::with_capacity(specs.len());
    let mut names = Vec::with_capacity(specs.len());
    for t in &specs {
        let item = index(data, &t.item)?;
        let need = |what: &str| {
            t.value
                .ok_or_else(|| CliError::Config(format!("target {} needs `value` ({what})", t.item)))
        };
        let kind = match t.kind {
            TargetKind::Mean => EstimandKind::Mean,
            TargetKind::Median => EstimandKind::Median,
            TargetKind::Quantile => EstimandKind::Quantile(need("the quantile level")?),
            TargetKind::ProportionBelow => EstimandKind::ProportionBelow(need("the threshold")?),
        };
        let mut u = builtin_u(kind, item)?;
        match (&t.domain_item, t.domain_code) {
            (Some(d), Some(c)) => u = u.in_domain(index(data, d)?, c),
            (None, None) => {}
            _ => return Err(CliError::Config("a domain needs both domain_item and domain_code".into())),
        }
        us.push(u);
        names.push(target_name(t));
    }
    Ok((us, names))
}

fn estimates_csv(names: &[String], values: &[f64]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "estimate"]).map_err(fracimp::Error::from)?;
    for (n, v) in names.iter().zip(values) {
        w.write_record([n.clone(), v.to_string()]).map_err(fracimp::Error::from)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

fn diagnostics_csv(fdata: &FractionalDataset, ess_warn: f64) -> Result<Vec<u8>, CliError> {
    let diag = weight_diagnostics(fdata, ess_warn);
    for warning in &diag.warnings {
        log::warn!("{warning}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["unit_id", "ess", "max_weight"]).map_err(fracimp::Error::from)?;
    for s in &diag.units {
        w.write_record([fdata.base().unit(s.unit).id.clone(), s.ess.to_string(), s.max_weight.to_string()])
            .map_err(fracimp::Error::from)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

fn fit_pfi(data: &SurveyDataset, cfg: &Config, seed: u64) -> Result<(Arc<dyn ParametricModel>, PFIResult), CliError> {
    let model = build_model(data, &cfg.impute.model)?;
    let theta0 = complete_case_fit(data, model.as_ref())?;
    let h = PluginProposal::new(model.clone(), theta0.clone())?;
    let fit = run_em(data, model.as_ref(), &h, &theta0, &cfg.impute.pfi, seed)?;
    if !fit.converged {
        log::warn!("EM stopped after {} iterations without converging", fit.trace.len());
    }
    Ok((model, fit))
}

/// Imputes with the configured method and solves every target on the
/// completed data.
pub fn impute(cfg: &Config, seed: u64) -> Result<Outputs, CliError> {
    let data = load(data_config(cfg)?)?;
    let (targets, names) = build_targets(&data, cfg)?;
    let mut out = Outputs::default();
    let ic = &cfg.impute;
    let ess_warn = ic.pfi.ess_warn;
    let (fdata, params) = match ic.method {
        ImputeMethod::Pfi => {
            let (model, fit) = fit_pfi(&data, cfg, seed)?;
            let pnames = model.param_names();
            out.add_with("em_trace.csv", |buf| write_trace_csv(&fit.trace, &pnames, buf))?;
            let params = ParameterFile {
                method: "pfi",
                names: pnames,
                theta: fit.theta.clone(),
                converged: Some(fit.converged),
                iterations: Some(fit.trace.len()),
            };
            (fit.fdata, params)
        }
        ImputeMethod::Fhdi => {
            let items = if ic.fhdi.items.is_empty() {
                (0..data.n_items())
                    .filter(|&j| data.units().iter().any(|u| !u.responded(j)))
                    .collect()
            } else {
                indices(&data, &ic.fhdi.items)?
            };
            let continuous: Vec<usize> = items
                .iter()
                .copied()
                .filter(|&j| !data.items()[j].is_categorical())
                .collect();
            let (em, fdata) = if continuous.is_empty() {
                let em = categorical_em(&data, &items, ic.fhdi.max_iter, ic.fhdi.tol)?;
                let fdata = fefi_categorical(&data, &em)?;
                (em, fdata)
            } else {
                let (shadow, disc) = discretize(&data, &continuous, ic.fhdi.k)?;
                let em = categorical_em(&shadow, &items, ic.fhdi.max_iter, ic.fhdi.tol)?;
                let fdata = fhdi_continuous(&data, &disc, &em, ic.fhdi.donors, seed)?;
                (em, fdata)
            };
            if !em.unimputable.is_empty() {
                log::warn!("{} units match no observed cell and were left unimputed", em.unimputable.len());
            }
            let mut trace = String::from("iteration,loglik\n");
            for (t, l) in em.loglik.iter().enumerate() {
                trace.push_str(&format!("{},{}\n", t + 1, l));
            }
            out.add("em_trace.csv", trace.into_bytes());
            let shadow = fdata.base().clone();
            out.add_with("cells.csv", |buf| em.model.write_csv(&shadow, buf))?;
            let params = ParameterFile {
                method: "fhdi",
                names: Vec::new(),
                theta: Vec::new(),
                converged: Some(em.converged),
                iterations: Some(em.loglik.len()),
            };
            (fdata, params)
        }
        ImputeMethod::Kernel => {
            let y = target_item(&data, &ic.model)?;
            let x = indices(&data, &ic.model.covariates)?;
            let spec = KernelSpec {
                kernel: match ic.kernel.kernel {
                    KernelName::Gaussian => Kernel::Gaussian,
                    KernelName::Epanechnikov => Kernel::Epanechnikov,
                },
                bandwidth: ic.kernel.bandwidth.map_or(Bandwidth::Silverman, Bandwidth::Fixed),
                product: ic.kernel.product,
            };
            let (_, fdata) = kernel_fi(&data, &x, y, &targets[0], &spec)?;
            let theta = x
                .iter()
                .map(|&j| {
                    ic.kernel.bandwidth.unwrap_or_else(|| {
                        let xs: Vec<f64> = data
                            .units()
                            .iter()
                            .filter(|u| u.responded(y))
                            .map(|u| u.values[j].unwrap())
                            .collect();
                        silverman_bandwidth(&xs)
                    })
                })
                .collect();
            let params = ParameterFile {
                method: "kernel",
                names: x.iter().map(|&j| format!("bandwidth_{}", data.items()[j].name)).collect(),
                theta,
                converged: None,
                iterations: None,
            };
            (fdata, params)
        }
        ImputeMethod::Sfi => {
            let model = build_model(&data, &ic.model)?;
            let theta0 = complete_case_fit(&data, model.as_ref())?;
            let res = sfi_em(&data, model.as_ref(), &theta0, ic.sfi.max_iter, ic.sfi.tol)?;
            if !res.converged {
                log::warn!("SFI stopped after {} iterations without converging", res.iterations);
            }
            let params = ParameterFile {
                method: "sfi",
                names: model.param_names(),
                theta: res.theta,
                converged: Some(res.converged),
                iterations: Some(res.iterations),
            };
            (res.fdata, params)
        }
        ImputeMethod::Dr => {
            let y = target_item(&data, &ic.model)?;
            let x = indices(&data, &ic.model.covariates)?;
            let pnames = if ic.dr.propensity_covariates.is_empty() {
                &ic.model.covariates
            } else {
                &ic.dr.propensity_covariates
            };
            let pcov = pnames
                .iter()
                .map(|n| {
                    let t = if ic.dr.log_covariates.contains(n) {
                        CovariateTransform::Log
                    } else {
                        CovariateTransform::Identity
                    };
                    Ok((index(&data, n)?, t))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let mut propensity = fit_propensity(&data, y, pcov)?;
            if ic.dr.normalize {
                propensity = propensity.normalized(&data, y)?;
            }
            let outcome = OutcomeRegression::fit(&data, y, x.clone())?;
            let (_, fdata) = dr_fi(&data, y, &outcome, &propensity, &targets[0])?;
            let mut names: Vec<String> = std::iter::once("outcome_intercept".to_string())
                .chain(x.iter().map(|&j| format!("outcome_{}", data.items()[j].name)))
                .collect();
            names.push("propensity_intercept".into());
            names.extend(pnames.iter().map(|n| format!("propensity_{n}")));
            let theta = outcome.beta.iter().chain(&propensity.model.phi).copied().collect();
            let params = ParameterFile {
                method: "dr",
                names,
                theta,
                converged: None,
                iterations: None,
            };
            (fdata, params)
        }
        ImputeMethod::Mi => {
            if ic.model.kind != ModelKind::StratifiedLognormal {
                return Err(CliError::Config("mi imputes under the stratified_lognormal model".into()));
            }
            let model = stratified_model(&data, &ic.model)?;
            let imps = mi_impute(&data, &model, ic.mi.m, ic.mi.prior, seed)?;
            let fdata = stack_imputations(&data, &imps)?;
            if data.strata().is_some() {
                let rubin = mi_estimates(&data, &model, ic.mi.m, ic.mi.prior, seed)?;
                let pn = parameter_names(rubin.len() - 1);
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["parameter", "estimate", "within", "between", "total"])
                    .map_err(fracimp::Error::from)?;
                for (n, r) in pn.iter().zip(&rubin) {
                    w.write_record([
                        n.clone(),
                        r.estimate.to_string(),
                        r.within.to_string(),
                        r.between.to_string(),
                        r.total.to_string(),
                    ])
                    .map_err(fracimp::Error::from)?;
                }
                out.add("rubin.csv", w.into_inner().expect("in-memory writer"));
            }
            let params = ParameterFile {
                method: "mi",
                names: Vec::new(),
                theta: Vec::new(),
                converged: None,
                iterations: None,
            };
            (fdata, params)
        }
    };
    let est: Vec<f64> = solve_fractional_many(&fdata, &targets)?.iter().map(|e| e.eta).collect();
    out.add_with("fractional.csv", |buf| fdata.write_csv(buf))?;
    out.add_json("theta.json", &params)?;
    out.add("weights.csv", diagnostics_csv(&fdata, ess_warn)?);
    out.add("estimates.csv", estimates_csv(&names, &est)?);
    Ok(out)
}

/// The `m` completed datasets as one fractional dataset with weight `1/m`
/// per imputation.
fn stack_imputations(data: &SurveyDataset, imps: &[SurveyDataset]) -> Result<FractionalDataset, CliError> {
    let m = imps.len();
    let mut rows = Vec::new();
    for (i, u) in data.units().iter().enumerate() {
        if u.is_complete() {
            rows.push(FractionalRow {
                unit: i,
                donor: 0,
                values: u.values.iter().map(|v| v.unwrap()).collect(),
                weight: 1.0,
            });
            continue;
        }
        for (k, imp) in imps.iter().enumerate() {
            rows.push(FractionalRow {
                unit: i,
                donor: k,
                values: imp.unit(i).values.iter().map(|v| v.unwrap_or(0.0)).collect(),
                weight: 1.0 / m as f64,
            });
        }
    }
    Ok(FractionalDataset::new(data.clone(), rows)?)
}

/// PFI with delete-one jackknife variances of every target.
pub fn variance(cfg: &Config, seed: u64) -> Result<Outputs, CliError> {
    if cfg.impute.method != ImputeMethod::Pfi {
        return Err(CliError::Config("replication variance is available for method pfi".into()));
    }
    let data = load(data_config(cfg)?)?;
    let (targets, names) = build_targets(&data, cfg)?;
    let (model, fit) = fit_pfi(&data, cfg, seed)?;
    let jk = jackknife_pfi(&fit, model.as_ref(), &targets, cfg.variance.replicate_method, &cfg.impute.pfi)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "estimate", "variance", "se", "ci_lower", "ci_upper"])
        .map_err(fracimp::Error::from)?;
    for ((n, e), v) in names.iter().zip(&jk.estimates).zip(&jk.variances) {
        let (lo, hi) = confidence_interval(*e, *v);
        w.write_record([
            n.clone(),
            e.to_string(),
            v.to_string(),
            v.sqrt().to_string(),
            lo.to_string(),
            hi.to_string(),
        ])
        .map_err(fracimp::Error::from)?;
    }
    let mut out = Outputs::default();
    out.add("variance.csv", w.into_inner().expect("in-memory writer"));
    let pnames = model.param_names();
    out.add_with("replicates.csv", |buf| write_replicates_csv(&jk.replicates, &pnames, &names, buf))?;
    out.add_json(
        "theta.json",
        &ParameterFile {
            method: "pfi",
            names: pnames,
            theta: fit.theta.clone(),
            converged: Some(fit.converged),
            iterations: Some(fit.trace.len()),
        },
    )?;
    Ok(out)
}

/// The Monte Carlo comparison of FULL, MI and PFI.
pub fn simulate(cfg: &Config, seed: u64) -> Result<Outputs, CliError> {
    let s = &cfg.simulate;
    s.population.validate()?;
    let study = s.study();
    log::info!("running {} replicates", study.replicates);
    let report = run_study(&s.population, &s.design, &s.response, &study, seed)?;
    let table = report.to_table();
    for m in &report.methods {
        if m.failures > 0 {
            log::warn!("{}: {} replicates failed and were dropped", m.method.label(), m.failures);
        }
    }
    let mut out = Outputs::default();
    out.add("report.csv", report.to_csv()?.into_bytes());
    out.add("report.txt", table.into_bytes());
    out.add_json("report.json", &report)?;
    Ok(out)
}

/// Phase 1 on the item layout of phase 2, with the phase-2-only items
/// missing.
fn align_phase1(phase1: &SurveyDataset, phase2: &SurveyDataset) -> Result<SurveyDataset, CliError> {
    let map: Vec<Option<usize>> = phase2
        .items()
        .iter()
        .map(|it| phase1.items().iter().position(|p| p.name == it.name))
        .collect();
    let units = phase1
        .units()
        .iter()
        .map(|u| UnitRecord::new(u.id.clone(), u.weight, map.iter().map(|k| k.and_then(|k| u.values[k])).collect()))
        .collect();
    let strata = phase1
        .strata()
        .map(|codes| codes.iter().map(|&c| phase1.stratum_labels()[c].clone()).collect());
    Ok(SurveyDataset::new(phase2.items().to_vec(), units, strata)?)
}

/// Two-phase FEFI, or reduced-m FI when `m` is set.
pub fn twophase(cfg: &Config, seed: u64) -> Result<Outputs, CliError> {
    let tc = cfg
        .twophase
        .as_ref()
        .ok_or_else(|| CliError::Config("the twophase command needs a [twophase] section".into()))?;
    let phase2 = load(&tc.phase2)?;
    let phase1 = align_phase1(&load(&tc.phase1)?, &phase2)?;
    let x = indices(&phase2, &tc.x)?;
    let y = index(&phase2, &tc.y)?;
    let tp = fracimp::calib::TwoPhaseSample::new(phase1, phase2, x, y, tc.nested)?;
    let res = match tc.m {
        None => fracimp::calib::two_phase_fefi(&tp)?,
        Some(m) => fracimp::calib::two_phase_reduced(&tp, m, seed)?,
    };
    let regression = tp.regression_total(&res.beta);
    let n1 = tp.phase1.total_weight();
    let mut out = Outputs::default();
    out.add_with("fractional.csv", |buf| res.fdata.write_csv(buf))?;
    let names: Vec<String> = std::iter::once("intercept".to_string()).chain(tc.x.iter().cloned()).collect();
    out.add_json(
        "theta.json",
        &ParameterFile {
            method: if tc.m.is_some() { "twophase_reduced" } else { "twophase_fefi" },
            names,
            theta: res.beta.clone(),
            converged: None,
            iterations: None,
        },
    )?;
    let est_names = vec![
        format!("total_{}", tc.y),
        format!("mean_{}", tc.y),
        format!("regression_total_{}", tc.y),
    ];
    out.add("estimates.csv", estimates_csv(&est_names, &[res.total, res.total / n1, regression])?);
    out.add("weights.csv", diagnostics_csv(&res.fdata, cfg.impute.pfi.ess_warn)?);
    Ok(out)
}
