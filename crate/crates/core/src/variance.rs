//! Stratified delete-1 jackknife for fractional imputation estimators.
//!
//! Replicates reuse the imputed values; only the fractional weights are
//! recomputed at each replicate parameter.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SurveyDataset;
use crate::error::{Error, Result};
use crate::estimating::{solve_points, EstimatingFunction};
use crate::linalg::solve_symmetric;
use crate::models::{newton_mle, ParametricModel};
use crate::pfi::{normalize_log_weights, PFIConfig, PFIResult};

/// `z_{0.975}`.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// `η̂ ± z_{0.975} √V̂`.
pub fn confidence_interval(estimate: f64, variance: f64) -> (f64, f64) {
    let half = Z_975 * variance.max(0.0).sqrt();
    (estimate - half, estimate + half)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationScheme {
    base: Vec<f64>,
    stratum: Vec<usize>,
    n_h: Vec<usize>,
}

impl ReplicationScheme {
    /// One replicate per unit: replicate `k` zeroes unit `k` and scales its
    /// stratum-mates by `n_h / (n_h − 1)`. Without strata the whole sample
    /// is one stratum.
    pub fn build_delete1(data: &SurveyDataset) -> Result<Self> {
        let stratum: Vec<usize> = match data.strata() {
            Some(s) => s.to_vec(),
            None => vec![0; data.len()],
        };
        let h = stratum.iter().copied().max().map_or(0, |m| m + 1);
        let mut n_h = vec![0usize; h];
        for &s in &stratum {
            n_h[s] += 1;
        }
        if let Some(bad) = n_h.iter().position(|&n| n == 1) {
            let label = data.stratum_labels().get(bad).cloned().unwrap_or_else(|| bad.to_string());
            return Err(Error::Validation(format!(
                "stratum {label} has a single unit; delete-1 jackknife needs at least two per stratum"
            )));
        }
        Ok(ReplicationScheme {
            base: data.weights(),
            stratum,
            n_h,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn stratum_of(&self, k: usize) -> usize {
        self.stratum[k]
    }

    pub fn stratum_sizes(&self) -> &[usize] {
        &self.n_h
    }

    /// Multiplier `n_h / (n_h − 1)` applied to the survivors of replicate `k`.
    pub fn rescale(&self, k: usize) -> f64 {
        let n = self.n_h[self.stratum[k]] as f64;
        n / (n - 1.0)
    }

    /// `(n_h − 1) / n_h` for replicate `k`.
    pub fn factor(&self, k: usize) -> f64 {
        1.0 / self.rescale(k)
    }

    pub fn weights(&self, k: usize) -> Vec<f64> {
        let h = self.stratum[k];
        let f = self.rescale(k);
        self.base
            .iter()
            .zip(&self.stratum)
            .enumerate()
            .map(|(i, (&w, &s))| {
                if i == k {
                    0.0
                } else if s == h {
                    w * f
                } else {
                    w
                }
            })
            .collect()
    }
}

/// `Σ_h ((n_h − 1)/n_h) Σ_{i∈S_h} (η̂^{[i]} − η̂)²`.
pub fn jackknife_variance(replicates: &[f64], scheme: &ReplicationScheme, estimate: f64) -> Result<f64> {
    if replicates.len() != scheme.len() {
        return Err(Error::Dimension {
            expected: scheme.len(),
            got: replicates.len(),
        });
    }
    Ok(replicates
        .iter()
        .enumerate()
        .map(|(k, r)| scheme.factor(k) * (r - estimate).powi(2))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateMethod {
    #[default]
    OneStepNewton,
    Em,
}

/// Per-unit pieces of the mean score at θ̂, shared by every replicate.
pub struct JackknifeContext<'a> {
    pfi: &'a PFIResult,
    model: &'a dyn ParametricModel,
    /// Index into `pfi.imputations` for imputed units.
    slot: Vec<Option<usize>>,
    /// `Σ_j w*_ij S_ij` at θ̂.
    g: Vec<DVector<f64>>,
    /// `Σ_j w*_ij ∂S_ij/∂θᵀ + Σ_j w*_ij (S_ij − ḡ_i)^{⊗2}` at θ̂.
    h: Vec<DMatrix<f64>>,
    /// Observed records for units with nothing imputed.
    complete: Vec<Vec<f64>>,
}

impl<'a> JackknifeContext<'a> {
    pub fn new(pfi: &'a PFIResult, model: &'a dyn ParametricModel) -> Result<Self> {
        let imp = &pfi.imputations;
        let base = &imp.base;
        let n = base.len();
        let p = model.dim();
        let mut slot = vec![None; n];
        for (k, &i) in imp.units.iter().enumerate() {
            slot[i] = Some(k);
        }
        let theta = &pfi.theta;
        let complete: Vec<Vec<f64>> = base.units().iter().map(|u| u.values.iter().map(|v| v.unwrap_or(0.0)).collect()).collect();
        let pieces: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut s = vec![0.0; p];
                let mut jac = vec![0.0; p * p];
                let mut g = DVector::zeros(p);
                let mut h = DMatrix::zeros(p, p);
                let rows = pfi.fdata.unit_rows(i);
                let records: Vec<(&[f64], f64)> = match slot[i] {
                    Some(_) => rows.iter().map(|r| (r.values.as_slice(), r.weight)).collect(),
                    None => vec![(complete[i].as_slice(), 1.0)],
                };
                let mut scores = Vec::with_capacity(records.len());
                for (rec, w) in &records {
                    model.score(rec, theta, &mut s);
                    model.score_jacobian(rec, theta, &mut jac);
                    let sv = DVector::from_column_slice(&s);
                    g.axpy(*w, &sv, 1.0);
                    h += DMatrix::from_row_slice(p, p, &jac) * *w;
                    scores.push(sv);
                }
                for ((_, w), sv) in records.iter().zip(&scores) {
                    let d = sv - &g;
                    h.ger(*w, &d, &d, 1.0);
                }
                (g, h)
            })
            .collect();
        let (g, h) = pieces.into_iter().unzip();
        Ok(JackknifeContext {
            pfi,
            model,
            slot,
            g,
            h,
            complete,
        })
    }

    /// Replicate pseudo-MLE. The one-step form is
    /// `θ̂ − {∂S̄^{[k]}/∂θᵀ}⁻¹ S̄^{[k]}(θ̂)`; a singular Jacobian falls back
    /// to full EM.
    pub fn replicate_theta(
        &self,
        k: usize,
        scheme: &ReplicationScheme,
        method: ReplicateMethod,
        config: &PFIConfig,
    ) -> Result<Vec<f64>> {
        let w = scheme.weights(k);
        if method == ReplicateMethod::OneStepNewton {
            let p = self.model.dim();
            let mut s = DVector::zeros(p);
            let mut jac = DMatrix::zeros(p, p);
            for (i, wi) in w.iter().enumerate() {
                if *wi != 0.0 {
                    s.axpy(*wi, &self.g[i], 1.0);
                    jac += &self.h[i] * *wi;
                }
            }
            match solve_symmetric(&jac, &s, &self.model.param_names()) {
                Ok(step) => {
                    return Ok(self.pfi.theta.iter().zip(step.iter()).map(|(t, d)| t - d).collect());
                }
                Err(Error::Singular(msg)) => {
                    log::warn!("replicate {k}: singular Jacobian ({msg}); using EM for this replicate");
                }
                Err(e) => return Err(e),
            }
        }
        self.replicate_em(&w, config)
    }

    fn replicate_em(&self, w: &[f64], config: &PFIConfig) -> Result<Vec<f64>> {
        let mut theta = self.pfi.theta.clone();
        for _ in 0..config.max_em_iter {
            let fw = self.fractional_weights(&theta)?;
            let points = self.points(w, &fw);
            let next = match self.model.weighted_mle(&points) {
                Some(r) => r?,
                None => newton_mle(self.model, &points, &theta)?,
            };
            let change = next.iter().zip(&theta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            theta = next;
            if change < config.em_tol {
                return Ok(theta);
            }
        }
        log::warn!("replicate EM stopped after {} iterations", config.max_em_iter);
        Ok(theta)
    }

    /// Fractional weights of every imputed unit at `theta`, imputed values
    /// unchanged.
    pub fn fractional_weights(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let imp = &self.pfi.imputations;
        imp.draws
            .iter()
            .zip(&imp.log_h)
            .zip(&imp.units)
            .map(|((draws, log_h), &i)| {
                let mut lw: Vec<f64> = draws.iter().zip(log_h).map(|(d, lh)| self.model.log_density(d, theta) - lh).collect();
                normalize_log_weights(&mut lw).ok_or_else(|| Error::DegenerateWeights {
                    unit: imp.base.unit(i).id.clone(),
                    message: "replicate weights underflowed".into(),
                })?;
                Ok(lw)
            })
            .collect()
    }

    fn points<'b>(&'b self, w: &[f64], fw: &[Vec<f64>]) -> Vec<(f64, &'b [f64])> {
        let imp = &self.pfi.imputations;
        let mut out = Vec::new();
        for (i, wi) in w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            match self.slot[i] {
                Some(k) => {
                    for (d, f) in imp.draws[k].iter().zip(&fw[k]) {
                        if *f != 0.0 {
                            out.push((wi * f, d.as_slice()));
                        }
                    }
                }
                None => out.push((*wi, self.complete[i].as_slice())),
            }
        }
        out
    }

    /// Solves `Σ w^{[k]}_i Σ_j w*_ij(θ̂^{[k]}) U(η; y*_ij) = 0` per target.
    pub fn replicate_eta(
        &self,
        k: usize,
        scheme: &ReplicationScheme,
        theta_k: &[f64],
        targets: &[EstimatingFunction],
    ) -> Result<Vec<f64>> {
        let w = scheme.weights(k);
        let fw = self.fractional_weights(theta_k)?;
        let points = self.points(&w, &fw);
        targets.iter().map(|u| solve_points(&points, u).map(|e| e.eta)).collect()
    }

    /// Full-sample estimates at θ̂.
    pub fn point_estimates(&self, targets: &[EstimatingFunction]) -> Result<Vec<f64>> {
        let w: Vec<f64> = self.pfi.imputations.base.weights();
        let fw = self.fractional_weights(&self.pfi.theta)?;
        let points = self.points(&w, &fw);
        targets.iter().map(|u| solve_points(&points, u).map(|e| e.eta)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimates {
    pub method: ReplicateMethod,
    pub theta: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeResult {
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
    pub replicates: ReplicateEstimates,
}

impl JackknifeResult {
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.estimates
            .iter()
            .zip(&self.variances)
            .map(|(e, v)| confidence_interval(*e, *v))
            .collect()
    }
}

/// Jackknife variances of the targets computed from a PFI fit.
pub fn jackknife_pfi(
    pfi: &PFIResult,
    model: &dyn ParametricModel,
    targets: &[EstimatingFunction],
    method: ReplicateMethod,
    config: &PFIConfig,
) -> Result<JackknifeResult> {
    let scheme = ReplicationScheme::build_delete1(&pfi.imputations.base)?;
    let ctx = JackknifeContext::new(pfi, model)?;
    let estimates = ctx.point_estimates(targets)?;
    let reps: Vec<(Vec<f64>, Vec<f64>)> = (0..scheme.len())
        .into_par_iter()
        .map(|k| {
            let theta = ctx.replicate_theta(k, &scheme, method, config)?;
            let eta = ctx.replicate_eta(k, &scheme, &theta, targets)?;
            Ok((theta, eta))
        })
        .collect::<Result<_>>()?;
    let (theta, eta): (Vec<_>, Vec<_>) = reps.into_iter().unzip();
    let variances = (0..targets.len())
        .map(|t| {
            let col: Vec<f64> = eta.iter().map(|e| e[t]).collect();
            jackknife_variance(&col, &scheme, estimates[t])
        })
        .collect::<Result<_>>()?;
    Ok(JackknifeResult {
        estimates,
        variances,
        replicates: ReplicateEstimates { method, theta, eta },
    })
}

/// Jackknife for estimators computed directly on a complete sample.
pub fn jackknife_complete(data: &SurveyDataset, targets: &[EstimatingFunction]) -> Result<JackknifeResult> {
    let scheme = ReplicationScheme::build_delete1(data)?;
    let records: Vec<Vec<f64>> = data.units().iter().map(|u| u.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()).collect();
    let solve = |w: &[f64]| -> Result<Vec<f64>> {
        let points: Vec<(f64, &[f64])> = w
            .iter()
            .zip(&records)
            .filter(|(c, _)| **c != 0.0)
            .map(|(c, r)| (*c, r.as_slice()))
            .collect();
        targets.iter().map(|u| solve_points(&points, u).map(|e| e.eta)).collect()
    };
    let estimates = solve(&data.weights())?;
    let eta: Vec<Vec<f64>> = (0..scheme.len()).into_par_iter().map(|k| solve(&scheme.weights(k))).collect::<Result<_>>()?;
    let variances = (0..targets.len())
        .map(|t| {
            let col: Vec<f64> = eta.iter().map(|e| e[t]).collect();
            jackknife_variance(&col, &scheme, estimates[t])
        })
        .collect::<Result<_>>()?;
    Ok(JackknifeResult {
        estimates,
        variances,
        replicates: ReplicateEstimates {
            method: ReplicateMethod::OneStepNewton,
            theta: Vec::new(),
            eta,
        },
    })
}

/// CSV with columns `k`, θ components, then one column per target.
pub fn write_replicates_csv<W: Write>(
    reps: &ReplicateEstimates,
    theta_names: &[String],
    target_names: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    if !reps.theta.is_empty() {
        header.extend(theta_names.iter().cloned());
    }
    header.extend(target_names.iter().cloned());
    w.write_record(&header)?;
    for (k, eta) in reps.eta.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        if let Some(t) = reps.theta.get(k) {
            rec.extend(t.iter().map(|v| v.to_string()));
        }
        rec.extend(eta.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<replicates>".into(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Item, UnitRecord};
    use crate::models::RegressionModel;
    use crate::pfi::{run_em, PluginProposal};
    use crate::rng::{domain, substream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn stratified(sizes: &[usize], seed: u64) -> SurveyDataset {
        let mut rng = substream(seed, domain::SAMPLE, 0);
        let mut units = Vec::new();
        let mut strata = Vec::new();
        for (h, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let y: f64 = 10.0 * h as f64 + { let z: f64 = StandardNormal.sample(&mut rng); z };
                units.push(UnitRecord::new(format!("{h}-{i}"), 5.0 + h as f64, vec![Some(y)]));
                strata.push(h.to_string());
            }
        }
        SurveyDataset::new(vec![Item::continuous("y")], units, Some(strata)).unwrap()
    }

    #[test]
    fn delete1_weights() {
        let d = stratified(&[2, 3], 1);
        let s = ReplicationScheme::build_delete1(&d).unwrap();
        assert_eq!(s.len(), 5);
        let w0 = s.weights(0);
        assert_eq!(w0[0], 0.0);
        assert_eq!(w0[1], 2.0 * d.unit(1).weight);
        assert_eq!(&w0[2..], &d.weights()[2..]);
        for k in 0..5 {
            let w = s.weights(k);
            let h = s.stratum_of(k);
            let total: f64 = (0..5).filter(|&i| s.stratum_of(i) == h).map(|i| w[i]).sum();
            let orig: f64 = (0..5).filter(|&i| s.stratum_of(i) == h).map(|i| d.unit(i).weight).sum();
            assert!((total - orig).abs() < 1e-12);
        }
        assert_eq!(
            ReplicationScheme::build_delete1(&stratified(&[1, 3], 1)).unwrap_err().code(),
            "E_VALIDATION"
        );
    }

    #[test]
    fn small_variance_cases() {
        let d = stratified(&[2], 1);
        let s = ReplicationScheme::build_delete1(&d).unwrap();
        assert_eq!(jackknife_variance(&[3.0, 3.0], &s, 3.0).unwrap(), 0.0);
        let v = jackknife_variance(&[3.5, 2.5], &s, 3.0).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn complete_data_mean_matches_textbook_jackknife() {
        let d = stratified(&[4, 6, 5], 3);
        let jk = jackknife_complete(&d, &[EstimatingFunction::mean(0)]).unwrap();
        // textbook: for the weighted mean, rebuild each replicate by hand
        let s = d.strata().unwrap();
        let n = d.len();
        let mut v = 0.0;
        let full: f64 = d.units().iter().map(|u| u.weight * u.values[0].unwrap()).sum::<f64>() / d.total_weight();
        for k in 0..n {
            let nh = s.iter().filter(|&&h| h == s[k]).count() as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                let w = if i == k {
                    0.0
                } else if s[i] == s[k] {
                    d.unit(i).weight * nh / (nh - 1.0)
                } else {
                    d.unit(i).weight
                };
                num += w * d.unit(i).values[0].unwrap();
                den += w;
            }
            v += (nh - 1.0) / nh * (num / den - full).powi(2);
        }
        assert!((jk.estimates[0] - full).abs() < 1e-12);
        assert!((jk.variances[0] - v).abs() < 1e-12 * v);
    }

    proptest! {
        #[test]
        fn variance_matches_direct_sum(reps in prop::collection::vec(-5.0f64..5.0, 9), est in -1.0f64..1.0) {
            let d = stratified(&[2, 3, 4], 0);
            let s = ReplicationScheme::build_delete1(&d).unwrap();
            let direct = reps[..2].iter().map(|r| 0.5 * (r - est).powi(2)).sum::<f64>()
                + reps[2..5].iter().map(|r| 2.0 / 3.0 * (r - est).powi(2)).sum::<f64>()
                + reps[5..].iter().map(|r| 0.75 * (r - est).powi(2)).sum::<f64>();
            let v = jackknife_variance(&reps, &s, est).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }

    fn normal_mar(n: usize, seed: u64) -> SurveyDataset {
        let mut rng = substream(seed, domain::SAMPLE, 0);
        let mut units = Vec::new();
        let mut strata = Vec::new();
        for i in 0..n {
            let x: f64 = rng.random::<f64>() * 4.0;
            let y = 1.0 + 0.8 * x + { let z: f64 = StandardNormal.sample(&mut rng); z };
            let miss = rng.random::<f64>() < 0.2 + 0.1 * x;
            let h = i % 2;
            units.push(UnitRecord::new(i.to_string(), 2.0 + h as f64, vec![Some(x), (!miss).then_some(y)]));
            strata.push(h.to_string());
        }
        SurveyDataset::new(vec![Item::continuous("x"), Item::continuous("y")], units, Some(strata)).unwrap()
    }

    fn fit(d: &SurveyDataset) -> (Arc<RegressionModel>, PFIResult) {
        let model = Arc::new(RegressionModel::normal(1, vec![0]));
        let theta0 = crate::pfi::complete_case_fit(d, model.as_ref()).unwrap();
        let h = PluginProposal::new(model.clone(), theta0.clone()).unwrap();
        let cfg = PFIConfig::with_m(50);
        let r = run_em(d, model.as_ref(), &h, &theta0, &cfg, 7).unwrap();
        (model, r)
    }

    #[test]
    fn undisturbed_replicate_is_a_fixed_point() {
        let d = normal_mar(60, 1);
        let (model, r) = fit(&d);
        let ctx = JackknifeContext::new(&r, model.as_ref()).unwrap();
        let fw = ctx.fractional_weights(&r.theta).unwrap();
        let w = d.weights();
        let p = model.dim();
        let mut s = DVector::zeros(p);
        let mut jac = DMatrix::zeros(p, p);
        for i in 0..d.len() {
            s.axpy(w[i], &ctx.g[i], 1.0);
            jac += &ctx.h[i] * w[i];
        }
        let step = solve_symmetric(&jac, &s, &model.param_names()).unwrap();
        assert!(step.amax() < 1e-7, "{}", step.amax());
        let eta = ctx.point_estimates(&[EstimatingFunction::mean(1)]).unwrap();
        let points = ctx.points(&w, &fw);
        let again = solve_points(&points, &EstimatingFunction::mean(1)).unwrap().eta;
        assert_eq!(eta[0], again);
    }

    #[test]
    fn replicate_jacobian_matches_finite_differences() {
        let d = normal_mar(40, 5);
        let (model, r) = fit(&d);
        let ctx = JackknifeContext::new(&r, model.as_ref()).unwrap();
        let w = d.weights();
        let p = model.dim();
        let mean_score = |theta: &[f64]| -> Vec<f64> {
            let fw = ctx.fractional_weights(theta).unwrap();
            let mut s = vec![0.0; p];
            let mut buf = vec![0.0; p];
            for (c, rec) in ctx.points(&w, &fw) {
                model.score(rec, theta, &mut buf);
                for (a, b) in s.iter_mut().zip(&buf) {
                    *a += c * b;
                }
            }
            s
        };
        let mut jac = DMatrix::zeros(p, p);
        for i in 0..d.len() {
            jac += &ctx.h[i] * w[i];
        }
        for b in 0..p {
            let e = 1e-5;
            let mut tp = r.theta.clone();
            let mut tm = r.theta.clone();
            tp[b] += e;
            tm[b] -= e;
            let (sp, sm) = (mean_score(&tp), mean_score(&tm));
            for a in 0..p {
                let fd = (sp[a] - sm[a]) / (2.0 * e);
                assert!((fd - jac[(a, b)]).abs() < 1e-5 * jac.amax(), "({a},{b}) {fd} vs {}", jac[(a, b)]);
            }
        }
    }

    #[test]
    fn newton_and_em_replicates_agree() {
        let d = normal_mar(200, 2);
        let (model, r) = fit(&d);
        let ctx = JackknifeContext::new(&r, model.as_ref()).unwrap();
        let s = ReplicationScheme::build_delete1(&d).unwrap();
        let cfg = PFIConfig::default();
        for k in [0, 5, 33, 199] {
            let a = ctx.replicate_theta(k, &s, ReplicateMethod::OneStepNewton, &cfg).unwrap();
            let b = ctx.replicate_theta(k, &s, ReplicateMethod::Em, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn complete_data_replicate_matches_reweighted_mle() {
        let mut d = normal_mar(40, 3);
        let units: Vec<UnitRecord> = d
            .units()
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u.values[1] = Some(u.values[1].unwrap_or(2.0) + 0.1);
                u
            })
            .collect();
        d = d.with_units(units).unwrap();
        let (model, r) = fit(&d);
        let ctx = JackknifeContext::new(&r, model.as_ref()).unwrap();
        let s = ReplicationScheme::build_delete1(&d).unwrap();
        let k = 7;
        let theta = ctx.replicate_theta(k, &s, ReplicateMethod::Em, &PFIConfig::default()).unwrap();
        let newton = ctx.replicate_theta(k, &s, ReplicateMethod::OneStepNewton, &PFIConfig::default()).unwrap();
        let w = s.weights(k);
        let units: Vec<UnitRecord> = d
            .units()
            .iter()
            .zip(&w)
            .filter(|(_, w)| **w > 0.0)
            .map(|(u, w)| UnitRecord { weight: *w, ..u.clone() })
            .collect();
        let rd = SurveyDataset::new(d.items().to_vec(), units, None).unwrap();
        let direct = crate::models::pseudo_mle(&rd, model.as_ref()).unwrap();
        for ((a, b), c) in theta.iter().zip(&direct).zip(&newton) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            assert!((c - b).abs() < 1e-3, "{c} vs {b}");
        }
        let eta = ctx.replicate_eta(k, &s, &theta, &[EstimatingFunction::mean(1)]).unwrap();
        let cc = crate::estimating::solve_complete(&rd, &EstimatingFunction::mean(1)).unwrap();
        assert!((eta[0] - cc.eta).abs() < 1e-12);
    }

    #[test]
    fn imputed_values_are_untouched() {
        let d = normal_mar(50, 4);
        let (model, r) = fit(&d);
        let before = r.imputations.draws.clone();
        jackknife_pfi(&r, model.as_ref(), &[EstimatingFunction::mean(1)], ReplicateMethod::OneStepNewton, &PFIConfig::default()).unwrap();
        assert_eq!(before, r.imputations.draws);
    }

    #[test]
    fn replicate_csv_layout() {
        let reps = ReplicateEstimates {
            method: ReplicateMethod::OneStepNewton,
            theta: vec![vec![1.0, 2.0]],
            eta: vec![vec![3.0]],
        };
        let mut buf = Vec::new();
        write_replicates_csv(&reps, &["a".into(), "b".into()], &["mean_y".into()], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,a,b,mean_y\n0,1,2,3\n");
    }
}
