//! Reducing a large imputation set to `m` rows per unit, and calibrating
//! the reduced fractional weights back onto control totals. Also the
//! two-phase sampling imputations, where every phase-1 unit receives
//! residual donors from the phase-2 sample.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::dataset::{FractionalDataset, FractionalRow, SurveyDataset};
use crate::error::{Error, Result};
use crate::fhdi::systematic_pps;
use crate::linalg::{describe_direction, solve_symmetric};
use crate::models::{weighted_least_squares, ParametricModel};
use crate::rng::{domain, substream};

/// Selects `m` rows per unit by systematic PPS on the fractional weights,
/// after a random shuffle of the unit's rows. Selected rows get weight
/// `1/m`; a row drawn twice appears twice. Units with at most `m` rows keep
/// all of them with their original weights.
pub fn pps_subsample(fdata: &FractionalDataset, m: usize, seed: u64) -> Result<FractionalDataset> {
    if m == 0 {
        return Err(Error::Validation("m must be at least 1".into()));
    }
    if fdata.has_negative_weights() {
        return Err(Error::Contract("PPS selection needs nonnegative fractional weights".into()));
    }
    let mut rows = Vec::new();
    let mut short = 0;
    for i in 0..fdata.base().len() {
        let unit_rows = fdata.unit_rows(i);
        if unit_rows.len() <= m {
            if unit_rows.len() > 1 && unit_rows.len() < m {
                short += 1;
            }
            rows.extend_from_slice(unit_rows);
            continue;
        }
        let mut rng = substream(seed, domain::SUBSAMPLE, i as u64);
        let mut order: Vec<usize> = (0..unit_rows.len()).collect();
        order.shuffle(&mut rng);
        let sizes: Vec<f64> = order.iter().map(|&k| unit_rows[k].weight).collect();
        let mut picks: Vec<usize> = systematic_pps(&sizes, m, &mut rng).into_iter().map(|k| order[k]).collect();
        picks.sort_unstable();
        for (d, k) in picks.into_iter().enumerate() {
            rows.push(FractionalRow {
                donor: d,
                weight: 1.0 / m as f64,
                ..unit_rows[k].clone()
            });
        }
    }
    if short > 0 {
        log::warn!("{short} units have fewer than {m} imputed rows; all of their rows were kept");
    }
    FractionalDataset::new(fdata.base().clone(), rows)
}

/// Control vector per row for score calibration: `S(θ̂; y*_ij)`.
pub fn score_controls(fdata: &FractionalDataset, model: &dyn ParametricModel, theta: &[f64]) -> Vec<Vec<f64>> {
    let mut buf = vec![0.0; model.dim()];
    fdata
        .rows()
        .iter()
        .map(|r| {
            model.score(&r.values, theta, &mut buf);
            buf.clone()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Calibrated {
    pub fdata: FractionalDataset,
    pub delta: Vec<f64>,
    /// `‖Σ_i w_i Σ_j w̃_ij c_ij − target‖∞` after calibration.
    pub residual: f64,
}

fn check_controls(fdata: &FractionalDataset, controls: &[Vec<f64>], target: &[f64]) -> Result<usize> {
    if controls.len() != fdata.len() {
        return Err(Error::Dimension {
            expected: fdata.len(),
            got: controls.len(),
        });
    }
    let q = target.len();
    if controls.iter().any(|c| c.len() != q) {
        return Err(Error::Dimension {
            expected: q,
            got: controls.iter().map(Vec::len).find(|&l| l != q).unwrap_or(0),
        });
    }
    if controls.iter().flatten().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Validation("control values must be finite".into()));
    }
    Ok(q)
}

/// Per-unit weighted means `c̄_i = Σ_j w_ij c_ij` for the current weights.
fn unit_means(fdata: &FractionalDataset, controls: &[Vec<f64>], q: usize) -> Vec<Vec<f64>> {
    (0..fdata.base().len())
        .map(|i| {
            let mut m = vec![0.0; q];
            for k in fdata.unit_span(i) {
                let w = fdata.rows()[k].weight;
                for (a, c) in m.iter_mut().zip(&controls[k]) {
                    *a += w * c;
                }
            }
            m
        })
        .collect()
}

fn global_residual(fdata: &FractionalDataset, controls: &[Vec<f64>], target: &[f64], weights: &[f64]) -> DVector<f64> {
    let mut t = DVector::from_iterator(target.len(), target.iter().map(|v| -v));
    for ((r, c), w) in fdata.rows().iter().zip(controls).zip(weights) {
        let a = fdata.base().unit(r.unit).weight * w;
        for (k, v) in c.iter().enumerate() {
            t[k] += a * v;
        }
    }
    t
}

/// Cholesky can succeed on a rank-deficient PSD matrix through rounding,
/// so test the spectrum directly.
fn check_rank(q: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let eig = SymmetricEigen::new(q.clone());
    let scale = eig.eigenvalues.amax();
    let (k, min) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    if scale <= 0.0 || min <= 1e-10 * scale {
        return Err(Error::Singular(format!(
            "calibration matrix is flat along {}; the controls are collinear within units, drop or combine some of them",
            describe_direction(&eig.eigenvectors.column(k).into_owned(), names)
        )));
    }
    Ok(())
}

/// Regression calibration: `w̃ = w₀ + w₀ Δ (c − c̄)` with
/// `Δ = −Tᵀ Q⁻¹`, `T = Σ w Σ w₀ c − target`, `Q = Σ w Σ w₀ (c − c̄)^{⊗2}`.
/// Weights can turn negative.
pub fn regression_reweight(fdata: &FractionalDataset, controls: &[Vec<f64>], target: &[f64]) -> Result<Calibrated> {
    let q = check_controls(fdata, controls, target)?;
    let w0: Vec<f64> = fdata.rows().iter().map(|r| r.weight).collect();
    let t = global_residual(fdata, controls, target, &w0);
    let means = unit_means(fdata, controls, q);
    let mut qm = DMatrix::<f64>::zeros(q, q);
    for (r, c) in fdata.rows().iter().zip(controls) {
        let a = fdata.base().unit(r.unit).weight * r.weight;
        let d: Vec<f64> = c.iter().zip(&means[r.unit]).map(|(x, m)| x - m).collect();
        for u in 0..q {
            for v in 0..q {
                qm[(u, v)] += a * d[u] * d[v];
            }
        }
    }
    let names: Vec<String> = (0..q).map(|k| format!("control[{k}]")).collect();
    check_rank(&qm, &names)?;
    let delta = solve_symmetric(&qm, &(-&t), &names).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!(
            "{msg}; the controls are collinear within units, drop or combine some of them"
        )),
        other => other,
    })?;
    let weights: Vec<f64> = fdata
        .rows()
        .iter()
        .zip(controls)
        .map(|(r, c)| {
            let lin: f64 = c
                .iter()
                .zip(&means[r.unit])
                .zip(delta.iter())
                .map(|((x, m), d)| d * (x - m))
                .sum();
            r.weight * (1.0 + lin)
        })
        .collect();
    let out = fdata.reweighted(&weights)?;
    if out.has_negative_weights() {
        log::warn!("regression calibration produced negative fractional weights");
    }
    let residual = global_residual(&out, controls, target, &weights).amax();
    Ok(Calibrated {
        fdata: out,
        delta: delta.iter().copied().collect(),
        residual,
    })
}

/// Exponential calibration: `w̃_ij ∝ w₀_ij exp(Δ c_ij)` within each unit,
/// with `Δ` found by Newton on the convex dual
/// `F(Δ) = Σ_i w_i log Σ_j w₀_ij exp(Δ c_ij) − Δ·target`.
/// Converges when `‖∇F‖∞ ≤ tol · Σ_i w_i`.
pub fn exponential_reweight(
    fdata: &FractionalDataset,
    controls: &[Vec<f64>],
    target: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<Calibrated> {
    let q = check_controls(fdata, controls, target)?;
    if fdata.rows().iter().any(|r| r.weight < 0.0) {
        return Err(Error::Contract("exponential calibration needs nonnegative starting weights".into()));
    }
    let n = fdata.base().len();
    let scale: f64 = (0..n)
        .filter(|&i| !fdata.unit_span(i).is_empty())
        .map(|i| fdata.base().unit(i).weight)
        .sum();
    let eval = |delta: &[f64]| -> (f64, Vec<f64>) {
        // dual value and new weights
        let mut f = -delta.iter().zip(target).map(|(d, t)| d * t).sum::<f64>();
        let mut w = vec![0.0; fdata.len()];
        for i in 0..n {
            let span = fdata.unit_span(i);
            if span.is_empty() {
                continue;
            }
            let lin: Vec<f64> = span
                .clone()
                .map(|k| controls[k].iter().zip(delta).map(|(c, d)| c * d).sum())
                .collect();
            let mx = lin.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, l) in span.clone().zip(&lin) {
                w[k] = fdata.rows()[k].weight * (l - mx).exp();
                total += w[k];
            }
            for k in span {
                w[k] /= total;
            }
            f += fdata.base().unit(i).weight * (mx + total.ln());
        }
        (f, w)
    };
    let mut delta = vec![0.0; q];
    let (mut f, mut w) = eval(&delta);
    let names: Vec<String> = (0..q).map(|k| format!("control[{k}]")).collect();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let g = global_residual(fdata, controls, target, &w);
        residual = g.amax();
        if residual <= tol * scale {
            let out = fdata.reweighted(&w)?;
            return Ok(Calibrated {
                fdata: out,
                delta,
                residual,
            });
        }
        // Hessian: Σ_i w_i Cov_i(c) under the current weights
        let mut h = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let span = fdata.unit_span(i);
            let mut mean = vec![0.0; q];
            for k in span.clone() {
                for (m, c) in mean.iter_mut().zip(&controls[k]) {
                    *m += w[k] * c;
                }
            }
            let wi = fdata.base().unit(i).weight;
            for k in span {
                let d: Vec<f64> = controls[k].iter().zip(&mean).map(|(c, m)| c - m).collect();
                for u in 0..q {
                    for v in 0..q {
                        h[(u, v)] += wi * w[k] * d[u] * d[v];
                    }
                }
            }
        }
        let step = solve_symmetric(&h, &g, &names)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let trial: Vec<f64> = delta.iter().zip(step.iter()).map(|(d, s)| d - t * s).collect();
            let (ft, wt) = eval(&trial);
            if ft.is_finite() && ft <= f + 1e-14 * f.abs().max(1.0) {
                delta = trial;
                f = ft;
                w = wt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Phase-1 and phase-2 samples sharing the same items. The phase-2 sample
/// observes `y`; the phase-1 sample need not.
#[derive(Debug, Clone)]
pub struct TwoPhaseSample {
    pub phase1: SurveyDataset,
    pub phase2: SurveyDataset,
    pub x: Vec<usize>,
    pub y: usize,
    pub nested: bool,
}

impl TwoPhaseSample {
    pub fn new(phase1: SurveyDataset, phase2: SurveyDataset, x: Vec<usize>, y: usize, nested: bool) -> Result<Self> {
        if phase1.items() != phase2.items() {
            return Err(Error::Validation("phase samples must share the same items".into()));
        }
        for (name, d, need_y) in [("phase-1", &phase1, false), ("phase-2", &phase2, true)] {
            for u in d.units() {
                if x.iter().any(|&j| !u.responded(j)) || (need_y && !u.responded(y)) {
                    return Err(Error::Contract(format!("{name} unit {} is missing a required item", u.id)));
                }
            }
        }
        let (t1, t2) = (phase1.total_weight(), phase2.total_weight());
        if (t1 - t2).abs() > 1e-8 * t1.abs().max(t2.abs()) {
            log::warn!("phase weight totals differ ({t1} vs {t2}); the FEFI and regression totals will not agree");
        }
        Ok(TwoPhaseSample {
            phase1,
            phase2,
            x,
            y,
            nested,
        })
    }

    fn design(&self, values: &[Option<f64>]) -> Vec<f64> {
        let mut z = vec![1.0];
        z.extend(self.x.iter().map(|&j| values[j].expect("checked at construction")));
        z
    }

    /// Weighted least squares of `y` on `(1, x)` over phase 2.
    pub fn fit_working_model(&self) -> Result<Vec<f64>> {
        let names: Vec<String> = std::iter::once("intercept".to_string())
            .chain(self.x.iter().map(|&j| self.phase1.items()[j].name.clone()))
            .collect();
        let rows = self
            .phase2
            .units()
            .iter()
            .map(|u| (u.weight, self.design(&u.values), u.values[self.y].unwrap()));
        weighted_least_squares(rows, self.x.len() + 1, &names)
            .map(|(b, _)| b)
            .map_err(|e| match e {
                Error::Singular(m) => Error::Singular(format!("working model is degenerate: {m}")),
                other => other,
            })
    }

    fn predict(&self, beta: &[f64], values: &[Option<f64>]) -> f64 {
        self.design(values).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    /// `Σ_{A1} w₁ m(x) + Σ_{A2} w₂ (y − m(x))`.
    pub fn regression_total(&self, beta: &[f64]) -> f64 {
        let proj: f64 = self
            .phase1
            .units()
            .iter()
            .map(|u| u.weight * self.predict(beta, &u.values))
            .sum();
        let corr: f64 = self
            .phase2
            .units()
            .iter()
            .map(|u| u.weight * (u.values[self.y].unwrap() - self.predict(beta, &u.values)))
            .sum();
        proj + corr
    }

    /// Phase-1 sample with `y` treated as missing for every unit.
    fn recipients(&self) -> Result<SurveyDataset> {
        self.phase1.mask_item(self.y, &vec![false; self.phase1.len()])
    }

    /// Phase-2 residuals and normalized weights.
    fn donors(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let total = self.phase2.total_weight();
        self.phase2
            .units()
            .iter()
            .map(|u| (u.values[self.y].unwrap() - self.predict(beta, &u.values), u.weight / total))
            .unzip()
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseResult {
    pub fdata: FractionalDataset,
    pub beta: Vec<f64>,
    /// `Σ_i w_i1 Σ_j w*_ij y*_ij`.
    pub total: f64,
}

fn fractional_total(fd: &FractionalDataset, y: usize) -> f64 {
    fd.rows()
        .iter()
        .map(|r| fd.base().unit(r.unit).weight * r.weight * r.values[y])
        .sum()
}

/// Fully efficient two-phase FI: every phase-1 unit gets every phase-2
/// residual, `y*_ij = m(x_i) + e_j` with weight `w_j2 / Σ w_k2`.
pub fn two_phase_fefi(tp: &TwoPhaseSample) -> Result<TwoPhaseResult> {
    let beta = tp.fit_working_model()?;
    let base = tp.recipients()?;
    let (resid, w) = tp.donors(&beta);
    let mut rows = Vec::with_capacity(base.len() * resid.len());
    for (i, u) in base.units().iter().enumerate() {
        let yhat = tp.predict(&beta, &u.values);
        for (d, (e, wj)) in resid.iter().zip(&w).enumerate() {
            let mut values: Vec<f64> = u.values.iter().map(|v| v.unwrap_or(0.0)).collect();
            values[tp.y] = yhat + e;
            rows.push(FractionalRow {
                unit: i,
                donor: d,
                values,
                weight: *wj,
            });
        }
    }
    let fdata = FractionalDataset::new(base, rows)?;
    let total = fractional_total(&fdata, tp.y);
    Ok(TwoPhaseResult { fdata, beta, total })
}

const MAX_RESELECT: usize = 10;

/// Two-phase FI with `m` donors per phase-1 unit, selected by systematic
/// PPS on the FEFI weights and calibrated so that `Σ_j w̃_ij (1, y**_ij)`
/// matches the FEFI values for each unit.
pub fn two_phase_reduced(tp: &TwoPhaseSample, m: usize, seed: u64) -> Result<TwoPhaseResult> {
    if m == 0 {
        return Err(Error::Validation("m must be at least 1".into()));
    }
    let n2 = tp.phase2.len();
    if m >= n2 {
        return two_phase_fefi(tp);
    }
    let beta = tp.fit_working_model()?;
    let base = tp.recipients()?;
    let (resid, w) = tp.donors(&beta);
    let mean_resid: f64 = resid.iter().zip(&w).map(|(e, wj)| e * wj).sum();
    let spread = resid.iter().fold(0.0f64, |a, e| a.max(e.abs())).max(1.0);
    let mut rows = Vec::with_capacity(base.len() * m);
    for (i, u) in base.units().iter().enumerate() {
        let yhat = tp.predict(&beta, &u.values);
        let mut rng = substream(seed, domain::SUBSAMPLE, i as u64);
        let mut done = false;
        for _ in 0..MAX_RESELECT {
            let mut order: Vec<usize> = (0..n2).collect();
            order.shuffle(&mut rng);
            let sizes: Vec<f64> = order.iter().map(|&k| w[k]).collect();
            let picks: Vec<usize> = systematic_pps(&sizes, m, &mut rng).into_iter().map(|k| order[k]).collect();
            // calibrate on (1, e), equivalent to (1, y) since ŷ_i is shared
            let e: Vec<f64> = picks.iter().map(|&k| resid[k]).collect();
            let ebar = e.iter().sum::<f64>() / m as f64;
            let ss: f64 = e.iter().map(|v| (v - ebar).powi(2)).sum::<f64>() / m as f64;
            let gap = mean_resid - ebar;
            let weights: Vec<f64> = if ss > 1e-24 * spread * spread {
                let d = gap / ss;
                e.iter().map(|v| (1.0 + d * (v - ebar)) / m as f64).collect()
            } else if gap.abs() <= 1e-12 * spread {
                vec![1.0 / m as f64; m]
            } else {
                continue;
            };
            for (d, (&k, wt)) in picks.iter().zip(weights).enumerate() {
                let mut values: Vec<f64> = u.values.iter().map(|v| v.unwrap_or(0.0)).collect();
                values[tp.y] = yhat + resid[k];
                rows.push(FractionalRow {
                    unit: i,
                    donor: d,
                    values,
                    weight: wt,
                });
            }
            done = true;
            break;
        }
        if !done {
            return Err(Error::Infeasible(format!(
                "unit {}: no donor selection in {MAX_RESELECT} attempts can match the control totals",
                u.id
            )));
        }
    }
    let fdata = FractionalDataset::new(base, rows)?;
    let total = fractional_total(&fdata, tp.y);
    Ok(TwoPhaseResult { fdata, beta, total })
}
