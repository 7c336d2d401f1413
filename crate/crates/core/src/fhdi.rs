//! Fractional hot-deck imputation.
//!
//! Categorical items are handled by EM on the joint cell probabilities over
//! the support seen among full respondents. Continuous items are first
//! discretized into quantile cells; donors are then drawn from full
//! respondents in each candidate cell.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;

use crate::dataset::{FractionalDataset, FractionalRow, Item, SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::rng::{domain, substream, StreamRng};

pub type Cell = Vec<u32>;

/// Joint probabilities over the support `z_1, …, z_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalJointModel {
    pub items: Vec<usize>,
    pub support: Vec<Cell>,
    pub probabilities: Vec<f64>,
}

impl CategoricalJointModel {
    pub fn probability(&self, cell: &[u32]) -> f64 {
        self.support
            .binary_search_by(|c| c.as_slice().cmp(cell))
            .map(|g| self.probabilities[g])
            .unwrap_or(0.0)
    }

    /// Writes `<item names>, probability`.
    pub fn write_csv<W: Write>(&self, data: &SurveyDataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.items.iter().map(|&j| data.items()[j].name.clone()).collect();
        header.push("probability".into());
        w.write_record(&header)?;
        for (c, p) in self.support.iter().zip(&self.probabilities) {
            let mut rec: Vec<String> = c
                .iter()
                .zip(&self.items)
                .map(|(&code, &j)| match &data.items()[j].kind {
                    crate::dataset::ItemKind::Categorical { labels } => {
                        labels.get(code as usize).cloned().unwrap_or_else(|| code.to_string())
                    }
                    crate::dataset::ItemKind::Continuous => code.to_string(),
                })
                .collect();
            rec.push(p.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<cell model csv>", e))?;
        Ok(())
    }
}

/// Candidate cells for one recipient and their fractional weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorPool {
    pub unit: usize,
    /// Indices into the model support.
    pub candidates: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Maps expected cell counts to probabilities. The saturated default is
/// the normalized count vector.
pub trait CellProbabilityModel: Send + Sync {
    fn m_step(&self, support: &[Cell], expected: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Saturated;

impl CellProbabilityModel for Saturated {
    fn m_step(&self, _support: &[Cell], expected: &[f64]) -> Result<Vec<f64>> {
        let total: f64 = expected.iter().sum();
        Ok(expected.iter().map(|e| e / total).collect())
    }
}

#[derive(Debug, Clone)]
pub struct CategoricalEm {
    pub model: CategoricalJointModel,
    /// One pool per unit; complete units have a single candidate and
    /// unimputable units none.
    pub pools: Vec<DonorPool>,
    /// Observed-data log-likelihood after each M-step.
    pub loglik: Vec<f64>,
    pub unimputable: Vec<usize>,
    pub converged: bool,
}

fn code(v: f64) -> u32 {
    v as u32
}

fn full_respondent(u: &UnitRecord, items: &[usize]) -> bool {
    items.iter().all(|&j| u.responded(j))
}

fn cell_of(u: &UnitRecord, items: &[usize]) -> Option<Cell> {
    items.iter().map(|&j| u.values[j].map(code)).collect()
}

fn matches(u: &UnitRecord, items: &[usize], cell: &[u32]) -> bool {
    items
        .iter()
        .zip(cell)
        .all(|(&j, &c)| u.values[j].is_none_or(|v| code(v) == c))
}

/// Support of the full respondents and each unit's candidate cells.
fn build_pools(data: &SurveyDataset, items: &[usize]) -> Result<(Vec<Cell>, Vec<Vec<usize>>)> {
    for &j in items {
        if j >= data.n_items() {
            return Err(Error::Dimension {
                expected: data.n_items(),
                got: j,
            });
        }
    }
    let mut support: Vec<Cell> = data
        .units()
        .iter()
        .filter_map(|u| cell_of(u, items))
        .collect();
    support.sort();
    support.dedup();
    if support.is_empty() {
        return Err(Error::Identifiability("no full respondents to define the support".into()));
    }
    let candidates = data
        .units()
        .iter()
        .map(|u| {
            (0..support.len())
                .filter(|&g| matches(u, items, &support[g]))
                .collect()
        })
        .collect();
    Ok((support, candidates))
}

fn observed_loglik(weights: &[f64], cands: &[Vec<usize>], pi: &[f64]) -> f64 {
    weights
        .iter()
        .zip(cands)
        .filter(|(_, c)| !c.is_empty())
        .map(|(w, c)| w * c.iter().map(|&g| pi[g]).sum::<f64>().ln())
        .sum()
}

/// Weighted EM for the joint cell probabilities.
///
/// Starts from uniform fractional weights, then alternates the M-step
/// `π(z) = Σ w_i Σ_j w*_ij I(z*_ij = z) / Σ w_i` and the E-step
/// `w*_ij = π(z*_ij) / Σ_k π(z*_ik)` until `max |Δπ| < tol`. Units with no
/// candidate cell are reported as unimputable and left out of both sums.
pub fn categorical_em(data: &SurveyDataset, items: &[usize], max_iter: usize, tol: f64) -> Result<CategoricalEm> {
    categorical_em_with(data, items, max_iter, tol, &Saturated)
}

pub fn categorical_em_with(
    data: &SurveyDataset,
    items: &[usize],
    max_iter: usize,
    tol: f64,
    cell_model: &dyn CellProbabilityModel,
) -> Result<CategoricalEm> {
    let (support, cands) = build_pools(data, items)?;
    let unimputable: Vec<usize> = (0..data.len()).filter(|&i| cands[i].is_empty()).collect();
    if !unimputable.is_empty() {
        log::warn!("{} units have no donor cell and stay unimputed", unimputable.len());
    }
    let weights = data.weights();
    let mut fw: Vec<Vec<f64>> = cands
        .iter()
        .map(|c| vec![1.0 / c.len().max(1) as f64; c.len()])
        .collect();
    let m_step = |fw: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut expected = vec![0.0; support.len()];
        for ((w, c), f) in weights.iter().zip(&cands).zip(fw) {
            for (&g, &v) in c.iter().zip(f) {
                expected[g] += w * v;
            }
        }
        cell_model.m_step(&support, &expected)
    };
    let e_step = |pi: &[f64]| -> Vec<Vec<f64>> {
        cands
            .iter()
            .map(|c| {
                let total: f64 = c.iter().map(|&g| pi[g]).sum();
                c.iter().map(|&g| pi[g] / total).collect()
            })
            .collect()
    };
    let mut pi = m_step(&fw)?;
    let mut loglik = vec![observed_loglik(&weights, &cands, &pi)];
    let mut converged = false;
    for _ in 0..max_iter {
        fw = e_step(&pi);
        let next = m_step(&fw)?;
        let change = next.iter().zip(&pi).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        pi = next;
        loglik.push(observed_loglik(&weights, &cands, &pi));
        if change < tol {
            converged = true;
            break;
        }
    }
    fw = e_step(&pi);
    let pools = cands
        .into_iter()
        .zip(fw)
        .enumerate()
        .map(|(unit, (candidates, weights))| DonorPool {
            unit,
            candidates,
            weights,
        })
        .collect();
    Ok(CategoricalEm {
        model: CategoricalJointModel {
            items: items.to_vec(),
            support,
            probabilities: pi,
        },
        pools,
        loglik,
        unimputable,
        converged,
    })
}

fn check_other_items(data: &SurveyDataset, items: &[usize]) -> Result<()> {
    for u in data.units() {
        for (j, v) in u.values.iter().enumerate() {
            if v.is_none() && !items.contains(&j) {
                return Err(Error::Contract(format!(
                    "unit {} is missing item {}, which is not being imputed",
                    u.id,
                    data.items()[j].name
                )));
            }
        }
    }
    Ok(())
}

/// Keeps every candidate cell with its EM weight; no randomness.
pub fn fefi_categorical(data: &SurveyDataset, em: &CategoricalEm) -> Result<FractionalDataset> {
    let items = &em.model.items;
    check_other_items(data, items)?;
    let mut rows = Vec::new();
    for pool in &em.pools {
        let u = data.unit(pool.unit);
        for (d, (&g, &w)) in pool.candidates.iter().zip(&pool.weights).enumerate() {
            let mut values: Vec<f64> = u.values.iter().map(|v| v.unwrap_or(0.0)).collect();
            for (&j, &c) in items.iter().zip(&em.model.support[g]) {
                if !u.responded(j) {
                    values[j] = c as f64;
                }
            }
            rows.push(FractionalRow {
                unit: pool.unit,
                donor: d,
                values,
                weight: w,
            });
        }
    }
    FractionalDataset::new(data.clone(), rows)
}

/// Quantile breakpoints for continuous items.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretizer {
    pub items: Vec<usize>,
    /// Strictly increasing interior breakpoints; value `y` falls in cell
    /// `#{b : y > b}`.
    pub breakpoints: Vec<Vec<f64>>,
}

impl Discretizer {
    pub fn cell(&self, k: usize, y: f64) -> u32 {
        self.breakpoints[k].iter().filter(|&&b| y > b).count() as u32
    }

    pub fn categories(&self, k: usize) -> usize {
        self.breakpoints[k].len() + 1
    }
}

pub const DEFAULT_CATEGORIES: usize = 4;
pub const DEFAULT_DONORS: usize = 10;

/// Categorical shadow of `data`: each listed item is replaced by its cell
/// code, missing where the item is missing.
pub fn discretize(data: &SurveyDataset, items: &[usize], k: usize) -> Result<(SurveyDataset, Discretizer)> {
    if k < 2 {
        return Err(Error::Validation("at least two categories are needed".into()));
    }
    let mut breakpoints = Vec::with_capacity(items.len());
    for &j in items {
        if data.items()[j].is_categorical() {
            return Err(Error::Validation(format!("item {} is already categorical", data.items()[j].name)));
        }
        let mut obs: Vec<f64> = data.units().iter().filter_map(|u| u.values[j]).collect();
        obs.sort_by(f64::total_cmp);
        let n = obs.len();
        if n == 0 || obs[0] == obs[n - 1] {
            return Err(Error::Validation(format!(
                "item {} is constant or unobserved and cannot be discretized",
                data.items()[j].name
            )));
        }
        let mut bp: Vec<f64> = (1..k)
            .map(|q| {
                let idx = ((q as f64 / k as f64) * n as f64).ceil() as usize;
                obs[idx.max(1) - 1]
            })
            .filter(|&b| b < obs[n - 1])
            .collect();
        bp.dedup();
        breakpoints.push(bp);
    }
    let disc = Discretizer {
        items: items.to_vec(),
        breakpoints,
    };
    Ok((apply_discretizer(data, &disc)?, disc))
}

pub fn apply_discretizer(data: &SurveyDataset, disc: &Discretizer) -> Result<SurveyDataset> {
    let mut new_items: Vec<Item> = data.items().to_vec();
    for (k, &j) in disc.items.iter().enumerate() {
        let labels = (0..disc.categories(k)).map(|c| c.to_string()).collect();
        new_items[j] = Item::categorical(data.items()[j].name.clone(), labels);
    }
    let units = data
        .units()
        .iter()
        .map(|u| {
            let mut values = u.values.clone();
            for (k, &j) in disc.items.iter().enumerate() {
                values[j] = u.values[j].map(|y| disc.cell(k, y) as f64);
            }
            UnitRecord::new(u.id.clone(), u.weight, values)
        })
        .collect();
    let strata = data
        .strata()
        .map(|s| s.iter().map(|&h| data.stratum_labels()[h].clone()).collect());
    SurveyDataset::new(new_items, units, strata)
}

/// Systematic probability-proportional-to-size selection of `m` indices.
/// A size above the sampling interval may be selected more than once.
pub fn systematic_pps(sizes: &[f64], m: usize, rng: &mut StreamRng) -> Vec<usize> {
    let total: f64 = sizes.iter().sum();
    if m == 0 || sizes.is_empty() || total <= 0.0 {
        return Vec::new();
    }
    let step = total / m as f64;
    let start: f64 = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(m);
    let mut cum = 0.0;
    let mut k = 0;
    for (i, &s) in sizes.iter().enumerate() {
        cum += s;
        while k < m && start + k as f64 * step < cum {
            out.push(i);
            k += 1;
        }
    }
    while out.len() < m {
        // rounding at the upper end
        out.push(sizes.len() - 1);
    }
    out
}

/// FHDI for continuous items using cell probabilities fitted on the
/// discretized shadow data.
///
/// For every candidate cell of a recipient, `m_g` donors are drawn from the
/// full respondents in that cell by systematic PPS on the sampling weights,
/// each row weighted `P̂(cell | y_obs) / m_g`. A cell with at most `m_g`
/// donors contributes all of them with weights proportional to their
/// sampling weights. A cell with no donors borrows the donors of the
/// nearest cell in code distance.
pub fn fhdi_continuous(
    data: &SurveyDataset,
    disc: &Discretizer,
    em: &CategoricalEm,
    m_g: usize,
    seed: u64,
) -> Result<FractionalDataset> {
    if m_g == 0 {
        return Err(Error::Validation("m_g must be at least 1".into()));
    }
    let items = &em.model.items;
    check_other_items(data, items)?;
    if disc.items.iter().any(|j| !items.contains(j)) {
        return Err(Error::Contract("cell model does not cover every discretized item".into()));
    }
    let shadow = apply_discretizer(data, disc)?;
    let mut donors: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
    let cells: Vec<Option<Cell>> = shadow.units().iter().map(|u| cell_of(u, items)).collect();
    for (i, c) in cells.iter().enumerate() {
        if let Some(c) = c {
            donors.entry(c.as_slice()).or_default().push(i);
        }
    }
    let mut rows = Vec::new();
    for pool in &em.pools {
        let i = pool.unit;
        let u = data.unit(i);
        if full_respondent(u, items) {
            rows.push(FractionalRow {
                unit: i,
                donor: 0,
                values: u.values.iter().map(|v| v.unwrap_or(0.0)).collect(),
                weight: 1.0,
            });
            continue;
        }
        let mut rng = substream(seed, domain::DONOR, i as u64);
        let mut d = 0;
        for (&g, &p) in pool.candidates.iter().zip(&pool.weights) {
            let cell = &em.model.support[g];
            let pool_units = match donors.get(cell.as_slice()) {
                Some(v) => v.clone(),
                None => {
                    let (near, _) = donors
                        .iter()
                        .map(|(c, v)| (v, c.iter().zip(cell).map(|(a, b)| a.abs_diff(*b)).sum::<u32>()))
                        .min_by_key(|(_, dist)| *dist)
                        .ok_or_else(|| Error::Identifiability("no donors at all".into()))?;
                    log::warn!("empty donor cell {cell:?} collapsed into its nearest cell");
                    near.clone()
                }
            };
            let sizes: Vec<f64> = pool_units.iter().map(|&j| data.unit(j).weight).collect();
            let chosen: Vec<(usize, f64)> = if pool_units.len() <= m_g {
                let total: f64 = sizes.iter().sum();
                pool_units.iter().zip(&sizes).map(|(&j, &s)| (j, p * s / total)).collect()
            } else {
                systematic_pps(&sizes, m_g, &mut rng)
                    .into_iter()
                    .map(|k| (pool_units[k], p / m_g as f64))
                    .collect()
            };
            for (j, w) in chosen {
                let donor = data.unit(j);
                let mut values: Vec<f64> = u.values.iter().map(|v| v.unwrap_or(0.0)).collect();
                for &k in items {
                    if !u.responded(k) {
                        values[k] = donor.values[k].expect("donor is a full respondent");
                    }
                }
                rows.push(FractionalRow {
                    unit: i,
                    donor: d,
                    values,
                    weight: w,
                });
                d += 1;
            }
        }
    }
    FractionalDataset::new(data.clone(), rows)
}

/// Pooled within-cell correlation between each pair of discretized items,
/// computed on full respondents. Small values are consistent with the
/// within-cell independence the method relies on; they do not prove it.
pub fn within_cell_correlation(data: &SurveyDataset, disc: &Discretizer) -> Result<Vec<((usize, usize), f64)>> {
    let shadow = apply_discretizer(data, disc)?;
    let items = &disc.items;
    let mut groups: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, u) in shadow.units().iter().enumerate() {
        if let Some(c) = cell_of(u, items) {
            groups.entry(c).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let (ja, jb) = (items[a], items[b]);
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for members in groups.values() {
                let w: f64 = members.iter().map(|&i| data.unit(i).weight).sum();
                let ma = members.iter().map(|&i| data.unit(i).weight * data.unit(i).values[ja].unwrap()).sum::<f64>() / w;
                let mb = members.iter().map(|&i| data.unit(i).weight * data.unit(i).values[jb].unwrap()).sum::<f64>() / w;
                for &i in members {
                    let u = data.unit(i);
                    let (da, db) = (u.values[ja].unwrap() - ma, u.values[jb].unwrap() - mb);
                    sab += u.weight * da * db;
                    saa += u.weight * da * da;
                    sbb += u.weight * db * db;
                }
            }
            let r = if saa > 0.0 && sbb > 0.0 { sab / (saa * sbb).sqrt() } else { 0.0 };
            out.push(((ja, jb), r));
        }
    }
    Ok(out)
}
