//! Independent oracles and fixtures for the integration suites.

#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fracimp::dataset::{Item, SurveyDataset, UnitRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e57)
}

/// Gauss–Hermite nodes and weights for `∫ e^{−t²} g(t) dt` by the
/// Golub–Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E g(Y)` for `Y ~ N(mu, sd²)` by `n`-point Gauss–Hermite quadrature.
pub fn normal_expectation(g: impl Fn(f64) -> f64, mu: f64, sd: f64, n: usize) -> f64 {
    let (t, w) = gauss_hermite(n);
    t.iter()
        .zip(&w)
        .map(|(t, w)| w * g(mu + std::f64::consts::SQRT_2 * sd * t))
        .sum::<f64>()
        / std::f64::consts::PI.sqrt()
}

/// Weighted least squares of `y` on `(1, x)`: `(β₀, β₁, σ̂²)` with the
/// weighted mean squared residual.
pub fn wls_line(points: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let sw: f64 = points.iter().map(|p| p.0).sum();
    let mx = points.iter().map(|p| p.0 * p.1).sum::<f64>() / sw;
    let my = points.iter().map(|p| p.0 * p.2).sum::<f64>() / sw;
    let sxx: f64 = points.iter().map(|p| p.0 * (p.1 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * (p.1 - mx) * (p.2 - my)).sum();
    let b1 = sxy / sxx;
    let b0 = my - b1 * mx;
    let s2 = points.iter().map(|p| p.0 * (p.2 - b0 - b1 * p.1).powi(2)).sum::<f64>() / sw;
    (b0, b1, s2)
}

/// `(x, y)` with `y = 1 + 0.5x + 0.8ε`, `x ~ N(0, 1)`; `y` missing at
/// random with `P(respond) = logit⁻¹(0.6 + 0.8x)`. Weights in [1, 3).
pub fn normal_mar(seed: u64, n: usize) -> SurveyDataset {
    let mut r = rng(seed);
    let units = (0..n)
        .map(|i| {
            let x: f64 = StandardNormal.sample(&mut r);
            let e: f64 = StandardNormal.sample(&mut r);
            let y = 1.0 + 0.5 * x + 0.8 * e;
            let p = 1.0 / (1.0 + (-(0.6 + 0.8 * x)).exp());
            let w = 1.0 + 2.0 * r.random::<f64>();
            let obs = r.random::<f64>() < p;
            UnitRecord::new(format!("u{i}"), w, vec![Some(x), obs.then_some(y)])
        })
        .collect();
    SurveyDataset::new(vec![Item::continuous("x"), Item::continuous("y")], units, None).unwrap()
}

/// Respondent `(w, x, y)` triples of a two-item dataset.
pub fn respondents(data: &SurveyDataset) -> Vec<(f64, f64, f64)> {
    data.units()
        .iter()
        .filter_map(|u| u.values[1].map(|y| (u.weight, u.values[0].unwrap(), y)))
        .collect()
}

/// Two binary items; the second is missing for some units and the first
/// for others.
pub fn two_by_two(seed: u64, n: usize) -> SurveyDataset {
    let mut r = rng(seed);
    let probs = [0.4, 0.1, 0.15, 0.35];
    let labels = || vec!["0".to_string(), "1".to_string()];
    let units = (0..n)
        .map(|i| {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut cell = 3;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    cell = k;
                    break;
                }
            }
            let (a, b) = ((cell / 2) as f64, (cell % 2) as f64);
            let m: f64 = r.random();
            let values = if m < 0.25 {
                vec![Some(a), None]
            } else if m < 0.35 {
                vec![None, Some(b)]
            } else {
                vec![Some(a), Some(b)]
            };
            UnitRecord::new(format!("u{i}"), 1.0 + (i % 3) as f64, values)
        })
        .collect();
    SurveyDataset::new(vec![Item::categorical("a", labels()), Item::categorical("b", labels())], units, None).unwrap()
}

/// Weighted observed-data log-likelihood of a 2×2 table with cell
/// probabilities `p` in the order (0,0), (0,1), (1,0), (1,1).
pub fn loglik_2x2(data: &SurveyDataset, p: &[f64; 4]) -> f64 {
    data.units()
        .iter()
        .map(|u| {
            let prob = match (u.values[0], u.values[1]) {
                (Some(a), Some(b)) => p[2 * a as usize + b as usize],
                (Some(a), None) => p[2 * a as usize] + p[2 * a as usize + 1],
                (None, Some(b)) => p[b as usize] + p[2 + b as usize],
                (None, None) => 1.0,
            };
            u.weight * prob.ln()
        })
        .sum()
}

/// Maximizer of [`loglik_2x2`] by exhaustive search on the simplex: a
/// coarse lattice, then finer lattices around the incumbent.
pub fn grid_search_2x2(data: &SurveyDataset) -> [f64; 4] {
    let mut best = [0.25; 4];
    let mut best_ll = loglik_2x2(data, &best);
    let mut center = best;
    for (step, half_width) in [(0.01, 0.5), (0.001, 0.02), (0.0001, 0.002)] {
        let k = (half_width / step) as i64;
        for i in -k..=k {
            for j in -k..=k {
                for l in -k..=k {
                    let p0 = center[0] + i as f64 * step;
                    let p1 = center[1] + j as f64 * step;
                    let p2 = center[2] + l as f64 * step;
                    let p3 = 1.0 - p0 - p1 - p2;
                    if p0 <= 0.0 || p1 <= 0.0 || p2 <= 0.0 || p3 <= 0.0 {
                        continue;
                    }
                    let p = [p0, p1, p2, p3];
                    let ll = loglik_2x2(data, &p);
                    if ll > best_ll {
                        best_ll = ll;
                        best = p;
                    }
                }
            }
        }
        center = best;
    }
    best
}

/// Random symmetric positive definite `p × p` matrix with eigenvalues in
/// `[lo, hi]`.
pub fn random_spd(r: &mut ChaCha8Rng, p: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(r));
    let q = a.qr().q();
    let d = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_fn(p, |_, _| lo + (hi - lo) * r.random::<f64>()));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}
