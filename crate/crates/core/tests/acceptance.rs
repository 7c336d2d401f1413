//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines always reach the test log; exits nonzero if any check fails.

mod common;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::Rng;

use fracimp::calib::{
    exponential_reweight, pps_subsample, regression_reweight, score_controls, two_phase_fefi, two_phase_reduced,
    TwoPhaseSample,
};
use fracimp::dataset::{FractionalDataset, Item, SurveyDataset, UnitRecord};
use fracimp::estimating::EstimatingFunction;
use fracimp::fhdi::{categorical_em, discretize, fefi_categorical, fhdi_continuous};
use fracimp::mi::{asymptotic_variances, mi_impute, rubin_combine, InformationTriple, Prior};
use fracimp::models::{CovariateTransform, ParametricModel, RegressionModel, StratifiedLogNormalRegression};
use fracimp::pfi::{complete_case_fit, i_step, run_em, w_step, PFIConfig, PluginProposal};
use fracimp::semiparam::{dr_fi, fit_propensity, kernel_fi, sfi_em, Bandwidth, Kernel, KernelSpec, OutcomeRegression};
use fracimp::sim::{
    apply_response, draw_sample, generate_population, run_study, DesignSpec, Method, PopulationSpec, ResponseSpec,
    StudyConfig, STRATUM, X, Y,
};
use fracimp::variance::{jackknife_pfi, ReplicateMethod};

use common::*;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, id: &str, what: &str, pass: bool, detail: String, start: Instant) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} [{id}] {what}: {detail} ({:.2} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn max_unit_weight_error(fd: &FractionalDataset) -> f64 {
    (0..fd.base().len())
        .filter(|&i| !fd.unit_rows(i).is_empty())
        .map(|i| (fd.unit_rows(i).iter().map(|r| r.weight).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn xy(seed: u64, n: usize) -> SurveyDataset {
    let mut r = rng(seed);
    let units = (0..n)
        .map(|i| {
            let x: f64 = r.random::<f64>() * 4.0;
            let y = 1.0 + x + r.random::<f64>() * 2.0;
            let p = 1.0 / (1.0 + (-(0.5 + 0.4 * x)).exp());
            let w = 1.0 + r.random::<f64>() * 3.0;
            UnitRecord::new(format!("u{i}"), w, vec![Some(x), (r.random::<f64>() < p).then_some(y)])
        })
        .collect();
    SurveyDataset::new(vec![Item::continuous("x"), Item::continuous("y")], units, None).unwrap()
}

fn two_phase_instance(seed: u64, n1: usize, n2: usize) -> TwoPhaseSample {
    let mut r = rng(seed);
    let items = vec![Item::continuous("x"), Item::continuous("y")];
    let p1 = (0..n1)
        .map(|i| {
            let w = 100.0 / n1 as f64 * (0.5 + (i % 2) as f64);
            UnitRecord::new(format!("a{i}"), w, vec![Some(r.random::<f64>() * 10.0), None])
        })
        .collect();
    let p2 = (0..n2)
        .map(|i| {
            let x = r.random::<f64>() * 10.0;
            let w = 100.0 / n2 as f64 * (0.5 + (i % 2) as f64);
            UnitRecord::new(format!("b{i}"), w, vec![Some(x), Some(2.0 + 0.5 * x + r.random::<f64>())])
        })
        .collect();
    TwoPhaseSample::new(
        SurveyDataset::new(items.clone(), p1, None).unwrap(),
        SurveyDataset::new(items, p2, None).unwrap(),
        vec![0],
        1,
        false,
    )
    .unwrap()
}

fn identities(rep: &mut Report) {
    // DR FI against the DR estimator written out directly.
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let d = xy(seed, 40);
        let pf = fit_propensity(&d, 1, vec![(0, CovariateTransform::Identity)])
            .unwrap()
            .normalized(&d, 1)
            .unwrap();
        let or = OutcomeRegression::fit(&d, 1, vec![0]).unwrap();
        let (_, fd) = dr_fi(&d, 1, &or, &pf, &EstimatingFunction::mean(1)).unwrap();
        let fi: f64 = fd.rows().iter().map(|r| d.unit(r.unit).weight * r.weight * r.values[1]).sum();
        let dr: f64 = d
            .units()
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let m = or.predict(&u.values);
                u.weight * m + u.values[1].map_or(0.0, |y| u.weight / pf.pi[i] * (y - m))
            })
            .sum();
        worst = worst.max(rel(fi, dr));
    }
    rep.check("1.1", "DR FI equals DR estimator", worst < 1e-10, format!("max rel diff {worst:.2e} < 1e-10 over 50 datasets"), t);

    // Two-phase FEFI against the regression estimator with an independent fit.
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let tp = two_phase_instance(seed, 10 + seed as usize % 30, 5 + seed as usize % 15);
        let r = two_phase_fefi(&tp).unwrap();
        let pts: Vec<(f64, f64, f64)> = tp
            .phase2
            .units()
            .iter()
            .map(|u| (u.weight, u.values[0].unwrap(), u.values[1].unwrap()))
            .collect();
        let (b0, b1, _) = wls_line(&pts);
        let reg: f64 = tp.phase1.units().iter().map(|u| u.weight * (b0 + b1 * u.values[0].unwrap())).sum::<f64>()
            + pts.iter().map(|(w, x, y)| w * (y - b0 - b1 * x)).sum::<f64>();
        worst = worst.max(rel(r.total, reg));
    }
    rep.check("1.2", "two-phase FEFI equals regression estimator", worst < 1e-10, format!("max rel diff {worst:.2e} < 1e-10 over 50 instances"), t);

    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let tp = two_phase_instance(seed, 20, 15);
        let fefi = two_phase_fefi(&tp).unwrap();
        let red = two_phase_reduced(&tp, 2 + seed as usize % 6, seed).unwrap();
        worst = worst.max(rel(red.total, fefi.total));
    }
    rep.check("1.3", "reduced-m two-phase mean equals FEFI mean", worst < 1e-10, format!("max rel diff {worst:.2e} < 1e-10 over 50 instances"), t);

    // Score calibration after PPS subsampling of a PFI fit.
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let d = normal_mar(seed, 60);
        let model = RegressionModel::normal(1, vec![0]);
        let theta0 = complete_case_fit(&d, &model).unwrap();
        let h = PluginProposal::new(Arc::new(model.clone()), theta0.clone()).unwrap();
        let cfg = PFIConfig::with_m(200);
        let fit = run_em(&d, &model, &h, &theta0, &cfg, seed).unwrap();
        let full = score_controls(&fit.fdata, &model, &fit.theta);
        let mut target = vec![0.0; model.dim()];
        for (r, c) in fit.fdata.rows().iter().zip(&full) {
            for (k, v) in c.iter().enumerate() {
                target[k] += d.unit(r.unit).weight * r.weight * v;
            }
        }
        let sub = pps_subsample(&fit.fdata, 10, seed).unwrap();
        let controls = score_controls(&sub, &model, &fit.theta);
        let scale: f64 = d.total_weight();
        for cal in [
            regression_reweight(&sub, &controls, &target).unwrap(),
            exponential_reweight(&sub, &controls, &target, 100, 1e-13).unwrap(),
        ] {
            let mut got = vec![0.0; model.dim()];
            for (r, c) in cal.fdata.rows().iter().zip(&controls) {
                for (k, v) in c.iter().enumerate() {
                    got[k] += d.unit(r.unit).weight * r.weight * v;
                }
            }
            let err = got.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err).max(max_unit_weight_error(&cal.fdata));
        }
    }
    rep.check("1.4", "calibration constraints hold after reweighting", worst < 1e-10, format!("max control residual / Σw {worst:.2e} < 1e-10"), t);

    // Every method's fractional weights sum to one per unit.
    let t = Instant::now();
    let d = xy(3, 50);
    let model = RegressionModel::normal(1, vec![0]);
    let theta0 = complete_case_fit(&d, &model).unwrap();
    let h = PluginProposal::new(Arc::new(model.clone()), theta0.clone()).unwrap();
    let pfi = run_em(&d, &model, &h, &theta0, &PFIConfig::with_m(50), 3).unwrap();
    let mean = EstimatingFunction::mean(1);
    let spec = KernelSpec { kernel: Kernel::Gaussian, bandwidth: Bandwidth::Silverman, product: false };
    let pf = fit_propensity(&d, 1, vec![(0, CovariateTransform::Identity)]).unwrap();
    let or = OutcomeRegression::fit(&d, 1, vec![0]).unwrap();
    let (shadow, disc) = discretize(&d, &[0, 1], 3).unwrap();
    let em = categorical_em(&shadow, &[0, 1], 500, 1e-12).unwrap();
    let cat = two_by_two(3, 100);
    let cat_em = categorical_em(&cat, &[0, 1], 500, 1e-12).unwrap();
    let tp = two_phase_instance(3, 20, 10);
    let sets: Vec<(&str, FractionalDataset)> = vec![
        ("pfi", pfi.fdata.clone()),
        ("pps", pps_subsample(&pfi.fdata, 5, 3).unwrap()),
        ("kernel", kernel_fi(&d, &[0], 1, &mean, &spec).unwrap().1),
        ("sfi", sfi_em(&d, &model, &theta0, 200, 1e-10).unwrap().fdata),
        ("dr", dr_fi(&d, 1, &or, &pf, &mean).unwrap().1),
        ("fhdi", fhdi_continuous(&d, &disc, &em, 5, 3).unwrap()),
        ("fefi", fefi_categorical(&cat, &cat_em).unwrap()),
        ("two-phase", two_phase_fefi(&tp).unwrap().fdata),
        ("reduced", two_phase_reduced(&tp, 3, 3).unwrap().fdata),
    ];
    let worst = sets.iter().map(|(_, fd)| max_unit_weight_error(fd)).fold(0.0, f64::max);
    let names: Vec<&str> = sets.iter().map(|s| s.0).collect();
    rep.check("1.5", "fractional weights sum to one per unit", worst < 1e-10, format!("max |Σw* − 1| {worst:.2e} < 1e-10 for {}", names.join(", ")), t);
}

fn oracles(rep: &mut Report) {
    // Self-normalized importance weights against quadrature, with a
    // deliberately mismatched proposal.
    let t = Instant::now();
    let d = SurveyDataset::new(
        vec![Item::continuous("x"), Item::continuous("y")],
        [-1.0, 0.3, 1.5]
            .iter()
            .enumerate()
            .map(|(i, &x)| UnitRecord::new(format!("u{i}"), 1.0, vec![Some(x), None]))
            .collect(),
        None,
    )
    .unwrap();
    let model = RegressionModel::normal(1, vec![0]);
    let theta = [1.0, 0.5, (0.64f64).ln()];
    let h = PluginProposal::new(Arc::new(model.clone()), vec![0.8, 0.6, 0.0]).unwrap();
    let imp = i_step(&d, &h, &model, 100_000, 2024).unwrap();
    let w = w_step(&imp, &model, &theta).unwrap();
    let funcs: [(&str, fn(f64) -> f64); 3] = [("y", |y| y), ("y^2", |y| y * y), ("logistic(y)", |y| 1.0 / (1.0 + (-y).exp()))];
    let mut worst_z = 0.0f64;
    for (k, &i) in imp.units.iter().enumerate() {
        let x = d.unit(i).values[0].unwrap();
        for (_, g) in &funcs {
            let vals: Vec<f64> = imp.draws[k].iter().map(|r| g(r[1])).collect();
            let est: f64 = vals.iter().zip(&w[k]).map(|(v, w)| v * w).sum();
            let se = vals.iter().zip(&w[k]).map(|(v, w)| (w * (v - est)).powi(2)).sum::<f64>().sqrt();
            let exact = normal_expectation(g, theta[0] + theta[1] * x, 0.8, 64);
            worst_z = worst_z.max((est - exact).abs() / se);
        }
    }
    rep.check("2.1", "PFI conditional expectations match 64-point Gauss-Hermite (M=1e5)", worst_z < 3.0, format!("max |error|/MC SE {worst_z:.2} < 3 over 3 units x 3 functions"), t);

    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let d = two_by_two(seed, 400);
        let em = categorical_em(&d, &[0, 1], 10_000, 1e-13).unwrap();
        let grid = grid_search_2x2(&d);
        for (k, cell) in [[0u32, 0], [0, 1], [1, 0], [1, 1]].iter().enumerate() {
            worst = worst.max((em.model.probability(cell) - grid[k]).abs());
        }
    }
    rep.check("2.2", "FHDI 2x2 EM matches grid-search likelihood maximizer", worst < 1e-3, format!("max |π_EM − π_grid| {worst:.2e} < 1e-3 over 3 tables"), t);

    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let d = xy(100 + seed, 40);
        let hbw = 0.2 + 0.06 * seed as f64;
        let kernel = if seed % 2 == 0 { Kernel::Gaussian } else { Kernel::Epanechnikov };
        let spec = KernelSpec { kernel, bandwidth: Bandwidth::Fixed(hbw), product: false };
        let Ok((_, fd)) = kernel_fi(&d, &[0], 1, &EstimatingFunction::mean(1), &spec) else { continue };
        let resp = respondents(&d);
        for (i, u) in d.units().iter().enumerate() {
            if u.values[1].is_some() {
                continue;
            }
            let x0 = u.values[0].unwrap();
            let k = |z: f64| match kernel {
                Kernel::Gaussian => (-0.5 * z * z).exp(),
                Kernel::Epanechnikov => (0.75 * (1.0 - z * z)).max(0.0),
            };
            let num: f64 = resp.iter().map(|(_, x, y)| k((x0 - x) / hbw) * y).sum();
            let den: f64 = resp.iter().map(|(_, x, _)| k((x0 - x) / hbw)).sum();
            let fi: f64 = fd.unit_rows(i).iter().map(|r| r.weight * r.values[1]).sum();
            worst = worst.max(rel(fi, num / den));
        }
    }
    rep.check("2.3", "kernel FI imputed means equal Nadaraya-Watson", worst < 1e-12, format!("max rel diff {worst:.2e} < 1e-12 (floating-point exact)"), t);

    let t = Instant::now();
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = r.random_range(2..50usize);
        let est: Vec<f64> = (0..m).map(|_| r.random::<f64>() * 10.0 - 5.0).collect();
        let var: Vec<f64> = (0..m).map(|_| r.random::<f64>() * 3.0).collect();
        let got = rubin_combine(&est, &var).unwrap();
        let mf = m as f64;
        let mut qbar = 0.0;
        for e in &est {
            qbar += e;
        }
        qbar /= mf;
        let mut wbar = 0.0;
        for v in &var {
            wbar += v;
        }
        wbar /= mf;
        let mut b = 0.0;
        for e in &est {
            b += (e - qbar) * (e - qbar);
        }
        b /= mf - 1.0;
        let total = wbar + (1.0 + 1.0 / mf) * b;
        for (a, e) in [(got.estimate, qbar), (got.within, wbar), (got.between, b), (got.total, total)] {
            worst = worst.max((a - e).abs() / e.abs().max(1.0));
        }
    }
    rep.check("2.4", "Rubin combination equals direct recomputation", worst < 1e-12, format!("max diff {worst:.2e} < 1e-12 over 1000 inputs"), t);
}

fn em_behaviour(rep: &mut Report) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut iters = 0;
    for seed in 0..20 {
        let d = two_by_two(seed, 300);
        let em = categorical_em(&d, &[0, 1], 10_000, 1e-12).unwrap();
        iters += em.loglik.len();
        // Relative to |ℓ|: near convergence the increments fall below the
        // rounding error of a sum of a few hundred log terms.
        for pair in em.loglik.windows(2) {
            worst = worst.max((pair[0] - pair[1]) / pair[0].abs());
        }
    }
    rep.check("3.1", "FHDI observed log-likelihood never decreases", worst <= 1e-12, format!("largest decrease / |ℓ| {worst:.2e} ≤ 1e-12 over {iters} iterations, 20 tables"), t);

    let t = Instant::now();
    let ms = [10usize, 100, 1000, 10_000];
    let mut gaps = vec![0.0; ms.len()];
    for seed in 0..20u64 {
        let d = normal_mar(seed, 100);
        let (b0, b1, s2) = wls_line(&respondents(&d));
        let mle = [b0, b1, s2.ln()];
        let model = RegressionModel::normal(1, vec![0]);
        let h = PluginProposal::new(Arc::new(model.clone()), mle.to_vec()).unwrap();
        for (k, &m) in ms.iter().enumerate() {
            let cfg = PFIConfig { em_tol: 1e-10, ..PFIConfig::with_m(m) };
            let fit = run_em(&d, &model, &h, &mle, &cfg, 1000 + seed).unwrap();
            gaps[k] += fit.theta.iter().zip(&mle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / 20.0;
        }
    }
    let decreasing = gaps.windows(2).all(|p| p[1] < p[0]);
    let shown: Vec<String> = ms.iter().zip(&gaps).map(|(m, g)| format!("M={m}: {g:.2e}")).collect();
    rep.check("3.2", "PFI gap to observed-likelihood MLE decreases in M", decreasing, format!("mean max-abs gap over 20 seeds {}", shown.join(", ")), t);
}

fn variance_structure(rep: &mut Report) {
    let t = Instant::now();
    let mut r = rng(4);
    let mut worst = f64::INFINITY;
    let mut count = 0;
    for _ in 0..1000 {
        let p = r.random_range(1..6usize);
        let obs = random_spd(&mut r, p, 0.1, 5.0);
        let mis = random_spd(&mut r, p, 0.0, 3.0);
        let info = InformationTriple::new(&obs + &mis, obs).unwrap();
        for m in [2usize, 10, 100] {
            let v = asymptotic_variances(&info, m).unwrap();
            let diff = &v.v_mi - &v.v_fi;
            let scale = v.v_fi.amax();
            let min = SymmetricEigen::new(diff).eigenvalues.min() / scale;
            worst = worst.min(min);
            count += 1;
        }
    }
    rep.check("4", "V_MI − V_FI is positive semidefinite", worst >= -1e-12, format!("min eigenvalue / ‖V_FI‖ {worst:.2e} ≥ −1e-12 over {count} cases"), t);
}

fn simulation(rep: &mut Report) {
    let t = Instant::now();
    let config = StudyConfig { replicates: 500, ..StudyConfig::default() };
    let report = run_study(&PopulationSpec::default(), &DesignSpec::default(), &ResponseSpec::default(), &config, 2015)
        .expect("study runs");
    let secs = t.elapsed().as_secs_f64();
    println!("{}", report.to_table());
    let pfi = report.method(Method::Pfi).unwrap();
    let full = report.method(Method::Full).unwrap();
    let mi = report.method(Method::Mi).unwrap();
    let fails: usize = report.methods.iter().map(|m| m.failures).sum();

    let worst_mean = pfi
        .rows
        .iter()
        .chain(&full.rows)
        .map(|r| rel(r.mean, r.truth))
        .fold(0.0, f64::max);
    rep.check("5a", "PFI and FULL means within 2% of truth", worst_mean < 0.02 && fails == 0, format!("max rel error {:.2}% < 2%, {fails} failed replicates", worst_mean * 100.0), t);

    let rbs: Vec<String> = pfi.rows.iter().map(|r| format!("{:+.1}", r.rb_pct)).collect();
    let ok = pfi.rows.iter().all(|r| r.rb_pct.abs() <= 15.0);
    rep.check("5b", "PFI jackknife relative bias within ±15%", ok, format!("RB% [{}]", rbs.join(", ")), t);

    let cov: Vec<String> = pfi.rows.iter().map(|r| format!("{:.3}", r.coverage)).collect();
    let ok = pfi.rows.iter().all(|r| (0.93..=0.97).contains(&r.coverage));
    rep.check("5c", "PFI coverage in [0.93, 0.97]", ok, format!("coverage [{}]", cov.join(", ")), t);

    let strata = mi.rows.len() - 1;
    let over = mi.rows[..strata].iter().filter(|r| r.rb_pct > 10.0).count();
    let pop = mi.rows[strata].rb_pct;
    let rbs: Vec<String> = mi.rows.iter().map(|r| format!("{:+.1}", r.rb_pct)).collect();
    rep.check("5d", "MI relative bias > +10% for the population mean and ≥ 3 of 5 strata", pop > 10.0 && over >= 3, format!("RB% [{}], {over} strata above +10%", rbs.join(", ")), t);

    let c = mi.rows[strata].coverage;
    rep.check("5e", "MI population-mean coverage > 0.96", c > 0.96, format!("coverage {c:.3}"), t);

    let widths: Vec<String> = mi.rows.iter().zip(&pfi.rows).map(|(a, b)| format!("{:.3}/{:.3}", a.ci_width, b.ci_width)).collect();
    let ok = mi.rows.iter().zip(&pfi.rows).all(|(a, b)| a.ci_width > b.ci_width);
    rep.check("5f", "MI CI wider than PFI CI for every parameter", ok, format!("MI/PFI widths [{}]", widths.join(", ")), t);

    rep.check("5", "study runtime under 10 minutes", secs < 600.0, format!("{secs:.0} s for R=500, M=m=100 on {} threads", rayon::current_num_threads()), t);
}

fn pipelines() -> Vec<u8> {
    let mut out = Vec::new();
    let d = normal_mar(77, 80);
    let model = RegressionModel::normal(1, vec![0]);
    let theta0 = complete_case_fit(&d, &model).unwrap();
    let h = PluginProposal::new(Arc::new(model.clone()), theta0.clone()).unwrap();
    let cfg = PFIConfig::with_m(40);
    let fit = run_em(&d, &model, &h, &theta0, &cfg, 5).unwrap();
    fit.fdata.write_csv(&mut out).unwrap();
    let jk = jackknife_pfi(&fit, &model, &[EstimatingFunction::mean(1)], ReplicateMethod::OneStepNewton, &cfg).unwrap();
    out.extend(serde_json::to_vec(&jk).unwrap());

    let (shadow, disc) = discretize(&d, &[0, 1], 3).unwrap();
    let em = categorical_em(&shadow, &[0, 1], 500, 1e-12).unwrap();
    fhdi_continuous(&d, &disc, &em, 4, 5).unwrap().write_csv(&mut out).unwrap();

    let (pop, _) = generate_population(&PopulationSpec::default(), 1).unwrap();
    let sample = apply_response(&draw_sample(&pop, &DesignSpec::default(), 5).unwrap(), &ResponseSpec::default(), 5).unwrap();
    let sm = StratifiedLogNormalRegression::new(STRATUM, X, Y, 5);
    for imp in mi_impute(&sample, &sm, 5, Prior::Jeffreys, 5).unwrap() {
        fracimp::dataset::write_csv(&imp, &mut out, "NA").unwrap();
    }
    two_phase_reduced(&two_phase_instance(5, 30, 12), 3, 5).unwrap().fdata.write_csv(&mut out).unwrap();

    let study = StudyConfig { replicates: 4, ..StudyConfig::default() };
    let rep = run_study(&PopulationSpec::default(), &DesignSpec::default(), &ResponseSpec::default(), &study, 5).unwrap();
    out.extend(rep.to_csv().unwrap().into_bytes());
    out
}

fn determinism(rep: &mut Report) {
    let t = Instant::now();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(pipelines)
    };
    let a = run(1);
    let b = run(1);
    let c = run(4);
    rep.check(
        "6",
        "seeded pipelines byte-identical across runs and thread counts",
        a == b && a == c,
        format!("{} bytes; repeat equal: {}, 1 vs 4 threads equal: {}", a.len(), a == b, a == c),
        t,
    );
}

fn main() {
    let mut rep = Report { failed: 0 };
    identities(&mut rep);
    oracles(&mut rep);
    em_behaviour(&mut rep);
    variance_structure(&mut rep);
    determinism(&mut rep);
    simulation(&mut rep);
    if rep.failed > 0 {
        println!("{} acceptance check(s) failed", rep.failed);
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
