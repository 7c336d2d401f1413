//! Fixtures shared by the benchmarks.

use rand::Rng;

use fracimp::dataset::{Item, SurveyDataset, UnitRecord};
use fracimp::rng::substream;
use fracimp::sim::{apply_response, draw_sample, generate_population, DesignSpec, PopulationSpec, ResponseSpec};

/// One sample of the simulation study, with nonresponse applied.
pub fn study_sample(seed: u64) -> SurveyDataset {
    let (pop, _) = generate_population(&PopulationSpec::default(), 7).expect("default population is valid");
    let full = draw_sample(&pop, &DesignSpec::default(), seed).expect("default design is valid");
    apply_response(&full, &ResponseSpec::default(), seed).expect("response draw")
}

/// `n` units with three correlated three-level items, each missing with
/// probability 0.2. Roughly half the units are complete.
pub fn categorical_sample(n: usize, seed: u64) -> SurveyDataset {
    let labels = || vec!["0".to_string(), "1".to_string(), "2".to_string()];
    let items = vec![
        Item::categorical("a", labels()),
        Item::categorical("b", labels()),
        Item::categorical("c", labels()),
    ];
    let mut rng = substream(seed, 0, 0);
    let units = (0..n)
        .map(|i| {
            let a = rng.random_range(0..3u32);
            let b = if rng.random_bool(0.7) { a } else { rng.random_range(0..3u32) };
            let c = if rng.random_bool(0.6) { b } else { rng.random_range(0..3u32) };
            let values = [a, b, c]
                .iter()
                .map(|&v| (!rng.random_bool(0.2)).then_some(v as f64))
                .collect();
            UnitRecord::new(format!("u{i}"), 1.0 + (i % 4) as f64, values)
        })
        .collect();
    SurveyDataset::new(items, units, None).expect("generated values are valid")
}
