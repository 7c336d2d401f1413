//! Run configuration. A TOML file supplies any subset of the fields below;
//! command-line flags then override individual values.

use std::path::{Path, PathBuf};

use fracimp::dataset::{ColumnType, CsvSchema, DEFAULT_MISSING_TOKEN};
use fracimp::fhdi::{DEFAULT_CATEGORIES, DEFAULT_DONORS};
use fracimp::mi::Prior;
use fracimp::pfi::PFIConfig;
use fracimp::sim::{DesignSpec, Method, PopulationSpec, ResponseSpec};
use fracimp::variance::ReplicateMethod;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub quiet: Option<bool>,
    pub data: Option<DataConfig>,
    pub impute: ImputeConfig,
    pub variance: VarianceConfig,
    pub simulate: SimulateConfig,
    pub twophase: Option<TwoPhaseConfig>,
}

/// Where a survey CSV lives and how its columns map onto items.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub weight: String,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default = "default_missing")]
    pub missing: String,
    /// Item columns in order.
    pub items: Vec<String>,
    /// The subset of `items` holding integer category codes.
    #[serde(default)]
    pub categorical: Vec<String>,
}

fn default_missing() -> String {
    DEFAULT_MISSING_TOKEN.to_string()
}

impl DataConfig {
    pub fn schema(&self) -> Result<CsvSchema, CliError> {
        if let Some(c) = self.categorical.iter().find(|c| !self.items.contains(c)) {
            return Err(CliError::Config(format!("categorical column {c} is not listed in items")));
        }
        Ok(CsvSchema {
            id: self.id.clone(),
            weight: self.weight.clone(),
            stratum: self.stratum.clone(),
            items: self
                .items
                .iter()
                .map(|name| {
                    let t = if self.categorical.contains(name) {
                        ColumnType::Categorical
                    } else {
                        ColumnType::Continuous
                    };
                    (name.clone(), t)
                })
                .collect(),
        })
    }

    fn resolve(&mut self, base: &Path) {
        if self.path.is_relative() {
            self.path = base.join(&self.path);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMethod {
    #[default]
    Pfi,
    Fhdi,
    Kernel,
    Sfi,
    Dr,
    Mi,
}

impl std::str::FromStr for ImputeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "pfi" => ImputeMethod::Pfi,
            "fhdi" => ImputeMethod::Fhdi,
            "kernel" => ImputeMethod::Kernel,
            "sfi" => ImputeMethod::Sfi,
            "dr" => ImputeMethod::Dr,
            "mi" => ImputeMethod::Mi,
            other => return Err(format!("unknown method {other}; expected pfi, fhdi, kernel, sfi, dr or mi")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Normal,
    Logistic,
    StratifiedLognormal,
}

/// The parametric model used by PFI, SFI and MI.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// The imputed item.
    pub target: Option<String>,
    pub covariates: Vec<String>,
    /// Stratum item of the stratified log-normal model.
    pub stratum: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Mean,
    Median,
    Quantile,
    ProportionBelow,
}

/// One estimand solved on the imputed data.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub kind: TargetKind,
    pub item: String,
    /// Quantile level or proportion threshold.
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub domain_item: Option<String>,
    #[serde(default)]
    pub domain_code: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhdiConfig {
    /// Items jointly imputed; defaults to every item with missing values.
    pub items: Vec<String>,
    /// Categories per continuous item.
    pub k: usize,
    /// Donors per imputation cell.
    pub donors: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FhdiConfig {
    fn default() -> Self {
        FhdiConfig {
            items: Vec::new(),
            k: DEFAULT_CATEGORIES,
            donors: DEFAULT_DONORS,
            max_iter: 1000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    #[default]
    Gaussian,
    Epanechnikov,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kernel: KernelName,
    /// Fixed bandwidth; Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    pub product: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfiConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SfiConfig {
    fn default() -> Self {
        SfiConfig { max_iter: 500, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrConfig {
    /// Response-model covariates; the outcome covariates when empty.
    pub propensity_covariates: Vec<String>,
    /// Items entering the propensity model on the log scale.
    pub log_covariates: Vec<String>,
    /// Shift the propensity intercept so that `Σ_R w/π = Σ_A w`.
    pub normalize: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub m: usize,
    pub prior: Prior,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            m: 100,
            prior: Prior::Jeffreys,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub method: ImputeMethod,
    pub model: ModelConfig,
    pub targets: Vec<TargetConfig>,
    pub pfi: PFIConfig,
    pub fhdi: FhdiConfig,
    pub kernel: KernelConfig,
    pub sfi: SfiConfig,
    pub dr: DrConfig,
    pub mi: MiConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceConfig {
    pub replicate_method: ReplicateMethod,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub mi_m: usize,
    pub mi_prior: Prior,
    pub pfi: PFIConfig,
    pub replicate_method: ReplicateMethod,
    pub population_seed: u64,
    pub population: PopulationSpec,
    pub design: DesignSpec,
    pub response: ResponseSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let study = fracimp::sim::StudyConfig::default();
        SimulateConfig {
            replicates: study.replicates,
            methods: study.methods,
            mi_m: study.mi_m,
            mi_prior: study.mi_prior,
            pfi: study.pfi,
            replicate_method: study.replicate_method,
            population_seed: study.population_seed,
            population: PopulationSpec::default(),
            design: DesignSpec::default(),
            response: ResponseSpec::default(),
        }
    }
}

impl SimulateConfig {
    pub fn study(&self) -> fracimp::sim::StudyConfig {
        fracimp::sim::StudyConfig {
            replicates: self.replicates,
            methods: self.methods.clone(),
            mi_m: self.mi_m,
            mi_prior: self.mi_prior,
            pfi: self.pfi.clone(),
            replicate_method: self.replicate_method,
            population_seed: self.population_seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoPhaseConfig {
    pub phase1: DataConfig,
    pub phase2: DataConfig,
    pub x: Vec<String>,
    pub y: String,
    #[serde(default = "yes")]
    pub nested: bool,
    /// Imputations per unit for reduced-m FI; FEFI when absent.
    #[serde(default)]
    pub m: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Config {
    /// Reads a TOML file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            d.resolve(base);
        }
        if let Some(tp) = cfg.twophase.as_mut() {
            tp.phase1.resolve(base);
            tp.phase2.resolve(base);
        }
        Ok(cfg)
    }
}
