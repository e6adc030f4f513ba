//! Declarative run configuration.
//!
//! One TOML document drives every command.  A `[simulate]` table holds the
//! synthetic-study design ([`SimConfig`]); a `[pipeline]` table describes a
//! user-supplied cohort file and how to analyse it.  Unknown keys are
//! rejected everywhere so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CovariateSpec;
use crate::sim::{Method, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("config error: {detail}")]
    Invalid { detail: String },
}

fn invalid(detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        detail: detail.into(),
    }
}

/// Where results go and how much parallelism to use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory that receives every result file.
    pub directory: PathBuf,
    /// Worker threads; 0 means all available cores.  Results are identical
    /// at any setting.
    pub threads: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("out"),
            threads: 0,
        }
    }
}

/// Analysis description for a cohort supplied as a delimited file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cohort file; resolved relative to the config file's directory.
    pub cohort: PathBuf,
    /// Fully observed covariates, in column order.
    pub low_cost: Vec<CovariateSpec>,
    /// Expensive covariates, present only on phase-two rows elsewhere `NA`.
    pub expensive: Vec<CovariateSpec>,
    /// Optional stratum label column for stratified designs.
    pub stratum_column: Option<String>,
    /// Analysis-model terms; `a:b` denotes a product term.  Empty means all
    /// low-cost and expensive main effects.
    pub model: Vec<String>,
    /// Low-cost working-model terms used to compute influence functions for
    /// supersample selection.  Empty means the low-cost main effects.
    pub submodel: Vec<String>,
    /// Estimator to run; any simulation-study method label is accepted.
    pub method: String,
    /// Name of a 0/1 column marking subcohort membership.  When absent the
    /// subcohort is drawn here, which requires `subcohort_size`.
    pub subcohort_column: Option<String>,
    /// Subcohort size to draw when no membership column is given.
    pub subcohort_size: Option<usize>,
    /// Units added for imputation by the supersampled methods.
    pub supersample_size: usize,
    /// Imputed data sets.
    pub copies: usize,
    /// Chained-equation cycles per imputed data set.
    pub cycles: usize,
    /// Rejection-sampling attempts per missing cell before keeping the last
    /// proposal.
    pub reject_limit: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cohort: PathBuf::new(),
            low_cost: Vec::new(),
            expensive: Vec::new(),
            stratum_column: None,
            model: Vec::new(),
            submodel: Vec::new(),
            method: "mice_iss".into(),
            subcohort_column: None,
            subcohort_size: None,
            supersample_size: 0,
            copies: 10,
            cycles: 20,
            reject_limit: 1_000,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cohort.as_os_str().is_empty() {
            return Err(invalid("[pipeline] needs `cohort`, the path of the cohort file"));
        }
        if self.low_cost.is_empty() {
            return Err(invalid("[pipeline] needs at least one [[pipeline.low_cost]] covariate"));
        }
        let method = self.method()?;
        if method.uses_supersample() && self.supersample_size == 0 {
            return Err(invalid(format!(
                "method `{}` supersamples; set a positive `supersample_size`",
                self.method
            )));
        }
        if method != Method::Full
            && self.subcohort_column.is_none()
            && self.subcohort_size.is_none()
        {
            return Err(invalid(
                "phase-two design unknown: give `subcohort_column` (a 0/1 column in the cohort \
                 file) or `subcohort_size` to draw one",
            ));
        }
        if method.uses_imputation() {
            if self.expensive.is_empty() {
                return Err(invalid(format!(
                    "method `{}` imputes expensive covariates; declare [[pipeline.expensive]]",
                    self.method
                )));
            }
            if self.copies < 2 {
                return Err(invalid("pooling needs `copies` of at least 2"));
            }
            if self.cycles == 0 || self.reject_limit == 0 {
                return Err(invalid("`cycles` and `reject_limit` must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn method(&self) -> Result<Method, ConfigError> {
        Method::parse(&self.method).ok_or_else(|| {
            invalid(format!(
                "unknown method `{}`; expected one of {}",
                self.method,
                method_labels()
            ))
        })
    }

    /// Analysis terms: the declared list, or every main effect.
    pub fn model_terms(&self) -> Vec<String> {
        if !self.model.is_empty() {
            return self.model.clone();
        }
        self.low_cost
            .iter()
            .chain(&self.expensive)
            .flat_map(|s| expanded(s))
            .collect()
    }

    /// Working-model terms for influence-based selection.
    pub fn submodel_terms(&self) -> Vec<String> {
        if !self.submodel.is_empty() {
            return self.submodel.clone();
        }
        self.low_cost.iter().flat_map(expanded).collect()
    }
}

/// Column names a covariate contributes after dummy expansion.
fn expanded(spec: &CovariateSpec) -> Vec<String> {
    match spec.kind {
        crate::cohort::CovariateKind::Categorical { levels } => {
            (2..=levels).map(|l| format!("{}.{}", spec.name, l)).collect()
        }
        _ => vec![spec.name.clone()],
    }
}

fn method_labels() -> String {
    Method::ALL
        .iter()
        .map(|m| m.label())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Root of the configuration document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic-study design; used by the `simulate` command.
    pub simulate: Option<SimConfig>,
    /// Methods the simulation compares, by label; empty means all eight.
    pub methods: Vec<String>,
    /// Cohort-file analysis; used by `analyze` and `sample`.
    pub pipeline: Option<PipelineConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses a TOML document.
    pub fn from_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            source: Box::new(e),
        })?;
        Ok(config)
    }

    /// Reads and parses a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut config = Self::from_str(&text, &path.display().to_string())?;
        if let (Some(pipeline), Some(dir)) = (config.pipeline.as_mut(), path.parent()) {
            if pipeline.cohort.is_relative() && !pipeline.cohort.as_os_str().is_empty() {
                pipeline.cohort = dir.join(&pipeline.cohort);
            }
        }
        Ok(config)
    }

    /// The simulation design, defaulting to the desk-scale study.
    pub fn simulate_config(&self) -> SimConfig {
        self.simulate.clone().unwrap_or_default()
    }

    /// The methods to compare, validated; empty list means all eight.
    pub fn method_list(&self) -> Result<Vec<Method>, ConfigError> {
        if self.methods.is_empty() {
            return Ok(Method::ALL.to_vec());
        }
        let mut out = Vec::with_capacity(self.methods.len());
        for label in &self.methods {
            let method = Method::parse(label).ok_or_else(|| {
                invalid(format!("unknown method `{label}`; expected one of {}", method_labels()))
            })?;
            if out.contains(&method) {
                return Err(invalid(format!("method `{label}` listed twice")));
            }
            out.push(method);
        }
        Ok(out)
    }

    /// The pipeline section, required by `analyze` and `sample`.
    pub fn pipeline_config(&self) -> Result<&PipelineConfig, ConfigError> {
        self.pipeline
            .as_ref()
            .ok_or_else(|| invalid("this command needs a [pipeline] section in the config"))
    }

    /// Canonical text form; hashed into the run metadata.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Replaces the study dimensions with the full-size design: a cohort of
/// 25,000 with a 250-unit subcohort, a 750-unit supersample, and 1,000
/// replicates.
pub fn at_paper_scale(config: &SimConfig) -> SimConfig {
    SimConfig {
        cohort_size: 25_000,
        subcohort_size: 250,
        supersample_size: 750,
        replicates: 1_000,
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_simulate_config_parses_with_defaults() {
        let text = "[simulate]\nreplicates = 5\nseed = 7\n";
        let config = ExperimentConfig::from_str(text, "inline").unwrap();
        let sim = config.simulate_config();
        assert_eq!(sim.replicates, 5);
        assert_eq!(sim.seed, 7);
        assert_eq!(sim.cohort_size, 5_000);
        assert_eq!(config.method_list().unwrap().len(), 8);
        assert_eq!(config.output.directory, PathBuf::from("out"));
        assert_eq!(config.output.threads, 0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let text = "[simulate]\nreplicatez = 5\n";
        let err = ExperimentConfig::from_str(text, "inline").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("replicatez"), "message should name the bad key: {msg}");
        let err = ExperimentConfig::from_str("[outputs]\ndirectory = \"x\"\n", "inline")
            .unwrap_err();
        assert!(err.to_string().contains("outputs"));
    }

    #[test]
    fn method_lists_are_validated() {
        let text = "methods = [\"full\", \"mice_iss\"]\n";
        let config = ExperimentConfig::from_str(text, "inline").unwrap();
        assert_eq!(
            config.method_list().unwrap(),
            vec![Method::Full, Method::MiceIss]
        );
        let bad = ExperimentConfig::from_str("methods = [\"karaoke\"]\n", "inline").unwrap();
        assert!(bad.method_list().unwrap_err().to_string().contains("karaoke"));
        let dup =
            ExperimentConfig::from_str("methods = [\"full\", \"full\"]\n", "inline").unwrap();
        assert!(dup.method_list().unwrap_err().to_string().contains("twice"));
    }

    #[test]
    fn pipeline_validation_demands_a_complete_design() {
        let text = r#"
[pipeline]
cohort = "cohort.csv"
method = "mice_iss"
supersample_size = 50
subcohort_size = 40

[[pipeline.low_cost]]
name = "z1"
kind = "continuous"

[[pipeline.expensive]]
name = "x1"
kind = "continuous"
"#;
        let config = ExperimentConfig::from_str(text, "inline").unwrap();
        let pipeline = config.pipeline_config().unwrap();
        pipeline.validate().unwrap();
        assert_eq!(pipeline.model_terms(), vec!["z1", "x1"]);
        assert_eq!(pipeline.submodel_terms(), vec!["z1"]);

        let mut missing_n1 = pipeline.clone();
        missing_n1.supersample_size = 0;
        assert!(missing_n1.validate().unwrap_err().to_string().contains("supersample_size"));

        let mut no_phase2 = pipeline.clone();
        no_phase2.subcohort_size = None;
        assert!(no_phase2.validate().unwrap_err().to_string().contains("subcohort"));

        let mut no_x = pipeline.clone();
        no_x.expensive.clear();
        assert!(no_x.validate().unwrap_err().to_string().contains("expensive"));

        let mut direct = pipeline.clone();
        direct.method = "full".into();
        direct.subcohort_size = None;
        direct.expensive.clear();
        direct.validate().unwrap();
    }

    #[test]
    fn categorical_low_cost_columns_expand_in_model_terms() {
        let text = r#"
[pipeline]
cohort = "c.csv"
method = "cc"
subcohort_size = 30

[[pipeline.low_cost]]
name = "grp"
kind = { categorical = { levels = 3 } }

[[pipeline.expensive]]
name = "x1"
kind = "binary"
"#;
        let config = ExperimentConfig::from_str(text, "inline").unwrap();
        let pipeline = config.pipeline_config().unwrap();
        assert_eq!(pipeline.model_terms(), vec!["grp.2", "grp.3", "x1"]);
        assert_eq!(pipeline.submodel_terms(), vec!["grp.2", "grp.3"]);
    }

    #[test]
    fn paper_scale_promotes_only_the_dimensions() {
        let base = SimConfig {
            seed: 123,
            copies: 4,
            interaction: true,
            ..SimConfig::default()
        };
        let big = at_paper_scale(&base);
        assert_eq!(big.cohort_size, 25_000);
        assert_eq!(big.subcohort_size, 250);
        assert_eq!(big.supersample_size, 750);
        assert_eq!(big.replicates, 1_000);
        assert_eq!(big.seed, 123);
        assert_eq!(big.copies, 4);
        assert!(big.interaction);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "[simulate]\nreplicates = 5\n[output]\nthreads = 2\n";
        let config = ExperimentConfig::from_str(text, "inline").unwrap();
        let canon = config.canonical_toml();
        let again = ExperimentConfig::from_str(&canon, "canon").unwrap();
        assert_eq!(canon, again.canonical_toml());
        assert_eq!(again.output.threads, 2);
    }
}
