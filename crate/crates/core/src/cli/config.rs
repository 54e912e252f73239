//! Effective run configuration: defaults, then a config file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::admission::AdmissionConfig;
use crate::attribution::AttributionConfig;
use crate::calibration::{CalibrationConfig, FwerMethod, GridSpec};
use crate::evaluators::ToyScorer;
use crate::float_serde;
use crate::generation::{
    GenerationBackend, RemoteBackend, RemoteConfig, SamplerConfig, SimProfile, SimulatedBackend,
};
use crate::quality::AnswerQuality;

/// Everything that influences an artifact's content. Output location and
/// thread count are deliberately absent: they never change results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `sim:perfect`, `sim:hopeless`, `sim:<profile file>` or `remote:<url>`.
    pub backend: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub k_max: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub grid: GridSpec,
    pub fwer: FwerMethod,
    pub admission: AdmissionConfig,
    pub answer_quality: AnswerQuality,
    pub permutations: usize,
    pub delta: f64,
    pub groups: Option<usize>,
    pub warmstart: usize,
    pub xi: f64,
    pub verify: bool,
    pub calibration_data: Option<String>,
    pub test_data: Option<String>,
    pub input_data: Option<String>,
    pub training_data: Option<String>,
    pub target_data: Option<String>,
    pub target_id: Option<String>,
    pub scorer: Option<ToyScorer>,
    pub trials: usize,
    pub n_cal: usize,
    pub n_test: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cal = CalibrationConfig::new(0.3);
        let attr = AttributionConfig::new(0.3);
        Self {
            seed: 0,
            backend: "sim:perfect".into(),
            alpha: cal.alpha,
            epsilon: cal.epsilon,
            k_max: cal.sampler.k_max,
            temperature: cal.sampler.temperature,
            top_p: cal.sampler.top_p,
            grid: cal.grid,
            fwer: cal.fwer_method,
            admission: cal.admission,
            answer_quality: cal.answer_quality,
            permutations: attr.m_ex,
            delta: attr.delta_ex,
            groups: None,
            warmstart: attr.m0,
            xi: 0.0,
            verify: true,
            calibration_data: None,
            test_data: None,
            input_data: None,
            training_data: None,
            target_data: None,
            target_id: None,
            scorer: None,
            trials: 100,
            n_cal: 500,
            n_test: 200,
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config. A JSON artifact carrying a `config`
    /// object contributes that object, so any artifact can seed a rerun.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let is_json =
            path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if is_json {
            let mut value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if value.get("schema").is_some() {
                value = value
                    .get_mut("config")
                    .map(serde_json::Value::take)
                    .ok_or_else(|| {
                        CliError::Config(format!("{}: artifact has no config echo", path.display()))
                    })?;
            }
            serde_json::from_value(value)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            k_max: self.k_max,
        }
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            grid: self.grid.clone(),
            fwer_method: self.fwer,
            sampler: self.sampler(),
            admission: self.admission,
            answer_quality: self.answer_quality,
        }
    }

    pub fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            alpha: self.alpha,
            m_ex: self.permutations,
            m_st: self.permutations,
            delta_ex: self.delta,
            delta_st: self.delta,
            xi_ex: self.xi,
            xi_st: self.xi,
            groups: self.groups,
            m0: self.warmstart,
            verify: self.verify,
        }
    }

    pub fn backend(&self) -> Result<Box<dyn GenerationBackend>, CliError> {
        parse_backend(&self.backend)
    }
}

pub fn parse_backend(spec: &str) -> Result<Box<dyn GenerationBackend>, CliError> {
    let bad = |m: String| CliError::Config(format!("backend `{spec}`: {m}"));
    if let Some(url) = spec.strip_prefix("remote:") {
        if url.is_empty() {
            return Err(bad("missing url".into()));
        }
        return Ok(Box::new(RemoteBackend::new(RemoteConfig::new(url))));
    }
    let Some(name) = spec.strip_prefix("sim:") else {
        return Err(bad("expected sim:<profile> or remote:<url>".into()));
    };
    let profile = match name {
        "perfect" => SimProfile::perfect(),
        "hopeless" => SimProfile::hopeless(),
        path => load_profile(Path::new(path))?,
    };
    SimulatedBackend::new(profile)
        .map(|b| Box::new(b) as Box<dyn GenerationBackend>)
        .map_err(|e| bad(e.to_string()))
}

pub fn load_profile(path: &Path) -> Result<SimProfile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_scorer(path: &Path) -> Result<ToyScorer, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Parses `l1,l1,../l2,../l3,..` into a product grid. Values accept `inf`.
pub fn parse_grid(text: &str) -> Result<GridSpec, CliError> {
    let dims: Vec<&str> = text.split('/').collect();
    if dims.len() != 3 {
        return Err(CliError::Config(format!(
            "grid `{text}`: expected three '/'-separated value lists"
        )));
    }
    let parse_dim = |d: &str| -> Result<Vec<f64>, CliError> {
        d.split(',')
            .map(|v| {
                float_serde::parse(v)
                    .filter(|x| !x.is_nan())
                    .ok_or_else(|| CliError::Config(format!("grid `{text}`: bad value `{v}`")))
            })
            .collect()
    };
    Ok(GridSpec::Product {
        lambda1_values: parse_dim(dims[0])?,
        lambda2_values: parse_dim(dims[1])?,
        lambda3_values: parse_dim(dims[2])?,
    })
}

/// Resolves a data path from the config, reporting which option is missing.
pub fn required_path(value: &Option<String>, flag: &str) -> Result<PathBuf, CliError> {
    value
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage(format!("missing required {flag}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_flag_parses() {
        let g = parse_grid("-inf,-2/-1,0/0.5").unwrap();
        let t = g.tuples().unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0].lambda1, f64::NEG_INFINITY);
        assert!(parse_grid("1,2/3").is_err());
        assert!(parse_grid("a/0/0.5").is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RunConfig {
            grid: parse_grid("-inf/0/0.5").unwrap(),
            seed: 9,
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn toml_config_overrides_defaults() {
        let cfg: RunConfig = toml::from_str("alpha = 0.4\nseed = 3\n[grid.product]\nlambda1_values = [-2.0]\nlambda2_values = [0.0]\nlambda3_values = [0.5]\n").unwrap();
        assert_eq!(cfg.alpha, 0.4);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epsilon, 0.2);
        assert_eq!(cfg.grid.tuples().unwrap().len(), 1);
        assert!(toml::from_str::<RunConfig>("alpah = 0.4").is_err());
    }

    #[test]
    fn backend_specs() {
        assert_eq!(
            parse_backend("sim:perfect").unwrap().model_tag(),
            "sim:perfect"
        );
        assert!(parse_backend("remote:http://127.0.0.1:1").is_ok());
        assert!(parse_backend("gpu").is_err());
        assert!(parse_backend("sim:/no/such/profile.toml").is_err());
    }
}
