//! Experiment configuration: a TOML file with one table per module, plus
//! `key=value` overrides applied to the parsed table before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rmppi::ControllerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    /// `double_integrator` or `nonlinear_benchmark`.
    pub model: String,
    pub dt: f64,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub x0: Vec<f64>,
    /// Admissible box; leaving it is a crash.
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            model: "double_integrator".into(),
            dt: 0.02,
            u_min: vec![-20.0],
            u_max: vec![20.0],
            x0: vec![-1.0, 0.0],
            box_lo: vec![-2.0, -6.0],
            box_hi: vec![2.0, 6.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
    pub terminal_weights: Vec<f64>,
    pub wall_lo: Vec<f64>,
    pub wall_hi: Vec<f64>,
    pub wall_slope: f64,
    pub clip: f64,
    pub terminal_clip: f64,
    /// Diagonal of the control-noise covariance.
    pub sigma: Vec<f64>,
    pub lambda: f64,
    pub beta: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            target: vec![0.0, 0.0],
            weights: vec![2.0, 0.1],
            terminal_weights: vec![10.0, 0.5],
            wall_lo: vec![-1.5, f64::NEG_INFINITY],
            wall_hi: vec![1.5, f64::INFINITY],
            wall_slope: 20.0,
            clip: 40.0,
            terminal_clip: 200.0,
            sigma: vec![1.0],
            lambda: 1.0,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub samples: usize,
    pub horizon: usize,
    pub crash_cost: f64,
    pub smoothing: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            samples: 256,
            horizon: 30,
            crash_cost: 1000.0,
            smoothing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackChoice {
    None,
    Ilqg,
    Contraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackSection {
    pub feedback: FeedbackChoice,
    /// Diagonal tracking weights.
    pub q_track: Vec<f64>,
    pub r_track: Vec<f64>,
    /// Constant metric, row-major.
    pub metric: Vec<Vec<f64>>,
    pub contraction_rate: f64,
}

impl Default for FeedbackSection {
    fn default() -> Self {
        Self {
            feedback: FeedbackChoice::Contraction,
            q_track: vec![1000.0, 1000.0],
            r_track: vec![1.0],
            metric: vec![vec![72.9098, 17.1067], vec![17.1067, 8.2621]],
            contraction_rate: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmppiSection {
    /// Defaults to the crash cost.
    pub alpha: Option<f64>,
    pub nsp_candidates: usize,
    /// Defaults to `samples / 8`.
    pub nsp_samples: Option<usize>,
    pub emv_repeats: usize,
    pub emv_scale: f64,
    pub gamma_window: usize,
    pub gamma_eps: f64,
    /// Random pairs for the Lipschitz estimate when no analytic constant is
    /// known.
    pub lipschitz_pairs: usize,
}

impl Default for RmppiSection {
    fn default() -> Self {
        Self {
            alpha: None,
            nsp_candidates: 8,
            nsp_samples: None,
            emv_repeats: 8,
            emv_scale: 3.0,
            gamma_window: 20,
            gamma_eps: 1e-3,
            lipschitz_pairs: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessSection {
    pub name: String,
    pub controller: ControllerKind,
    pub steps: usize,
    pub seed: u64,
    /// Multiplier on the control-noise covariance seen by the plant.
    pub noise_multiplier: f64,
    /// Norm bound on the additive state disturbance.
    pub disturbance_bound: f64,
    /// Optional one-off state kick added at `kick_step`.
    pub kick_step: Option<usize>,
    pub kick: Vec<f64>,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            controller: ControllerKind::Rmppi,
            steps: 2000,
            seed: 0,
            noise_multiplier: 1.0,
            disturbance_bound: 0.0,
            kick_step: None,
            kick: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub cost: CostSection,
    pub sampler: SamplerSection,
    pub feedback: FeedbackSection,
    pub rmppi: RmppiSection,
    pub harness: HarnessSection,
}

const SECTIONS: [&str; 6] = ["system", "cost", "sampler", "feedback", "rmppi", "harness"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides::<&str>(text, &[])
    }

    /// Parses `text`, applies each `key=value` override in order, then
    /// validates. A bare key must name a field of exactly one section;
    /// `section.key` is always accepted.
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies overrides to an already parsed config.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml_string()?, overrides)
    }

    pub fn alpha(&self) -> f64 {
        self.rmppi.alpha.unwrap_or(self.sampler.crash_cost)
    }

    pub fn nsp_samples(&self) -> usize {
        self.rmppi.nsp_samples.unwrap_or((self.sampler.samples / 8).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config(reason));
        let s = &self.system;
        if s.box_lo.len() != s.box_hi.len() || s.x0.len() != s.box_lo.len() {
            return bad("system.x0, box_lo and box_hi must have equal lengths".into());
        }
        if self.harness.noise_multiplier < 1.0 && self.harness.noise_multiplier != 0.0 {
            return bad(format!(
                "harness.noise_multiplier must be 0 or at least 1, got {}",
                self.harness.noise_multiplier
            ));
        }
        if self.harness.kick_step.is_some() && self.harness.kick.len() != s.x0.len() {
            return bad("harness.kick must have one entry per state".into());
        }
        if self.sampler.samples == 0 || self.sampler.horizon == 0 {
            return bad("sampler.samples and sampler.horizon must be positive".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn section_of(key: &str) -> Result<&'static str> {
    let defaults = toml::Value::try_from(ExperimentConfig::default())
        .map_err(|e| Error::Config(e.to_string()))?;
    let optional = [("rmppi", "alpha"), ("rmppi", "nsp_samples"), ("harness", "kick_step")];
    let hits: Vec<&'static str> = SECTIONS
        .iter()
        .copied()
        .filter(|sec| {
            defaults.get(sec).and_then(|t| t.get(key)).is_some()
                || optional.iter().any(|(s, k)| s == sec && *k == key)
        })
        .collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        _ => Err(Error::Config(format!("ambiguous config key `{key}`, qualify it with a section"))),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => {
            if !SECTIONS.contains(&s) {
                return Err(Error::Config(format!("unknown config section `{s}` in override `{spec}`")));
            }
            (s.to_string(), f.to_string())
        }
        None => (section_of(key)?.to_string(), key.to_string()),
    };
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sub = entry
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{section}` must be a table")))?;
    sub.insert(field, parse_value(value));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[cost]\nlamda = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = ExperimentConfig::from_toml_with_overrides("", &["horizn=3"]).unwrap_err();
        assert!(err.to_string().contains("horizn"), "{err}");
    }

    #[test]
    fn overrides_bare_and_qualified() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "[harness]\nseed = 3\n",
            &["controller=mppi", "cost.lambda=2.5", "seed=9", "alpha=inf", "sigma=[0.25]"],
        )
        .unwrap();
        assert_eq!(cfg.harness.controller, ControllerKind::Mppi);
        assert_eq!(cfg.cost.lambda, 2.5);
        assert_eq!(cfg.harness.seed, 9);
        assert_eq!(cfg.alpha(), f64::INFINITY);
        assert_eq!(cfg.cost.sigma, vec![0.25]);
        assert_eq!(cfg.feedback.feedback, FeedbackChoice::Contraction);
        let cfg = cfg.with_overrides(&["feedback=ilqg", "name=abc"]).unwrap();
        assert_eq!(cfg.feedback.feedback, FeedbackChoice::Ilqg);
        assert_eq!(cfg.harness.name, "abc");
    }

    #[test]
    fn bad_overrides_rejected() {
        assert!(ExperimentConfig::from_toml_with_overrides("", &["lambda"]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["nowhere.lambda=1"]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["controller=pid"]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["noise_multiplier=0.5"]).is_err());
    }

    #[test]
    fn derived_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.alpha(), cfg.sampler.crash_cost);
        assert_eq!(cfg.nsp_samples(), 32);
    }
}
