//! JSON configuration for every command, with dotted-path overrides.
//!
//! Every config struct rejects unknown keys, so a misspelled key or
//! override fails instead of being silently ignored.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::Point2;
use crate::nlos::MaskPolicy;
use crate::pipeline::PipelineConfig;
use crate::pso::PsoParams;
use crate::scenario::{
    apply_synthetic_nlos, derive_displacements, generate_trajectory, synthesize_cfr, synthesize_cir, DisplacementSet,
    NlosConfig, Scenario, SignalDomain, Trajectory,
};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Point2>,
    pub speed_m_per_s: f64,
    pub dt_s: f64,
    pub jitter_sigma_m: Option<f64>,
}

impl Default for TrajectorySpec {
    /// A lawnmower sweep over the desk hall.
    fn default() -> Self {
        let mut waypoints = Vec::new();
        for (lane, y) in [2.0, 6.0, 10.0, 14.0, 18.0].into_iter().enumerate() {
            if lane % 2 == 0 {
                waypoints.extend([[2.0, y], [38.0, y]]);
            } else {
                waypoints.extend([[38.0, y], [2.0, y]]);
            }
        }
        Self { waypoints, speed_m_per_s: 1.0, dt_s: 0.1, jitter_sigma_m: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisplacementSpec {
    pub epsilon_s: f64,
    pub noise_sigma_m: f64,
    pub bias_rate_m_per_s: f64,
}

impl Default for DisplacementSpec {
    fn default() -> Self {
        Self { epsilon_s: 4.0, noise_sigma_m: 0.1, bias_rate_m_per_s: 0.02 }
    }
}

/// Scenario, trajectory, NLoS and displacement generation in one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub scenario: Scenario,
    pub trajectory: TrajectorySpec,
    pub domain: SignalDomain,
    pub r_los: f64,
    pub nlos: NlosConfig,
    pub displacement: Option<DisplacementSpec>,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::desk(),
            trajectory: TrajectorySpec::default(),
            domain: SignalDomain::Cir,
            r_los: 1.0,
            nlos: NlosConfig::default(),
            displacement: Some(DisplacementSpec::default()),
            seed: 0,
        }
    }
}

/// Output of [`SimulateConfig::run`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trajectory: Trajectory,
    pub dataset: crate::scenario::CirDataset,
    pub displacements: Option<DisplacementSet>,
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if !(0.0..=1.0).contains(&self.r_los) {
            return Err(Error::Config(format!("r_los {} must lie in [0, 1]", self.r_los)));
        }
        let t = &self.trajectory;
        if t.waypoints.is_empty() || !(t.speed_m_per_s > 0.0) || !(t.dt_s > 0.0) {
            return Err(Error::Config("trajectory needs waypoints, positive speed and positive dt".into()));
        }
        if let Some(d) = &self.displacement {
            if !(d.epsilon_s > 0.0) || !(d.noise_sigma_m >= 0.0) || !d.bias_rate_m_per_s.is_finite() {
                return Err(Error::Config("displacement needs epsilon_s > 0 and sigma >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn run(&self) -> Result<Simulation> {
        self.validate()?;
        let t = &self.trajectory;
        let trajectory =
            generate_trajectory(&self.scenario, &t.waypoints, t.speed_m_per_s, t.dt_s, t.jitter_sigma_m, self.seed)?;
        let clean = match self.domain {
            SignalDomain::Cir => synthesize_cir(&self.scenario, &trajectory, self.seed)?,
            SignalDomain::Cfr => synthesize_cfr(&self.scenario, &trajectory, self.seed)?,
        };
        let dataset = apply_synthetic_nlos(&clean, self.r_los, &self.nlos, self.seed)?;
        let displacements = self
            .displacement
            .as_ref()
            .map(|d| derive_displacements(&trajectory, d.epsilon_s, d.noise_sigma_m, d.bias_rate_m_per_s, self.seed))
            .transpose()?;
        Ok(Simulation { trajectory, dataset, displacements })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub pso: PsoParams,
    pub mask: MaskPolicy,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { pso: PsoParams::default(), mask: MaskPolicy::Threshold(crate::nlos::DEFAULT_LAMBDA) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub eval: EvalConfig,
    /// Moving-average window applied to the estimate before scoring.
    pub smoothing_window: Option<usize>,
}

/// Methods compared by the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Chart trained with the masked TDoA loss.
    CcTdoa,
    /// Chart trained with the masked TDoA loss plus displacements.
    CcTdoaDisp,
    /// Chart trained with the TDoA loss and no masking.
    CcTdoaUnmasked,
    PsoMasked,
    PsoUnmasked,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::CcTdoa, Method::CcTdoaDisp, Method::CcTdoaUnmasked, Method::PsoMasked, Method::PsoUnmasked];

    pub fn name(self) -> &'static str {
        match self {
            Method::CcTdoa => "cc_tdoa",
            Method::CcTdoaDisp => "cc_tdoa_disp",
            Method::CcTdoaUnmasked => "cc_tdoa_unmasked",
            Method::PsoMasked => "pso_masked",
            Method::PsoUnmasked => "pso_unmasked",
        }
    }

    /// Whether the method's result depends on the mask threshold.
    pub fn uses_lambda(self) -> bool {
        matches!(self, Method::CcTdoa | Method::CcTdoaDisp | Method::PsoMasked)
    }

    pub fn is_chart(self) -> bool {
        matches!(self, Method::CcTdoa | Method::CcTdoaDisp | Method::CcTdoaUnmasked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    /// Base simulation; `r_los` and `seed` are set per cell.
    pub simulate: SimulateConfig,
    pub pipeline: PipelineConfig,
    /// Base training config; mode, mask, beta and seed are set per cell.
    pub train: TrainConfig,
    pub pso: PsoParams,
    pub eval: EvalConfig,
    /// Also score chart estimates after moving-average smoothing.
    pub smoothing_window: Option<usize>,
    pub r_los: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub beta: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        // desk-scale budget: ~250 frames, C = 32, 25 epochs
        let mut simulate = SimulateConfig::default();
        simulate.trajectory.dt_s = 0.8;
        Self {
            simulate,
            pipeline: PipelineConfig { truncation: 32, ..PipelineConfig::default() },
            train: TrainConfig { epochs: 25, ..TrainConfig::default() },
            pso: PsoParams::default(),
            eval: EvalConfig::default(),
            smoothing_window: Some(10),
            r_los: vec![1.0, 0.75, 0.5, 0.25],
            lambdas: vec![crate::nlos::DEFAULT_LAMBDA],
            beta: 2.0,
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r_los.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("r_los, lambdas, seeds and methods must be nonempty".into()));
        }
        if let Some(r) = self.r_los.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("r_los {r} must lie in [0, 1]")));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return Err(Error::Config(format!("lambda {l} must lie in (0, 1)")));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        self.simulate.validate()?;
        self.train.validate()?;
        self.pso.validate()
    }
}

/// Sets `path` (dot separated) in a JSON tree to `value`, creating
/// intermediate objects. The value is parsed as JSON, falling back to a
/// plain string.
pub fn set_path(root: &mut Value, path: &str, value: &str) -> Result<()> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed key '{path}'")));
    }
    for (i, key) in keys.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let next = match node {
            Value::Object(map) => map.entry(key.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let idx: usize = key.parse().map_err(|_| Error::Config(format!("'{key}' in '{path}' is not an index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range in '{path}'")))?
            }
            _ => return Err(Error::Config(format!("'{}' in '{path}' is not an object", keys[..i].join(".")))),
        };
        node = next;
    }
    *node = parsed;
    Ok(())
}

/// Applies `key=value` overrides.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not of the form key=value")))?;
        set_path(root, k.trim(), v.trim())?;
    }
    Ok(())
}

/// Loads a config: defaults, then the file (if any), then the overrides.
/// Returns the typed config and its fully expanded JSON form.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<(T, Value)> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    apply_overrides(&mut root, overrides)?;
    let typed: T = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    let expanded = serde_json::to_value(&typed)?;
    Ok((typed, expanded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_and_replace() {
        let mut v = json!({"a": {"b": 1}, "list": [1, 2]});
        apply_overrides(&mut v, &["a.b=2.5".into(), "a.c.d=\"x\"".into(), "list.1=7".into(), "s=plain".into()]).unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": {"d": "x"}}, "list": [1, 7], "s": "plain"}));
        assert!(apply_overrides(&mut v, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut v, &["a.b.c=1".into()]).is_err());
        assert!(apply_overrides(&mut v, &["list.9=1".into()]).is_err());
    }

    #[test]
    fn load_applies_defaults_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"r_los": 0.5, "seed": 3}"#).unwrap();
        let (cfg, expanded): (SimulateConfig, _) = load_config(Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!((cfg.r_los, cfg.seed), (0.5, 9));
        assert_eq!(cfg.scenario, Scenario::desk());
        assert_eq!(expanded["seed"], json!(9));
        let (again, _): (SimulateConfig, _) =
            load_config(None, &["r_los=0.5".into(), "seed=9".into()]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn schema_violations_are_reported() {
        let (cfg, _): (SimulateConfig, _) = load_config(None, &["r_los=1.5".into()]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(load_config::<SimulateConfig>(None, &["r_loss=0.5".into()]).is_err());
        assert!(load_config::<TrainConfig>(None, &["mode=\"sideways\"".into()]).is_err());
        assert!(load_config::<ExperimentSpec>(None, &["methods=[\"cc_tdoa\",\"magic\"]".into()]).is_err());
    }

    #[test]
    fn expanded_config_reloads_to_the_same_value() {
        let (spec, expanded): (ExperimentSpec, _) = load_config(None, &["seeds=[4]".into()]).unwrap();
        let back: ExperimentSpec = serde_json::from_value(expanded).unwrap();
        assert_eq!(back, spec);
        spec.validate().unwrap();
    }

    #[test]
    fn experiment_spec_validation() {
        let bad = ExperimentSpec { r_los: vec![1.2], ..ExperimentSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentSpec { methods: vec![], ..ExperimentSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentSpec { lambdas: vec![1.0], ..ExperimentSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let mut cfg = SimulateConfig::default();
        cfg.trajectory.waypoints = vec![[5.0, 5.0], [9.0, 5.0]];
        cfg.r_los = 0.5;
        let a = cfg.run().unwrap();
        let b = cfg.run().unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.displacements, b.displacements);
        assert_eq!(a.trajectory.len(), 41);
    }
}
