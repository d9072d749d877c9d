//! Run configuration: one TOML file with a section per pipeline stage.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use epiflow_core::eval::EvalConfig;
use epiflow_core::flow::FlowConfig;
use epiflow_core::format::sha256_hex;
use epiflow_core::threshold::ThresholdConfig;
use epiflow_core::{EnvConfig, ValueTrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_traj: usize,
    pub horizon: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_traj: 2500,
            horizon: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub tau_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    /// Candidate counts that also get full rollouts in the N sweep.
    pub n_rollouts: Vec<usize>,
    pub timing_states: usize,
    pub timing_repeats: usize,
    pub mesh: [usize; 2],
    pub z_points: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            tau_grid: epiflow_core::eval::TAU_GRID.to_vec(),
            lambda_grid: epiflow_core::eval::LAMBDA_GRID.to_vec(),
            n_grid: epiflow_core::eval::N_GRID.to_vec(),
            n_rollouts: vec![1, 8],
            timing_states: 64,
            timing_repeats: 5,
            mesh: [51, 41],
            z_points: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub env: EnvConfig,
    pub dataset: DatasetSection,
    pub values: ValueTrainConfig,
    pub policy: FlowConfig,
    pub threshold: ThresholdConfig,
    pub eval: EvalConfig,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
            env: EnvConfig::default(),
            dataset: DatasetSection::default(),
            values: ValueTrainConfig::default(),
            policy: FlowConfig::default(),
            threshold: ThresholdConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 2] = ["threshold.z_lo", "threshold.z_hi"];

fn collect_keys(prefix: &str, v: &toml::Value, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(path.clone());
            collect_keys(&path, child, out);
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let v = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut keys = BTreeSet::new();
    collect_keys("", &v, &mut keys);
    keys.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    keys
}

impl RunConfig {
    /// Parses TOML text, reporting every unknown key at once.
    pub fn parse(text: &str) -> Result<(Self, BTreeSet<String>)> {
        let value: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        let mut present = BTreeSet::new();
        collect_keys("", &value, &mut present);
        let known = known_keys();
        let unknown: Vec<&String> = present
            .iter()
            .filter(|k| !known.contains(*k))
            .collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config keys: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            );
        }
        let cfg: RunConfig = value.try_into().context("config has a value of the wrong type")?;
        let sections = present.into_iter().filter(|k| !k.contains('.')).collect();
        Ok((cfg, sections))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeSet<String>)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with the output location cleared; where artifacts land is not part of the run.
    pub fn portable(&self) -> Self {
        Self {
            out: String::new(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical TOML serialization, ignoring `out`.
    pub fn hash(&self) -> String {
        sha256_hex(self.portable().to_toml().as_bytes())
    }

    /// Propagates the global seed into every stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.values.seed = seed;
        self.policy.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.values.validate()?;
        self.policy.validate()?;
        self.eval.validate()?;
        if self.dataset.n_traj == 0 || self.dataset.horizon == 0 {
            bail!("dataset.n_traj and dataset.horizon must be at least 1");
        }
        Ok(())
    }
}

/// Errors unless every section in `required` appeared in the file.
pub fn require_sections(present: &BTreeSet<String>, required: &[&str]) -> Result<()> {
    let missing: Vec<&str> = required.iter().copied().filter(|s| !present.contains(*s)).collect();
    if !missing.is_empty() {
        bail!("config is missing required section(s): {}", missing.join(", "));
    }
    Ok(())
}
