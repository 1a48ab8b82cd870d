//! Run configuration: TOML sections mapped onto a [`Scenario`] plus study and
//! output settings, with dotted-key overrides and a content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::analysis::{Axis, BasisSpec, OmegaThresholds, ReferencePolicy, Scenario};
use crate::error::{Error, Result};
use crate::expr::Field;
use crate::galerkin::{Coupling, ProblemData, Source};
use crate::potentials::{PotentialKind, PotentialSpec};
use crate::timestepper::SchemeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub r: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialConfig {
    #[serde(flatten)]
    pub kind: PotentialKind,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DataConfig {
    #[serde(default)]
    pub theta0: Field,
    #[serde(default)]
    pub phi0: Field,
    #[serde(default)]
    pub source: Source,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScheme {
    #[serde(flatten)]
    pub config: SchemeConfig,
    pub t_final: f64,
    #[serde(default = "one_usize")]
    pub snapshot_stride: usize,
}

fn default_axis() -> Axis {
    Axis::Dt
}

fn default_reference() -> ReferencePolicy {
    ReferencePolicy::SelfFinest
}

fn default_deltas() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4]
}

fn default_mode() -> usize {
    1
}

fn default_tail() -> f64 {
    0.1
}

fn default_relax_sigmas() -> Vec<f64> {
    vec![0.5, 0.25, 0.1, 0.05]
}

fn default_zero_sigmas() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.01]
}

fn default_samples() -> usize {
    32
}

/// Parameters of the study subcommands. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    #[serde(default = "default_axis")]
    pub axis: Axis,
    /// Parameter ladder for `converge`; empty means a ladder derived from the
    /// base scenario.
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "default_reference")]
    pub reference: ReferencePolicy,
    /// Index of the mode perturbed in `contdep`.
    #[serde(default = "default_mode")]
    pub mode: usize,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
    #[serde(default)]
    pub thresholds: OmegaThresholds,
    /// Ladder for `relaxlimit`.
    #[serde(default = "default_relax_sigmas")]
    pub sigmas: Vec<f64>,
    /// Ladder for the operator check in `opcheck`.
    #[serde(default = "default_zero_sigmas")]
    pub zero_sigmas: Vec<f64>,
    /// Random vectors drawn by `opcheck`.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        toml::from_str("").expect("all study fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    /// Output directory, relative to the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Also write `grid_<t>.csv` nodal values for every snapshot.
    #[serde(default)]
    pub grids: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub operator_a: BasisSpec,
    pub operator_b: BasisSpec,
    pub exponents: Exponents,
    pub potential: PotentialConfig,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub data: DataConfig,
    pub scheme: RunScheme,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A validated configuration together with the advisory warnings raised
/// while assembling it.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

fn check_basis(key: &str, b: &BasisSpec) -> Result<()> {
    if b.extent.len() != b.kind.dim() {
        return Err(Error::config(
            format!("{key}.extent"),
            format!("{:?} needs {} value(s), got {}", b.kind, b.kind.dim(), b.extent.len()),
        ));
    }
    for e in &b.extent {
        positive(&format!("{key}.extent"), *e)?;
    }
    if b.n_modes == 0 {
        return Err(Error::config(format!("{key}.n_modes"), "must be at least 1"));
    }
    Ok(())
}

fn check_ladder(key: &str, v: &[f64]) -> Result<()> {
    for x in v {
        positive(key, *x)?;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        Self::from_table(value)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::config(error_key(&e.to_string()), e.to_string()))
    }

    /// Reads a TOML config, or the `config` entry of a run manifest (JSON),
    /// then applies `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut table = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::config("<file>", e.to_string()))?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            let cfg: RunConfig =
                serde_json::from_value(cfg).map_err(|e| Error::config("config", e.to_string()))?;
            match toml::Value::try_from(&cfg).map_err(|e| Error::config("config", e.to_string()))? {
                toml::Value::Table(t) => t,
                _ => unreachable!("a struct serializes to a table"),
            }
        } else {
            toml::from_str(&text).map_err(|e| Error::config("<file>", e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            operator_a: self.operator_a.clone(),
            operator_b: self.operator_b.clone(),
            r: self.exponents.r,
            sigma: self.exponents.sigma,
            eps: self.potential.eps,
            potential: self.potential.kind.clone(),
            data: ProblemData {
                theta0: self.data.theta0.clone(),
                phi0: self.data.phi0.clone(),
                source: self.data.source.clone(),
                coupling: self.coupling.clone(),
            },
            scheme: self.scheme.config,
            t_final: self.scheme.t_final,
            snapshot_stride: self.scheme.snapshot_stride,
        }
    }

    /// Checks every constraint and assembles the system once, so that data
    /// errors surface before any time stepping.
    pub fn validate(self) -> Result<Validated> {
        check_basis("operator_a", &self.operator_a)?;
        check_basis("operator_b", &self.operator_b)?;
        if self.operator_a.kind.dim() != self.operator_b.kind.dim() || self.operator_a.extent != self.operator_b.extent {
            return Err(Error::config("operator_b.extent", "A and B must live on the same domain"));
        }
        positive("exponents.r", self.exponents.r)?;
        positive("exponents.sigma", self.exponents.sigma)?;
        positive("potential.eps", self.potential.eps)?;
        PotentialSpec::new(self.potential.kind.clone()).map_err(|e| Error::config("potential", e.to_string()))?;
        self.scheme.config.validate()?;
        positive("scheme.t_final", self.scheme.t_final)?;
        let steps = self.scheme.t_final / self.scheme.config.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::config(
                "scheme.t_final",
                format!("must be an integer multiple of dt = {}", self.scheme.config.dt),
            ));
        }
        if self.scheme.snapshot_stride == 0 {
            return Err(Error::config("scheme.snapshot_stride", "must be at least 1"));
        }
        match self.coupling {
            Coupling::Constant { value } if !value.is_finite() => {
                return Err(Error::config("coupling.value", "must be finite"))
            }
            Coupling::Tanh { base, amplitude, rate } if ![base, amplitude, rate].iter().all(|v| v.is_finite()) => {
                return Err(Error::config("coupling", "parameters must be finite"))
            }
            _ => {}
        }
        check_ladder("study.values", &self.study.values)?;
        check_ladder("study.deltas", &self.study.deltas)?;
        check_ladder("study.sigmas", &self.study.sigmas)?;
        check_ladder("study.zero_sigmas", &self.study.zero_sigmas)?;
        if !(self.study.tail_fraction > 0.0 && self.study.tail_fraction <= 1.0) {
            return Err(Error::config("study.tail_fraction", "must lie in (0, 1]"));
        }
        self.scenario().bases().map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("operator_a.m_grid", other.to_string()),
        })?;
        let sys = self.scenario().system().map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("data", other.to_string()),
        })?;
        Ok(Validated {
            warnings: sys.warnings().to_vec(),
            config: self,
        })
    }

    /// SHA-256 of the canonical JSON form, leaving out the output section.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn error_key(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .filter(|_| msg.contains("missing field") || msg.contains("unknown"))
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".into())
}

/// Sets a dotted key in a TOML table. The value is parsed as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
