//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `[model]`, `[filter]`,
//! `[sampler]`, `[sweep]`, `[io]` and `[diagnostics]`, plus a top-level
//! `seed`. Relative paths in `[io]` are resolved against the directory of
//! the config file.

use std::path::{Path, PathBuf};

use gradpf_core::diagnostics::Truncation;
use gradpf_core::dpf::{FilterConfig, Resampler};
use gradpf_core::mcmc::SamplerConfig;
use gradpf_core::ssm::{ModelSpec, ProposalPolicy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_max_lag() -> usize {
    100
}
fn default_bins() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: Option<ModelSection>,
    pub filter: Option<FilterConfig>,
    pub sampler: Option<SamplerSection>,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub spec: ModelSpec,
    /// True parameter value: used to simulate data, as the base point of
    /// sweeps, and as the reference for MSE.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    #[serde(flatten)]
    pub config: SamplerConfig,
    #[serde(default = "one")]
    pub chains: usize,
    /// Constrained starting points, one per chain (cycled when shorter).
    /// Chains start from prior draws when absent.
    #[serde(default)]
    pub initial: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Combo {
    pub policy: ProposalPolicy,
    pub resampler: Resampler,
}

impl Combo {
    pub fn label(&self) -> String {
        let policy = match self.policy {
            ProposalPolicy::Prior => "prior",
            ProposalPolicy::Optimal => "optimal",
            ProposalPolicy::Ekf => "ekf",
        };
        format!("{policy}_{}", self.resampler.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Fresh-noise replicates averaged per grid point.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Proposal/resampler pairs to evaluate; defaults to the model policy
    /// with the filter resampler.
    #[serde(default)]
    pub combos: Vec<Combo>,
    /// Emit the curve with one noise bank shared by all grid points.
    #[serde(default = "yes")]
    pub crn: bool,
    /// Emit the curve with a new noise bank per grid point and replicate.
    #[serde(default = "yes")]
    pub fresh: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    /// Observation CSV (`t,y_1,..`).
    pub data: Option<PathBuf>,
    /// Price CSV for `ingest`.
    pub prices: Option<PathBuf>,
    /// Price column name; the last column when absent.
    pub price_column: Option<String>,
    /// Series length when data is simulated from `model.theta`.
    pub steps: Option<usize>,
    /// Seed for simulated data; the experiment seed when absent.
    pub data_seed: Option<u64>,
    /// Chain CSVs for `diagnose`.
    #[serde(default)]
    pub chains: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    #[serde(default)]
    pub truncation: Truncation,
    /// Overrides `sampler.burn_in`.
    pub burn_in: Option<usize>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            max_lag: default_max_lag(),
            truncation: Truncation::default(),
            burn_in: None,
            bins: default_bins(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file, resolving `[io]` paths
    /// against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.io.resolve(base);
        cfg.io.check_inputs_exist()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if let Some(m) = &self.model {
            m.spec.validate().map_err(|e| CliError::config(e.to_string()))?;
            if let Some(theta) = &m.theta {
                let nt = m.spec.dims().2;
                if theta.len() != nt {
                    return Err(CliError::config(format!(
                        "model.theta has {} components, {} model has {nt}",
                        theta.len(),
                        m.spec.name()
                    )));
                }
                for (p, v) in m.spec.params().iter().zip(theta) {
                    if !p.constraint.admits(*v) {
                        return Err(CliError::config(format!(
                            "model.theta value {v} is outside the support of {}",
                            p.name
                        )));
                    }
                }
            }
        }
        if let Some(f) = &self.filter {
            f.validate().map_err(CliError::config)?;
        }
        if let Some(s) = &self.sampler {
            s.config.validate().map_err(|e| CliError::config(e.to_string()))?;
            if s.chains == 0 {
                return Err(CliError::config("sampler.chains must be at least 1"));
            }
            if let (Some(init), Some(m)) = (&s.initial, &self.model) {
                let nt = m.spec.dims().2;
                if init.is_empty() || init.iter().any(|row| row.len() != nt) {
                    return Err(CliError::config(format!(
                        "sampler.initial must hold rows of {nt} values"
                    )));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.points < 2 {
                return Err(CliError::config("sweep.points must be at least 2"));
            }
            if !(s.lo < s.hi) || !s.lo.is_finite() || !s.hi.is_finite() {
                return Err(CliError::config("sweep requires finite lo < hi"));
            }
            if s.replicates == 0 {
                return Err(CliError::config("sweep.replicates must be at least 1"));
            }
            if let Some(m) = &self.model {
                if s.component >= m.spec.dims().2 {
                    return Err(CliError::config(format!(
                        "sweep.component {} out of range for {}",
                        s.component,
                        m.spec.name()
                    )));
                }
            }
        }
        if self.io.steps == Some(0) {
            return Err(CliError::config("io.steps must be at least 1"));
        }
        if self.diagnostics.bins == 0 {
            return Err(CliError::config("diagnostics.bins must be at least 1"));
        }
        Ok(())
    }

    pub fn require_model(&self) -> CliResult<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::config("missing [model] section"))
    }

    pub fn require_filter(&self) -> CliResult<&FilterConfig> {
        self.filter
            .as_ref()
            .ok_or_else(|| CliError::config("missing [filter] section"))
    }

    pub fn require_sampler(&self) -> CliResult<&SamplerSection> {
        self.sampler
            .as_ref()
            .ok_or_else(|| CliError::config("missing [sampler] section"))
    }

    pub fn require_sweep(&self) -> CliResult<&SweepSection> {
        self.sweep
            .as_ref()
            .ok_or_else(|| CliError::config("missing [sweep] section"))
    }

    pub fn burn_in(&self) -> usize {
        self.diagnostics
            .burn_in
            .or(self.sampler.as_ref().map(|s| s.config.burn_in))
            .unwrap_or(0)
    }
}

impl ModelSection {
    pub fn require_theta(&self) -> CliResult<&[f64]> {
        self.theta
            .as_deref()
            .ok_or_else(|| CliError::config("model.theta is required for this command"))
    }
}

impl IoSection {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.iter_mut().for_each(fix);
        self.prices.iter_mut().for_each(fix);
        self.chains.iter_mut().for_each(fix);
        self.out.iter_mut().for_each(fix);
    }

    fn check_inputs_exist(&self) -> CliResult<()> {
        for p in self.data.iter().chain(&self.prices).chain(&self.chains) {
            if !p.is_file() {
                return Err(CliError::config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradpf_core::mcmc::Kernel;
    use gradpf_core::ssm::ModelKind;

    const FULL: &str = r#"
seed = 7

[model]
kind = "lgss"
policy = "optimal"
theta = [0.7, 1.2, 1.0]

[filter]
particles = 512
resampler = { kind = "soft", alpha = 0.3 }

[sampler]
kernel = "hmc"
steps = 10
iterations = 9
chains = 3

[sweep]
lo = 1.0
hi = 4.0
points = 5
combos = [{ policy = "prior", resampler = { kind = "multinomial" } }]

[io]
steps = 100
"#;

    #[test]
    fn parses_every_section() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        assert_eq!(cfg.seed, 7);
        let m = cfg.model.unwrap();
        assert_eq!(m.spec.kind, ModelKind::Lgss);
        assert_eq!(m.spec.policy, ProposalPolicy::Optimal);
        assert_eq!(cfg.filter.unwrap().resampler, Resampler::Soft { alpha: 0.3 });
        let s = cfg.sampler.unwrap();
        assert_eq!(s.config.kernel, Kernel::Hmc { steps: 10 });
        assert_eq!(s.chains, 3);
        let sw = cfg.sweep.unwrap();
        assert_eq!(sw.combos[0].label(), "prior_multinomial");
        assert_eq!(cfg.diagnostics.max_lag, 100);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            FULL.replace("points = 5", "points = 1"),
            FULL.replace("theta = [0.7, 1.2, 1.0]", "theta = [0.7, 1.2]"),
            FULL.replace("theta = [0.7, 1.2, 1.0]", "theta = [0.7, -1.2, 1.0]"),
            FULL.replace("kind = \"lgss\"", "kind = \"sv\""),
            FULL.replace("particles = 512", "particles = 0"),
            FULL.replace("chains = 3", "chains = 0"),
            FULL.replace("seed = 7", "seed = 7\nbogus = 1"),
            FULL.replace("steps = 100", "steps = 0"),
        ];
        for text in cases {
            assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn missing_input_files_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[io]\ndata = \"nope.csv\"\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(CliError::Config(_))));
        std::fs::write(dir.path().join("nope.csv"), "t,y_1\n1,0.5\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.io.data.unwrap(), dir.path().join("nope.csv"));
    }
}
