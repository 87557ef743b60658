use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kernels::{find_reasonable_epsilon, hmc_step, mala_step, nuts_step, rhmc_step};
use super::{LogDensity, PosteriorEval};
use crate::diagnostics::mean_sd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum Kernel {
    Mala {
        /// Langevin step; tuned by a pre-run when absent.
        #[serde(default)]
        gamma: Option<f64>,
    },
    Hmc {
        steps: usize,
    },
    Rhmc {
        #[serde(default = "default_mean_steps")]
        mean_steps: f64,
    },
    Nuts {
        #[serde(default = "default_max_tree_depth")]
        max_tree_depth: usize,
        #[serde(default = "default_delta_max")]
        delta_max: f64,
    },
}

fn default_mean_steps() -> f64 {
    2.5
}
fn default_max_tree_depth() -> usize {
    10
}
fn default_delta_max() -> f64 {
    1000.0
}

impl Kernel {
    pub fn nuts() -> Self {
        Kernel::Nuts {
            max_tree_depth: default_max_tree_depth(),
            delta_max: default_delta_max(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Kernel::Mala { .. } => "mala".into(),
            Kernel::Hmc { steps } => format!("hmc{steps}"),
            Kernel::Rhmc { .. } => "rhmc".into(),
            Kernel::Nuts { .. } => "nuts".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub kernel: Kernel,
    /// Leapfrog step; chosen by the doubling heuristic when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub iterations: usize,
    #[serde(default)]
    pub burn_in: usize,
    /// Redraw the particle filter noise before every iteration.
    #[serde(default)]
    pub refresh_bank: bool,
}

impl SamplerConfig {
    pub fn new(kernel: Kernel, iterations: usize) -> Self {
        Self {
            kernel,
            epsilon: None,
            iterations,
            burn_in: 0,
            refresh_bank: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let bad = |m: String| Err(ChainError::Config(m));
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("epsilon must be positive, got {e}"));
            }
        }
        match self.kernel {
            Kernel::Mala { gamma: Some(g) } if !(g > 0.0 && g.is_finite()) => {
                return bad(format!("gamma must be positive, got {g}"))
            }
            Kernel::Hmc { steps: 0 } => return bad("hmc steps must be at least 1".into()),
            Kernel::Rhmc { mean_steps } if !(mean_steps > 0.0 && mean_steps.is_finite()) => {
                return bad(format!("mean_steps must be positive, got {mean_steps}"))
            }
            Kernel::Nuts { max_tree_depth: 0, .. } => {
                return bad("max_tree_depth must be at least 1".into())
            }
            Kernel::Nuts { delta_max, .. } if !(delta_max >= 0.0) => {
                return bad(format!("delta_max must be non-negative, got {delta_max}"))
            }
            _ => {}
        }
        if self.burn_in > self.iterations {
            return bad(format!(
                "burn_in {} exceeds iterations {}",
                self.burn_in, self.iterations
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("log posterior is not finite at the initial state")]
    InitialState,
    #[error("step size selection failed: {0}")]
    StepSize(String),
}

/// Output of one chain. Row 0 is the initial state; rows `1..=M` are the
/// iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    /// Constrained-space parameter values.
    pub samples: Vec<Vec<f64>>,
    pub accepted: Vec<bool>,
    pub logpost: Vec<f64>,
    pub nge: Vec<u64>,
    /// Step size used: ε for Hamiltonian kernels, γ for MALA.
    pub epsilon: f64,
    /// Gradient evaluations spent choosing the step size.
    pub setup_nge: u64,
    pub divergences: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub acc_rate: f64,
    pub total_nge: u64,
    pub wall_seconds: f64,
}

impl Chain {
    pub fn iterations(&self) -> usize {
        self.samples.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Gradient evaluations over iterations `1..=M`.
    pub fn total_nge(&self) -> u64 {
        self.nge.iter().sum()
    }

    pub fn acc_rate(&self) -> f64 {
        let m = self.iterations();
        self.accepted.iter().skip(1).filter(|&&a| a).count() as f64 / m as f64
    }

    /// Rows `burn_in+1..=M`.
    pub fn trimmed(&self, burn_in: usize) -> &[Vec<f64>] {
        &self.samples[(burn_in + 1).min(self.samples.len())..]
    }

    pub fn column(&self, k: usize, burn_in: usize) -> Vec<f64> {
        self.trimmed(burn_in).iter().map(|r| r[k]).collect()
    }

    pub fn summary(&self, burn_in: usize) -> ChainSummary {
        let (mean, sd) = (0..self.dim()).map(|k| mean_sd(&self.column(k, burn_in))).unzip();
        ChainSummary {
            mean,
            sd,
            acc_rate: self.acc_rate(),
            total_nge: self.total_nge(),
            wall_seconds: self.wall_seconds,
        }
    }
}

const MALA_TARGET_ACCEPTANCE: f64 = 0.3;
const MALA_PILOT_STEPS: usize = 20;

fn tune_mala<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    eval: &PosteriorEval,
    base: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, u64) {
    let mut nge = 0;
    let mut best = (f64::INFINITY, base);
    for k in -6..=2 {
        let gamma = base * 2f64.powf(f64::from(k) / 2.0);
        let (mut th, mut ev) = (theta.to_vec(), eval.clone());
        let mut acc = 0;
        for _ in 0..MALA_PILOT_STEPS {
            let s = mala_step(target, &th, &ev, gamma, rng);
            nge += s.nge;
            acc += usize::from(s.accepted);
            th = s.theta;
            ev = s.eval;
        }
        let gap = (acc as f64 / MALA_PILOT_STEPS as f64 - MALA_TARGET_ACCEPTANCE).abs();
        if gap <= best.0 {
            best = (gap, gamma);
        }
    }
    (best.1, nge)
}

/// Runs `config.iterations` transitions from `init` (unconstrained
/// coordinates).
pub fn run_chain<D: LogDensity + ?Sized>(
    target: &mut D,
    config: &SamplerConfig,
    init: &[f64],
    seed: u64,
) -> Result<Chain, ChainError> {
    config.validate()?;
    if init.len() != target.dim() {
        return Err(ChainError::Config(format!(
            "initial state has {} components, target has {}",
            init.len(),
            target.dim()
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = init.to_vec();
    let mut eval = target.eval(&theta);
    if !eval.is_valid() {
        return Err(ChainError::InitialState);
    }

    let mut setup_nge = 0;
    let mut epsilon = match config.epsilon {
        Some(e) => e,
        None => {
            let (e, n) = find_reasonable_epsilon(&*target, &theta, &eval, 1.0, &mut rng)
                .map_err(ChainError::StepSize)?;
            setup_nge += n;
            e
        }
    };
    if let Kernel::Mala { gamma } = config.kernel {
        epsilon = match gamma {
            Some(g) => g,
            None => {
                let (g, n) = tune_mala(&*target, &theta, &eval, epsilon, &mut rng);
                setup_nge += n;
                g
            }
        };
    }

    let m = config.iterations;
    let mut chain = Chain {
        names: target.names(),
        samples: Vec::with_capacity(m + 1),
        accepted: Vec::with_capacity(m + 1),
        logpost: Vec::with_capacity(m + 1),
        nge: Vec::with_capacity(m + 1),
        epsilon,
        setup_nge,
        divergences: 0,
        wall_seconds: 0.0,
    };
    chain.samples.push(target.constrain(&theta));
    chain.accepted.push(false);
    chain.logpost.push(eval.logpost);
    chain.nge.push(0);

    for iter in 1..=m {
        let mut extra = 0;
        if target.begin_iteration(iter) {
            eval = target.eval(&theta);
            extra = 1;
        }
        let t = &*target;
        let out = match config.kernel {
            Kernel::Mala { .. } => mala_step(t, &theta, &eval, epsilon, &mut rng),
            Kernel::Hmc { steps } => hmc_step(t, &theta, &eval, epsilon, steps, &mut rng),
            Kernel::Rhmc { mean_steps } => rhmc_step(t, &theta, &eval, epsilon, mean_steps, &mut rng),
            Kernel::Nuts {
                max_tree_depth,
                delta_max,
            } => nuts_step(t, &theta, &eval, epsilon, max_tree_depth, delta_max, &mut rng),
        };
        chain.divergences += u64::from(out.divergent);
        chain.accepted.push(out.accepted);
        chain.nge.push(out.nge + extra);
        theta = out.theta;
        eval = out.eval;
        chain.samples.push(target.constrain(&theta));
        chain.logpost.push(eval.logpost);
    }
    chain.wall_seconds = start.elapsed().as_secs_f64();
    Ok(chain)
}
