pub mod diagnose;
pub mod ingest;
pub mod sample;
pub mod sweep;
pub mod synth;

use std::path::PathBuf;

use gradpf_core::gaussian::Vector;
use gradpf_core::ssm::{generate, ModelSpec, ModelVisitor, StateSpaceModel};

use crate::config::ExperimentConfig;
use crate::data::read_observations;
use crate::error::{CliError, CliResult};

/// Settings shared by every command after merging flags over the config.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
}

/// Sub-seed coordinates under the experiment seed.
pub(crate) mod keys {
    pub const BANK: u64 = 1;
    pub const CHAIN: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SWEEP_CRN: u64 = 4;
    pub const SWEEP_FRESH: u64 = 5;
}

pub(crate) fn pool(jobs: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| CliError::runtime(e.to_string()))
}

pub(crate) fn to_vectors<const NY: usize>(rows: &[Vec<f64>]) -> CliResult<Vec<Vector<NY>>> {
    rows.iter()
        .enumerate()
        .map(|(t, r)| {
            if r.len() != NY {
                return Err(CliError::runtime(format!(
                    "observation {} has {} components, the model expects {NY}",
                    t + 1,
                    r.len()
                )));
            }
            Ok(Vector::<NY>::from_column_slice(r))
        })
        .collect()
}

/// `(states, observations)` as plain rows.
pub(crate) type SimulatedRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub(crate) fn simulate(spec: &ModelSpec, theta: &[f64], steps: usize, seed: u64) -> CliResult<SimulatedRows> {
    struct Sim<'a> {
        theta: &'a [f64],
        steps: usize,
        seed: u64,
    }
    impl ModelVisitor for Sim<'_> {
        type Output = CliResult<SimulatedRows>;
        fn visit<const NX: usize, const NY: usize, const NT: usize, M>(self, model: &M) -> Self::Output
        where
            M: StateSpaceModel<NX, NY, NT>,
        {
            let theta = Vector::<NT>::from_column_slice(self.theta);
            let sim = generate(model, &theta, self.steps, self.seed)
                .map_err(|e| CliError::runtime(format!("simulation failed: {e}")))?;
            Ok((
                sim.states.iter().map(|x| x.iter().copied().collect()).collect(),
                sim.observations.iter().map(|y| y.iter().copied().collect()).collect(),
            ))
        }
    }
    spec.dispatch(Sim { theta, steps, seed })
        .map_err(|e| CliError::config(e.to_string()))?
}

/// Observations from `io.data`, or simulated from `model.theta` when only
/// `io.steps` is given.
pub(crate) fn load_series(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<Vec<Vec<f64>>> {
    if let Some(path) = &cfg.io.data {
        return read_observations(path);
    }
    let model = cfg.require_model()?;
    match (&model.theta, cfg.io.steps) {
        (Some(theta), Some(steps)) => {
            let seed = cfg.io.data_seed.unwrap_or(opts.seed);
            Ok(simulate(&model.spec, theta, steps, seed)?.1)
        }
        _ => Err(CliError::config(
            "no data: set io.data, or model.theta together with io.steps",
        )),
    }
}
