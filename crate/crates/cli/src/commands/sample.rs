use gradpf_core::dpf::FilterConfig;
use gradpf_core::mcmc::{run_chain, Chain, FilterPosterior};
use gradpf_core::noise::derive_seed;
use gradpf_core::params::ParamInfo;
use gradpf_core::ssm::{ModelVisitor, StateSpaceModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{keys, load_series, pool, to_vectors, RunOptions};
use crate::config::{ExperimentConfig, SamplerSection};
use crate::data::{write_chain, write_json, ChainRecord};
use crate::error::{CliError, CliResult};
use crate::report::{write_diagnostics, DiagnosticsOptions};

const MAX_INIT_TRIES: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct ChainRun {
    pub chain: usize,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub setup_nge: Option<u64>,
    pub divergences: Option<u64>,
    pub wall_seconds: Option<f64>,
    pub failure: Option<String>,
}

struct Sampler<'a> {
    y: &'a [Vec<f64>],
    params: Vec<ParamInfo>,
    filter: &'a FilterConfig,
    sampler: &'a SamplerSection,
    seed: u64,
}

impl Sampler<'_> {
    fn chain_seed(&self, c: usize, key: u64) -> u64 {
        derive_seed(self.seed, &[c as u64, key])
    }
}

impl ModelVisitor for Sampler<'_> {
    type Output = CliResult<Vec<Result<Chain, String>>>;

    fn visit<const NX: usize, const NY: usize, const NT: usize, M>(self, model: &M) -> Self::Output
    where
        M: StateSpaceModel<NX, NY, NT>,
    {
        let y = to_vectors::<NY>(self.y)?;
        Ok((0..self.sampler.chains)
            .into_par_iter()
            .map(|c| {
                let mut post = FilterPosterior::new(
                    model,
                    self.params.clone(),
                    &y,
                    self.filter.clone(),
                    self.chain_seed(c, keys::BANK),
                    self.sampler.config.refresh_bank,
                );
                let init = match &self.sampler.initial {
                    Some(rows) => post.to_unconstrained(&rows[c % rows.len()]),
                    None => {
                        let mut rng = ChaCha8Rng::seed_from_u64(self.chain_seed(c, keys::INIT));
                        post.sample_initial(&mut rng, MAX_INIT_TRIES).ok_or_else(|| {
                            format!("no prior draw with a finite posterior in {MAX_INIT_TRIES} tries")
                        })?
                    }
                };
                run_chain(&mut post, &self.sampler.config, &init, self.chain_seed(c, keys::CHAIN))
                    .map_err(|e| e.to_string())
            })
            .collect())
    }
}

/// Runs `sampler.chains` chains in parallel and writes `chain_<c>.csv`,
/// `chain_<c>.json`, `run.json` and the diagnostics outputs.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    let model = cfg.require_model()?;
    let filter = cfg.require_filter()?;
    let sampler = cfg.require_sampler()?;
    let y = load_series(cfg, opts)?;
    let visitor = Sampler {
        y: &y,
        params: model.spec.params(),
        filter,
        sampler,
        seed: opts.seed,
    };
    let results = pool(opts.jobs)?
        .install(|| model.spec.dispatch(visitor))
        .map_err(|e| CliError::config(e.to_string()))??;

    let mut runs = Vec::new();
    let mut records = Vec::new();
    for (c, res) in results.iter().enumerate() {
        let seed = derive_seed(opts.seed, &[c as u64, keys::CHAIN]);
        match res {
            Ok(chain) => {
                let rec = ChainRecord::from(chain);
                write_chain(&opts.out.join(format!("chain_{c}.csv")), &rec)?;
                write_json(
                    &opts.out.join(format!("chain_{c}.json")),
                    &chain.summary(sampler.config.burn_in),
                )?;
                log::info!(
                    "chain {c}: {} iterations, acceptance {:.3}, NGE {}, {:.2}s",
                    chain.iterations(),
                    chain.acc_rate(),
                    chain.total_nge(),
                    chain.wall_seconds
                );
                runs.push(ChainRun {
                    chain: c,
                    seed,
                    epsilon: Some(chain.epsilon),
                    setup_nge: Some(chain.setup_nge),
                    divergences: Some(chain.divergences),
                    wall_seconds: Some(chain.wall_seconds),
                    failure: None,
                });
                records.push(rec);
            }
            Err(msg) => {
                log::error!("chain {c} failed: {msg}");
                runs.push(ChainRun {
                    chain: c,
                    seed,
                    epsilon: None,
                    setup_nge: None,
                    divergences: None,
                    wall_seconds: None,
                    failure: Some(msg.clone()),
                });
            }
        }
    }
    write_json(&opts.out.join("run.json"), &runs)?;

    let diag = DiagnosticsOptions {
        burn_in: cfg.burn_in(),
        max_lag: cfg.diagnostics.max_lag,
        truncation: cfg.diagnostics.truncation,
        bins: cfg.diagnostics.bins,
        truth: model.theta.clone(),
    };
    let report = write_diagnostics(&opts.out, &records, &diag)?;
    if let Some(m) = report.mse {
        log::info!("MSE against model.theta: {m:.4}");
    }
    let failed = runs.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        return Err(CliError::runtime(format!(
            "{failed} of {} chains failed; see run.json",
            runs.len()
        )));
    }
    Ok(())
}
