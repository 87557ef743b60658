use super::RunOptions;
use crate::config::ExperimentConfig;
use crate::data::read_chain;
use crate::error::{CliError, CliResult};
use crate::report::{write_diagnostics, DiagnosticsOptions};

/// Recomputes the diagnostics of stored chain CSVs listed in `io.chains`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    if cfg.io.chains.is_empty() {
        return Err(CliError::config("diagnose requires io.chains"));
    }
    let chains = cfg
        .io
        .chains
        .iter()
        .map(|p| read_chain(p))
        .collect::<CliResult<Vec<_>>>()?;
    let diag = DiagnosticsOptions {
        burn_in: cfg.burn_in(),
        max_lag: cfg.diagnostics.max_lag,
        truncation: cfg.diagnostics.truncation,
        bins: cfg.diagnostics.bins,
        truth: cfg.model.as_ref().and_then(|m| m.theta.clone()),
    };
    let report = write_diagnostics(&opts.out, &chains, &diag)?;
    for c in &report.components {
        log::info!(
            "{}: mean {:.4} sd {:.4} iact {:?} ess {:?} rhat {:?}",
            c.name,
            c.mean,
            c.sd,
            c.iact,
            c.ess,
            c.rhat
        );
    }
    Ok(())
}
