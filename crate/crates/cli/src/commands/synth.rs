use serde_json::json;

use super::{simulate, RunOptions};
use crate::config::ExperimentConfig;
use crate::data::{write_json, write_series};
use crate::error::{CliError, CliResult};

/// Simulates `io.steps` observations at `model.theta` and writes
/// `data.csv`, `states.csv` and `provenance.json`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    let model = cfg.require_model()?;
    let theta = model.require_theta()?;
    let steps = cfg
        .io
        .steps
        .ok_or_else(|| CliError::config("synth requires io.steps"))?;
    let seed = cfg.io.data_seed.unwrap_or(opts.seed);
    let (states, ys) = simulate(&model.spec, theta, steps, seed)?;
    write_series(&opts.out.join("data.csv"), "y", &ys)?;
    write_series(&opts.out.join("states.csv"), "x", &states)?;
    write_json(
        &opts.out.join("provenance.json"),
        &json!({
            "source": "synthetic",
            "model": model.spec,
            "theta": theta,
            "steps": steps,
            "seed": seed,
        }),
    )?;
    log::info!("synth: wrote {steps} observations to {}", opts.out.display());
    Ok(())
}
