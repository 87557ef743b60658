use serde_json::json;

use super::RunOptions;
use crate::config::ExperimentConfig;
use crate::data::{log_returns, read_prices, write_json, write_series};
use crate::error::{CliError, CliResult};

/// Converts the price column of `io.prices` into percentage log-returns
/// and writes `returns.csv`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    let path = cfg
        .io
        .prices
        .as_ref()
        .ok_or_else(|| CliError::config("ingest requires io.prices"))?;
    let prices = read_prices(path, cfg.io.price_column.as_deref())?;
    let returns = log_returns(&prices).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = returns.iter().map(|&r| vec![r]).collect();
    write_series(&opts.out.join("returns.csv"), "y", &rows)?;
    write_json(
        &opts.out.join("provenance.json"),
        &json!({
            "source": "ingested",
            "prices": path,
            "column": cfg.io.price_column,
            "returns": rows.len(),
        }),
    )?;
    log::info!("ingest: wrote {} returns to {}", rows.len(), opts.out.display());
    Ok(())
}
