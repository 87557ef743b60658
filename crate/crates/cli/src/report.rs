//! Multi-chain diagnostics: the JSON report and plot-ready CSVs shared by
//! `sample` and `diagnose`.

use std::path::Path;

use gradpf_core::diagnostics::{acf, ess_chain, gelman_rubin, iact, mean_sd, mse, Truncation};
use serde::{Deserialize, Serialize};

use crate::data::{write_json, write_text, ChainRecord};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsOptions {
    pub burn_in: usize,
    pub max_lag: usize,
    pub truncation: Truncation,
    pub bins: usize,
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Mean of the per-chain IACTs.
    pub iact: Option<f64>,
    /// Sum of the per-chain ESSs.
    pub ess: Option<f64>,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub draws: usize,
    pub acc_rate: f64,
    pub total_nge: u64,
    pub mean: Vec<f64>,
    pub iact: Vec<Option<f64>>,
    pub ess: Vec<Option<f64>>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub burn_in: usize,
    pub max_lag: usize,
    pub truncation: Truncation,
    pub components: Vec<ComponentReport>,
    pub chains: Vec<ChainReport>,
    /// Per-chain MSE averaged over chains.
    pub mse: Option<f64>,
    pub total_nge: u64,
}

fn trimmed(c: &ChainRecord, burn_in: usize) -> &[Vec<f64>] {
    &c.samples[(burn_in + 1).min(c.samples.len())..]
}

fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

/// Computes the report; refuses chains with fewer than two post-burn-in
/// draws or mismatched parameter names.
pub fn diagnose(chains: &[ChainRecord], opts: &DiagnosticsOptions) -> CliResult<Report> {
    let first = chains
        .first()
        .ok_or_else(|| CliError::runtime("no chains to diagnose"))?;
    if let Some(c) = chains.iter().find(|c| c.names != first.names) {
        return Err(CliError::runtime(format!(
            "chain schemas differ: {:?} vs {:?}",
            first.names, c.names
        )));
    }
    for (i, c) in chains.iter().enumerate() {
        let n = trimmed(c, opts.burn_in).len();
        if n < 2 {
            return Err(CliError::runtime(format!(
                "chain {i} has {n} draws after burn-in {}; diagnostics need at least 2",
                opts.burn_in
            )));
        }
    }
    if let Some(t) = &opts.truth {
        if t.len() != first.names.len() {
            return Err(CliError::runtime(format!(
                "truth has {} components, chains have {}",
                t.len(),
                first.names.len()
            )));
        }
    }

    let dim = first.names.len();
    let chain_reports: Vec<ChainReport> = chains
        .iter()
        .map(|c| {
            let rows = trimmed(c, opts.burn_in);
            let lag = opts.max_lag.min(rows.len() - 1);
            let cols: Vec<Vec<f64>> = (0..dim).map(|k| column(rows, k)).collect();
            let m = c.samples.len() - 1;
            ChainReport {
                draws: rows.len(),
                acc_rate: c.accepted.iter().skip(1).filter(|&&a| a).count() as f64 / m as f64,
                total_nge: c.nge.iter().sum(),
                mean: cols.iter().map(|x| mean_sd(x).0).collect(),
                iact: cols.iter().map(|x| iact(x, lag, opts.truncation).ok()).collect(),
                ess: cols.iter().map(|x| ess_chain(x, lag, opts.truncation).ok()).collect(),
                mse: opts.truth.as_ref().and_then(|t| mse(rows, t).ok()),
            }
        })
        .collect();

    let components = (0..dim)
        .map(|k| {
            let per_chain: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| column(trimmed(c, opts.burn_in), k))
                .collect();
            let pooled: Vec<f64> = per_chain.concat();
            let (mean, sd) = mean_sd(&pooled);
            let iacts: Option<Vec<f64>> = chain_reports.iter().map(|r| r.iact[k]).collect();
            let esss: Option<Vec<f64>> = chain_reports.iter().map(|r| r.ess[k]).collect();
            let refs: Vec<&[f64]> = per_chain.iter().map(Vec::as_slice).collect();
            ComponentReport {
                name: first.names[k].clone(),
                mean,
                sd,
                iact: iacts.map(|v| v.iter().sum::<f64>() / v.len() as f64),
                ess: esss.map(|v| v.iter().sum()),
                rhat: gelman_rubin(&refs).ok(),
            }
        })
        .collect();

    let mses: Option<Vec<f64>> = chain_reports.iter().map(|r| r.mse).collect();
    Ok(Report {
        burn_in: opts.burn_in,
        max_lag: opts.max_lag,
        truncation: opts.truncation,
        components,
        mse: mses.map(|v| v.iter().sum::<f64>() / v.len() as f64),
        total_nge: chain_reports.iter().map(|r| r.total_nge).sum(),
        chains: chain_reports,
    })
}

/// `chain,lag,<names>`.
pub fn acf_csv(chains: &[ChainRecord], opts: &DiagnosticsOptions) -> String {
    let Some(first) = chains.first() else {
        return String::new();
    };
    let mut s = format!("chain,lag,{}\n", first.names.join(","));
    for (i, c) in chains.iter().enumerate() {
        let rows = trimmed(c, opts.burn_in);
        let lag = opts.max_lag.min(rows.len().saturating_sub(1));
        let acfs: Vec<Vec<f64>> = (0..first.names.len())
            .map(|k| acf(&column(rows, k), lag).unwrap_or_else(|_| vec![f64::NAN; lag + 1]))
            .collect();
        for l in 0..=lag {
            s.push_str(&format!("{i},{l}"));
            for a in &acfs {
                s.push_str(&format!(",{}", a[l]));
            }
            s.push('\n');
        }
    }
    s
}

/// Pooled post-burn-in histogram: `component,bin,lo,hi,count`.
pub fn histogram_csv(chains: &[ChainRecord], opts: &DiagnosticsOptions) -> String {
    let mut s = String::from("component,bin,lo,hi,count\n");
    let Some(first) = chains.first() else {
        return s;
    };
    for (k, name) in first.names.iter().enumerate() {
        let pooled: Vec<f64> = chains
            .iter()
            .flat_map(|c| column(trimmed(c, opts.burn_in), k))
            .collect();
        let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            continue;
        }
        let width = if hi > lo { (hi - lo) / opts.bins as f64 } else { 1.0 };
        let mut counts = vec![0u64; opts.bins];
        for x in &pooled {
            let b = (((x - lo) / width) as usize).min(opts.bins - 1);
            counts[b] += 1;
        }
        for (b, n) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            s.push_str(&format!("{name},{b},{a},{},{n}\n", a + width));
        }
    }
    s
}

/// Writes `diagnostics.json`, `acf.csv` and `hist.csv` into `out`.
pub fn write_diagnostics(out: &Path, chains: &[ChainRecord], opts: &DiagnosticsOptions) -> CliResult<Report> {
    let report = diagnose(chains, opts)?;
    write_json(&out.join("diagnostics.json"), &report)?;
    write_text(&out.join("acf.csv"), &acf_csv(chains, opts))?;
    write_text(&out.join("hist.csv"), &histogram_csv(chains, opts))?;
    Ok(report)
}
