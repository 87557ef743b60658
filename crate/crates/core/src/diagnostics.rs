//! Chain-quality metrics: autocorrelation, integrated autocorrelation time,
//! effective sample size, Gelman-Rubin R̂ and mean squared error.
//!
//! All functions are pure and operate on already-trimmed samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("series of length {len} is too short for max lag {max_lag}")]
    TooShort { len: usize, max_lag: usize },
    #[error("series has zero variance")]
    Constant,
    #[error("need at least 2 chains, got {0}")]
    TooFewChains(usize),
    #[error("chains must have equal length >= 10 (got lengths {0:?})")]
    ChainLengths(Vec<usize>),
    #[error("within-chain variance is zero")]
    ZeroWithinVariance,
    #[error("no samples")]
    Empty,
    #[error("truth has {truth} components but samples have {samples}")]
    Dimension { truth: usize, samples: usize },
}

/// How the autocorrelation sum in [`iact`] is cut off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Geyer's initial positive sequence: pairs `ρ(2m) + ρ(2m+1)` are summed
    /// while positive, up to `max_lag`.
    #[default]
    InitialPositive,
    /// Sum every lag up to `max_lag`.
    Fixed,
}

struct Centered {
    dev: Vec<f64>,
    c0: f64,
}

impl Centered {
    fn new(series: &[f64], max_lag: usize) -> Result<Self, DiagnosticsError> {
        if series.len() <= max_lag {
            return Err(DiagnosticsError::TooShort {
                len: series.len(),
                max_lag,
            });
        }
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let dev: Vec<f64> = series.iter().map(|x| x - mean).collect();
        let c0: f64 = dev.iter().map(|d| d * d).sum();
        if c0 <= 0.0 || !c0.is_finite() {
            return Err(DiagnosticsError::Constant);
        }
        Ok(Self { dev, c0 })
    }

    fn rho(&self, k: usize) -> f64 {
        let d = &self.dev;
        d[..d.len() - k]
            .iter()
            .zip(&d[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / self.c0
    }
}

/// Biased sample autocorrelation `ρ(0..=max_lag)` with the mean removed.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>, DiagnosticsError> {
    let c = Centered::new(series, max_lag)?;
    Ok((0..=max_lag).map(|k| c.rho(k)).collect())
}

/// Integrated autocorrelation time `1 + 2 Σ_{k=1..K} ρ(k)`.
pub fn iact(series: &[f64], max_lag: usize, truncation: Truncation) -> Result<f64, DiagnosticsError> {
    let c = Centered::new(series, max_lag)?;
    let sum = match truncation {
        Truncation::Fixed => (1..=max_lag).map(|k| c.rho(k)).sum::<f64>(),
        Truncation::InitialPositive => {
            // Γ_0 = ρ(0) + ρ(1) is always kept
            let mut sum = if max_lag >= 1 { c.rho(1) } else { 0.0 };
            let mut m = 1;
            while 2 * m + 1 <= max_lag {
                let gamma = c.rho(2 * m) + c.rho(2 * m + 1);
                if gamma <= 0.0 {
                    break;
                }
                sum += gamma;
                m += 1;
            }
            sum
        }
    };
    Ok(1.0 + 2.0 * sum)
}

/// `len / IACT`.
pub fn ess_chain(series: &[f64], max_lag: usize, truncation: Truncation) -> Result<f64, DiagnosticsError> {
    Ok(series.len() as f64 / iact(series, max_lag, truncation)?)
}

/// Classic between/within R̂ for one scalar component across chains.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64, DiagnosticsError> {
    let m = chains.len();
    if m < 2 {
        return Err(DiagnosticsError::TooFewChains(m));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::ChainLengths(chains.iter().map(|c| c.len()).collect()));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        return Err(DiagnosticsError::ZeroWithinVariance);
    }
    let v = (nf - 1.0) / nf * w + b / nf;
    Ok((v / w).sqrt())
}

/// Column means of a row-major sample matrix.
pub fn posterior_mean(samples: &[Vec<f64>]) -> Result<Vec<f64>, DiagnosticsError> {
    let first = samples.first().ok_or(DiagnosticsError::Empty)?;
    let mut mean = vec![0.0; first.len()];
    for row in samples {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Squared error of the posterior mean against `truth`, averaged over
/// components.
pub fn mse(samples: &[Vec<f64>], truth: &[f64]) -> Result<f64, DiagnosticsError> {
    let mean = posterior_mean(samples)?;
    if mean.len() != truth.len() || truth.is_empty() {
        return Err(DiagnosticsError::Dimension {
            truth: truth.len(),
            samples: mean.len(),
        });
    }
    Ok(mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / truth.len() as f64)
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn mean_sd(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
