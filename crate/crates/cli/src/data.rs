//! CSV readers and writers for observation series, prices and chains.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn reader(path: &Path) -> CliResult<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_field(path: &Path, record: &csv::StringRecord, col: usize, name: &str) -> CliResult<f64> {
    let raw = record.get(col).unwrap_or("");
    raw.parse::<f64>().map_err(|_| {
        io_err(
            path,
            format!("line {}: column {name}: cannot parse {raw:?} as a number", line_of(record)),
        )
    })
}

/// Creates `path` and writes `text` to it.
pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

/// Rows of `y_t` as written by `synth` and `ingest`: a `t` column followed
/// by one column per observation component.
pub fn read_observations(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "t")
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if cols.is_empty() {
        return Err(io_err(path, "no observation columns"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let row = cols
            .iter()
            .map(|(i, name)| parse_field(path, &rec, *i, name))
            .collect::<CliResult<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(io_err(path, format!("line {}: non-finite observation", line_of(&rec))));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(io_err(path, "observation series is empty"));
    }
    Ok(rows)
}

/// Writes `t,<prefix>_1,..` with `t` starting at 1.
pub fn write_series(path: &Path, prefix: &str, rows: &[Vec<f64>]) -> CliResult<()> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut text = String::from("t");
    for k in 1..=dim {
        text.push_str(&format!(",{prefix}_{k}"));
    }
    text.push('\n');
    for (t, row) in rows.iter().enumerate() {
        text.push_str(&(t + 1).to_string());
        for v in row {
            text.push(',');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    }
    write_text(path, &text)
}

/// One price column, by name or the last column.
pub fn read_prices(path: &Path, column: Option<&str>) -> CliResult<Vec<f64>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let col = match column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| io_err(path, format!("no column named {name:?}")))?,
        None => headers
            .len()
            .checked_sub(1)
            .ok_or_else(|| io_err(path, "empty header"))?,
    };
    let name = headers.get(col).unwrap_or("price").to_string();
    let mut prices = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let p = parse_field(path, &rec, col, &name)?;
        if !(p > 0.0 && p.is_finite()) {
            return Err(io_err(
                path,
                format!("line {}: price must be positive, got {p}", line_of(&rec)),
            ));
        }
        prices.push(p);
    }
    Ok(prices)
}

/// `y_t = 100 log(s_t / s_{t-1})`.
pub fn log_returns(prices: &[f64]) -> Result<Vec<f64>, String> {
    if prices.len() < 2 {
        return Err(format!("need at least 2 prices, got {}", prices.len()));
    }
    Ok(prices.windows(2).map(|w| 100.0 * (w[1] / w[0]).ln()).collect())
}

/// Chain draws as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub accepted: Vec<bool>,
    pub logpost: Vec<f64>,
    pub nge: Vec<u64>,
}

impl From<&gradpf_core::mcmc::Chain> for ChainRecord {
    fn from(c: &gradpf_core::mcmc::Chain) -> Self {
        Self {
            names: c.names.clone(),
            samples: c.samples.clone(),
            accepted: c.accepted.clone(),
            logpost: c.logpost.clone(),
            nge: c.nge.clone(),
        }
    }
}

const CHAIN_FIXED: [&str; 4] = ["iter", "accepted", "logpost", "nge"];

/// `iter,accepted,logpost,nge,<names>`; row 0 is the initial state.
pub fn write_chain(path: &Path, chain: &ChainRecord) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<&str> = CHAIN_FIXED
        .iter()
        .copied()
        .chain(chain.names.iter().map(String::as_str))
        .collect();
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in chain.samples.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}",
            u8::from(chain.accepted[i]),
            chain.logpost[i],
            chain.nge[i]
        ));
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_chain(path: &Path) -> CliResult<ChainRecord> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if headers.len() <= CHAIN_FIXED.len()
        || headers.iter().zip(CHAIN_FIXED).any(|(h, want)| h != want)
    {
        return Err(io_err(
            path,
            format!("expected header iter,accepted,logpost,nge,<params>, got {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let names: Vec<String> = headers.iter().skip(CHAIN_FIXED.len()).map(String::from).collect();
    let mut chain = ChainRecord {
        names,
        samples: Vec::new(),
        accepted: Vec::new(),
        logpost: Vec::new(),
        nge: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let line = line_of(&rec);
        let bad = |what: &str| io_err(path, format!("line {line}: bad {what}"));
        chain.accepted.push(match rec.get(1) {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("accepted flag")),
        });
        chain.logpost.push(parse_field(path, &rec, 2, "logpost")?);
        chain
            .nge
            .push(rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("nge"))?);
        let row = (CHAIN_FIXED.len()..headers.len())
            .map(|i| parse_field(path, &rec, i, &headers[i]))
            .collect::<CliResult<Vec<f64>>>()?;
        chain.samples.push(row);
    }
    if chain.samples.is_empty() {
        return Err(io_err(path, "chain file has no rows"));
    }
    Ok(chain)
}
