use gradpf_core::dpf::{run_filter, FilterConfig};
use gradpf_core::gaussian::Vector;
use gradpf_core::kalman::kf_loglik_grad;
use gradpf_core::noise::{derive_seed, NoiseBank};
use gradpf_core::ssm::{ModelSpec, ModelVisitor, StateSpaceModel};
use rayon::prelude::*;

use super::{keys, load_series, pool, to_vectors, RunOptions};
use crate::config::{Combo, ExperimentConfig, SweepSection};
use crate::data::write_text;
use crate::error::{CliError, CliResult};

/// Evenly spaced grid including both ends.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Point {
    ll: f64,
    grad: f64,
    ancestry: Option<u64>,
}

impl Point {
    const MISSING: Point = Point {
        ll: f64::NAN,
        grad: f64::NAN,
        ancestry: None,
    };
}

struct Curves<'a> {
    y: &'a [Vec<f64>],
    base: &'a [f64],
    grid: &'a [f64],
    sweep: &'a SweepSection,
    filter: FilterConfig,
    seed: u64,
    combo: usize,
    label: String,
}

/// CRN and fresh-noise columns of one combo.
type ComboColumns = (Vec<Point>, Vec<Point>);

impl ModelVisitor for Curves<'_> {
    type Output = CliResult<ComboColumns>;

    fn visit<const NX: usize, const NY: usize, const NT: usize, M>(self, model: &M) -> Self::Output
    where
        M: StateSpaceModel<NX, NY, NT>,
    {
        let y = to_vectors::<NY>(self.y)?;
        let (t, n) = (y.len(), self.filter.particles);
        let theta_at = |v: f64| {
            let mut th = Vector::<NT>::from_column_slice(self.base);
            th[self.sweep.component] = v;
            th
        };
        let k = self.sweep.component;
        let eval = |theta: &Vector<NT>, bank: &NoiseBank| match run_filter(model, theta, &y, &self.filter, bank) {
            Ok(out) => Point {
                ll: out.loglik,
                grad: out.grad[k],
                ancestry: Some(out.ancestry_fingerprint()),
            },
            Err(e) => {
                log::warn!("{}: filter failed at theta = {}: {e}", self.label, theta[k]);
                Point::MISSING
            }
        };

        let crn = if self.sweep.crn {
            let bank = NoiseBank::new(derive_seed(self.seed, &[keys::SWEEP_CRN]), t, n, NX);
            self.grid.par_iter().map(|&v| eval(&theta_at(v), &bank)).collect()
        } else {
            Vec::new()
        };
        let fresh = if self.sweep.fresh {
            self.grid
                .par_iter()
                .enumerate()
                .map(|(g, &v)| {
                    let theta = theta_at(v);
                    let reps: Vec<Point> = (0..self.sweep.replicates)
                        .map(|r| {
                            let s = derive_seed(
                                self.seed,
                                &[keys::SWEEP_FRESH, self.combo as u64, g as u64, r as u64],
                            );
                            eval(&theta, &NoiseBank::new(s, t, n, NX))
                        })
                        .collect();
                    let m = reps.len() as f64;
                    Point {
                        ll: reps.iter().map(|p| p.ll).sum::<f64>() / m,
                        grad: reps.iter().map(|p| p.grad).sum::<f64>() / m,
                        ancestry: None,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((crn, fresh))
    }
}

struct Exact<'a> {
    y: &'a [Vec<f64>],
    base: &'a [f64],
    grid: &'a [f64],
    component: usize,
}

impl ModelVisitor for Exact<'_> {
    type Output = CliResult<Option<Vec<(f64, f64)>>>;

    fn visit<const NX: usize, const NY: usize, const NT: usize, M>(self, model: &M) -> Self::Output
    where
        M: StateSpaceModel<NX, NY, NT>,
    {
        let base = Vector::<NT>::from_column_slice(self.base);
        if model.linear_form(&base).is_none() {
            return Ok(None);
        }
        let y = to_vectors::<NY>(self.y)?;
        Ok(Some(
            self.grid
                .par_iter()
                .map(|&v| {
                    let mut th = base;
                    th[self.component] = v;
                    kf_loglik_grad(model, &y, &th)
                        .map(|(ll, g)| (ll, g[self.component]))
                        .unwrap_or((f64::NAN, f64::NAN))
                })
                .collect(),
        ))
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Evaluates the log-likelihood and its gradient along a 1-d grid and
/// writes `sweep.csv`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    let model = cfg.require_model()?;
    let base = model.require_theta()?;
    let filter = cfg.require_filter()?;
    let sweep = cfg.require_sweep()?;
    let y = load_series(cfg, opts)?;
    let grid = grid(sweep.lo, sweep.hi, sweep.points);
    let combos = if sweep.combos.is_empty() {
        vec![Combo {
            policy: model.spec.policy,
            resampler: filter.resampler,
        }]
    } else {
        sweep.combos.clone()
    };
    let pool = pool(opts.jobs)?;

    let exact = pool
        .install(|| {
            model.spec.dispatch(Exact {
                y: &y,
                base,
                grid: &grid,
                component: sweep.component,
            })
        })
        .map_err(|e| CliError::config(e.to_string()))??;

    let mut columns = Vec::new();
    for (i, combo) in combos.iter().enumerate() {
        let spec = ModelSpec {
            policy: combo.policy,
            ..model.spec.clone()
        };
        let mut fc = filter.clone().with_resampler(combo.resampler);
        fc.record_ancestry = true;
        let curves = Curves {
            y: &y,
            base,
            grid: &grid,
            sweep,
            filter: fc,
            seed: opts.seed,
            combo: i,
            label: combo.label(),
        };
        let cols = pool
            .install(|| spec.dispatch(curves))
            .map_err(|e| CliError::config(e.to_string()))??;
        columns.push(cols);
    }

    let name = model
        .spec
        .params()
        .get(sweep.component)
        .map_or_else(|| format!("theta_{}", sweep.component + 1), |p| p.name.clone());
    let mut header = vec!["theta".to_string(), "kf_ll".into(), "kf_grad".into()];
    for c in &combos {
        let l = c.label();
        if sweep.crn {
            header.extend([format!("{l}_crn_ll"), format!("{l}_crn_grad"), format!("{l}_crn_ancestry")]);
        }
        if sweep.fresh {
            header.extend([format!("{l}_fresh_ll"), format!("{l}_fresh_grad")]);
        }
    }
    let mut out = format!(
        "# sweep of {name} (component {}) over [{}, {}] with {} points; other components fixed at model.theta\n\
         # kf_*: exact Kalman filter (NaN when the model is not linear)\n\
         # <combo>_crn_*: one noise bank shared by every grid point; ancestry is a hash of the resampling history\n\
         # <combo>_fresh_*: new noise per grid point, averaged over {} replicates\n",
        sweep.component, sweep.lo, sweep.hi, sweep.points, sweep.replicates
    );
    out.push_str(&header.join(","));
    out.push('\n');
    for (g, &v) in grid.iter().enumerate() {
        let (kll, kg) = exact.as_ref().map_or((f64::NAN, f64::NAN), |e| e[g]);
        let mut row = vec![fmt(v), fmt(kll), fmt(kg)];
        for (crn, fresh) in &columns {
            if sweep.crn {
                let p = crn[g];
                row.extend([
                    fmt(p.ll),
                    fmt(p.grad),
                    p.ancestry.map_or_else(String::new, |a| format!("{a:016x}")),
                ]);
            }
            if sweep.fresh {
                row.extend([fmt(fresh[g].ll), fmt(fresh[g].grad)]);
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(&opts.out.join("sweep.csv"), &out)?;
    log::info!("sweep: {} points x {} combos written to {}", grid.len(), combos.len(), opts.out.display());
    Ok(())
}
