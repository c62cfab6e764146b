//! Replicated Monte Carlo measurements of estimator mean, spread and SNR.
//!
//! A sweep draws `replicates` independent batches for every `N` of the grid
//! and evaluates every requested (estimator, alpha) pair on the *same*
//! batches. Replicates run on the rayon pool; results are collected in
//! replicate order and reduced with compensated sums, so a report is
//! bit-identical for a given seed whatever the number of workers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{GaussianSetting, VarianceKind};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorKind};
use crate::model::{draw_batch, eval_log_weights, eval_scores, Alpha, Model, ParamVector};
use crate::rng::{Purpose, SeedRecord};

/// What to measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kinds: Vec<EstimatorKind>,
    pub alphas: Vec<Alpha>,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// Subsample size for the leave-one-out optimal baseline.
    #[serde(default)]
    pub star_subsample: Option<usize>,
    /// Use this kind's empirical mean as the SNR numerator of every kind
    /// (all estimators are unbiased for the same gradient).
    #[serde(default)]
    pub shared_numerator: Option<EstimatorKind>,
}

/// One (estimator, alpha, N, coordinate) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub n: usize,
    pub coordinate: String,
    pub mean: f64,
    pub std: f64,
    /// `|mean| / std`; `+inf` when `std == 0` (see `snr_infinite`).
    pub snr: f64,
    pub snr_infinite: bool,
    pub analytic_snr: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
}

impl SnrRow {
    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.std / (self.replicates as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seeds: Vec<u64>,
    pub shared_numerator: Option<EstimatorKind>,
    pub rows: Vec<SnrRow>,
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean and (n-1)-denominator standard deviation, two-pass.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (mean, (ss / (n - 1.0)).sqrt())
}

fn snr_of(mean: f64, std: f64) -> (f64, bool) {
    if std > 0.0 {
        (mean.abs() / std, false)
    } else {
        (f64::INFINITY, true)
    }
}

/// Stream of the batch for replicate `r` at batch size `n`.
pub fn replicate_seed(root: u64, n: usize, r: usize) -> SeedRecord {
    SeedRecord::new(root, n as u64, Purpose::Replicate).child(r as u64, Purpose::Latents)
}

/// Evaluates every (alpha, kind) pair of `spec` on one batch; the output is
/// `alphas x kinds x dim`, flattened.
fn one_replicate<M: Model>(model: &M, params: &ParamVector, spec: &SweepSpec, n: usize, r: usize) -> Result<Vec<f64>> {
    let seed = replicate_seed(spec.seed, n, r);
    let batch = draw_batch(model, params, n, seed)?;
    let scores = eval_scores(model, params, &batch);
    let needs_prev = spec.kinds.contains(&EstimatorKind::StarPrev);
    let prev = if needs_prev {
        let pb = draw_batch(model, params, n, seed.child(0, Purpose::PreviousBatch))?;
        Some((eval_log_weights(model, params, &pb, Alpha::ZERO)?, eval_scores(model, params, &pb)))
    } else {
        None
    };
    let base = eval_log_weights(model, params, &batch, Alpha::ZERO)?;
    let mut out = Vec::with_capacity(spec.alphas.len() * spec.kinds.len() * params.dim());
    for &alpha in &spec.alphas {
        let logw = base.with_alpha(alpha);
        let log_mean = model.log_mean_weight(params, alpha);
        for &kind in &spec.kinds {
            let mut est = Estimator::new(kind).with_star_subsample(spec.star_subsample);
            if let Some((pw, ps)) = &prev {
                est.prime(pw.clone(), ps.clone());
            }
            out.extend(est.estimate(&logw, &scores, log_mean)?.grad);
        }
    }
    Ok(out)
}

fn validate_spec(spec: &SweepSpec) -> Result<()> {
    if spec.replicates < 2 {
        return Err(Error::InvalidArgument(format!("replicates must be >= 2, got {}", spec.replicates)));
    }
    if spec.kinds.is_empty() || spec.alphas.is_empty() || spec.n_grid.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one estimator, alpha and N".into()));
    }
    if let Some(&n) = spec.n_grid.iter().find(|&&n| n == 0) {
        return Err(Error::BatchTooSmall { min: 1, got: n });
    }
    Ok(())
}

/// Per-replicate gradients for every cell: `raw[n_index][r]` is one replicate's flattened output.
fn run_replicates<M: Model>(model: &M, params: &ParamVector, spec: &SweepSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    validate_spec(spec)?;
    params.validate()?;
    spec.n_grid
        .iter()
        .map(|&n| {
            (0..spec.replicates)
                .into_par_iter()
                .map(|r| one_replicate(model, params, spec, n, r))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Runs a full sweep.
pub fn snr_sweep<M: Model>(model: &M, params: &ParamVector, spec: &SweepSpec) -> Result<SnrReport> {
    let raw = run_replicates(model, params, spec)?;
    let layout = params.layout();
    let dim = params.dim();
    let mut rows = Vec::new();
    for (ni, &n) in spec.n_grid.iter().enumerate() {
        for (ai, &alpha) in spec.alphas.iter().enumerate() {
            let mut cells = Vec::with_capacity(spec.kinds.len());
            for ki in 0..spec.kinds.len() {
                let offset = (ai * spec.kinds.len() + ki) * dim;
                let stats: Vec<(f64, f64)> = (0..dim)
                    .map(|c| {
                        let column: Vec<f64> = raw[ni].iter().map(|rep| rep[offset + c]).collect();
                        mean_std(&column)
                    })
                    .collect();
                cells.push(stats);
            }
            let numerator_index = spec.shared_numerator.and_then(|k| spec.kinds.iter().position(|&x| x == k));
            for (ki, &kind) in spec.kinds.iter().enumerate() {
                for c in 0..dim {
                    let (mean, std) = cells[ki][c];
                    let numerator = numerator_index.map_or(mean, |j| cells[j][c].0);
                    let (snr, snr_infinite) = snr_of(numerator, std);
                    rows.push(SnrRow {
                        estimator: kind,
                        alpha: alpha.get(),
                        n,
                        coordinate: layout.name(c).to_string(),
                        mean,
                        std,
                        snr,
                        snr_infinite,
                        analytic_snr: None,
                        replicates: spec.replicates,
                        seed: spec.seed,
                    });
                }
            }
        }
    }
    Ok(SnrReport {
        n_grid: spec.n_grid.clone(),
        replicates: spec.replicates,
        seeds: vec![spec.seed],
        shared_numerator: spec.shared_numerator,
        rows,
    })
}

/// Coordinate-wise mean, std and SNR of one estimator at one `(N, alpha)`.
pub fn measure_snr<M: Model>(
    model: &M,
    params: &ParamVector,
    kind: EstimatorKind,
    n: usize,
    alpha: Alpha,
    replicates: usize,
    seed: u64,
) -> Result<Vec<SnrRow>> {
    let spec = SweepSpec {
        kinds: vec![kind],
        alphas: vec![alpha],
        n_grid: vec![n],
        replicates,
        seed,
        star_subsample: None,
        shared_numerator: None,
    };
    Ok(snr_sweep(model, params, &spec)?.rows)
}

/// Empirical variance of one coordinate across the grid.
#[allow(clippy::too_many_arguments)]
pub fn measure_variance_curve<M: Model>(
    model: &M,
    params: &ParamVector,
    kind: EstimatorKind,
    n_grid: &[usize],
    alpha: Alpha,
    replicates: usize,
    seed: u64,
    coordinate: usize,
) -> Result<Vec<(usize, f64)>> {
    let spec = SweepSpec {
        kinds: vec![kind],
        alphas: vec![alpha],
        n_grid: n_grid.to_vec(),
        replicates,
        seed,
        star_subsample: None,
        shared_numerator: None,
    };
    let name = params.layout().name(coordinate).to_string();
    let report = snr_sweep(model, params, &spec)?;
    Ok(report.rows.iter().filter(|r| r.coordinate == name).map(|r| (r.n, r.variance())).collect())
}

impl SnrReport {
    pub fn row(&self, kind: EstimatorKind, alpha: f64, n: usize, coordinate: &str) -> Option<&SnrRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == kind && r.alpha == alpha && r.n == n && r.coordinate == coordinate)
    }

    /// `(n, snr)` for one (kind, alpha, coordinate), in grid order.
    pub fn snr_curve(&self, kind: EstimatorKind, alpha: f64, coordinate: &str) -> Vec<(usize, f64)> {
        self.curve(kind, alpha, coordinate, |r| r.snr)
    }

    /// `(n, variance)` for one (kind, alpha, coordinate), in grid order.
    pub fn variance_curve(&self, kind: EstimatorKind, alpha: f64, coordinate: &str) -> Vec<(usize, f64)> {
        self.curve(kind, alpha, coordinate, |r| r.variance())
    }

    fn curve(&self, kind: EstimatorKind, alpha: f64, coordinate: &str, f: impl Fn(&SnrRow) -> f64) -> Vec<(usize, f64)> {
        self.n_grid
            .iter()
            .filter_map(|&n| self.row(kind, alpha, n, coordinate).map(|r| (n, f(r))))
            .collect()
    }

    /// Fills `analytic_snr` for the phi coordinates of the isotropic Gaussian model.
    pub fn attach_gaussian_oracle(&mut self, theta: &[f64], phi: &[f64]) -> Result<()> {
        for row in &mut self.rows {
            let Some(k) = row.coordinate.strip_prefix("phi[").and_then(|s| s.strip_suffix(']')) else {
                continue;
            };
            let Ok(kind) = VarianceKind::try_from(row.estimator) else { continue };
            let k: usize = k.parse().map_err(|_| Error::InvalidArgument(row.coordinate.clone()))?;
            let setting = GaussianSetting::new(theta.to_vec(), phi.to_vec(), Alpha::new(row.alpha)?, k)?;
            row.analytic_snr = Some(setting.snr_prediction(kind, row.n)?);
        }
        Ok(())
    }

    /// Cell-wise average of reports over different root seeds (same grid,
    /// kinds and alphas): mean, std and SNR are each averaged.
    pub fn average(reports: &[SnrReport]) -> Result<SnrReport> {
        let first = reports.first().ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
        let mut rows = first.rows.clone();
        for rep in &reports[1..] {
            if rep.rows.len() != rows.len() {
                return Err(Error::DimensionMismatch { expected: rows.len(), got: rep.rows.len() });
            }
        }
        let m = reports.len() as f64;
        for (i, row) in rows.iter_mut().enumerate() {
            row.mean = compensated_sum(reports.iter().map(|r| r.rows[i].mean)) / m;
            row.std = compensated_sum(reports.iter().map(|r| r.rows[i].std)) / m;
            row.snr = compensated_sum(reports.iter().map(|r| r.rows[i].snr)) / m;
            row.snr_infinite = reports.iter().any(|r| r.rows[i].snr_infinite);
        }
        Ok(SnrReport {
            n_grid: first.n_grid.clone(),
            replicates: first.replicates,
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
            shared_numerator: first.shared_numerator,
            rows,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "estimator,alpha,n,coordinate,mean,std,snr,analytic_snr,replicates,seed")?;
        for r in &self.rows {
            let analytic = r.analytic_snr.map(|v| v.to_string()).unwrap_or_default();
            let snr = if r.snr_infinite { "inf".to_string() } else { r.snr.to_string() };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.estimator, r.alpha, r.n, r.coordinate, r.mean, r.std, snr, analytic, r.replicates, r.seed
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        std::fs::write(json_path, self.to_json()?)?;
        Ok(())
    }
}

/// Ordinary least-squares slope of `log value` on `log n`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("slope fit needs >= 3 points, got {}", points.len())));
    }
    if let Some((n, v)) = points.iter().find(|(n, v)| !(*n > 0.0 && *v > 0.0 && n.is_finite() && v.is_finite())) {
        return Err(Error::InvalidArgument(format!("slope fit needs positive finite points, got ({n}, {v})")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope fit needs at least two distinct n".into()));
    }
    Ok(sxy / sxx)
}

/// Slope over the upper part of a curve: the last `ceil(len * fraction)`
/// points (at least 3). `fraction = 0.5` is the default asymptotic window.
pub fn fit_tail_slope(curve: &[(usize, f64)], fraction: f64) -> Result<f64> {
    let keep = ((curve.len() as f64 * fraction).ceil() as usize).max(3).min(curve.len());
    let pts: Vec<(f64, f64)> = curve[curve.len() - keep..].iter().map(|&(n, v)| (n as f64, v)).collect();
    fit_loglog_slope(&pts)
}

/// Collects rows by `(estimator, alpha bits, coordinate)` for quick lookups.
pub fn group_rows(report: &SnrReport) -> BTreeMap<(String, u64, String), Vec<&SnrRow>> {
    let mut map: BTreeMap<(String, u64, String), Vec<&SnrRow>> = BTreeMap::new();
    for r in &report.rows {
        map.entry((r.estimator.to_string(), r.alpha.to_bits(), r.coordinate.clone())).or_default().push(r);
    }
    map
}
