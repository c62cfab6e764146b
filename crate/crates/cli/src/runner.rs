//! Executes a validated [`Experiment`]: builds the model, runs the subcommand
//! inside a sized worker pool and writes the artifacts plus `manifest.json`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use iwvi::analytic::{GaussianSetting, VarianceKind};
use iwvi::diagnostics::{fit_tail_slope, snr_sweep, SnrReport, SweepSpec};
use iwvi::model::GaussianModel;
use iwvi::optimizer::{run_sga, SgaConfig, StopReason, Trajectory};
use iwvi::rng::{stream, Purpose};
use iwvi::svol::{
    load_series, posterior_summary, simulate_sv, FullCovGaussian, PseudoMarginalModel, SvLikelihood,
};
use iwvi::{Alpha, EstimatorKind, Model, ParamVector};
use serde::Serialize;

use crate::config::{Command, Experiment, ExperimentConfig, ResolvedModel, SeriesSource};
use crate::CliError;

/// Written next to every experiment's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub started_unix_ms: u128,
    pub wall_clock_ms: f64,
    pub status: String,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Collects output files relative to the experiment directory.
struct Outputs<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(io_err(format!("writing {}", path.display())))?;
        self.names.push(name.to_string());
        Ok(())
    }
}

/// Runs the experiment and writes its directory. A failed run still leaves a
/// manifest whose `status` carries the error.
pub fn execute(exp: &Experiment) -> Result<Manifest, CliError> {
    let started_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = exp.config.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Failed(format!("worker pool: {e}")))?;

    if let Some(parent) = exp.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    fs::create_dir(&exp.output).map_err(io_err(format!("creating output directory {}", exp.output.display())))?;

    let mut outputs = Outputs { dir: &exp.output, names: Vec::new() };
    let result = pool.install(|| dispatch(exp, &mut outputs));
    let manifest = Manifest {
        command: exp.config.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: exp.config.seed,
        workers: pool.current_num_threads(),
        started_unix_ms,
        wall_clock_ms: clock.elapsed().as_secs_f64() * 1e3,
        status: match &result {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        },
        outputs: outputs.names.clone(),
        config: exp.config.clone(),
    };
    let path = exp.output.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(format!("writing {}", path.display())))?;
    result.map(|()| manifest)
}

fn dispatch(exp: &Experiment, out: &mut Outputs) -> Result<(), CliError> {
    match &exp.model {
        ResolvedModel::Gaussian { theta, phi } => {
            let model = GaussianModel::new(theta.len())?;
            let params = model.params(theta, phi)?;
            match exp.config.command {
                Command::SnrSweep => {
                    let mut report = sweep(&model, &params, exp)?;
                    report.attach_gaussian_oracle(theta, phi)?;
                    write_report(&report, out)
                }
                Command::VarianceSweep => variance_sweep(&model, &params, exp, Some((theta, phi)), out),
                Command::GaussianVerify => gaussian_verify(&model, &params, exp, theta, phi, out),
                Command::Optimize => {
                    let trajectories = optimize(&model, &params, exp, out)?;
                    fail_if_any(&trajectories)
                }
                Command::SsmFit => unreachable!("validation pairs ssm-fit with svol"),
            }
        }
        ResolvedModel::Svol { series, particles, prior, observation, q_mean, q_sd } => {
            let data = match series {
                SeriesSource::File(path) => load_series(path)?,
                SeriesSource::Simulate { params, length, seed } => {
                    simulate_sv(params, *length, &mut stream(*seed, 0, Purpose::Data))?
                }
            };
            let mut csv = Vec::new();
            iwvi::svol::write_series(&mut csv, &data)?;
            out.write("data.csv", csv)?;
            let likelihood = SvLikelihood::with_observation(data, *particles, *observation)?;
            let model = PseudoMarginalModel::new(likelihood, *prior)?;
            let params = model.params(&FullCovGaussian::diagonal(q_mean.clone(), q_sd)?)?;
            match exp.config.command {
                Command::SnrSweep => write_report(&sweep(&model, &params, exp)?, out),
                Command::VarianceSweep => variance_sweep(&model, &params, exp, None, out),
                Command::SsmFit => ssm_fit(&model, &params, exp, out),
                Command::Optimize | Command::GaussianVerify => unreachable!("validation pairs these with gaussian"),
            }
        }
    }
}

fn sweep<M: Model>(model: &M, params: &ParamVector, exp: &Experiment) -> Result<SnrReport, CliError> {
    let spec = SweepSpec {
        kinds: exp.estimators.clone(),
        alphas: exp.config.alphas.iter().map(|&a| Alpha::new(a)).collect::<iwvi::Result<_>>()?,
        n_grid: exp.n_grid.clone(),
        replicates: exp.config.replicates,
        seed: exp.config.seed,
        star_subsample: exp.config.optimize.star_subsample,
        shared_numerator: None,
    };
    Ok(snr_sweep(model, params, &spec)?)
}

fn write_report(report: &SnrReport, out: &mut Outputs) -> Result<(), CliError> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    out.write("snr.csv", csv)?;
    out.write("snr.json", report.to_json()?)
}

fn phi_index(coordinate: &str) -> Option<usize> {
    coordinate.strip_prefix("phi[")?.strip_suffix(']')?.parse().ok()
}

fn gaussian_setting(theta: &[f64], phi: &[f64], alpha: f64, coordinate: &str) -> Option<GaussianSetting> {
    let k = phi_index(coordinate)?;
    GaussianSetting::new(theta.to_vec(), phi.to_vec(), Alpha::new(alpha).ok()?, k).ok()
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn variance_sweep<M: Model>(
    model: &M,
    params: &ParamVector,
    exp: &Experiment,
    gaussian: Option<(&[f64], &[f64])>,
    out: &mut Outputs,
) -> Result<(), CliError> {
    let report = sweep(model, params, exp)?;
    let predicted = |kind: EstimatorKind, alpha: f64, n: usize, coordinate: &str| {
        let (theta, phi) = gaussian?;
        let vk = VarianceKind::try_from(kind).ok()?;
        Some(gaussian_setting(theta, phi, alpha, coordinate)?.predicted_variance(vk, n))
    };
    let mut csv = String::from("estimator,alpha,n,coordinate,variance,predicted_variance\n");
    for r in &report.rows {
        let p = predicted(r.estimator, r.alpha, r.n, &r.coordinate);
        writeln!(csv, "{},{},{},{},{},{}", r.estimator, r.alpha, r.n, r.coordinate, r.variance(), opt_cell(p)).unwrap();
    }
    out.write("variance.csv", csv)?;

    let mut slopes = String::from("estimator,alpha,coordinate,slope\n");
    for &kind in &exp.estimators {
        for &alpha in &exp.config.alphas {
            for c in 0..params.dim() {
                let name = params.layout().name(c).to_string();
                let slope = fit_tail_slope(&report.variance_curve(kind, alpha, &name), 0.5).ok();
                writeln!(slopes, "{kind},{alpha},{name},{}", opt_cell(slope)).unwrap();
            }
        }
    }
    out.write("slopes.csv", slopes)?;
    out.write("snr.json", report.to_json()?)
}

fn relative_error(empirical: f64, analytic: f64) -> f64 {
    (empirical - analytic).abs() / analytic.abs()
}

fn gaussian_verify(
    model: &GaussianModel,
    params: &ParamVector,
    exp: &Experiment,
    theta: &[f64],
    phi: &[f64],
    out: &mut Outputs,
) -> Result<(), CliError> {
    let report = sweep(model, params, exp)?;
    let tol = exp.config.verify.tolerance;
    let mut csv = String::from("estimator,alpha,n,coordinate,snr,analytic_snr,snr_rel_err,variance,analytic_variance,variance_rel_err,pass\n");
    let mut table = format!(
        "{:<8} {:>5} {:>6} {:<8} {:>10} {:>10} {:>8} {:>11} {:>11} {:>8}  result\n",
        "kind", "alpha", "N", "coord", "snr", "analytic", "err", "variance", "analytic", "err"
    );
    let (mut passed, mut total) = (0, 0);
    for r in report.rows.iter().filter(|r| phi_index(&r.coordinate).is_some()) {
        let setting = gaussian_setting(theta, phi, r.alpha, &r.coordinate)
            .ok_or_else(|| CliError::Failed(format!("no analytic setting for {}", r.coordinate)))?;
        let vk = VarianceKind::try_from(r.estimator)?;
        let snr_hat = setting.snr_prediction(vk, r.n)?;
        let var_hat = setting.predicted_variance(vk, r.n);
        let (snr_err, var_err) = (relative_error(r.snr, snr_hat), relative_error(r.variance(), var_hat));
        let pass = snr_err <= tol && var_err <= tol;
        total += 1;
        passed += usize::from(pass);
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.estimator, r.alpha, r.n, r.coordinate, r.snr, snr_hat, snr_err, r.variance(), var_hat, var_err, pass
        )
        .unwrap();
        writeln!(
            table,
            "{:<8} {:>5} {:>6} {:<8} {:>10.4} {:>10.4} {:>7.1}% {:>11.4e} {:>11.4e} {:>7.1}%  {}",
            r.estimator.to_string(),
            r.alpha,
            r.n,
            r.coordinate,
            r.snr,
            snr_hat,
            100.0 * snr_err,
            r.variance(),
            var_hat,
            100.0 * var_err,
            if pass { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    writeln!(table, "{passed}/{total} cells within {:.0}% of the analytic prediction", 100.0 * tol).unwrap();
    print!("{table}");
    std::io::stdout().flush().ok();
    out.write("verify.csv", csv)?;
    out.write("verify.txt", table)
}

fn file_stem(kind: EstimatorKind) -> String {
    kind.to_string().replace(':', "-")
}

fn sga_config(exp: &Experiment, kind: EstimatorKind) -> SgaConfig {
    let opt = &exp.config.optimize;
    SgaConfig {
        estimator: kind,
        n: opt.n,
        iterations: opt.iterations,
        step: opt.step,
        seed: exp.config.seed,
        alpha_ladder: exp.alpha_ladder(),
        ess_threshold_frac: exp.config.anneal.ess_threshold,
        tempering: exp.config.anneal.tempering,
        scope: opt.scope,
        grad_norm_stop: opt.grad_norm_stop,
        star_subsample: opt.star_subsample,
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    estimator: String,
    iterations: usize,
    stop: &'a StopReason,
    terminal_alpha: f64,
    final_bound: f64,
    final_params: &'a [f64],
}

/// One trajectory per configured estimator, each written as CSV and JSON.
fn optimize<M: Model>(
    model: &M,
    init: &ParamVector,
    exp: &Experiment,
    out: &mut Outputs,
) -> Result<Vec<(EstimatorKind, Trajectory)>, CliError> {
    let mut runs = Vec::new();
    for &kind in &exp.estimators {
        let traj = run_sga(model, init, &sga_config(exp, kind))?;
        let stem = file_stem(kind);
        let mut csv = Vec::new();
        traj.write_csv(&mut csv)?;
        out.write(&format!("trajectory-{stem}.csv"), csv)?;
        out.write(&format!("trajectory-{stem}.json"), traj.to_json()?)?;
        println!(
            "{kind}: {} iterations, stop {:?}, terminal alpha {}, final bound {:.6}",
            traj.iterations(),
            traj.stop,
            traj.terminal_alpha,
            traj.last().bound
        );
        runs.push((kind, traj));
    }
    let summary: Vec<RunSummary> = runs
        .iter()
        .map(|(kind, t)| RunSummary {
            estimator: kind.to_string(),
            iterations: t.iterations(),
            stop: &t.stop,
            terminal_alpha: t.terminal_alpha,
            final_bound: t.last().bound,
            final_params: t.final_params(),
        })
        .collect();
    out.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    Ok(runs)
}

fn fail_if_any(runs: &[(EstimatorKind, Trajectory)]) -> Result<(), CliError> {
    for (kind, t) in runs {
        if let StopReason::Failed { message } = &t.stop {
            return Err(CliError::Failed(format!("{kind} run failed after {} iterations: {message}", t.iterations())));
        }
    }
    Ok(())
}

fn ssm_fit(
    model: &PseudoMarginalModel<SvLikelihood>,
    init: &ParamVector,
    exp: &Experiment,
    out: &mut Outputs,
) -> Result<(), CliError> {
    let runs = optimize(model, init, exp, out)?;
    for (i, (kind, traj)) in runs.iter().enumerate() {
        let q = model.family(&init.with_values(traj.final_params().to_vec())?);
        let mut rng = stream(exp.config.seed, i as u64, Purpose::Custom(1));
        let summary = posterior_summary(&q, exp.config.optimize.posterior_draws, &mut rng)?;
        println!(
            "{kind}: beta0 {:.4} ± {:.4}, beta1 {:.4} ± {:.4}, sigma2 {:.4} ± {:.4}",
            summary.beta0.mean,
            summary.beta0.sd,
            summary.beta1.mean,
            summary.beta1.sd,
            summary.sigma2.mean,
            summary.sigma2.sd
        );
        out.write(&format!("posterior-{}.json", file_stem(*kind)), serde_json::to_string_pretty(&summary)?)?;
    }
    fail_if_any(&runs)
}

