//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a computation or I/O error, 2 on a usage
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data_io::{load_observational, load_semisynthetic, write_report_csv};
use crate::error::{Error, Result};
use crate::estimators::{
    crossfit_estimate, fit_and_estimate, CrossFitConfig, EstimateResult, EstimationSpec,
    DEFAULT_FOLDS,
};
use crate::experiments::{
    run_monte_carlo, run_semisynthetic, AggregateReport, DgpSpec, ExperimentConfig, FitSettings,
    SemisynthConfig,
};
use crate::features::{make_feature_map, BalancingScheme};
use crate::model::Functional;
use crate::outcome::{EffectModel, OutcomeConfig, DEFAULT_OUTCOME_RIDGE};
use crate::riesz::{Loss, RieszConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rieszbal",
    version,
    about = "Debiased ATE estimation with Riesz-regression balancing weights"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo study on the synthetic design.
    Simulate(SimulateArgs),
    /// Study on semi-synthetic replication files with known truth.
    Semisynth(SemisynthArgs),
    /// Fit once on a data file and print estimates and imbalance.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Covariate,
    Regressor,
    Both,
}

impl SchemeArg {
    fn schemes(self) -> Vec<BalancingScheme> {
        match self {
            SchemeArg::Covariate => vec![BalancingScheme::Covariate],
            SchemeArg::Regressor => vec![BalancingScheme::Regressor],
            SchemeArg::Both => vec![BalancingScheme::Covariate, BalancingScheme::Regressor],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Sq,
    Ukl,
    Bp,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Sq => Loss::Sq,
            LossArg::Ukl => Loss::Ukl,
            LossArg::Bp => Loss::Bp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FunctionalArg {
    Ate,
    AttMean,
}

impl From<FunctionalArg> for Functional {
    fn from(f: FunctionalArg) -> Self {
        match f {
            FunctionalArg::Ate => Functional::Ate,
            FunctionalArg::AttMean => Functional::AttMean,
        }
    }
}

fn parse_lambda(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("lambda must be nonnegative".into())
    }
}

fn parse_folds(s: &str) -> std::result::Result<usize, String> {
    let k: usize = s
        .parse()
        .map_err(|_| format!("`{s}` is not a fold count"))?;
    if k >= 2 {
        Ok(k)
    } else {
        Err("cross-fitting needs at least 2 folds".into())
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be positive".into())
    }
}

fn parse_nonneg(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be nonnegative".into())
    }
}

/// Fitting flags shared by all subcommands.
#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "sq")]
    pub loss: LossArg,
    /// Riesz ridge weight; repeat for a sweep.
    #[arg(long = "lambda", value_parser = parse_lambda, allow_negative_numbers = true, default_values_t = [0.01])]
    pub lambdas: Vec<f64>,
    /// Cross-fit with K folds.
    #[arg(long, value_name = "K", value_parser = parse_folds)]
    pub crossfit: Option<usize>,
    /// Report both no cross-fitting and cross-fitting (K from --crossfit, default 5).
    #[arg(long)]
    pub crossfit_compare: bool,
    /// Random Fourier feature count.
    #[arg(long, default_value_t = 80, value_parser = clap::value_parser!(u64).range(1..))]
    pub features: u64,
    /// Outcome regression ridge weight.
    #[arg(long, value_parser = parse_nonneg, default_value_t = DEFAULT_OUTCOME_RIDGE)]
    pub outcome_ridge: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitArgs {
    fn modes(&self) -> Vec<Option<usize>> {
        let k = self.crossfit.unwrap_or(DEFAULT_FOLDS);
        match (self.crossfit_compare, self.crossfit) {
            (true, _) => vec![None, Some(k)],
            (false, Some(k)) => vec![Some(k)],
            (false, None) => vec![None],
        }
    }

    fn settings(&self, scheme: SchemeArg) -> FitSettings {
        FitSettings {
            functional: Functional::Ate,
            loss: self.loss.into(),
            schemes: scheme.schemes(),
            lambdas: self.lambdas.clone(),
            crossfit: self.modes(),
            effect_model: EffectModel::ConstantEffect,
            outcome_ridge: self.outcome_ridge,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[arg(long, default_value_t = 1200, value_parser = clap::value_parser!(u64).range(2..))]
    pub n: u64,
    #[arg(long, value_enum, default_value = "both")]
    pub scheme: SchemeArg,
    /// Kernel scale of the feature map.
    #[arg(long, value_parser = parse_positive, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Summary CSV; per-replication rows go to `<stem>_reps.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (0: one per core). Does not affect the output.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SemisynthArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub scheme: SchemeArg,
    #[arg(long, value_parser = parse_positive, default_value_t = 2.0)]
    pub bandwidth: f64,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    /// CSV with `treatment`, `y_factual`, `x1..xp`, and optionally `mu0`, `mu1`.
    #[arg(long)]
    pub data: PathBuf,
    /// Keep only rows of this replication.
    #[arg(long)]
    pub rep: Option<i64>,
    #[arg(long, value_enum, default_value = "ate")]
    pub functional: FunctionalArg,
    #[arg(long, value_enum, default_value = "regressor")]
    pub scheme: SchemeArg,
    #[arg(long, value_parser = parse_positive, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[command(flatten)]
    pub fit: FitArgs,
}

fn with_pool<T: Send>(jobs: usize, work: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(work)
}

fn print_summary(out: &mut impl Write, report: &AggregateReport) -> std::io::Result<()> {
    for cell in &report.cells {
        writeln!(
            out,
            "{}  rmse_ra={:.6} rmse_rw={:.6} rmse_arw={:.6} cov_imbalance={:.6} reg_imbalance={:.6}",
            cell.key, cell.rmse_ra, cell.rmse_rw, cell.rmse_arw, cell.cov_imbalance, cell.reg_imbalance
        )?;
    }
    Ok(())
}

fn simulate(args: &SimulateArgs, out: &mut impl Write) -> Result<()> {
    let config = ExperimentConfig {
        reps: args.reps as usize,
        master_seed: args.fit.seed,
        dgp: DgpSpec {
            n: args.n as usize,
            m_features: args.fit.features as usize,
            bandwidth: args.bandwidth,
            ..DgpSpec::default()
        },
        fit: args.fit.settings(args.scheme),
    };
    let report = with_pool(args.jobs, || run_monte_carlo(&config))?;
    write_report_csv(&report, &args.out)?;
    print_summary(out, &report).ok();
    Ok(())
}

fn semisynth(args: &SemisynthArgs, out: &mut impl Write) -> Result<()> {
    let mut paths = vec![args.train.clone()];
    paths.extend(args.test.clone());
    let reps = load_semisynthetic(&paths)?;
    let config = SemisynthConfig {
        master_seed: args.fit.seed,
        m_features: args.fit.features as usize,
        bandwidth: args.bandwidth,
        fit: args.fit.settings(args.scheme),
    };
    let report = with_pool(args.jobs, || run_semisynthetic(&reps, &config))?;
    write_report_csv(&report, &args.out)?;
    writeln!(out, "replications={}", reps.len()).ok();
    print_summary(out, &report).ok();
    Ok(())
}

fn print_estimate(out: &mut impl Write, label: &str, r: &EstimateResult) -> std::io::Result<()> {
    writeln!(out, "[{label}]")?;
    writeln!(out, "theta_ra={:.10e}", r.theta_ra)?;
    writeln!(out, "theta_rw={:.10e}", r.theta_rw)?;
    writeln!(out, "theta_arw={:.10e}", r.theta_arw)?;
    writeln!(out, "covariate_rms={:.6e}", r.imbalance.covariate_rms)?;
    writeln!(out, "covariate_max={:.6e}", r.imbalance.covariate_max)?;
    writeln!(out, "regressor_rms={:.6e}", r.imbalance.regressor_rms)?;
    writeln!(out, "regressor_max={:.6e}", r.imbalance.regressor_max)?;
    if let Some(t) = r.neyman {
        writeln!(out, "ne={:.10e}", t.ne)?;
        writeln!(out, "noise={:.10e}", t.noise)?;
        writeln!(out, "drift={:.10e}", t.drift)?;
    }
    Ok(())
}

fn diagnose(args: &DiagnoseArgs, out: &mut impl Write) -> Result<()> {
    let dataset = load_observational(&args.data, args.rep)?;
    let map = make_feature_map(
        dataset.p(),
        args.fit.features as usize,
        args.bandwidth,
        args.fit.seed,
    )?;
    let functional: Functional = args.functional.into();
    writeln!(
        out,
        "n={} treated={} functional={}",
        dataset.n(),
        dataset.treated_count(),
        functional.name()
    )
    .ok();
    for scheme in args.scheme.schemes() {
        for &lambda in &args.fit.lambdas {
            let spec = EstimationSpec {
                functional,
                riesz: RieszConfig::new(args.fit.loss.into(), lambda, scheme),
                riesz_map: map.clone(),
                outcome: OutcomeConfig::new(EffectModel::ConstantEffect, map.clone())
                    .with_ridge(args.fit.outcome_ridge),
                diagnostic_map: map.clone().with_intercept(false),
            };
            for mode in args.fit.modes() {
                let result = match mode {
                    None => fit_and_estimate(&dataset, &spec)?,
                    Some(k) => {
                        crossfit_estimate(&dataset, &spec, &CrossFitConfig::new(k, args.fit.seed))?
                    }
                };
                let label = format!(
                    "scheme={} loss={} lambda={} crossfit={}",
                    scheme.name(),
                    args.fit
                        .loss
                        .to_possible_value()
                        .map(|v| v.get_name().to_string())
                        .unwrap_or_default(),
                    lambda,
                    mode.map_or("none".to_string(), |k| k.to_string())
                );
                print_estimate(out, &label, &result).ok();
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                write!(out, "{rendered}").ok();
            } else {
                write!(err, "{rendered}").ok();
            }
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(a, out),
        Command::Semisynth(a) => semisynth(a, out),
        Command::Diagnose(a) => diagnose(a, out),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            1
        }
    }
}
