//! Command-line interface of the `drekf` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::config::{self, load_table, parse_table, raw_from_table, split_override, template, Scenario};
use crate::engine::{run_scenario, run_sweep, Experiment, RunOptions};
use crate::error::{SimError, SimResult};
use crate::metrics::MetricsSummary;
use crate::persist::{self, fmt_f64};
use crate::sdp_dump::{read_dump, verify_dump, VERIFY_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "drekf", version, about = "Residual-aware distributionally robust EKF benchmarks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Scenario configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Override a config value, e.g. `drekf.theta=0.01` or `omega0=0.45`.
    #[arg(long = "override", global = true, value_name = "K=V", action = ArgAction::Append)]
    pub overrides: Vec<String>,
    /// Master seed (overrides `scenario.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Progress on stderr: -v info, -vv debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scenario and write summary, records and config echo.
    Run {
        /// Also dump the stage SDPs of the first run's DR-EKF.
        #[arg(long)]
        dump_sdp: bool,
    },
    /// Run once per value of a config key and merge the summaries.
    Sweep {
        #[arg(long)]
        key: String,
        /// Comma-separated values, parsed as TOML.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<String>,
    },
    /// Run the scenario and compare empirical MSEs with the certificate.
    Audit,
    /// Check a stage SDP dump: constraint residuals and interior-point cross-check.
    VerifySdp {
        #[arg(long, value_name = "PATH")]
        dump: PathBuf,
        #[arg(long, default_value_t = VERIFY_TOL)]
        tol: f64,
    },
    /// Print the effective configuration as TOML.
    EchoConfig {
        /// Bundled template instead of --config: ct_tracking or safe_nav.
        #[arg(long, value_name = "NAME")]
        template: Option<String>,
    },
}

fn exit_code(e: &SimError) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USER
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.global.verbose);
    match dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn effective_table(global: &GlobalArgs, template_name: Option<&str>) -> SimResult<toml::Table> {
    let mut table = match (template_name, &global.config) {
        (Some(name), _) => {
            let text = template(name)
                .ok_or_else(|| SimError::config("--template", format!("unknown template `{name}` (ct_tracking, safe_nav)")))?;
            parse_table(text)?
        }
        (None, Some(path)) => load_table(path)?,
        (None, None) => return Err(SimError::config("--config", "a config file is required")),
    };
    for spec in &global.overrides {
        let (k, v) = split_override(spec)?;
        config::apply_override(&mut table, k, v)?;
    }
    if let Some(seed) = global.seed {
        config::apply_override(&mut table, "scenario.seed", &seed.to_string())?;
    }
    Ok(table)
}

fn options(global: &GlobalArgs) -> RunOptions {
    RunOptions { jobs: global.jobs, dump_sdp_run: None }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| String::from("-"))
}

fn print_summary(out: &mut dyn Write, prefix: &str, summary: &MetricsSummary) -> SimResult<()> {
    for e in &summary.estimators {
        let mut line = format!(
            "{prefix}{} mse_mean={} mse_std={} runs={} failed={}",
            e.estimator,
            fmt_f64(e.mse_mean),
            fmt_f64(e.mse_std),
            e.runs,
            e.failed_runs
        );
        if e.collision_rate.is_some() {
            line += &format!(" collision_rate={} goal_rate={}", opt(e.collision_rate), opt(e.goal_rate));
        }
        if let Some(v) = e.certificate_violations {
            line += &format!(" certificate_violations={v}");
        }
        writeln!(out, "{line}").map_err(|e| SimError::io("<stdout>", e))?;
    }
    Ok(())
}

fn finish(exp: &Experiment) -> i32 {
    if exp.has_failures() {
        let n = exp.failures().count();
        eprintln!("error: {n} estimator run(s) failed numerically; partial outputs written");
        EXIT_NUMERICAL
    } else {
        EXIT_OK
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> SimResult<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::EchoConfig { template } => {
            let raw = raw_from_table(&effective_table(g, template.as_deref())?)?;
            Scenario::from_raw(raw.clone())?;
            write!(out, "{}", config::to_toml_string(&raw)?).map_err(|e| SimError::io("<stdout>", e))?;
            Ok(EXIT_OK)
        }
        Command::Run { dump_sdp } => {
            let scenario = Scenario::from_raw(raw_from_table(&effective_table(g, None)?)?)?;
            let mut opts = options(g);
            if *dump_sdp {
                opts.dump_sdp_run = Some(0);
            }
            let exp = run_scenario(&scenario, &opts)?;
            persist::persist_experiment(&g.out, &scenario.raw, &exp, &scenario.estimators)?;
            print_summary(out, "", &exp.summary)?;
            Ok(finish(&exp))
        }
        Command::Audit => {
            let scenario = Scenario::from_raw(raw_from_table(&effective_table(g, None)?)?)?;
            if !scenario.estimators.contains(&config::EstimatorKind::Drekf) {
                return Err(SimError::config("scenario.estimators", "audit needs the drekf estimator"));
            }
            let exp = run_scenario(&scenario, &options(g))?;
            persist::persist_experiment(&g.out, &scenario.raw, &exp, &scenario.estimators)?;
            match crate::metrics::audit(&exp.records)? {
                Some(a) => {
                    let w = |e| SimError::io("<stdout>", e);
                    writeln!(out, "mode: {}", a.label).map_err(w)?;
                    writeln!(out, "stages: {} violations: {}", a.stages.len(), a.violation_count()).map_err(w)?;
                    for s in a.violations() {
                        writeln!(
                            out,
                            "violation stage={} prior_mse={} gamma_sq={} posterior_mse={} vbar_sq={}",
                            s.stage,
                            fmt_f64(s.empirical_prior_mse),
                            fmt_f64(s.gamma_sq),
                            fmt_f64(s.empirical_posterior_mse),
                            fmt_f64(s.vbar_sq)
                        )
                        .map_err(w)?;
                    }
                }
                None => writeln!(out, "no completed drekf runs to audit").map_err(|e| SimError::io("<stdout>", e))?,
            }
            Ok(finish(&exp))
        }
        Command::Sweep { key, values } => {
            let table = effective_table(g, None)?;
            let points = run_sweep(&table, key, values, &options(g))?;
            let mut with_raw = Vec::with_capacity(points.len());
            let mut estimators = Vec::new();
            for (v, exp) in points {
                let mut t = table.clone();
                config::apply_override(&mut t, key, &v)?;
                let s = Scenario::from_raw(raw_from_table(&t)?)?;
                estimators = s.estimators.clone();
                with_raw.push((v, exp, s.raw));
            }
            persist::persist_sweep(&g.out, key, &with_raw, &estimators)?;
            let mut code = EXIT_OK;
            for (v, exp, _) in &with_raw {
                print_summary(out, &format!("{key}={v} "), &exp.summary)?;
                code = code.max(finish(exp));
            }
            Ok(code)
        }
        Command::VerifySdp { dump, tol } => verify(dump, *tol, out),
    }
}

fn verify(path: &Path, tol: f64, out: &mut dyn Write) -> SimResult<i32> {
    if !path.exists() {
        return Err(SimError::config("--dump", format!("{} does not exist", path.display())));
    }
    let dump = read_dump(path)?;
    let w = |e| SimError::io("<stdout>", e);
    let mut all_ok = true;
    for stage in verify_dump(&dump, tol) {
        for c in &stage.checks {
            writeln!(
                out,
                "stage={} check={} residual={} {}",
                stage.stage,
                c.name,
                fmt_f64(c.residual),
                if c.ok { "ok" } else { "VIOLATED" }
            )
            .map_err(w)?;
        }
        all_ok &= stage.ok();
    }
    writeln!(out, "{}", if all_ok { "all constraints within tolerance" } else { "violations found" }).map_err(w)?;
    Ok(if all_ok { EXIT_OK } else { EXIT_NUMERICAL })
}
