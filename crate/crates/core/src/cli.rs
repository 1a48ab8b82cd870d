//! Command-line front end: subcommand dispatch, output-directory policy and
//! exit codes (0 ok, 2 config, 3 solver, 4 check failure, 5 I/O).

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{
    contdep_study, convergence_study, energy_residual_study, eps_uniformity_study, hpqo_probe, obstacle_report,
    omega_limit_probe, random_smooth_samples, relaxation_limit_study, sigma_zero_operator_check,
    solve_relaxation_limit, strictly_decreasing, Axis, Check, StudyReport,
};
use crate::config::{RunConfig, Validated};
use crate::error::{Error, Result};
use crate::output::{fmt_f64, write_checks, write_run, write_study, write_suite, FileSet, Manifest, Status};
use crate::potentials::{coercivity_probe, PotentialKind, PotentialSpec};
use crate::selftest::{potentials_suite, spectral_suite, SEMIGROUP_TOL};
use crate::spectral::{apply_fractional, coeff_norm};
use crate::timestepper::{integrate, Scheme};

/// Output root used when `--out` is absent.
pub const OUT_ROOT_ENV: &str = "FRACPHASE_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "fracphase", version, about = "Spectral-Galerkin solver and verification harness for fractional phase-field systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for study fan-out (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML config, or a manifest.json to replay.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to a directory under $FRACPHASE_OUT_ROOT
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted-key override, e.g. `scheme.dt=5e-4` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SelftestArgs {
    /// Output directory; defaults to $FRACPHASE_OUT_ROOT/selftest
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random samples per potential kind.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Integrate one configuration and write time series and snapshots.
    Simulate(RunArgs),
    /// Convergence study along `study.axis`.
    Converge(RunArgs),
    /// Continuous dependence on theta0 perturbations.
    Contdep(RunArgs),
    /// Long-time run with stationarity diagnostics.
    Longtime(RunArgs),
    /// Fractional runs along a sigma ladder against the relaxation limit.
    Relaxlimit(RunArgs),
    /// Operator checks on the configured bases.
    Opcheck(RunArgs),
    /// Spectral and potential property suites.
    Selftest(SelftestArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Converge(_) => "converge",
            Command::Contdep(_) => "contdep",
            Command::Longtime(_) => "longtime",
            Command::Relaxlimit(_) => "relaxlimit",
            Command::Opcheck(_) => "opcheck",
            Command::Selftest(_) => "selftest",
        }
    }
}

pub fn status_of(e: &Error) -> Status {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::LengthMismatch { .. } => Status::ConfigError,
        Error::Io(_) => Status::IoError,
        _ => Status::SolverError,
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `--out` if given, else `<root>/<output.dir>`, else `<root>/<sub>-<hash prefix>`.
pub fn resolve_out(out: Option<&Path>, cfg: &RunConfig, sub: &str) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    match &cfg.output.dir {
        Some(d) => out_root().join(d),
        None => out_root().join(format!("{sub}-{}", &cfg.content_hash()[..12])),
    }
}

fn prefixed(study: &str, checks: &[Check]) -> Vec<Check> {
    checks
        .iter()
        .map(|c| Check::new(format!("{study}.{}", c.name), c.passed, c.detail.clone()))
        .collect()
}

fn record_study(files: &mut FileSet, m: &mut Manifest, report: &StudyReport) -> Result<()> {
    write_study(files, report)?;
    m.checks.extend(prefixed(&report.study, &report.checks));
    Ok(())
}

fn simulate(v: &Validated, files: &mut FileSet, m: &mut Manifest) -> Result<()> {
    let sc = v.config.scenario();
    let sys = sc.system()?;
    let init = sc.initial_state(&sys)?;
    m.tolerances.insert("fixed_point_tol".into(), sc.scheme.fixed_point_tol);
    let run = match integrate(&sys, &init, &sc.scheme, sc.t_final, sc.snapshot_stride) {
        Ok(run) => run,
        Err(fail) => {
            write_run(files, &sys, &fail.partial, v.config.output.grids)?;
            return Err(fail.error);
        }
    };
    write_run(files, &sys, &run, v.config.output.grids)?;
    let nonneg = run.series.iter().all(|r| r.energy.lhs_terms().iter().all(|t| *t >= 0.0));
    let max_res = run.series.iter().map(|r| r.energy.residual).fold(0.0, f64::max);
    m.checks.push(Check::new(
        "ledger_lhs_nonnegative",
        nonneg,
        format!("max balance residual {max_res:.4e}"),
    ));
    if sc.scheme.scheme == Scheme::ImplicitProx {
        m.checks.push(Check::new(
            "resolvent_residual",
            run.max_resolvent_residual <= sc.scheme.fixed_point_tol,
            format!("{:.4e}", run.max_resolvent_residual),
        ));
    }
    Ok(())
}

fn default_ladder(cfg: &RunConfig, axis: Axis) -> Vec<f64> {
    let sc = cfg.scenario();
    match axis {
        Axis::Dt => vec![sc.scheme.dt, sc.scheme.dt / 2.0, sc.scheme.dt / 4.0],
        Axis::Eps => (0..4).map(|k| sc.eps / 10f64.powi(k)).collect(),
        Axis::Sigma => vec![sc.sigma, sc.sigma / 2.0, sc.sigma / 4.0],
        Axis::NModes => {
            let n = sc.operator_a.n_modes.max(sc.operator_b.n_modes) as f64;
            vec![(n / 4.0).ceil(), (n / 2.0).ceil(), n]
        }
    }
}

fn converge(v: &Validated, files: &mut FileSet, m: &mut Manifest) -> Result<()> {
    let cfg = &v.config;
    let sc = cfg.scenario();
    let axis = cfg.study.axis;
    let values = if cfg.study.values.is_empty() {
        default_ladder(cfg, axis)
    } else {
        cfg.study.values.clone()
    };
    record_study(files, m, &convergence_study(&sc, axis, &values, cfg.study.reference)?)?;
    match axis {
        Axis::Dt => {
            m.tolerances.insert("residual_ratio_rel".into(), 0.15);
            record_study(files, m, &energy_residual_study(&sc, &values)?)?;
        }
        Axis::Eps => {
            m.tolerances.insert("ledger_sup_spread".into(), 0.1);
            record_study(files, m, &eps_uniformity_study(&sc, &values)?)?;
        }
        _ => {}
    }
    Ok(())
}

fn contdep(v: &Validated, files: &mut FileSet, m: &mut Manifest) -> Result<()> {
    let cfg = &v.config;
    m.tolerances.insert("ratio_spread".into(), 0.2);
    record_study(files, m, &contdep_study(&cfg.scenario(), cfg.study.mode, &cfg.study.deltas)?)
}

fn longtime(v: &Validated, files: &mut FileSet, m: &mut Manifest) -> Result<()> {
    let cfg = &v.config;
    let sc = cfg.scenario();
    let th = cfg.study.thresholds;
    m.tolerances.insert("tail".into(), th.tail);
    m.tolerances.insert("stationary".into(), th.stationary);
    m.tolerances.insert("theta".into(), th.theta);
    let pot = PotentialSpec::new(sc.potential.clone())?;
    let coerc = coercivity_probe(&pot, &[sc.eps], (-4.0, 4.0), 4001)?;
    m.checks.push(Check::new(
        "coercive_split",
        coerc.passed,
        format!("alpha = {:.4e}, c = {:.4e}", coerc.alpha, coerc.c),
    ));
    let sys = sc.system()?;
    let init = sc.initial_state(&sys)?;
    let run = match integrate(&sys, &init, &sc.scheme, sc.t_final, sc.snapshot_stride) {
        Ok(run) => run,
        Err(fail) => {
            write_run(files, &sys, &fail.partial, cfg.output.grids)?;
            return Err(fail.error);
        }
    };
    write_run(files, &sys, &run, cfg.output.grids)?;
    let rep = omega_limit_probe(&sys, &run, cfg.study.tail_fraction, &th)?;
    let rows = [
        ("tail_start", rep.tail_start),
        ("tail_sup_ar_theta", rep.tail_sup_ar_theta),
        ("tail_sup_dtphi", rep.tail_sup_dtphi),
        ("stationary_residual", rep.stationary_residual),
        ("final_ar_theta", rep.final_ar_theta),
        ("final_theta_norm", rep.final_theta_norm),
    ];
    files.write_csv(
        "omega.csv",
        &["quantity", "value"],
        rows.iter().map(|(k, v)| vec![k.to_string(), fmt_f64(*v)]),
    )?;
    m.checks.extend(prefixed("omega", &rep.checks));
    Ok(())
}

fn relaxlimit(v: &Validated, files: &mut FileSet, m: &mut Manifest) -> Result<()> {
    let cfg = &v.config;
    let sc = cfg.scenario();
    record_study(files, m, &relaxation_limit_study(&sc, &cfg.study.sigmas)?)?;
    if matches!(sc.potential, PotentialKind::DoubleObstacle { .. }) {
        let (_, run) = solve_relaxation_limit(&sc)?;
        let rep = obstacle_report(&run, 1e-12, 1e-12);
        let rows = [
            ("snapshots_checked", rep.snapshots_checked as f64),
            ("max_abs_phi", rep.max_abs_phi),
            ("upper_contacts", rep.upper_contacts as f64),
            ("lower_contacts", rep.lower_contacts as f64),
            ("upper_xi_min", rep.upper_xi_min),
            ("lower_xi_max", rep.lower_xi_max),
        ];
        files.write_csv(
            "obstacle.csv",
            &["quantity", "value"],
            rows.iter().map(|(k, v)| vec![k.to_string(), fmt_f64(*v)]),
        )?;
        m.checks.push(Check::new(
            "obstacle_signs",
            rep.passed,
            format!("max |phi| = {}, upper xi min = {}, lower xi max = {}", rep.max_abs_phi, rep.upper_xi_min, rep.lower_xi_max),
        ));
    }
    Ok(())
}

fn opcheck(v: &Validated, files: &mut FileSet, m: &mut Manifest) -> Result<()> {
    let cfg = &v.config;
    let sc = cfg.scenario();
    let (a, b) = sc.bases()?;
    m.tolerances.insert("gram".into(), 1e-10);
    m.tolerances.insert("closed_form".into(), 1e-12);
    m.tolerances.insert("semigroup".into(), SEMIGROUP_TOL);

    for (name, basis) in [("a", &a), ("b", &b)] {
        let dev = basis.gram_deviation();
        m.checks.push(Check::new(format!("gram_{name}"), dev <= 1e-10, format!("{dev:.3e}")));
    }

    let vs = random_smooth_samples(a.n_modes(), 100, 1.0, cfg.seed);
    let mut worst: f64 = 0.0;
    for (k, v) in vs.iter().enumerate() {
        let (p, q) = (0.1 + 0.8 * (k as f64 / 100.0), 0.35);
        let two = apply_fractional(&a, p, &apply_fractional(&a, q, v)?)?;
        let one = apply_fractional(&a, p + q, v)?;
        let d: Vec<f64> = two.iter().zip(&one).map(|(x, y)| x - y).collect();
        worst = worst.max(coeff_norm(&d) / coeff_norm(&one));
    }
    m.checks.push(Check::new("semigroup_a", worst <= SEMIGROUP_TOL, format!("{worst:.3e}")));

    let v0 = &random_smooth_samples(b.n_modes(), 1, 1.0, cfg.seed.wrapping_add(1))[0];
    let rows = sigma_zero_operator_check(&b, v0, &cfg.study.zero_sigmas)?;
    files.write_csv(
        "sigma_zero.csv",
        &["sigma", "computed", "closed_form", "abs_diff"],
        rows.iter().map(|r| {
            vec![
                fmt_f64(r.sigma),
                fmt_f64(r.computed),
                fmt_f64(r.closed_form()),
                fmt_f64((r.computed - r.closed_form()).abs()),
            ]
        }),
    )?;
    let max_diff = rows.iter().map(|r| (r.computed - r.closed_form()).abs()).fold(0.0, f64::max);
    m.checks.push(Check::new("sigma_zero_closed_form", max_diff <= 1e-12, format!("{max_diff:.3e}")));
    let computed: Vec<f64> = rows.iter().map(|r| r.computed).collect();
    let sigmas_decrease = strictly_decreasing(&cfg.study.zero_sigmas);
    m.checks.push(Check::new(
        "sigma_zero_decreasing",
        !sigmas_decrease || strictly_decreasing(&computed),
        format!("{computed:?}"),
    ));

    let pot = PotentialSpec::new(sc.potential.clone())?;
    let samples = random_smooth_samples(b.n_modes(), cfg.study.samples, 2.0, cfg.seed.wrapping_add(2));
    let hp = hpqo_probe(&b, sc.sigma, &pot, sc.eps, &samples)?;
    files.write_csv(
        "hpqo.csv",
        &["sample", "value"],
        hp.values.iter().enumerate().map(|(k, v)| vec![k.to_string(), fmt_f64(*v)]),
    )?;
    log::info!("hpqo probe: {} of {} samples negative (diagnostic)", hp.violations, hp.values.len());
    Ok(())
}

fn finish(mut m: Manifest, files: &mut FileSet, result: Result<()>, start: Instant, quiet: bool) -> i32 {
    match result {
        Ok(()) => {
            let ok = m.checks.iter().all(|c| c.passed);
            m.set_status(if ok { Status::Ok } else { Status::CheckFailed });
        }
        Err(e) => {
            log::error!("{e}");
            m.error = Some(e.to_string());
            m.set_status(status_of(&e));
        }
    }
    for c in m.checks.iter().filter(|c| !c.passed) {
        log::warn!("check {} failed: {}", c.name, c.detail);
    }
    if !m.checks.is_empty() {
        if let Err(e) = write_checks(files, "checks.csv", &m.checks) {
            log::error!("{e}");
            m.set_status(Status::IoError);
        }
    }
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = m.write(files) {
        log::error!("{e}");
        return Status::IoError.exit_code();
    }
    if !quiet {
        println!("{}: {:?} -> {}", m.subcommand, m.status, files.dir().display());
    }
    m.exit_code
}

type Body = fn(&Validated, &mut FileSet, &mut Manifest) -> Result<()>;

fn execute(name: &str, args: &RunArgs, body: Body, quiet: bool) -> i32 {
    let start = Instant::now();
    let mut m = Manifest::new(name);
    let validated = RunConfig::load(&args.config, &args.overrides).and_then(RunConfig::validate);
    let v = match validated {
        Ok(v) => v,
        Err(e) => {
            log::error!("{e}");
            m.error = Some(e.to_string());
            m.set_status(status_of(&e));
            if let Some(out) = &args.out {
                if let Ok(mut files) = FileSet::create(out) {
                    let _ = m.write(&mut files);
                }
            }
            return m.exit_code;
        }
    };
    for w in &v.warnings {
        log::warn!("{w}");
    }
    m.config_hash = Some(v.config.content_hash());
    m.config = Some(v.config.clone());
    m.warnings = v.warnings.clone();
    let dir = resolve_out(args.out.as_deref(), &v.config, name);
    let mut files = match FileSet::create(&dir) {
        Ok(f) => f,
        Err(e) => {
            log::error!("{e}");
            return Status::IoError.exit_code();
        }
    };
    let result = body(&v, &mut files, &mut m);
    finish(m, &mut files, result, start, quiet)
}

fn selftest(args: &SelftestArgs, quiet: bool) -> i32 {
    let start = Instant::now();
    let mut m = Manifest::new("selftest");
    m.tolerances.insert("gram".into(), crate::selftest::GRAM_TOL);
    m.tolerances.insert("semigroup".into(), SEMIGROUP_TOL);
    m.tolerances.insert("resolvent_residual".into(), crate::selftest::RESIDUAL_TOL);
    let dir = args.out.clone().unwrap_or_else(|| out_root().join("selftest"));
    let mut files = match FileSet::create(&dir) {
        Ok(f) => f,
        Err(e) => {
            log::error!("{e}");
            return Status::IoError.exit_code();
        }
    };
    let result = (|| {
        let mut rows = spectral_suite(args.seed)?;
        rows.extend(potentials_suite(args.seed, args.samples)?);
        write_suite(&mut files, "selftest.csv", &rows)?;
        for r in &rows {
            m.checks.push(Check::new(
                format!("{}.{}", r.suite, r.property),
                r.passed,
                format!("{} of {} violate, max error {:.3e}", r.violations, r.samples, r.max_error),
            ));
        }
        Ok(())
    })();
    finish(m, &mut files, result, start, quiet)
}

fn dispatch(cli: &Cli) -> i32 {
    let quiet = cli.quiet;
    match &cli.command {
        Command::Simulate(a) => execute("simulate", a, simulate, quiet),
        Command::Converge(a) => execute("converge", a, converge, quiet),
        Command::Contdep(a) => execute("contdep", a, contdep, quiet),
        Command::Longtime(a) => execute("longtime", a, longtime, quiet),
        Command::Relaxlimit(a) => execute("relaxlimit", a, relaxlimit, quiet),
        Command::Opcheck(a) => execute("opcheck", a, opcheck, quiet),
        Command::Selftest(a) => selftest(a, quiet),
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let level = if cli.quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let pool = match cli.jobs {
        Some(0) => {
            log::error!("--jobs must be at least 1");
            return Status::ConfigError.exit_code();
        }
        Some(k) => rayon::ThreadPoolBuilder::new().num_threads(k).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    match pool {
        Ok(pool) => pool.install(|| dispatch(&cli)),
        Err(e) => {
            log::error!("thread pool: {e}");
            Status::SolverError.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_repeated_overrides_and_globals() {
        let cli = Cli::try_parse_from([
            "fracphase", "simulate", "--config", "a.toml", "--override", "scheme.dt=1e-3", "--override",
            "seed=3", "--jobs", "2", "--quiet",
        ])
        .unwrap();
        assert_eq!(cli.jobs, Some(2));
        assert!(cli.quiet);
        match cli.command {
            Command::Simulate(a) => assert_eq!(a.overrides, vec!["scheme.dt=1e-3", "seed=3"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(status_of(&Error::config("k", "m")).exit_code(), 2);
        assert_eq!(
            status_of(&Error::Overflow { step: 1, t: 0.1, detail: String::new() }).exit_code(),
            3
        );
        assert_eq!(status_of(&Error::Io("x".into())).exit_code(), 5);
    }
}
