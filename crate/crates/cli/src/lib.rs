//! File-to-file pipeline stages: generate, lift, train-psn, train-sympnet,
//! rollout and verify.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use psn_core::dataio::{
    self, fmt_f64, generate_dataset, lifted_coordinate_names, load_lifted, load_trajectories,
    load_weights, save_lifted, save_metrics, save_trajectories, save_weights, ModelKind, RunConfig,
    Sidecar, WeightArchive, RAW_FORMAT,
};
use psn_core::geometry::{dirac_lift, extended_hamiltonian, gauge_residual, LiftedShape};
use psn_core::integrators::LiftedTrajectory;
use psn_core::nets::{Model, PsnParams, SympNetParams};
use psn_core::systems::{self, PendulumOnCircle, SystemSpec};
use psn_core::training::{
    rollout_windows, train_psn, train_sympnet, EpochMetrics, P0Source, RolloutSummary, TrainConfig,
    TrainReport,
};
use psn_core::verify::{run_suite, SuiteInputs};
use psn_core::{par, Error, Exec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "psn",
    version,
    about = "Dirac-lift data, training and verification pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress the summary printed on success.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate the configured system and write a trajectory CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the Dirac lift to a trajectory CSV.
    Lift {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV written by `generate`.
        #[arg(long)]
        input: PathBuf,
        /// Lifted CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recurrent flow-matching encoder for the clock momentum.
    TrainPsn {
        #[command(flatten)]
        common: Common,
        /// Lifted CSV.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for `psn.bin` and `psn_metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the SympNet step predictor on encoder-estimated clock momenta.
    TrainSympnet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Frozen encoder archive; defaults to `<out>/psn.bin`.
        #[arg(long)]
        psn: Option<PathBuf>,
        /// Output directory for `sympnet.bin` and `sympnet_metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll the predictor out on lifted data and score it.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// SympNet archive.
        #[arg(long)]
        sympnet: PathBuf,
        /// Encoder archive supplying `p0` at each window start. Without it
        /// the gauge value from the data is used.
        #[arg(long)]
        psn: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Windows per trajectory.
        #[arg(long, default_value_t = 1)]
        windows: usize,
        /// Predicted-vs-actual CSV; metrics go to `<out stem>.metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suites and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// SympNet archive to certify; a freshly initialized net is used otherwise.
        #[arg(long)]
        sympnet: Option<PathBuf>,
        /// Restrict to the named checks (repeatable).
        #[arg(long = "check")]
        checks: Vec<String>,
    },
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if matches!(e, Error::Config(_)) {
            EXIT_USAGE
        } else {
            EXIT_DATA
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
/// Output goes to `out`, diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    let mut report = String::new();
    let result = dispatch(cli.command, &mut report, err);
    match result {
        Ok(quiet) => {
            if !quiet {
                let _ = write!(out, "{report}");
            }
            EXIT_OK
        }
        Err(f) => {
            let _ = write!(out, "{report}");
            let _ = writeln!(err, "ERR {}", f.message.replace('\n', " "));
            f.code
        }
    }
}

/// Runs the command, returning whether output should be suppressed.
fn dispatch(
    cmd: Command,
    report: &mut String,
    err: &mut dyn std::io::Write,
) -> std::result::Result<bool, Failure> {
    let quiet = match &cmd {
        Command::Generate { common, .. }
        | Command::Lift { common, .. }
        | Command::TrainPsn { common, .. }
        | Command::TrainSympnet { common, .. }
        | Command::Rollout { common, .. }
        | Command::Verify { common, .. } => common.quiet,
    };
    match cmd {
        Command::Generate { common, out } => cmd_generate(&common, &out, report),
        Command::Lift { common, input, out } => cmd_lift(&common, &input, &out, report),
        Command::TrainPsn { common, input, out } => {
            cmd_train_psn(&common, &input, &out, report, err)
        }
        Command::TrainSympnet {
            common,
            input,
            psn,
            out,
        } => {
            let psn = psn.unwrap_or_else(|| out.join("psn.bin"));
            cmd_train_sympnet(&common, &input, &psn, &out, report, err)
        }
        Command::Rollout {
            common,
            sympnet,
            psn,
            input,
            horizon,
            windows,
            out,
        } => cmd_rollout(
            &common,
            &RolloutArgs {
                sympnet: &sympnet,
                psn: psn.as_deref(),
                input: &input,
                horizon,
                windows,
                out: &out,
            },
            report,
            err,
        ),
        Command::Verify {
            common,
            sympnet,
            checks,
        } => cmd_verify(&common, sympnet.as_deref(), &checks, report),
    }?;
    Ok(quiet)
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::usage("this command needs --config PATH"))?;
    let cfg = RunConfig::load(path)?;
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn optional_config(common: &Common) -> std::result::Result<Option<RunConfig>, Failure> {
    match common.config {
        Some(_) => load_config(common).map(Some),
        None => Ok(None),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn create_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn warn(err: &mut dyn std::io::Write, msg: &str) {
    let _ = writeln!(err, "warning: {msg}");
}

fn cmd_generate(common: &Common, out: &Path, report: &mut String) -> CmdResult {
    let cfg = load_config(common)?;
    create_dir(out)?;
    let gen = generate_dataset(&cfg, Exec::default())?;
    let residuals: Vec<f64> = gen.iter().map(|g| g.bookkeeping_residual()).collect();
    let trajs: Vec<_> = gen.into_iter().map(|g| g.trajectory).collect();
    let path = out.join("trajectories.csv");
    let sidecar = Sidecar::new(RAW_FORMAT, &cfg, cfg.trajectory_seeds());
    save_trajectories(&path, &trajs, &sidecar)?;
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    let mean = residuals.iter().sum::<f64>() / residuals.len().max(1) as f64;
    let _ = writeln!(
        report,
        "wrote {} trajectories of {} samples to {}",
        trajs.len(),
        cfg.integrator.steps + 1,
        path.display()
    );
    let _ = writeln!(
        report,
        "energy bookkeeping residual: mean {mean:.3e}, max {worst:.3e}"
    );
    Ok(())
}

fn cmd_lift(common: &Common, input: &Path, out: &Path, report: &mut String) -> CmdResult {
    let (trajs, meta) = load_trajectories(input)?;
    if let Some(cfg) = optional_config(common)? {
        if cfg.system != meta.system {
            return Err(Failure::data(format!(
                "{} was generated for a different system than the configuration describes",
                input.display()
            )));
        }
    }
    let sys = meta.system.build();
    let lifted: Vec<LiftedTrajectory> = par::map(Exec::default(), &trajs, |t| {
        dirac_lift(t, sys.as_ref()).map_err(|e| e.in_trajectory(t.meta.id))
    })
    .into_iter()
    .collect::<psn_core::Result<_>>()?;
    let (mut gauge, mut drift, mut max_h) = (0.0f64, 0.0f64, 0.0f64);
    for t in &lifted {
        let h0 = extended_hamiltonian(&t.points[0], sys.as_ref())?;
        for z in &t.points {
            let g = gauge_residual(z, sys.as_ref())?;
            gauge = gauge.max(g.r0.abs()).max(g.r_pi);
            drift = drift.max((extended_hamiltonian(z, sys.as_ref())? - h0).abs());
            max_h = max_h.max(systems::hamiltonian(sys.as_ref(), &z.q, &z.p)?.abs());
        }
    }
    create_parent(out)?;
    save_lifted(out, &lifted, &Sidecar { ..meta })?;
    let _ = writeln!(
        report,
        "lifted {} trajectories to {}",
        lifted.len(),
        out.display()
    );
    let _ = writeln!(report, "max gauge residual: {gauge:.3e}");
    let _ = writeln!(
        report,
        "max extended-Hamiltonian drift: {drift:.3e} (max |H| = {max_h:.3e})"
    );
    Ok(())
}

fn check_fingerprint(meta: &Sidecar, cfg: &RunConfig, what: &Path, err: &mut dyn std::io::Write) {
    if meta.config_fingerprint != cfg.fingerprint() {
        warn(
            err,
            &format!(
                "{} was produced under a different configuration",
                what.display()
            ),
        );
    }
}

fn load_dataset(
    input: &Path,
    cfg: &RunConfig,
    err: &mut dyn std::io::Write,
) -> std::result::Result<(Vec<LiftedTrajectory>, Sidecar), Failure> {
    let (trajs, meta) = load_lifted(input)?;
    if meta.system != cfg.system {
        return Err(Failure::data(format!(
            "{} holds data for a different system than the configuration describes",
            input.display()
        )));
    }
    check_fingerprint(&meta, cfg, input, err);
    Ok((trajs, meta))
}

fn write_history<M>(
    report: &mut String,
    name: &str,
    rep: &TrainReport<M>,
    metrics: &Path,
) -> CmdResult {
    save_metrics(metrics, &rep.history, false)?;
    let best: &EpochMetrics = &rep.history[rep.best_epoch];
    let _ = writeln!(
        report,
        "{name}: {} epochs, best epoch {} (val loss {:.6e}, train loss {:.6e})",
        rep.history.len(),
        best.epoch,
        best.val_loss,
        best.train_loss
    );
    if rep.skipped > 0 {
        let _ = writeln!(report, "{name}: skipped {} non-finite batches", rep.skipped);
    }
    Ok(())
}

fn cmd_train_psn(
    common: &Common,
    input: &Path,
    out: &Path,
    report: &mut String,
    err: &mut dyn std::io::Write,
) -> CmdResult {
    let cfg = load_config(common)?;
    let (trajs, _) = load_dataset(input, &cfg, err)?;
    create_dir(out)?;
    let rep = train_psn(&trajs, cfg.model.hidden, &cfg.train_psn)?;
    let archive = WeightArchive::new(ModelKind::Psn, cfg.fingerprint(), rep.params.to_tensors());
    let weights = out.join("psn.bin");
    save_weights(&weights, &archive)?;
    write_history(report, "psn", &rep, &out.join("psn_metrics.csv"))?;
    let _ = writeln!(report, "wrote {}", weights.display());
    Ok(())
}

fn load_psn(
    path: &Path,
    cfg: Option<&RunConfig>,
    err: &mut dyn std::io::Write,
) -> std::result::Result<PsnParams, Failure> {
    let archive = load_weights(path, Some(ModelKind::Psn))?;
    if let Some(w) = cfg.and_then(|c| archive.fingerprint_warning(&c.fingerprint())) {
        warn(err, &w);
    }
    Ok(PsnParams::from_tensors(&archive.tensors)?)
}

fn load_sympnet(
    path: &Path,
    cfg: Option<&RunConfig>,
    err: &mut dyn std::io::Write,
) -> psn_core::Result<SympNetParams> {
    let archive = load_weights(path, Some(ModelKind::SympNet))?;
    if let Some(w) = cfg.and_then(|c| archive.fingerprint_warning(&c.fingerprint())) {
        warn(err, &w);
    }
    SympNetParams::from_tensors(&archive.tensors)
}

fn read_bytes(path: &Path) -> std::result::Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Error::io(path, e).into())
}

fn cmd_train_sympnet(
    common: &Common,
    input: &Path,
    psn_path: &Path,
    out: &Path,
    report: &mut String,
    err: &mut dyn std::io::Write,
) -> CmdResult {
    let cfg = load_config(common)?;
    let (trajs, _) = load_dataset(input, &cfg, err)?;
    let before = read_bytes(psn_path)?;
    let psn = load_psn(psn_path, Some(&cfg), err)?;
    create_dir(out)?;
    let source = P0Source::Psn {
        params: &psn,
        context: cfg.train_psn.context,
    };
    let rep = train_sympnet(
        &trajs,
        source,
        cfg.model.sympnet_modules,
        cfg.model.sympnet_width,
        &cfg.train_sympnet,
    )?;
    if read_bytes(psn_path)? != before {
        return Err(Failure {
            code: EXIT_INTERNAL,
            message: format!("{} changed during SympNet training", psn_path.display()),
        });
    }
    let archive = WeightArchive::new(
        ModelKind::SympNet,
        cfg.fingerprint(),
        rep.params.to_tensors(),
    );
    let weights = out.join("sympnet.bin");
    save_weights(&weights, &archive)?;
    write_history(report, "sympnet", &rep, &out.join("sympnet_metrics.csv"))?;
    let _ = writeln!(report, "wrote {}", weights.display());
    Ok(())
}

struct RolloutArgs<'a> {
    sympnet: &'a Path,
    psn: Option<&'a Path>,
    input: &'a Path,
    horizon: usize,
    windows: usize,
    out: &'a Path,
}

/// Path of the metrics block written next to a rollout CSV.
pub fn metrics_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.metrics.csv"))
}

fn cmd_rollout(
    common: &Common,
    args: &RolloutArgs<'_>,
    report: &mut String,
    err: &mut dyn std::io::Write,
) -> CmdResult {
    let cfg = optional_config(common)?;
    let context = cfg
        .as_ref()
        .map_or(TrainConfig::default().context, |c| c.train_psn.context);
    if args.horizon == 0 || args.windows == 0 {
        return Err(Failure::usage("--horizon and --windows must be at least 1"));
    }
    let (trajs, meta) = load_lifted(args.input)?;
    let net = load_sympnet(args.sympnet, cfg.as_ref(), err)?;
    let psn = args
        .psn
        .map(|p| load_psn(p, cfg.as_ref(), err))
        .transpose()?;
    let start = if psn.is_some() { context - 1 } else { 0 };
    let shortest = trajs.iter().map(|t| t.len()).min().unwrap_or(0);
    if start + args.horizon >= shortest {
        return Err(Failure::usage(format!(
            "horizon {} from step {start} does not fit the shortest trajectory ({shortest} samples)",
            args.horizon
        )));
    }
    let sys = meta.system.build();
    let shape = LiftedShape::of(sys.as_ref());
    if net.dim() != shape.dim() {
        return Err(Failure::data(format!(
            "SympNet acts on {} coordinates but the data is {}-dimensional",
            net.dim(),
            shape.dim()
        )));
    }
    let windows = rollout_windows(
        &net,
        psn.as_ref().map(|p| (p, context)),
        &trajs,
        args.horizon,
        args.windows,
        sys.as_ref(),
        Exec::default(),
    )?;
    let summary = RolloutSummary::from_windows(&windows, sys.as_ref())?;

    let names = lifted_coordinate_names(shape);
    let per_traj = windows.len() / trajs.len().max(1);
    let mut rows = String::from("traj_id,window,k,t,coordinate,predicted,actual\n");
    for (w, m) in windows.iter().enumerate() {
        let (id, window) = (w / per_traj.max(1), w % per_traj.max(1));
        let k0 = start + window * args.horizon;
        for (j, (p, a)) in m.predicted.iter().zip(&m.actual).enumerate() {
            for (name, (x, y)) in names.iter().zip(p.flatten().iter().zip(a.flatten())) {
                let _ = writeln!(
                    rows,
                    "{id},{window},{},{},{name},{},{}",
                    k0 + j,
                    fmt_f64(a.q0),
                    fmt_f64(*x),
                    fmt_f64(y)
                );
            }
        }
    }
    create_parent(args.out)?;
    fs::write(args.out, rows).map_err(|e| Error::io(args.out, e))?;

    let mut metrics = vec![
        ("windows".to_string(), summary.windows as f64),
        ("horizon".to_string(), args.horizon as f64),
        ("p0_rmse".to_string(), summary.p0_rmse),
        ("p0_max_error".to_string(), summary.p0_max_error),
        ("hamiltonian_drift".to_string(), summary.hamiltonian_drift),
        ("constraint_drift".to_string(), summary.constraint_drift),
        ("gauge_residual".to_string(), summary.gauge_residual),
        ("max_energy".to_string(), summary.max_energy),
    ];
    for (i, name) in names.iter().enumerate() {
        metrics.push((format!("rmse_{name}"), summary.coord_rmse[i]));
        metrics.push((format!("range_{name}"), summary.coord_range[i]));
    }
    let mut block = String::from("metric,value\n");
    for (k, v) in &metrics {
        let _ = writeln!(block, "{k},{}", fmt_f64(*v));
    }
    let mpath = metrics_path(args.out);
    fs::write(&mpath, block).map_err(|e| Error::io(&mpath, e))?;

    let _ = writeln!(
        report,
        "{} windows of {} steps",
        summary.windows, args.horizon
    );
    for (k, v) in &metrics[2..8] {
        let _ = writeln!(report, "{k:<20} {v:.6e}");
    }
    let _ = writeln!(
        report,
        "{:<20} {:>14} {:>14}",
        "coordinate", "rmse", "range"
    );
    for (i, name) in names.iter().enumerate() {
        let _ = writeln!(
            report,
            "{name:<20} {:>14.6e} {:>14.6e}",
            summary.coord_rmse[i], summary.coord_range[i]
        );
    }
    let _ = writeln!(
        report,
        "wrote {} and {}",
        args.out.display(),
        mpath.display()
    );
    Ok(())
}

fn default_system() -> SystemSpec {
    SystemSpec::PendulumOnCircle(PendulumOnCircle {
        mass: 1.0,
        length: 1.0,
        gravity: 9.81,
        damping: 0.1,
    })
}

fn cmd_verify(
    common: &Common,
    sympnet: Option<&Path>,
    only: &[String],
    report: &mut String,
) -> CmdResult {
    let cfg = optional_config(common)?;
    let spec = cfg
        .as_ref()
        .map_or_else(default_system, |c| c.system.clone());
    let sys = spec.build();
    let dt = cfg.as_ref().map_or(0.01, |c| c.integrator.dt);
    let seed = common
        .seed
        .or(cfg.as_ref().map(|c| c.dataset.seed))
        .unwrap_or(0);
    let mut sink = std::io::sink();
    let loaded = match sympnet {
        Some(p) => load_sympnet(p, cfg.as_ref(), &mut sink),
        None => {
            let shape = LiftedShape::of(sys.as_ref());
            let model = cfg.as_ref().map(|c| c.model.clone()).unwrap_or_default();
            Ok(SympNetParams::init(
                shape.positions(),
                model.sympnet_modules,
                model.sympnet_width,
                &mut dataio::seeded_rng(seed),
            ))
        }
    };
    let inputs = SuiteInputs {
        system: sys.as_ref(),
        sympnet: Some(loaded.as_ref()),
        dt,
        seed,
        exec: Exec::default(),
    };
    let mut checks = run_suite(&inputs);
    if !only.is_empty() {
        let unknown: Vec<&String> = only
            .iter()
            .filter(|n| !checks.iter().any(|c| &c.name == *n))
            .collect();
        if !unknown.is_empty() {
            let known: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
            return Err(Failure::usage(format!(
                "unknown check {:?}; available: {}",
                unknown,
                known.join(", ")
            )));
        }
        checks.retain(|c| only.contains(&c.name));
    }
    let _ = writeln!(
        report,
        "{:<28} {:>12} {:>12}  status",
        "check", "residual", "tolerance"
    );
    for c in &checks {
        let _ = writeln!(
            report,
            "{:<28} {:>12.3e} {:>12.3e}  {}{}",
            c.name,
            c.residual,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" },
            if c.detail.is_empty() {
                String::new()
            } else {
                format!("  ({})", c.detail)
            }
        );
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::data(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

/// Runs `run` with process arguments and stdio, turning panics into the
/// internal-error exit code.
pub fn main_entry() -> i32 {
    let outcome = std::panic::catch_unwind(|| {
        let stdout = std::io::stdout();
        let stderr = std::io::stderr();
        let (mut out, mut err) = (stdout.lock(), stderr.lock());
        let code = run(std::env::args_os(), &mut out, &mut err);
        let _ = out.flush();
        code
    });
    outcome.unwrap_or_else(|_| {
        eprintln!("ERR internal error");
        EXIT_INTERNAL
    })
}
