//! `mpic`: train vehicle models, run closed-loop scenarios, sweep horizon and
//! particle counts, and run the self-check suites.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use mpic_core::error::MpicError;
use mpic_core::mpicx::{run_closed_loop_partial, ClosedLoop, Controller, ControllerConfig};
use mpic_core::nss::{load_weights, parse_arch, save_weights, train, Sample, TrainingConfig};
use mpic_core::state::Dynamics;
use mpic_core::verify::{self, VerifyConfig};
use mpic_core::world::{generate_training_data, Bicycle, ExcitationConfig, Scenario, TraceSummary};

#[derive(Parser)]
#[command(name = "mpic", version, about = "Model predictive inferential control of neural vehicle models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a neural state-space model and write its weights.
    Train(TrainArgs),
    /// Run a scenario in closed loop.
    Simulate(SimArgs),
    /// Run every (H, N) combination of a scenario several times.
    Sweep(SweepArgs),
    /// Run the oracle suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    /// Random-walk excitation of the kinematic bicycle.
    Bicycle,
    /// Random states that never move.
    Zero,
}

#[derive(Args)]
struct TrainArgs {
    /// net1, net2, net3 or a layer list such as 6,8,4.
    #[arg(long, default_value = "net2")]
    arch: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Generated samples when no --data file is given.
    #[arg(long, default_value_t = 60_000)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = Dataset::Bicycle)]
    dataset: Dataset,
    /// JSON array of {x, u, x_next} samples.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ControlArgs {
    /// Fixture name (overtaking, braking) or a scenario JSON file.
    #[arg(long, default_value = "overtaking")]
    scenario: String,
    /// Weight file, or `bicycle` to plan with the exact plant model.
    #[arg(long)]
    model: String,
    /// Controller settings as JSON; the flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    no_warm_start: bool,
    /// Override the simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    ctl: ControlArgs,
    #[arg(long, short = 'H')]
    horizon: Option<usize>,
    #[arg(long, short = 'N')]
    particles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Leave wall-clock fields out so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    ctl: ControlArgs,
    #[arg(long, short = 'H', value_delimiter = ',', required = true)]
    horizons: Vec<usize>,
    #[arg(long, short = 'N', value_delimiter = ',', required = true)]
    particles: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// First seed; repetition `r` uses `seed + r`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Scale every smoother gain; anything but 1 must make the RTS suite fail.
    #[arg(long, default_value_t = 1.0, hide = true)]
    fault_rts_gain: f64,
}

enum Failure {
    Usage(String),
    Training(MpicError),
    Planning(MpicError),
    Verification,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Training(_) => 2,
            Failure::Planning(_) => 3,
            Failure::Verification => 4,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn zero_dataset(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = [rng.gen_range(0.0..100.0), rng.gen_range(-5.0..5.0), rng.gen_range(-0.5..0.5), rng.gen_range(0.0..20.0)];
            Sample { x, u: [rng.gen_range(-4.0..2.0), rng.gen_range(-0.3..0.3)], x_next: x }
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let arch = parse_arch(&a.arch).map_err(usage)?;
    let data = match &a.data {
        Some(p) => serde_json::from_slice::<Vec<Sample>>(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => match a.dataset {
            Dataset::Bicycle => generate_training_data(&ExcitationConfig::default(), a.samples, a.seed),
            Dataset::Zero => zero_dataset(a.samples, a.seed),
        },
    };
    let cfg = TrainingConfig { epochs: a.epochs, seed: a.seed, ..Default::default() };
    let (model, report) = train(&data, &arch, &cfg).map_err(|e| match e {
        MpicError::DivergedTraining { .. } => Failure::Training(e),
        e => usage(e),
    })?;
    write(&a.out.join("model.json"), save_weights(&model).map_err(usage)?)?;
    write(&a.out.join("training_report.json"), serde_json::to_string_pretty(&report).unwrap())?;
    println!("validation rmse {:?}", report.validation_rmse);
    Ok(())
}

fn merge(a: &mut Value, b: &Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b.clone(),
    }
}

fn load_scenario(ctl: &ControlArgs) -> CliResult<Scenario> {
    let mut sc = match Scenario::fixture(&ctl.scenario) {
        Some(sc) => sc,
        None => Scenario::from_json(&read(Path::new(&ctl.scenario))?).map_err(usage)?,
    };
    if let Some(d) = ctl.duration {
        sc.duration = d;
    }
    sc.validate().map_err(usage)?;
    Ok(sc)
}

fn base_config(ctl: &ControlArgs) -> CliResult<ControllerConfig> {
    let mut v = serde_json::to_value(ControllerConfig::default()).unwrap();
    if let Some(p) = &ctl.config {
        let patch: Value = serde_json::from_slice(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        merge(&mut v, &patch);
    }
    let mut cfg: ControllerConfig = serde_json::from_value(v).map_err(usage)?;
    cfg.deterministic |= ctl.deterministic;
    cfg.warm_start &= !ctl.no_warm_start;
    Ok(cfg)
}

enum Model {
    Bicycle(Bicycle),
    Nss(mpic_core::nss::NssModel),
}

fn load_model(ctl: &ControlArgs, sc: &Scenario) -> CliResult<Model> {
    if ctl.model == "bicycle" {
        return Ok(Model::Bicycle(Bicycle { dt: sc.dt, wheelbase: sc.wheelbase }));
    }
    let m = load_weights(&read(Path::new(&ctl.model))?).map_err(usage)?;
    if (m.dt - sc.dt).abs() > 1e-12 {
        return Err(usage(format!("model sample time {} differs from scenario dt {}", m.dt, sc.dt)));
    }
    Ok(Model::Nss(m))
}

fn closed_loop<D: Dynamics>(model: D, sc: &Scenario, cfg: ControllerConfig) -> CliResult<ClosedLoop> {
    let mut ctrl = Controller::new(model, sc.clone(), cfg).map_err(usage)?;
    Ok(run_closed_loop_partial(&mut ctrl))
}

fn run(model: &Model, sc: &Scenario, cfg: ControllerConfig) -> CliResult<ClosedLoop> {
    match model {
        Model::Bicycle(m) => closed_loop(*m, sc, cfg),
        Model::Nss(m) => closed_loop(m.clone(), sc, cfg),
    }
}

#[derive(Serialize)]
struct Metrics {
    steps: usize,
    total_cost: f64,
    min_ov_dist: f64,
    max_violation: f64,
    violation_steps: usize,
    resamples: usize,
    final_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_plan_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p95_plan_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl Metrics {
    fn new(s: &TraceSummary, timing: bool, error: Option<&MpicError>) -> Self {
        Metrics {
            steps: s.steps,
            total_cost: s.total_cost,
            min_ov_dist: s.min_ov_dist,
            max_violation: s.max_violation,
            violation_steps: s.violation_steps,
            resamples: s.resamples,
            final_v: s.final_state.map(|f| f.v),
            mean_plan_ms: timing.then_some(s.mean_plan_ms),
            p95_plan_ms: timing.then_some(s.p95_plan_ms),
            error: error.map(|e| e.to_string()),
        }
    }
}

fn cmd_simulate(a: SimArgs) -> CliResult<()> {
    let sc = load_scenario(&a.ctl)?;
    let model = load_model(&a.ctl, &sc)?;
    let mut cfg = base_config(&a.ctl)?;
    cfg.seed = a.seed;
    cfg.horizon = a.horizon.or(cfg.horizon);
    cfg.particles = a.particles.unwrap_or(cfg.particles);
    let out = run(&model, &sc, cfg)?;
    let timing = !a.no_timing;
    let summary = out.trace.summary();
    write(&a.out.join("trace.csv"), out.trace.to_csv(timing))?;
    let metrics = Metrics::new(&summary, timing, out.error.as_ref());
    write(&a.out.join("metrics.json"), serde_json::to_string_pretty(&metrics).unwrap() + "\n")?;
    if a.plot {
        let road = sc.road().map_err(usage)?;
        for (name, svg) in plot::trace_plots(&out.trace, &sc, &road) {
            write(&a.out.join(name), svg)?;
        }
    }
    println!(
        "{}: {} steps, cost {:.2}, min obstacle distance {:.3} m, max violation {:.3}",
        sc.name, summary.steps, summary.total_cost, summary.min_ov_dist, summary.max_violation
    );
    match out.error {
        Some(e) => Err(Failure::Planning(e)),
        None => Ok(()),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
    (m, var.sqrt())
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    if a.reps == 0 {
        return Err(usage("--reps must be positive"));
    }
    let sc = load_scenario(&a.ctl)?;
    let model = load_model(&a.ctl, &sc)?;
    let base = base_config(&a.ctl)?;
    let mut csv = String::from("H,N,mean_cost,mean_time,std_time,failures\n");
    for &h in &a.horizons {
        for &n in &a.particles {
            let (mut costs, mut times, mut failures) = (Vec::new(), Vec::new(), 0);
            for r in 0..a.reps {
                let cfg = ControllerConfig { horizon: Some(h), particles: n, seed: a.seed + r as u64, ..base.clone() };
                let out = run(&model, &sc, cfg)?;
                if out.error.is_some() {
                    failures += 1;
                    continue;
                }
                costs.push(out.trace.summary().total_cost);
                times.extend(out.trace.rows.iter().map(|r| r.plan_seconds));
            }
            let (mc, _) = mean_std(&costs);
            let (mt, st) = mean_std(&times);
            info!("H={h} N={n}: cost {mc:.3}, {:.1} ms/step, {failures} failed", mt * 1e3);
            csv.push_str(&format!("{h},{n},{mc:.6},{mt:.6},{st:.6},{failures}\n"));
        }
    }
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let report = verify::run(&VerifyConfig { seed: a.seed, rts_gain_scale: a.fault_rts_gain, ..Default::default() });
    let json = serde_json::to_string_pretty(&report).unwrap() + "\n";
    match &a.report {
        Some(p) => write(p, &json)?,
        None => print!("{json}"),
    }
    for s in &report.suites {
        eprintln!("{:<14} {}", s.name, if s.passed { "PASS" } else { "FAIL" });
        for c in s.failures() {
            eprintln!("  {}/{}: value {:e} tolerance {:e} {}", s.name, c.name, c.value, c.tolerance, c.error.as_deref().unwrap_or(""));
        }
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MPIC_THREADS") {
        let n: usize = v.parse().map_err(|_| usage(format!("MPIC_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(usage)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}\n\nRun `mpic --help` for usage."),
                Failure::Training(e) | Failure::Planning(e) => eprintln!("error: {e}"),
                Failure::Verification => eprintln!("error: verification failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
