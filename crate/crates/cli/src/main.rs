use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use laa_bench::{builtin_case, find, registry, run_bench, run_methods, BenchPlan, Method, Scenario, Settings, ARTIFACTS};
use laa_bench::scenario::GainEntry;
use laa_core::attack::{AttackConfig, AttackSpec};
use laa_core::dynamics::{detect_breach, equilibrium_state, integrate, SimOptions};
use laa_core::grid::{equilibrium_residual, load_case, GridModel};
use laa_core::optim::StopRule;
use laa_core::pinn::{identify as pinn_identify, pretrain, OptimizerKind};
use laa_core::pmu::{MeasurementSet, NoiseFamily, NoiseSpec};
use laa_core::sr::identify_all;
use laa_core::ukf::{run_ukf_tolerant, UkfConfig, UkfMode};
use laa_core::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(
    name = "laa",
    version,
    about = "Simulate and identify IoT load-altering attacks on power grids",
    after_help = "Settings precedence: command-line flags > --config file > registry defaults."
)]
struct Cli {
    /// Seed base for noise synthesis and network initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LAA_OUT", default_value = "out")]
    out: PathBuf,
    /// Format of the summary printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// JSON file with `scenario` and/or `settings` overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the attacked swing dynamics and report the first 2 Hz breach.
    Simulate(SimulateArgs),
    /// Identify attack parameters from measurements.
    Estimate(EstimateArgs),
    /// Run the benchmark suite and write table/figure CSVs.
    Bench(BenchArgs),
    /// Parse and check a case file.
    ValidateCase { path: PathBuf },
    /// List the named scenarios.
    Scenarios,
}

#[derive(Args, Debug)]
struct Source {
    /// Named scenario from the registry.
    #[arg(long)]
    scenario: Option<String>,
    /// Case id (ieee39, ieee39-a, ieee39-b, ieee6) or case file path.
    #[arg(long)]
    case: Option<String>,
    /// Attack JSON file (victim/sensing/gain triples and steps).
    #[arg(long)]
    attack: Option<PathBuf>,
    /// Drop the attack entirely.
    #[arg(long)]
    no_attack: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    /// Simulated duration in seconds (defaults to the scenario window end).
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Sr,
    Pinn,
    PinnPretrained,
    Ukf,
    UkfFull,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Lbfgs,
    Adam,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    /// Observation window end in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Observation window start in seconds.
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Iteration cap for PINN training.
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Victim bus whose row the single-row UKF filters.
    #[arg(long)]
    victim: Option<usize>,
    /// Measurement stem (`<stem>.csv` + `<stem>.json`) instead of a fresh simulation.
    #[arg(long)]
    measurements: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Produce every table and figure (the default without --scenario).
    #[arg(long, conflicts_with = "scenario")]
    all: bool,
    /// Run one named scenario and write `<id>-summary.csv`.
    #[arg(long)]
    scenario: Option<String>,
    /// Estimators for --scenario.
    #[arg(long, value_delimiter = ',', default_value = "sr,pinn,ukf-row,ukf-full")]
    estimators: Vec<String>,
    /// Repetitions for SR (and for every estimator under --scenario).
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long)]
    pinn_reps: Option<usize>,
    #[arg(long)]
    ukf_reps: Option<usize>,
    #[arg(long)]
    ukf_full_reps: Option<usize>,
    /// Comma-separated subset of table1,table2,table3,fig4,fig5,fig6,fig7.
    #[arg(long, value_delimiter = ',', conflicts_with = "scenario")]
    only: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Estimate(a) => estimate(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::ValidateCase { path } => validate_case(cli, path),
        Command::Scenarios => {
            let rows: Vec<Value> = registry()
                .iter()
                .map(|s| json!({ "id": s.id, "regime": s.regime.tag(), "t0": s.window[0], "t1": s.window[1], "noise": format!("{:?}", s.noise.family), "sigma": s.noise.sigma }))
                .collect();
            print(cli, &rows)
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json")).map_err(io_err(path))
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Print rows of flat JSON objects as CSV (header from the first row) or as
/// JSON (a bare object when there is one row).
fn print(cli: &Cli, rows: &[Value]) -> Result<()> {
    match cli.format {
        Format::Json => {
            let v = if rows.len() == 1 { rows[0].clone() } else { Value::Array(rows.to_vec()) };
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let Some(Value::Object(first)) = rows.first() else { return Ok(()) };
            let keys: Vec<&String> = first.keys().collect();
            w.write_record(&keys).map_err(|e| Error::Parse(e.to_string()))?;
            for r in rows {
                w.write_record(keys.iter().map(|k| cell(&r[k.as_str()]))).map_err(|e| Error::Parse(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    Ok(())
}

/// Overlay `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn read_config(cli: &Cli) -> Result<Value> {
    let Some(path) = &cli.config else { return Ok(Value::Null) };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if let Value::Object(map) = &v {
        if let Some(k) = map.keys().find(|k| *k != "scenario" && *k != "settings") {
            return Err(Error::Invalid(format!("{}: unknown config key `{k}`", path.display())));
        }
        Ok(v)
    } else {
        Err(Error::Invalid(format!("{}: config must be a JSON object", path.display())))
    }
}

fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(value: &T, patch: &Value, what: &str) -> Result<T> {
    if patch.is_null() {
        return serde_json::from_value(serde_json::to_value(value).expect("json")).map_err(|e| Error::Parse(e.to_string()));
    }
    let mut v = serde_json::to_value(value).expect("json");
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| Error::Invalid(format!("config {what}: {e}")))
}

/// Resolve the scenario, model and attack implied by the source flags and
/// the config file.
fn resolve(source: &Source, config: &Value) -> Result<(Scenario, GridModel, AttackConfig)> {
    let mut scenario = match &source.scenario {
        Some(id) => find(id)?,
        None => find("ieee39-fast-single")?,
    };
    scenario = overlay(&scenario, &config["scenario"], "scenario")?;
    if let Some(case) = &source.case {
        scenario.case = case.clone();
        if source.scenario.is_none() {
            scenario.id = format!("{}-custom", case.replace(['/', '.'], "_"));
        }
    }
    let model = builtin_case(&scenario.case)?;
    let attack = if source.no_attack {
        AttackConfig::none(&model, scenario.sensing_buses(&model))?
    } else if let Some(path) = &source.attack {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let spec: AttackSpec = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        AttackConfig::from_spec(&model, &spec)?
    } else if source.scenario.is_none() && source.case.is_some() {
        return Err(Error::Invalid("a custom case needs --attack FILE or --no-attack".into()));
    } else {
        scenario.attack(&model)?
    };
    // keep the scenario in step with an attack given on the command line
    scenario.sensing = attack.sensing_buses().to_vec();
    scenario.gains.clear();
    scenario.steps.clear();
    for (r, &victim) in model.load_buses().iter().enumerate() {
        for (c, &sensing) in attack.sensing_buses().iter().enumerate() {
            let gain = attack.gains()[(r, c)];
            if gain != 0.0 {
                scenario.gains.push(GainEntry { victim, sensing, gain });
            }
        }
        if attack.static_step()[r] != 0.0 {
            scenario.steps.push((victim, attack.static_step()[r]));
        }
    }
    Ok((scenario, model, attack))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let config = read_config(cli)?;
    let (scenario, model, attack) = resolve(&a.source, &config)?;
    let t1 = a.duration.unwrap_or(scenario.window[1]);
    if !(t1 > 0.0 && t1.is_finite()) {
        return Err(Error::Invalid("duration must be positive".into()));
    }
    let x0 = equilibrium_state(&model)?;
    let out = integrate(&model, &attack, &x0, 0.0, t1, &SimOptions::default())?;
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let traj_path = cli.out.join("trajectory.csv");
    out.trajectory.write_csv(create(&traj_path)?).map_err(io_err(&traj_path))?;
    let limit = model.max_freq_dev_hz();
    let report = match detect_breach(&out.trajectory, limit) {
        Some(b) => json!({ "breach": "yes", "time_s": b.time, "bus": b.bus, "limit_hz": limit, "duration_s": t1 }),
        None => json!({ "breach": "none", "time_s": null, "bus": null, "limit_hz": limit, "duration_s": t1 }),
    };
    write_json(&cli.out.join("breach.json"), &report)?;
    print(cli, &[report])
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    let config = read_config(cli)?;
    let (mut scenario, model, truth) = resolve(&a.source, &config)?;
    if let Some(t1) = a.window {
        scenario.window[1] = t1;
    }
    if let Some(t0) = a.t0 {
        scenario.window[0] = t0;
    }
    if let Some(seed) = cli.seed {
        scenario.seed_base = seed;
    }
    if let Some(family) = &a.noise {
        scenario.noise.family = family.parse::<NoiseFamily>()?;
    }
    if let Some(sigma) = a.sigma {
        scenario.noise.sigma = sigma;
    }
    if scenario.noise.family == NoiseFamily::None {
        scenario.noise = NoiseSpec::none();
    }
    scenario.validate(&model)?;

    let mut settings = overlay(&Settings::default(), &config["settings"], "settings")?;
    if let Some(l) = a.lambda {
        settings.sr.lasso.lambda = l;
    }
    if let Some(al) = a.alpha {
        settings.pinn.alpha = al;
    }
    if let Some(opt) = a.optimizer {
        settings.pinn.optimizer = match opt {
            OptimizerArg::Lbfgs => OptimizerKind::Lbfgs,
            OptimizerArg::Adam => OptimizerKind::Adam,
        };
    }
    if let Some(n) = a.max_iters {
        settings.pinn.lbfgs.stop = StopRule { max_iters: n, ..settings.pinn.lbfgs.stop };
        settings.pinn.adam.stop = StopRule { max_iters: n, ..settings.pinn.adam.stop };
    }
    if let Some(seed) = cli.seed {
        settings.pinn.seed = seed;
    }
    if !(settings.sr.lasso.lambda >= 0.0) {
        return Err(Error::Invalid("lambda must be nonnegative".into()));
    }
    if !(settings.pinn.alpha >= 0.0) {
        return Err(Error::Invalid("alpha must be nonnegative".into()));
    }
    let method = match a.estimator {
        EstimatorArg::Sr => Method::Sr,
        EstimatorArg::Pinn => Method::Pinn,
        EstimatorArg::PinnPretrained => Method::PinnPretrained,
        EstimatorArg::Ukf => Method::UkfRow,
        EstimatorArg::UkfFull => Method::UkfFull,
    };
    let victim = match method {
        Method::UkfRow => Some(a.victim.or(scenario.primary_victim()).ok_or_else(|| Error::Invalid("--victim is required".into()))?),
        _ => None,
    };
    if let Some(v) = victim {
        if model.load_index(v).is_none() {
            return Err(Error::NotLoadBus(v));
        }
    }

    let ms = match &a.measurements {
        Some(stem) => MeasurementSet::load(stem)?,
        None => {
            let traj = scenario.simulate(&model, &truth)?;
            scenario.measurements(&traj, 0)?
        }
    };
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let stem = cli.out.join(format!("{}-{}", scenario.id, method.tag()));
    let result = match method {
        Method::Sr => identify_all(&model, &ms, &truth, &settings.sr)?.result,
        Method::Pinn | Method::PinnPretrained => {
            let warm = if method == Method::PinnPretrained {
                let calm = AttackConfig::none(&model, truth.sensing_buses().to_vec())?;
                let mut quiet = scenario.clone();
                quiet.seed_base = scenario.seed_base.wrapping_add(1 << 32);
                let qms = quiet.measurements(&quiet.simulate(&model, &calm)?, 0)?;
                Some(pretrain(&model, &qms, truth.sensing_buses(), settings.pinn.clone(), settings.pretrain_iters)?)
            } else {
                None
            };
            let (res, report) = pinn_identify(&model, &ms, &truth, settings.pinn.clone(), warm)?;
            let path = stem.with_extension("losstrace.csv");
            report.write_trace_csv(create(&path)?)?;
            res
        }
        Method::UkfRow | Method::UkfFull => {
            let mode = match victim {
                Some(victim) => UkfMode::Row { victim },
                None => UkfMode::Full,
            };
            let run = run_ukf_tolerant(&model, &ms, &truth, UkfConfig { mode, ..settings.ukf.clone() })?;
            let path = stem.with_extension("ukftrace.csv");
            run.write_trace_csv(create(&path)?)?;
            run.result
        }
    };
    result.save(&stem, json!({ "scenario": scenario, "settings": settings }))?;
    let reported: Vec<String> = result.reported(settings.sr.report_threshold).iter().map(|(v, s, k)| format!("K_{v}_{s}={k:.4}")).collect();
    print(
        cli,
        &[json!({
            "scenario": scenario.id,
            "estimator": method.tag(),
            "eta2": result.eta2,
            "reported": reported.join(" "),
            "low_confidence": result.low_confidence,
            "seconds": result.seconds,
            "output": stem.with_extension("json").display().to_string(),
        })],
    )
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let config = read_config(cli)?;
    let settings = overlay(&Settings::default(), &config["settings"], "settings")?;
    for name in &a.only {
        if !ARTIFACTS.contains(&name.as_str()) {
            return Err(Error::Invalid(format!("unknown artifact `{name}` (expected one of {})", ARTIFACTS.join(","))));
        }
    }
    let reps = |n: Option<usize>, default: usize| n.unwrap_or(default).max(1);
    let plan = BenchPlan {
        reps: a.reps.max(1),
        pinn_reps: reps(a.pinn_reps, if a.scenario.is_some() { a.reps } else { 3 }),
        ukf_reps: reps(a.ukf_reps, if a.scenario.is_some() { a.reps } else { 20 }),
        ukf_full_reps: reps(a.ukf_full_reps, if a.scenario.is_some() { a.reps } else { 3 }),
        artifacts: a.only.clone(),
        seed_base: cli.seed,
    };
    if let Some(id) = &a.scenario {
        let scenario = find(id)?;
        scenario.validate(&scenario.model()?)?;
        let methods: Vec<Method> = a.estimators.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
        let rep = run_methods(&scenario, &methods, &settings, &plan)?;
        let path = cli.out.join(format!("{id}-summary.csv"));
        write_summary(&rep, &path)?;
        let rows: Vec<Value> = rep
            .summaries
            .iter()
            .map(|s| json!({ "scenario": id, "estimator": s.method.tag(), "runs": s.runs, "failures": s.failures, "low_confidence": s.low_confidence, "mean_eta2": s.mean_eta2, "median_eta2": s.median_eta2 }))
            .collect();
        return print(cli, &rows);
    }
    let written = run_bench(&cli.out, &settings, &plan)?;
    let rows: Vec<Value> = written.iter().map(|p| json!({ "written": p.display().to_string() })).collect();
    print(cli, &rows)
}

fn write_summary(rep: &laa_bench::ScenarioReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["scenario", "estimator", "runs", "failures", "low_confidence", "mean_eta2", "median_eta2", "max_median_false", "mean_seconds"]).map_err(err)?;
    for s in &rep.summaries {
        w.write_record([
            rep.scenario.id.clone(),
            s.method.tag().to_string(),
            s.runs.to_string(),
            s.failures.to_string(),
            s.low_confidence.to_string(),
            s.mean_eta2.to_string(),
            s.median_eta2.to_string(),
            s.max_median_false.to_string(),
            s.mean_seconds.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(io_err(path))
}

fn validate_case(cli: &Cli, path: &Path) -> Result<()> {
    let model = load_case(path)?;
    let x0 = equilibrium_state(&model)?;
    let residual = equilibrium_residual(&model, &x0[..model.n_buses()]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    print(
        cli,
        &[json!({
            "name": model.name(),
            "buses": model.n_buses(),
            "generators": model.n_gens(),
            "loads": model.n_loads(),
            "branches": model.branches().len(),
            "equilibrium_residual": residual,
        })],
    )
}
