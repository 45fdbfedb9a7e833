//! Monte Carlo execution of a scenario and aggregation of the results.

use std::time::Instant;

use laa_core::attack::AttackConfig;
use laa_core::estimate::EstimateResult;
use laa_core::grid::GridModel;
use laa_core::pinn::{identify as pinn_identify, pretrain, PinnConfig, StateNet, TrainReport};
use laa_core::pmu::MeasurementSet;
use laa_core::sr::{identify_all, SrOptions};
use laa_core::ukf::{run_ukf_tolerant, UkfConfig, UkfMode, UkfRun};
use laa_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sr,
    Pinn,
    /// PINN initialized from a net fitted to no-attack measurements.
    PinnPretrained,
    UkfRow,
    UkfFull,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Sr => "sr",
            Method::Pinn => "pinn",
            Method::PinnPretrained => "pinn-pretrained",
            Method::UkfRow => "ukf-row",
            Method::UkfFull => "ukf-full",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr" | "lasso" => Ok(Method::Sr),
            "pinn" => Ok(Method::Pinn),
            "pinn-pretrained" => Ok(Method::PinnPretrained),
            "ukf" | "ukf-row" => Ok(Method::UkfRow),
            "ukf-full" => Ok(Method::UkfFull),
            _ => Err(Error::Invalid(format!("unknown estimator `{s}`"))),
        }
    }
}

/// Estimator settings shared by every repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub sr: SrOptions,
    pub pinn: PinnConfig,
    /// Iterations of the no-attack fit used by the pre-trained mode.
    pub pretrain_iters: usize,
    /// Mode is overridden per method.
    pub ukf: UkfConfig,
    /// Keep loss / parameter traces for this many leading repetitions.
    pub keep_traces: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self { sr: SrOptions::default(), pinn: PinnConfig::default(), pretrain_iters: 2000, ukf: UkfConfig::default(), keep_traces: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    pub outcome: std::result::Result<EstimateResult, String>,
    pub pinn_report: Option<TrainReport>,
    pub ukf_run: Option<UkfRun>,
}

/// Min, quartiles and max (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        Some(Self { min: v[0], q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75), max: v[v.len() - 1] })
    }
}

/// Quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryStats {
    pub victim: usize,
    pub sensing: usize,
    pub truth: f64,
    pub eta1: Option<FiveNumber>,
    pub median_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub method: Method,
    pub runs: usize,
    pub failures: usize,
    pub low_confidence: usize,
    pub mean_eta2: f64,
    pub median_eta2: f64,
    /// One per attacked entry.
    pub entries: Vec<EntryStats>,
    /// Largest per-entry median |K̂| over non-attacked entries.
    pub max_median_false: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub records: Vec<RunRecord>,
    pub summaries: Vec<Summary>,
    pub simulate_seconds: f64,
}

impl ScenarioReport {
    pub fn summary(&self, method: Method) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn first_record(&self, method: Method) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.method == method)
    }
}

struct Context<'a> {
    model: &'a GridModel,
    truth: &'a AttackConfig,
    settings: &'a Settings,
    victim: usize,
    pretrained: Option<StateNet>,
}

fn run_one(ctx: &Context<'_>, method: Method, ms: &MeasurementSet, keep: bool) -> (std::result::Result<EstimateResult, String>, Option<TrainReport>, Option<UkfRun>) {
    match method {
        Method::Sr => (identify_all(ctx.model, ms, ctx.truth, &ctx.settings.sr).map(|o| o.result).map_err(|e| e.to_string()), None, None),
        Method::Pinn | Method::PinnPretrained => {
            let warm = if method == Method::PinnPretrained { ctx.pretrained.clone() } else { None };
            match pinn_identify(ctx.model, ms, ctx.truth, ctx.settings.pinn.clone(), warm) {
                Ok((res, rep)) => (Ok(res), keep.then_some(rep), None),
                Err(e) => (Err(e.to_string()), None, None),
            }
        }
        Method::UkfRow | Method::UkfFull => {
            let mode = if method == Method::UkfRow { UkfMode::Row { victim: ctx.victim } } else { UkfMode::Full };
            let cfg = UkfConfig { mode, ..ctx.settings.ukf.clone() };
            match run_ukf_tolerant(ctx.model, ms, ctx.truth, cfg) {
                Ok(run) => (Ok(run.result.clone()), None, keep.then_some(run)),
                Err(e) => (Err(e.to_string()), None, None),
            }
        }
    }
}

/// Simulate once, then run every method on `reps` noise realizations
/// (seed = base + repetition index). Failures are recorded, not raised.
pub fn run_scenario(scenario: &Scenario, methods: &[Method], settings: &Settings, reps: Option<usize>) -> Result<ScenarioReport> {
    let model = scenario.model()?;
    scenario.validate(&model)?;
    let truth = scenario.attack(&model)?;
    let start = Instant::now();
    let traj = scenario.simulate(&model, &truth)?;
    let simulate_seconds = start.elapsed().as_secs_f64();
    let reps = reps.unwrap_or(scenario.repetitions).max(1);

    let pretrained = if methods.contains(&Method::PinnPretrained) {
        let calm = AttackConfig::none(&model, truth.sensing_buses().to_vec())?;
        let quiet_traj = scenario.simulate(&model, &calm)?;
        let mut quiet = scenario.clone();
        quiet.seed_base = scenario.seed_base.wrapping_add(1 << 32);
        let ms = quiet.measurements(&quiet_traj, 0)?;
        Some(pretrain(&model, &ms, truth.sensing_buses(), settings.pinn.clone(), settings.pretrain_iters)?)
    } else {
        None
    };
    let ctx = Context { model: &model, truth: &truth, settings, victim: scenario.primary_victim().unwrap_or(model.load_buses()[0]), pretrained };

    let per_rep: Vec<Vec<RunRecord>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = scenario.seed(rep);
            match scenario.measurements(&traj, rep) {
                Ok(ms) => methods
                    .iter()
                    .map(|&method| {
                        let (outcome, pinn_report, ukf_run) = run_one(&ctx, method, &ms, rep < settings.keep_traces);
                        RunRecord { rep, seed, method, outcome, pinn_report, ukf_run }
                    })
                    .collect(),
                Err(e) => methods
                    .iter()
                    .map(|&method| RunRecord { rep, seed, method, outcome: Err(e.to_string()), pinn_report: None, ukf_run: None })
                    .collect(),
            }
        })
        .collect();
    let records: Vec<RunRecord> = per_rep.into_iter().flatten().collect();
    let summaries = methods.iter().map(|&m| summarize(m, &records, &truth, &model)).collect();
    Ok(ScenarioReport { scenario: scenario.clone(), records, summaries, simulate_seconds })
}

fn summarize(method: Method, records: &[RunRecord], truth: &AttackConfig, model: &GridModel) -> Summary {
    let mine: Vec<&RunRecord> = records.iter().filter(|r| r.method == method).collect();
    let ok: Vec<&EstimateResult> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let eta2: Vec<f64> = ok.iter().map(|r| r.eta2).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let median = |v: &[f64]| FiveNumber::of(v).map(|f| f.median).unwrap_or(f64::NAN);
    let sensing = truth.sensing_buses();
    let mut entries = Vec::new();
    let mut max_false = 0.0f64;
    for (r, &victim) in model.load_buses().iter().enumerate() {
        for (c, &s) in sensing.iter().enumerate() {
            let k = truth.gains()[(r, c)];
            let est: Vec<f64> = ok.iter().map(|res| res.gains[(r, c)]).collect();
            if k != 0.0 {
                let e1: Vec<f64> = est.iter().map(|e| (k - e) / k).collect();
                entries.push(EntryStats { victim, sensing: s, truth: k, eta1: FiveNumber::of(&e1), median_estimate: median(&est) });
            } else if !est.is_empty() {
                max_false = max_false.max(median(&est).abs());
            }
        }
    }
    let secs: Vec<f64> = ok.iter().map(|r| r.seconds).collect();
    Summary {
        method,
        runs: mine.len(),
        failures: mine.len() - ok.len(),
        low_confidence: ok.iter().filter(|r| r.low_confidence).count(),
        mean_eta2: mean(&eta2),
        median_eta2: median(&eta2),
        entries,
        max_median_false: max_false,
        mean_seconds: mean(&secs),
    }
}
