//! Named experiment definitions.

use std::path::Path;

use laa_core::attack::AttackConfig;
use laa_core::dynamics::{equilibrium_state, integrate, SimOptions, Trajectory};
use laa_core::grid::{load_case, parse_case, GridModel};
use laa_core::pmu::{add_noise, sample, MeasurementSet, NoiseSpec};
use laa_core::{Error, Result};
use serde::{Deserialize, Serialize};

const IEEE39_A: &str = include_str!("../../core/cases/ieee39-a.json");
const IEEE39_B: &str = include_str!("../../core/cases/ieee39-b.json");
const IEEE6: &str = include_str!("../../core/cases/ieee6.json");

/// Bundled case by id, or a case file path.
pub fn builtin_case(id: &str) -> Result<GridModel> {
    match id {
        "ieee39-a" | "ieee39" => parse_case(IEEE39_A),
        "ieee39-b" => parse_case(IEEE39_B),
        "ieee6" => parse_case(IEEE6),
        other if Path::new(other).exists() => load_case(other),
        other => Err(Error::Invalid(format!("unknown case `{other}`"))),
    }
}

/// Generator parameter regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "A-fast")]
    Fast,
    #[serde(rename = "B-slow")]
    Slow,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::Fast => "fast",
            Regime::Slow => "slow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub victim: usize,
    pub sensing: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    /// Bundled case id or path.
    pub case: String,
    pub regime: Regime,
    /// Sensing buses; empty means every generator bus.
    #[serde(default)]
    pub sensing: Vec<usize>,
    pub gains: Vec<GainEntry>,
    /// (victim bus, static step in pu).
    pub steps: Vec<(usize, f64)>,
    /// Observation window [t0, t1] in seconds after attack onset.
    pub window: [f64; 2],
    pub rate_hz: f64,
    pub noise: NoiseSpec,
    pub repetitions: usize,
    pub seed_base: u64,
}

impl Scenario {
    fn single(id: &str, case: &str, regime: Regime, gain: f64, t1: f64) -> Self {
        Scenario {
            id: id.into(),
            case: case.into(),
            regime,
            sensing: Vec::new(),
            gains: vec![GainEntry { victim: 19, sensing: 33, gain }],
            steps: vec![(19, 0.1)],
            window: [0.0, t1],
            rate_hz: 50.0,
            noise: NoiseSpec::gaussian(0.01),
            repetitions: 100,
            seed_base: 1000,
        }
    }

    pub fn model(&self) -> Result<GridModel> {
        builtin_case(&self.case)
    }

    pub fn sensing_buses(&self, model: &GridModel) -> Vec<usize> {
        if self.sensing.is_empty() {
            model.gen_buses().to_vec()
        } else {
            self.sensing.clone()
        }
    }

    pub fn validate(&self, model: &GridModel) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Invalid(format!("{}: repetitions must be at least 1", self.id)));
        }
        let [t0, t1] = self.window;
        if !(t0 >= 0.0 && t1 > t0) {
            return Err(Error::Invalid(format!("{}: bad window [{t0}, {t1}]", self.id)));
        }
        if !(1.0..=1000.0).contains(&self.rate_hz) {
            return Err(Error::Invalid(format!("{}: rate {} Hz outside [1, 1000]", self.id, self.rate_hz)));
        }
        if !(self.noise.sigma >= 0.0) {
            return Err(Error::Invalid(format!("{}: negative noise σ", self.id)));
        }
        self.attack(model).map(|_| ())
    }

    pub fn attack(&self, model: &GridModel) -> Result<AttackConfig> {
        let mut a = AttackConfig::none(model, self.sensing_buses(model))?;
        for e in &self.gains {
            a = a.with_gain(model, e.victim, e.sensing, e.gain)?;
        }
        for &(v, eps) in &self.steps {
            a = a.with_step(model, v, eps)?;
        }
        Ok(a)
    }

    /// First attacked victim bus (the row filtered by the single-row UKF).
    pub fn primary_victim(&self) -> Option<usize> {
        self.gains.first().map(|e| e.victim).or(self.steps.first().map(|s| s.0))
    }

    /// Noiseless trajectory from equilibrium over `[0, window end]`.
    pub fn simulate(&self, model: &GridModel, attack: &AttackConfig) -> Result<Trajectory> {
        let x0 = equilibrium_state(model)?;
        let opts = SimOptions { sample_rate_hz: Some(self.rate_hz), ..SimOptions::default() };
        Ok(integrate(model, attack, &x0, 0.0, self.window[1], &opts)?.trajectory)
    }

    /// Noisy PMU frames for repetition `rep`.
    pub fn measurements(&self, traj: &Trajectory, rep: usize) -> Result<MeasurementSet> {
        let clean = sample(traj, self.rate_hz, self.window[0], self.window[1])?;
        add_noise(&clean, self.noise, self.seed(rep))
    }

    pub fn seed(&self, rep: usize) -> u64 {
        self.seed_base + rep as u64
    }

    /// Same experiment with a different window end.
    pub fn with_window_end(&self, t1: f64) -> Scenario {
        let mut s = self.clone();
        s.window[1] = t1;
        s.id = format!("{}-w{}", self.id, t1);
        s
    }
}

/// Observation-window sweep ends for each regime.
pub fn sweep_windows(regime: Regime) -> Vec<f64> {
    match regime {
        Regime::Fast => vec![12.0, 13.0, 14.0, 15.0, 16.0],
        Regime::Slow => vec![30.0, 35.0, 40.0, 45.0],
    }
}

/// Every named scenario.
pub fn registry() -> Vec<Scenario> {
    let fast = Scenario::single("ieee39-fast-single", "ieee39-a", Regime::Fast, 18.0, 15.0);
    let slow = Scenario::single("ieee39-slow-single", "ieee39-b", Regime::Slow, 25.0, 40.0);
    let mut logistic = fast.clone();
    logistic.id = "ieee39-fast-logistic".into();
    logistic.noise = NoiseSpec::logistic(0.01);
    let mut multi = fast.clone();
    multi.id = "ieee39-fast-multi".into();
    multi.gains = vec![
        GainEntry { victim: 15, sensing: 33, gain: 4.0 },
        GainEntry { victim: 19, sensing: 33, gain: 14.0 },
        GainEntry { victim: 20, sensing: 33, gain: 4.0 },
    ];
    multi.steps = vec![(19, 0.1)];
    multi.window = [0.0, 16.0];
    let mut out = vec![fast.clone(), slow.clone(), logistic, multi];
    for base in [&fast, &slow] {
        for t1 in sweep_windows(base.regime) {
            let mut s = base.with_window_end(t1);
            s.id = format!("{}-window-{}", base.id.trim_end_matches("-single"), t1);
            out.push(s);
        }
    }
    out
}

pub fn find(id: &str) -> Result<Scenario> {
    registry().into_iter().find(|s| s.id == id).ok_or_else(|| Error::UnknownScenario(id.into()))
}
