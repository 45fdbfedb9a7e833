//! Load-altering attack configuration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;

/// Dynamic gains Kᴸ (one row per load bus, one column per sensing bus),
/// static steps εᴸ (one per load bus) and the onset time.
///
/// Victim buses are the load buses with a nonzero gain row or step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    sensing_buses: Vec<usize>,
    gains: DMatrix<f64>,
    static_step: Vec<f64>,
    onset_time: f64,
}

/// Sparse, serializable form of an attack, keyed by bus ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Sensing buses; defaults to every generator bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensing: Option<Vec<usize>>,
    /// `[victim_bus, sensing_bus, gain]` triples.
    #[serde(default)]
    pub gains: Vec<(usize, usize, f64)>,
    /// `[victim_bus, step]` pairs.
    #[serde(default)]
    pub steps: Vec<(usize, f64)>,
    #[serde(default)]
    pub onset_time: f64,
}

impl AttackConfig {
    /// No attack with the given sensing set.
    pub fn none(model: &GridModel, sensing_buses: Vec<usize>) -> Result<Self> {
        let s = sensing_buses.len();
        Self::new(model, sensing_buses, DMatrix::zeros(model.n_loads(), s), vec![0.0; model.n_loads()], 0.0)
    }

    pub fn new(
        model: &GridModel,
        sensing_buses: Vec<usize>,
        gains: DMatrix<f64>,
        static_step: Vec<f64>,
        onset_time: f64,
    ) -> Result<Self> {
        for (k, &b) in sensing_buses.iter().enumerate() {
            if b == 0 || b > model.n_buses() {
                return Err(Error::validation("sensing", format!("unknown bus {b}")));
            }
            if sensing_buses[..k].contains(&b) {
                return Err(Error::validation("sensing", format!("duplicate sensing bus {b}")));
            }
        }
        if gains.nrows() != model.n_loads() || gains.ncols() != sensing_buses.len() {
            return Err(Error::Shape(format!(
                "gain matrix is {}x{}, expected {}x{}",
                gains.nrows(),
                gains.ncols(),
                model.n_loads(),
                sensing_buses.len()
            )));
        }
        if static_step.len() != model.n_loads() {
            return Err(Error::Dimension { expected: model.n_loads(), got: static_step.len() });
        }
        if let Some(v) = gains.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::validation("gains", format!("gain {v} must be finite and nonnegative")));
        }
        if static_step.iter().any(|v| !v.is_finite()) || !onset_time.is_finite() {
            return Err(Error::validation("static_step", "non-finite value"));
        }
        Ok(Self { sensing_buses, gains, static_step, onset_time })
    }

    pub fn from_spec(model: &GridModel, spec: &AttackSpec) -> Result<Self> {
        let sensing = spec.sensing.clone().unwrap_or_else(|| model.gen_buses().to_vec());
        let mut a = Self::none(model, sensing)?;
        for &(v, s, k) in &spec.gains {
            a = a.with_gain(model, v, s, k)?;
        }
        for &(v, e) in &spec.steps {
            a = a.with_step(model, v, e)?;
        }
        a.onset_time = spec.onset_time;
        Ok(a)
    }

    pub fn to_spec(&self, model: &GridModel) -> AttackSpec {
        let mut gains = Vec::new();
        for (r, &v) in model.load_buses().iter().enumerate() {
            for (c, &s) in self.sensing_buses.iter().enumerate() {
                let k = self.gains[(r, c)];
                if k != 0.0 {
                    gains.push((v, s, k));
                }
            }
        }
        let steps = model
            .load_buses()
            .iter()
            .zip(&self.static_step)
            .filter(|(_, e)| **e != 0.0)
            .map(|(&b, &e)| (b, e))
            .collect();
        AttackSpec { sensing: Some(self.sensing_buses.clone()), gains, steps, onset_time: self.onset_time }
    }

    pub fn with_gain(mut self, model: &GridModel, victim: usize, sensing: usize, gain: f64) -> Result<Self> {
        let r = model.load_index(victim).ok_or(Error::NotLoadBus(victim))?;
        let c = self
            .sensing_column(sensing)
            .ok_or_else(|| Error::validation("sensing", format!("bus {sensing} is not a sensing bus")))?;
        if !(gain >= 0.0) || !gain.is_finite() {
            return Err(Error::validation("gains", format!("gain {gain} must be finite and nonnegative")));
        }
        self.gains[(r, c)] = gain;
        Ok(self)
    }

    pub fn with_step(mut self, model: &GridModel, victim: usize, step: f64) -> Result<Self> {
        let r = model.load_index(victim).ok_or(Error::NotLoadBus(victim))?;
        if !step.is_finite() {
            return Err(Error::validation("static_step", "non-finite value"));
        }
        self.static_step[r] = step;
        Ok(self)
    }

    pub fn with_onset(mut self, onset_time: f64) -> Self {
        self.onset_time = onset_time;
        self
    }

    pub fn sensing_buses(&self) -> &[usize] {
        &self.sensing_buses
    }
    pub fn gains(&self) -> &DMatrix<f64> {
        &self.gains
    }
    pub fn static_step(&self) -> &[f64] {
        &self.static_step
    }
    pub fn onset_time(&self) -> f64 {
        self.onset_time
    }

    pub fn sensing_column(&self, bus: usize) -> Option<usize> {
        self.sensing_buses.iter().position(|&b| b == bus)
    }

    /// Gain Kᴸ for a (victim, sensing) bus pair; zero when either is unknown.
    pub fn gain(&self, model: &GridModel, victim: usize, sensing: usize) -> f64 {
        match (model.load_index(victim), self.sensing_column(sensing)) {
            (Some(r), Some(c)) => self.gains[(r, c)],
            _ => 0.0,
        }
    }

    /// Load buses with a nonzero gain row or static step.
    pub fn victims(&self, model: &GridModel) -> Vec<usize> {
        model
            .load_buses()
            .iter()
            .enumerate()
            .filter(|&(r, _)| self.static_step[r] != 0.0 || self.gains.row(r).iter().any(|&k| k != 0.0))
            .map(|(_, &b)| b)
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.gains.iter().all(|&k| k == 0.0) && self.static_step.iter().all(|&e| e == 0.0)
    }

    /// Entry-wise sum of two attacks on the same sensing set.
    pub fn combined(&self, other: &AttackConfig) -> Result<AttackConfig> {
        if self.sensing_buses != other.sensing_buses || self.gains.shape() != other.gains.shape() {
            return Err(Error::Shape("attacks use different sensing sets".into()));
        }
        Ok(AttackConfig {
            sensing_buses: self.sensing_buses.clone(),
            gains: &self.gains + &other.gains,
            static_step: self.static_step.iter().zip(&other.static_step).map(|(a, b)| a + b).collect(),
            onset_time: self.onset_time.min(other.onset_time),
        })
    }
}

/// Outcome of the attack-budget check at one victim bus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub bus: usize,
    /// P^LV − ε (must be ≥ 0).
    pub static_margin: f64,
    /// (P^LV − ε)/2 − Σ_j K_j ω_max (must be ≥ 0).
    pub dynamic_margin: f64,
    pub static_ok: bool,
    pub dynamic_ok: bool,
}

impl BudgetReport {
    pub fn pass(&self) -> bool {
        self.static_ok && self.dynamic_ok
    }
}

/// Check ε_i ≤ P^LV_i and Σ_j K_ij ω_max ≤ (P^LV_i − ε_i)/2 at every victim bus.
///
/// `omega_max` is a frequency deviation in Hz, the unit the gains multiply.
/// A reporting utility only; simulations never consult it.
pub fn validate_budget(model: &GridModel, attack: &AttackConfig, omega_max: f64) -> Result<Vec<BudgetReport>> {
    let plv = model
        .vulnerable_load()
        .ok_or_else(|| Error::Unavailable("budget check (case has no vulnerable-load data)".into()))?;
    let slack = |lhs: f64, rhs: f64| rhs - lhs >= -1e-12 * lhs.abs().max(rhs.abs()).max(1.0);
    Ok(attack
        .victims(model)
        .into_iter()
        .map(|bus| {
            let r = model.load_index(bus).expect("victims are load buses");
            let eps = attack.static_step()[r];
            let dyn_load: f64 = attack.gains().row(r).iter().sum::<f64>() * omega_max;
            let room = (plv[r] - eps) / 2.0;
            BudgetReport {
                bus,
                static_margin: plv[r] - eps,
                dynamic_margin: room - dyn_load,
                static_ok: slack(eps, plv[r]),
                dynamic_ok: slack(dyn_load, room),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BranchRecord, BusKind, BusRecord, CaseFile, GeneratorRecord, Limits, LoadRecord};

    fn model() -> GridModel {
        GridModel::from_case(CaseFile {
            name: "two".into(),
            description: None,
            base_mva: 100.0,
            buses: vec![
                BusRecord { id: 1, kind: BusKind::Generator, damping: 2.0 },
                BusRecord { id: 2, kind: BusKind::Load, damping: 0.01 },
            ],
            generators: vec![GeneratorRecord { bus: 1, inertia: 2.0, gov_p_gain: 1.0, gov_i_gain: 0.6 }],
            branches: vec![BranchRecord { from: 1, to: 2, susceptance: 1.0 }],
            loads: vec![LoadRecord { bus: 2, secure: 0.5, vulnerable: Some(1.0) }],
            limits: Limits { nominal_freq_hz: 50.0, max_freq_dev_hz: 2.0 },
        })
        .unwrap()
    }

    #[test]
    fn zero_attack_passes_with_full_margin() {
        let m = model();
        let a = AttackConfig::none(&m, vec![1]).unwrap();
        // no victims at all
        assert!(validate_budget(&m, &a, 0.1).unwrap().is_empty());
        let a = a.with_step(&m, 2, 0.0).unwrap().with_gain(&m, 2, 1, 0.0).unwrap();
        assert!(validate_budget(&m, &a, 0.1).unwrap().iter().all(BudgetReport::pass));
    }

    #[test]
    fn budget_boundary() {
        let m = model();
        let a = AttackConfig::none(&m, vec![1]).unwrap().with_step(&m, 2, 0.1).unwrap().with_gain(&m, 2, 1, 10.0).unwrap();
        let r = &validate_budget(&m, &a, 0.045).unwrap()[0];
        assert!(r.pass(), "{r:?}");
        assert!(r.dynamic_margin.abs() < 1e-12);
        let r = &validate_budget(&m, &a, 0.046).unwrap()[0];
        assert!(r.static_ok && !r.dynamic_ok);
    }

    #[test]
    fn missing_vulnerable_load_is_unavailable() {
        let mut c = model().to_case();
        c.loads[0].vulnerable = None;
        let m = GridModel::from_case(c).unwrap();
        let a = AttackConfig::none(&m, vec![1]).unwrap();
        assert!(matches!(validate_budget(&m, &a, 0.1), Err(Error::Unavailable(_))));
    }

    #[test]
    fn negative_gain_rejected() {
        let m = model();
        let a = AttackConfig::none(&m, vec![1]).unwrap();
        assert!(a.with_gain(&m, 2, 1, -1.0).is_err());
    }

    #[test]
    fn spec_roundtrip() {
        let m = model();
        let a = AttackConfig::none(&m, vec![1]).unwrap().with_gain(&m, 2, 1, 3.0).unwrap().with_step(&m, 2, 0.2).unwrap();
        let b = AttackConfig::from_spec(&m, &a.to_spec(&m)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.victims(&m), vec![2]);
    }
}
