//! Attacked swing dynamics, trajectory storage and safety-breach detection.
//!
//! State layout: `[δ_1 .. δ_N, ω_g1 .. ω_gG]`. Angles are in radians and
//! frequency deviations are read directly in Hz: the swing equations use
//! δ̇ = ω with no 2π factor, so the same numeric value is both the angle
//! rate and the deviation compared against the Hz safety limit.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::ode::{dopri5, Control, OdeOptions, OdeStats};

/// Right-hand side of the attacked swing equations for one (model, attack) pair.
pub struct SwingDynamics<'a> {
    model: &'a GridModel,
    attack: &'a AttackConfig,
    /// For each sensing column: generator state index, if the bus is a generator.
    sense_gen: Vec<Option<usize>>,
    /// LU of diag(D_L) − K_LL when load buses are sensed.
    implicit: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    load_damping: Vec<f64>,
}

impl<'a> SwingDynamics<'a> {
    pub fn new(model: &'a GridModel, attack: &'a AttackConfig) -> Result<Self> {
        if attack.gains().nrows() != model.n_loads() || attack.static_step().len() != model.n_loads() {
            return Err(Error::Shape("attack does not match the grid's load buses".into()));
        }
        let sense_gen: Vec<Option<usize>> = attack.sensing_buses().iter().map(|&b| model.gen_index(b)).collect();
        let sense_load: Vec<Option<usize>> = attack.sensing_buses().iter().map(|&b| model.load_index(b)).collect();
        let load_damping: Vec<f64> = model.load_buses().iter().map(|&b| model.damping()[b - 1]).collect();
        let coupled = sense_load
            .iter()
            .enumerate()
            .any(|(c, l)| l.is_some() && attack.gains().column(c).iter().any(|&k| k != 0.0));
        let implicit = if coupled {
            let nl = model.n_loads();
            let mut a = DMatrix::from_diagonal(&DVector::from_vec(load_damping.clone()));
            for (c, l) in sense_load.iter().enumerate() {
                if let Some(j) = *l {
                    for r in 0..nl {
                        a[(r, j)] -= attack.gains()[(r, c)];
                    }
                }
            }
            let lu = a.lu();
            if !lu.is_invertible() {
                return Err(Error::Invalid("load-bus sensing makes the frequency coupling singular".into()));
            }
            Some(lu)
        } else {
            None
        };
        Ok(Self { model, attack, sense_gen, implicit, load_damping })
    }

    pub fn model(&self) -> &GridModel {
        self.model
    }

    pub fn attack(&self) -> &AttackConfig {
        self.attack
    }

    pub fn dim(&self) -> usize {
        self.model.state_dim()
    }

    /// Evaluate `dx = f(t, x)`.
    pub fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        let m = self.model;
        let n = m.n_buses();
        let (delta, omega) = x.split_at(n);
        // Flows accumulate directly into the δ̇ slots, overwritten below.
        let pf = &mut dx[..n];
        m.flows_into(delta, pf);
        let mut load_acc = vec![0.0; m.n_loads()];
        for (k, &l) in m.load_buses().iter().enumerate() {
            load_acc[k] = pf[l - 1];
        }
        for (k, &g) in m.gen_buses().iter().enumerate() {
            let d = m.damping()[g - 1];
            dx[n + k] = (-(d + m.gov_p_gain()[k]) * omega[k] - m.gov_i_gain()[k] * delta[g - 1] - dx[g - 1]) / m.inertia()[k];
            dx[g - 1] = omega[k];
        }
        let active = t >= self.attack.onset_time();
        let gains = self.attack.gains();
        let mut a = vec![0.0; m.n_loads()];
        for k in 0..m.n_loads() {
            let (acc, eps) = if active {
                let mut acc = 0.0;
                for (c, g) in self.sense_gen.iter().enumerate() {
                    if let Some(g) = *g {
                        acc += gains[(k, c)] * omega[g];
                    }
                }
                (acc, self.attack.static_step()[k])
            } else {
                (0.0, 0.0)
            };
            a[k] = acc - eps - m.secure_load()[k] - load_acc[k];
        }
        match (&self.implicit, active) {
            (Some(lu), true) => {
                let sol = lu.solve(&DVector::from_vec(a)).expect("checked invertible");
                for (k, &l) in m.load_buses().iter().enumerate() {
                    dx[l - 1] = sol[k];
                }
            }
            _ => {
                for (k, &l) in m.load_buses().iter().enumerate() {
                    dx[l - 1] = a[k] / self.load_damping[k];
                }
            }
        }
    }

    pub fn rhs_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        self.rhs(t, x, &mut dx);
        dx
    }
}

/// Unattacked swing equations, evaluated without any attack bookkeeping.
pub fn rhs_no_attack(model: &GridModel, x: &[f64], dx: &mut [f64]) {
    let n = model.n_buses();
    let (delta, omega) = x.split_at(n);
    let pf = model.flows(delta);
    for (k, &g) in model.gen_buses().iter().enumerate() {
        let d = model.damping()[g - 1];
        dx[g - 1] = omega[k];
        dx[n + k] = (-(d + model.gov_p_gain()[k]) * omega[k] - model.gov_i_gain()[k] * delta[g - 1] - pf[g - 1]) / model.inertia()[k];
    }
    for (k, &l) in model.load_buses().iter().enumerate() {
        dx[l - 1] = (-model.secure_load()[k] - pf[l - 1]) / model.damping()[l - 1];
    }
}

/// Equilibrium state `[δ*, 0]`.
pub fn equilibrium_state(model: &GridModel) -> Result<Vec<f64>> {
    let mut x = crate::grid::equilibrium(model)?;
    x.extend(std::iter::repeat(0.0).take(model.n_gens()));
    Ok(x)
}

/// Densely stored solution of the swing dynamics.
///
/// Every stored point carries the state and its time derivative, so load-bus
/// frequencies are the exact right-hand side at that point and cubic Hermite
/// interpolation is available between points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_buses: usize,
    gen_buses: Vec<usize>,
    load_buses: Vec<usize>,
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
}

impl Trajectory {
    pub fn new(model: &GridModel) -> Self {
        Self {
            n_buses: model.n_buses(),
            gen_buses: model.gen_buses().to_vec(),
            load_buses: model.load_buses().to_vec(),
            times: Vec::new(),
            states: Vec::new(),
            derivs: Vec::new(),
        }
    }

    /// Append a point; time must increase strictly.
    pub fn push(&mut self, t: f64, state: &[f64], deriv: &[f64]) -> Result<()> {
        let dim = self.dim();
        if state.len() != dim || deriv.len() != dim {
            return Err(Error::Dimension { expected: dim, got: state.len().min(deriv.len()) });
        }
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::Invalid(format!("trajectory time {t} not after {last}")));
            }
        }
        self.times.push(t);
        self.states.extend_from_slice(state);
        self.derivs.extend_from_slice(deriv);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n_buses + self.gen_buses.len()
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn n_buses(&self) -> usize {
        self.n_buses
    }
    pub fn gen_buses(&self) -> &[usize] {
        &self.gen_buses
    }
    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn start(&self) -> f64 {
        self.times[0]
    }
    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty trajectory")
    }
    pub fn state(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.states[k * d..(k + 1) * d]
    }
    pub fn deriv(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.derivs[k * d..(k + 1) * d]
    }
    /// δ at a 1-based bus.
    pub fn delta(&self, k: usize, bus: usize) -> f64 {
        self.state(k)[bus - 1]
    }
    /// ω of the `g`-th generator.
    pub fn omega(&self, k: usize, g: usize) -> f64 {
        self.state(k)[self.n_buses + g]
    }
    /// δ̇ at a 1-based bus (equals ω at generator buses).
    pub fn bus_freq(&self, k: usize, bus: usize) -> f64 {
        self.deriv(k)[bus - 1]
    }

    /// Index of the last stored point with time ≤ t.
    fn locate(&self, t: f64) -> usize {
        match self.times.binary_search_by(|v| v.partial_cmp(&t).expect("finite times")) {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) => k - 1,
        }
    }

    /// State and derivative at time `t` (cubic Hermite between stored points;
    /// exact at stored points). `t` must lie within the span.
    pub fn interpolate(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.is_empty() || t < self.start() - 1e-12 || t > self.end() + 1e-12 {
            return Err(Error::Window {
                t0: t,
                t1: t,
                start: self.times.first().copied().unwrap_or(f64::NAN),
                end: self.times.last().copied().unwrap_or(f64::NAN),
            });
        }
        let k = self.locate(t);
        let tol = 1e-12 * t.abs().max(1.0);
        if (self.times[k] - t).abs() <= tol {
            return Ok((self.state(k).to_vec(), self.deriv(k).to_vec()));
        }
        if k + 1 < self.len() && (self.times[k + 1] - t).abs() <= tol {
            return Ok((self.state(k + 1).to_vec(), self.deriv(k + 1).to_vec()));
        }
        let k = k.min(self.len() - 2);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (y0, y1, f0, f1) = (self.state(k), self.state(k + 1), self.deriv(k), self.deriv(k + 1));
        // Hermite basis and derivatives.
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        let d00 = (6.0 * s * s - 6.0 * s) / h;
        let d10 = 3.0 * s * s - 4.0 * s + 1.0;
        let d01 = (-6.0 * s * s + 6.0 * s) / h;
        let d11 = 3.0 * s * s - 2.0 * s;
        let mut y = vec![0.0; self.dim()];
        let mut dy = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            y[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
            dy[i] = d00 * y0[i] + d10 * f0[i] + d01 * y1[i] + d11 * f1[i];
        }
        Ok((y, dy))
    }

    /// CSV with one row per stored point. Angles in rad, frequencies as
    /// deviations from nominal in Hz.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# units: t [s]; delta [rad]; omega (generators) and freq (load buses) [Hz deviation from nominal]")?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_buses).map(|b| format!("delta_{b}")));
        header.extend(self.gen_buses.iter().map(|b| format!("omega_{b}")));
        header.extend(self.load_buses.iter().map(|b| format!("freq_{b}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![format!("{}", self.times[k])];
            row.extend(self.state(k).iter().map(|v| format!("{v}")));
            row.extend(self.load_buses.iter().map(|&b| format!("{}", self.bus_freq(k, b))));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub ode: OdeOptions,
    /// Minimum spacing between recorded points (s); 0 records every step.
    pub record_interval: f64,
    /// When set, recorded points always include multiples of `1/rate` so
    /// that PMU sampling at this rate reads exact solver states.
    pub sample_rate_hz: Option<f64>,
    /// Stop this long after the first safety breach, if any.
    pub stop_after_breach: Option<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            ode: OdeOptions { rtol: 1e-6, atol: 1e-8, ..Default::default() },
            record_interval: 1e-3,
            sample_rate_hz: Some(50.0),
            stop_after_breach: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trajectory: Trajectory,
    pub stats: OdeStats,
}

/// Integrate the attacked dynamics from `x0` over `[t0, t1]`.
pub fn integrate(
    model: &GridModel,
    attack: &AttackConfig,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &SimOptions,
) -> Result<SimOutput> {
    if !(t1 > t0) {
        return Err(Error::Invalid(format!("time span [{t0}, {t1}] must be positive")));
    }
    if !(opts.ode.rtol > 0.0 && opts.ode.atol > 0.0) {
        return Err(Error::Invalid("tolerances must be positive".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension { expected: model.state_dim(), got: x0.len() });
    }
    let dynamics = SwingDynamics::new(model, attack)?;
    let mut stops = Vec::new();
    if let Some(rate) = opts.sample_rate_hz {
        let first = (t0 * rate).floor() as i64 + 1;
        let mut k = first;
        loop {
            let t = k as f64 / rate;
            if t > t1 {
                break;
            }
            stops.push(t);
            k += 1;
        }
    }
    if attack.onset_time() > t0 && attack.onset_time() < t1 {
        stops.push(attack.onset_time());
        stops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        stops.dedup();
    }
    let limit = model.max_freq_dev_hz();
    let ng = model.n_gens();
    let n = model.n_buses();
    let mut traj = Trajectory::new(model);
    let mut last_recorded = f64::NEG_INFINITY;
    let mut breach_at: Option<f64> = None;
    let mut push_err = None;
    let stats = dopri5(
        |t, x, dx| dynamics.rhs(t, x, dx),
        t0,
        x0,
        t1,
        &stops,
        &opts.ode,
        |t, x, dx| {
            let on_grid = stops.binary_search_by(|s| s.partial_cmp(&t).unwrap()).is_ok();
            if t == t0 || t == t1 || on_grid || t - last_recorded >= opts.record_interval {
                if let Err(e) = traj.push(t, x, dx) {
                    push_err = Some(e);
                    return Control::Stop;
                }
                last_recorded = t;
            }
            if let Some(extra) = opts.stop_after_breach {
                if breach_at.is_none() && x[n..n + ng].iter().any(|w| w.abs() > limit) {
                    breach_at = Some(t);
                }
                if let Some(tb) = breach_at {
                    if t >= tb + extra {
                        if last_recorded != t {
                            let _ = traj.push(t, x, dx);
                        }
                        return Control::Stop;
                    }
                }
            }
            Control::Continue
        },
    )?;
    if let Some(e) = push_err {
        return Err(e);
    }
    Ok(SimOutput { trajectory: traj, stats })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Breach {
    /// First time (s) a generator frequency deviation exceeds the limit.
    pub time: f64,
    /// Generator bus where it happens.
    pub bus: usize,
}

/// Earliest crossing of `|Δf| > omega_max_hz` at any generator, linearly
/// interpolated between stored points.
pub fn detect_breach(traj: &Trajectory, omega_max_hz: f64) -> Option<Breach> {
    let hz = |k: usize, g: usize| traj.omega(k, g).abs();
    if traj.is_empty() {
        return None;
    }
    let ng = traj.gen_buses().len();
    if let Some(g) = (0..ng).find(|&g| hz(0, g) > omega_max_hz) {
        return Some(Breach { time: traj.start(), bus: traj.gen_buses()[g] });
    }
    for k in 1..traj.len() {
        let mut best: Option<Breach> = None;
        for g in 0..ng {
            let (a, b) = (hz(k - 1, g), hz(k, g));
            if b > omega_max_hz {
                let (t0, t1) = (traj.times()[k - 1], traj.times()[k]);
                let tc = if b == a { t0 } else { t0 + (omega_max_hz - a) / (b - a) * (t1 - t0) };
                let tc = tc.clamp(t0, t1);
                if best.map_or(true, |br| tc < br.time) {
                    best = Some(Breach { time: tc, bus: traj.gen_buses()[g] });
                }
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BranchRecord, BusKind, BusRecord, CaseFile, GeneratorRecord, Limits, LoadRecord};

    fn two_bus(secure: f64) -> GridModel {
        GridModel::from_case(CaseFile {
            name: "two".into(),
            description: None,
            base_mva: 100.0,
            buses: vec![
                BusRecord { id: 1, kind: BusKind::Generator, damping: 2.0 },
                BusRecord { id: 2, kind: BusKind::Load, damping: 0.5 },
            ],
            generators: vec![GeneratorRecord { bus: 1, inertia: 2.0, gov_p_gain: 1.0, gov_i_gain: 0.6 }],
            branches: vec![BranchRecord { from: 1, to: 2, susceptance: 1.0 }],
            loads: vec![LoadRecord { bus: 2, secure, vulnerable: None }],
            limits: Limits { nominal_freq_hz: 50.0, max_freq_dev_hz: 2.0 },
        })
        .unwrap()
    }

    #[test]
    fn coupling_vanishes_at_zero_angles() {
        let m = two_bus(0.3);
        let a = AttackConfig::none(&m, vec![1]).unwrap();
        let dynamics = SwingDynamics::new(&m, &a).unwrap();
        let dx = dynamics.rhs_vec(0.0, &[0.0, 0.0, 0.01]);
        assert_eq!(dx[1], -0.3 / 0.5);
        assert_eq!(dx[0], 0.01);
    }

    #[test]
    fn attack_inactive_before_onset() {
        let m = two_bus(0.3);
        let a = AttackConfig::none(&m, vec![1]).unwrap().with_gain(&m, 2, 1, 5.0).unwrap().with_onset(1.0);
        let dynamics = SwingDynamics::new(&m, &a).unwrap();
        let x = [0.0, 0.0, 0.01];
        assert_eq!(dynamics.rhs_vec(0.5, &x)[1], -0.3 / 0.5);
        assert!((dynamics.rhs_vec(1.0, &x)[1] - (5.0 * 0.01 - 0.3) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn load_sensing_solved_implicitly() {
        // Two load buses; bus 3 follows the frequency of load bus 2.
        let mut c = two_bus(0.3).to_case();
        c.buses.push(BusRecord { id: 3, kind: BusKind::Load, damping: 0.4 });
        c.branches.push(BranchRecord { from: 2, to: 3, susceptance: 2.0 });
        c.loads.push(LoadRecord { bus: 3, secure: 0.1, vulnerable: None });
        let m = GridModel::from_case(c).unwrap();
        let a = AttackConfig::none(&m, vec![1, 2]).unwrap().with_gain(&m, 3, 2, 0.2).unwrap();
        let dynamics = SwingDynamics::new(&m, &a).unwrap();
        let x = [0.1, -0.05, 0.02, 0.3];
        let dx = dynamics.rhs_vec(0.0, &x);
        let pf = m.flows(&x[..3]);
        // consistency: D3 δ̇3 = K ω2 − PLS3 − PF3 with ω2 = δ̇2
        let lhs = 0.4 * dx[2];
        let rhs = 0.2 * dx[1] - 0.1 - pf[2];
        assert!((lhs - rhs).abs() < 1e-14);
        assert!((0.5 * dx[1] - (-0.3 - pf[1])).abs() < 1e-14);
    }

    #[test]
    fn ramp_breach_interpolated() {
        let m = two_bus(0.0);
        let mut traj = Trajectory::new(&m);
        for k in 0..=30 {
            let t = k as f64;
            let w = 0.1 * t;
            traj.push(t, &[0.0, 0.0, w], &[w, 0.0, 0.0]).unwrap();
        }
        let br = detect_breach(&traj, 2.0).unwrap();
        assert!((br.time - 20.0).abs() < 1e-9, "{br:?}");
        assert_eq!(br.bus, 1);
    }

    #[test]
    fn zero_trajectory_never_breaches() {
        let m = two_bus(0.0);
        let mut traj = Trajectory::new(&m);
        for k in 0..10 {
            traj.push(k as f64, &[0.0; 3], &[0.0; 3]).unwrap();
        }
        assert!(detect_breach(&traj, 2.0).is_none());
    }

    #[test]
    fn hermite_exact_on_cubic() {
        let m = two_bus(0.0);
        let mut traj = Trajectory::new(&m);
        let f = |t: f64| t.powi(3) - 2.0 * t;
        let df = |t: f64| 3.0 * t * t - 2.0;
        for k in 0..4 {
            let t = k as f64 * 0.7;
            traj.push(t, &[f(t), 0.0, 0.0], &[df(t), 0.0, 0.0]).unwrap();
        }
        let (y, dy) = traj.interpolate(1.1).unwrap();
        assert!((y[0] - f(1.1)).abs() < 1e-12);
        assert!((dy[0] - df(1.1)).abs() < 1e-12);
        assert!(traj.interpolate(5.0).is_err());
    }

    #[test]
    fn non_increasing_time_rejected() {
        let m = two_bus(0.0);
        let mut traj = Trajectory::new(&m);
        traj.push(1.0, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(traj.push(1.0, &[0.0; 3], &[0.0; 3]).is_err());
    }
}
