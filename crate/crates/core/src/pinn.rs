//! Physics-informed network identifier.
//!
//! A tanh MLP maps normalized time to every bus angle and generator
//! frequency. Training minimizes data misfit, the swing-equation residuals
//! (with the attack gains and steps as extra unknowns) and an L1 penalty on
//! the attack parameters.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::estimate::{EstimateResult, EstimatorKind};
use crate::grid::GridModel;
use crate::optim::{adam, lbfgs, AdamOptions, LbfgsOptions, Objective, OptimReport, StopReason, StopRule};
use crate::pmu::MeasurementSet;

type M = DMatrix<f64>;

/// Fully connected tanh network with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNet {
    /// Layer widths including input (1) and output.
    pub widths: Vec<usize>,
    /// Row-major weights per layer, `widths[l] × widths[l+1]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl StateNet {
    /// Uniform fan-in initialization, biases zero.
    pub fn new(n_out: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fi, fo) = (widths[l], widths[l + 1]);
            let a = (3.0 / fi as f64).sqrt();
            weights.push((0..fi * fo).map(|_| rng.random_range(-a..a)).collect());
            biases.push(vec![0.0; fo]);
        }
        Self { widths, weights, biases }
    }

    pub fn n_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) {
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.len();
            w.copy_from_slice(&theta[off..off + nw]);
            off += nw;
            let nb = b.len();
            b.copy_from_slice(&theta[off..off + nb]);
            off += nb;
        }
    }

    /// Output and its derivative with respect to the (normalized) input.
    pub fn eval(&self, tau: &[f64]) -> (M, M) {
        let t = tau.len();
        let mut h = M::from_column_slice(t, 1, tau);
        let mut dh = M::from_element(t, 1, 1.0);
        let nl = self.weights.len();
        for l in 0..nl {
            let w = M::from_row_slice(self.widths[l], self.widths[l + 1], &self.weights[l]);
            let mut a = &h * &w;
            for c in 0..a.ncols() {
                a.column_mut(c).add_scalar_mut(self.biases[l][c]);
            }
            let da = &dh * &w;
            if l + 1 < nl {
                h = a.map(f64::tanh);
                dh = da.zip_map(&h, |d, y| d * (1.0 - y * y));
            } else {
                h = a;
                dh = da;
            }
        }
        (h, dh)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let net: StateNet = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let consistent = net.widths.len() >= 2
            && net.weights.len() == net.widths.len() - 1
            && net.biases.len() == net.weights.len()
            && (0..net.weights.len()).all(|l| {
                net.weights[l].len() == net.widths[l] * net.widths[l + 1] && net.biases[l].len() == net.widths[l + 1]
            });
        if !consistent {
            return Err(Error::Parse(format!("{}: inconsistent layer sizes", path.display())));
        }
        Ok(net)
    }

    /// Build the network on a tape from flat parameter leaves.
    fn on_tape<'t>(&self, tape: &'t Tape, params: &[(Var<'t>, Var<'t>)], tau: Var<'t>, ones: Var<'t>) -> (Var<'t>, Var<'t>) {
        let nl = params.len();
        let mut h = tau;
        let mut dh = ones;
        for (l, &(w, b)) in params.iter().enumerate() {
            let a = h.matmul(w).add_row(b);
            let da = dh.matmul(w);
            if l + 1 < nl {
                h = a.tanh();
                // (1 − h²) ⊙ ȧ
                dh = h.square().neg().add_scalar(1.0).mul(da);
            } else {
                h = a;
                dh = da;
            }
        }
        let _ = tape;
        (h, dh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnConfig {
    pub hidden: Vec<usize>,
    /// Weight on the L1 attack-parameter penalty.
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub lbfgs: LbfgsOptions,
    pub adam: AdamOptions,
    pub seed: u64,
    /// Clamp gains at zero after every step.
    pub nonnegative: bool,
    /// Gains and steps are trained as value / scale.
    pub gain_scale: f64,
    pub step_scale: f64,
    /// Relative weights of the physics residual families.
    pub physics_weight: f64,
    /// Data-only iterations run before joint training. Starting the joint
    /// phase from a net that already follows the measurements keeps the
    /// physics term from bending the net instead of moving the gains.
    pub fit_iters: usize,
    /// The data-only phase also ends when its loss stops improving by this
    /// relative amount over `fit_window` iterations.
    pub fit_rel_tol: f64,
    pub fit_window: usize,
    /// Data-only iterations when starting from a pre-trained net, which
    /// already follows trajectories of the same grid.
    pub warm_fit_iters: usize,
    /// If the fitted data loss is still above this multiple of the noise
    /// floor the net cannot represent the measurements: training stops
    /// there and the run is flagged as stalled.
    pub fit_floor_ratio: f64,
    /// Minimum joint iterations before a plateau counts as convergence
    /// rather than a stall.
    pub min_iters: usize,
    /// A run is low-confidence if its physics loss stays above this (in
    /// normalized units).
    pub physics_tol: f64,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50, 50],
            alpha: 1e-4,
            optimizer: OptimizerKind::Lbfgs,
            // under 0.1% improvement per 1000 iterations is a plateau
            lbfgs: LbfgsOptions { stop: StopRule { max_iters: 5000, rel_tol: 1e-3, window: 1000, ..StopRule::default() }, ..LbfgsOptions::default() },
            adam: AdamOptions::default(),
            seed: 0,
            nonnegative: true,
            gain_scale: 10.0,
            step_scale: 0.1,
            physics_weight: 10.0,
            fit_iters: 2000,
            fit_rel_tol: 1e-4,
            fit_window: 200,
            warm_fit_iters: 500,
            fit_floor_ratio: 3.0,
            min_iters: 2000,
            physics_tol: 1e-2,
        }
    }
}

/// Loss components at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Losses {
    pub data: f64,
    pub physics: f64,
    pub sparsity: f64,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.data + self.physics + self.sparsity
    }
}

/// Fixed data and scaling for one training problem.
pub struct PinnProblem<'a> {
    model: &'a GridModel,
    sensing: Vec<usize>,
    sensing_cols: Vec<usize>,
    config: PinnConfig,
    net: StateNet,
    tau: Vec<f64>,
    /// dτ/dt.
    tau_rate: f64,
    angle: M,
    omega: M,
    out_mean: M,
    out_std: M,
    incidence: M,
    branch_b: M,
    gen_cols: Vec<usize>,
    load_cols: Vec<usize>,
    inertia: M,
    gen_damping: M,
    gen_i: M,
    load_damping: M,
    load_pls: M,
    /// Residual scales: angle-rate link, generator swing, load balance.
    scales: [f64; 3],
    /// Expected data loss of a perfect fit given the synthesis noise.
    noise_floor: f64,
    gains: M,
    steps: M,
}

/// Trainable attack unknowns start at zero.
impl<'a> PinnProblem<'a> {
    pub fn new(model: &'a GridModel, ms: &MeasurementSet, sensing: &[usize], config: PinnConfig) -> Result<Self> {
        if ms.n_buses() != model.n_buses() {
            return Err(Error::Dimension { expected: model.n_buses(), got: ms.n_buses() });
        }
        let all: Vec<usize> = (1..=model.n_buses()).collect();
        ms.require(&all)?;
        let sensing_cols = sensing
            .iter()
            .map(|&b| {
                model
                    .gen_index(b)
                    .ok_or_else(|| Error::Invalid(format!("PINN sensing bus {b} must be a generator bus")))
            })
            .collect::<Result<Vec<_>>>()?;
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Invalid("hidden layer widths must be positive".into()));
        }
        if !(config.alpha >= 0.0) {
            return Err(Error::Invalid("alpha must be nonnegative".into()));
        }
        let t = ms.slots();
        if t < 2 {
            return Err(Error::Invalid("PINN needs at least two measurement slots".into()));
        }
        let n = model.n_buses();
        let g = model.n_gens();
        let l = model.n_loads();
        let span = ms.meta().t1 - ms.meta().t0;
        let span = if span > 0.0 { span } else { ms.period() * (t - 1) as f64 };
        let tau: Vec<f64> = (0..t).map(|k| -1.0 + 2.0 * (ms.time(k) - ms.meta().t0) / span).collect();
        let angle = ms.angles().clone();
        let omega = M::from_fn(t, g, |k, j| ms.freq(k, model.gen_buses()[j]));
        let stats = |col: nalgebra::DVectorView<f64>| {
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            (mean, var.sqrt().max(1e-3))
        };
        let mut out_mean = M::zeros(1, n + g);
        let mut out_std = M::zeros(1, n + g);
        for c in 0..n {
            let (m, s) = stats(angle.column(c).into());
            out_mean[(0, c)] = m;
            out_std[(0, c)] = s;
        }
        for c in 0..g {
            let (m, s) = stats(omega.column(c).into());
            out_mean[(0, n + c)] = m;
            out_std[(0, n + c)] = s;
        }
        let nb = model.branches().len();
        let mut incidence = M::zeros(nb, n);
        let mut branch_b = M::zeros(1, nb);
        for (k, &(i, j, b)) in model.branches().iter().enumerate() {
            incidence[(k, i)] = 1.0;
            incidence[(k, j)] = -1.0;
            branch_b[(0, k)] = b;
        }
        let gen_cols: Vec<usize> = model.gen_buses().iter().map(|b| b - 1).collect();
        let load_cols: Vec<usize> = model.load_buses().iter().map(|b| b - 1).collect();
        let row = |v: Vec<f64>| M::from_row_slice(1, v.len(), &v);
        let damping = model.damping();
        let inertia = row(model.inertia().to_vec());
        let gen_damping = row(gen_cols.iter().zip(model.gov_p_gain()).map(|(&c, kp)| damping[c] + kp).collect());
        let gen_i = row(model.gov_i_gain().to_vec());
        let load_damping = row(load_cols.iter().map(|&c| damping[c]).collect());
        let load_pls = row(model.secure_load().to_vec());

        // Residual scales from the measured signals.
        let omega_scale = (0..g).map(|c| out_std[(0, n + c)]).sum::<f64>() / g as f64;
        let flows = {
            let mut f = M::zeros(t, n);
            let mut buf = vec![0.0; n];
            for k in 0..t {
                let d: Vec<f64> = angle.row(k).iter().copied().collect();
                model.flows_into(&d, &mut buf);
                for c in 0..n {
                    f[(k, c)] = buf[c];
                }
            }
            f
        };
        let flow_scale = |cols: &[usize]| {
            let s: f64 = cols
                .iter()
                .map(|&c| {
                    let col = flows.column(c);
                    let m = col.mean();
                    (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64).sqrt()
                })
                .sum::<f64>()
                / cols.len().max(1) as f64;
            s.max(1e-3)
        };
        let scales = [omega_scale, flow_scale(&gen_cols), flow_scale(&load_cols)];
        let noise = ms.meta().noise;
        let angle_sigma = match noise.angle_unit {
            crate::pmu::AngleNoiseUnit::Radians => noise.sigma,
            crate::pmu::AngleNoiseUnit::Normalized => noise.sigma * std::f64::consts::PI,
        };
        let noise_floor = if noise.family == crate::pmu::NoiseFamily::None {
            0.0
        } else {
            (0..n + g)
                .map(|c| {
                    let sd = if c < n { angle_sigma } else { noise.sigma };
                    (sd / out_std[(0, c)]).powi(2).min(1.0)
                })
                .sum::<f64>()
                / (n + g) as f64
        };
        let net = StateNet::new(n + g, &config.hidden, config.seed);
        Ok(Self {
            model,
            sensing: sensing.to_vec(),
            sensing_cols,
            net,
            tau,
            tau_rate: 2.0 / span,
            angle,
            omega,
            out_mean,
            out_std,
            incidence,
            branch_b,
            gen_cols,
            load_cols,
            inertia,
            gen_damping,
            gen_i,
            load_damping,
            load_pls,
            scales,
            noise_floor,
            gains: M::zeros(l, sensing.len()),
            steps: M::zeros(1, l),
            config,
        })
    }

    pub fn config(&self) -> &PinnConfig {
        &self.config
    }
    pub fn net(&self) -> &StateNet {
        &self.net
    }
    pub fn set_net(&mut self, net: StateNet) -> Result<()> {
        if net.widths != self.net.widths {
            return Err(Error::Shape(format!("network widths {:?}, expected {:?}", net.widths, self.net.widths)));
        }
        self.net = net;
        Ok(())
    }
    pub fn gains(&self) -> &M {
        &self.gains
    }
    pub fn steps(&self) -> &M {
        &self.steps
    }
    pub fn set_attack(&mut self, gains: M, steps: M) -> Result<()> {
        if gains.shape() != self.gains.shape() || steps.shape() != self.steps.shape() {
            return Err(Error::Shape("attack parameter shape".into()));
        }
        self.gains = gains;
        self.steps = steps;
        Ok(())
    }

    fn n_attack(&self) -> usize {
        self.gains.len() + self.steps.len()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.n_attack()
    }

    /// Flat vector [network, gains/scale (row-major), steps/scale].
    pub fn theta(&self) -> Vec<f64> {
        let mut v = self.net.flatten();
        let (gs, es) = (self.config.gain_scale, self.config.step_scale);
        for r in 0..self.gains.nrows() {
            for c in 0..self.gains.ncols() {
                v.push(self.gains[(r, c)] / gs);
            }
        }
        v.extend(self.steps.iter().map(|e| e / es));
        v
    }

    pub fn set_theta(&mut self, theta: &[f64]) {
        let np = self.net.n_params();
        self.net.set_flat(&theta[..np]);
        let (gs, es) = (self.config.gain_scale, self.config.step_scale);
        let (l, s) = self.gains.shape();
        for r in 0..l {
            for c in 0..s {
                self.gains[(r, c)] = theta[np + r * s + c] * gs;
            }
        }
        for r in 0..l {
            self.steps[(0, r)] = theta[np + l * s + r] * es;
        }
    }

    /// Losses and (optionally) their gradient with respect to θ.
    pub fn evaluate(&self, theta: &[f64], grad: Option<&mut [f64]>) -> Losses {
        let tape = Tape::new();
        let t = self.tau.len();
        let n = self.model.n_buses();
        let g = self.model.n_gens();
        let (l, s) = self.gains.shape();
        let mut off = 0;
        let mut layer_vars = Vec::new();
        for li in 0..self.net.widths.len() - 1 {
            let (fi, fo) = (self.net.widths[li], self.net.widths[li + 1]);
            let w = tape.var(M::from_row_slice(fi, fo, &theta[off..off + fi * fo]));
            off += fi * fo;
            let b = tape.var(M::from_row_slice(1, fo, &theta[off..off + fo]));
            off += fo;
            layer_vars.push((w, b));
        }
        let kvar = tape.var(M::from_row_slice(l, s, &theta[off..off + l * s]));
        off += l * s;
        let evar = tape.var(M::from_row_slice(1, l, &theta[off..off + l]));

        let tau = tape.constant(M::from_column_slice(t, 1, &self.tau));
        let ones = tape.constant(M::from_element(t, 1, 1.0));
        let (z, dz) = self.net.on_tape(&tape, &layer_vars, tau, ones);
        let std = tape.constant(self.out_std.clone());
        let x = z.mul_row(std).add_row(tape.constant(self.out_mean.clone()));
        let dx = dz.mul_row(std).scale(self.tau_rate);

        let delta_cols: Vec<usize> = (0..n).collect();
        let omega_cols: Vec<usize> = (n..n + g).collect();
        let delta = x.columns(&delta_cols);
        let omega = x.columns(&omega_cols);
        let ddelta = dx.columns(&delta_cols);
        let domega = dx.columns(&omega_cols);

        // data misfit in normalized units
        let inv_std = tape.constant(self.out_std.map(|v| 1.0 / v));
        let meas = {
            let mut mm = M::zeros(t, n + g);
            mm.columns_mut(0, n).copy_from(&self.angle);
            mm.columns_mut(n, g).copy_from(&self.omega);
            tape.constant(mm)
        };
        let l_data = x.sub(meas).mul_row(inv_std).square().mean();

        // network flows
        let diff = delta.matmul(tape.constant(self.incidence.transpose()));
        let pf = diff.sin().mul_row(tape.constant(self.branch_b.clone())).matmul(tape.constant(self.incidence.clone()));
        let pf_gen = pf.columns(&self.gen_cols);
        let pf_load = pf.columns(&self.load_cols);

        let f1 = ddelta.columns(&self.gen_cols).sub(omega).scale(1.0 / self.scales[0]);
        let f2 = domega
            .mul_row(tape.constant(self.inertia.clone()))
            .add(omega.mul_row(tape.constant(self.gen_damping.clone())))
            .add(delta.columns(&self.gen_cols).mul_row(tape.constant(self.gen_i.clone())))
            .add(pf_gen)
            .scale(1.0 / self.scales[1]);
        let gains = kvar.scale(self.config.gain_scale);
        let steps = evar.scale(self.config.step_scale);
        let attack = omega.columns(&self.sensing_cols).matmul(gains.transpose());
        let f3 = ddelta
            .columns(&self.load_cols)
            .mul_row(tape.constant(self.load_damping.clone()))
            .sub(attack)
            .add_row(steps)
            .add_row(tape.constant(self.load_pls.clone()))
            .add(pf_load)
            .scale(1.0 / self.scales[2]);
        let l_phys = f1.square().mean().add(f2.square().mean()).add(f3.square().mean()).scale(self.config.physics_weight / 3.0);
        let l_sparse = gains.smooth_abs(1e-6).sum().add(steps.smooth_abs(1e-6).sum()).scale(self.config.alpha);
        let total = l_data.add(l_phys).add(l_sparse);
        let losses = Losses { data: l_data.scalar(), physics: l_phys.scalar(), sparsity: l_sparse.scalar() };
        if let Some(grad) = grad {
            let gr = tape.backward(total);
            let mut off = 0;
            for &(w, b) in &layer_vars {
                for gv in [gr.wrt(w), gr.wrt(b)] {
                    // row-major flattening
                    for r in 0..gv.nrows() {
                        for c in 0..gv.ncols() {
                            grad[off] = gv[(r, c)];
                            off += 1;
                        }
                    }
                }
            }
            let gk = gr.wrt(kvar);
            for r in 0..l {
                for c in 0..s {
                    grad[off] = gk[(r, c)];
                    off += 1;
                }
            }
            let ge = gr.wrt(evar);
            for r in 0..l {
                grad[off] = ge[(0, r)];
                off += 1;
            }
        }
        losses
    }

    /// Losses at the current parameters.
    pub fn losses(&self) -> Losses {
        self.evaluate(&self.theta(), None)
    }

    /// Network prediction of (angles T×N, generator frequencies T×G).
    pub fn predict(&self) -> (M, M) {
        let (z, _) = self.net.eval(&self.tau);
        let n = self.model.n_buses();
        let g = self.model.n_gens();
        let x = M::from_fn(z.nrows(), n + g, |r, c| self.out_mean[(0, c)] + self.out_std[(0, c)] * z[(r, c)]);
        (x.columns(0, n).into_owned(), x.columns(n, g).into_owned())
    }

    pub fn sensing(&self) -> &[usize] {
        &self.sensing
    }

    /// Data loss a perfect fit would leave, from the synthesis noise level.
    pub fn noise_floor(&self) -> f64 {
        self.noise_floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub data: f64,
    pub physics: f64,
    pub sparsity: f64,
}

struct Trainer<'p, 'a> {
    problem: &'p PinnProblem<'a>,
    trace: Vec<TraceRow>,
    last: Losses,
    every: usize,
}

impl Objective for Trainer<'_, '_> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.last = self.problem.evaluate(x, Some(grad));
        self.last.total()
    }
    fn project(&mut self, x: &mut [f64]) -> bool {
        if !self.problem.config.nonnegative {
            return false;
        }
        let np = self.problem.net.n_params();
        let nk = self.problem.gains.len();
        let mut changed = false;
        for v in &mut x[np..np + nk] {
            if *v < 0.0 {
                *v = 0.0;
                changed = true;
            }
        }
        changed
    }
    fn observe(&mut self, iter: usize, _value: f64) {
        if iter % self.every == 0 {
            self.trace.push(TraceRow { iter, data: self.last.data, physics: self.last.physics, sparsity: self.last.sparsity });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub optimizer: OptimReport,
    /// Iterations spent in the data-only phase (0 when skipped).
    pub fit_iterations: usize,
    pub initial: Losses,
    pub final_losses: Losses,
    pub trace: Vec<TraceRow>,
    /// Training ended early: the data fit stayed far above the noise floor,
    /// or joint training plateaued before `min_iters`.
    pub stalled: bool,
    /// Stalled, or the physics residual stayed above tolerance.
    pub low_confidence: bool,
    pub seconds: f64,
}

impl TrainReport {
    pub fn total_iterations(&self) -> usize {
        self.fit_iterations + self.optimizer.iterations
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut cw = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        cw.write_record(["iter", "L1", "L2", "L3", "total"]).map_err(err)?;
        for r in &self.trace {
            cw.write_record([
                r.iter.to_string(),
                r.data.to_string(),
                r.physics.to_string(),
                r.sparsity.to_string(),
                (r.data + r.physics + r.sparsity).to_string(),
            ])
            .map_err(err)?;
        }
        cw.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Train all unknowns jointly.
pub fn train(problem: &mut PinnProblem<'_>) -> Result<TrainReport> {
    let start = Instant::now();
    let mut theta = problem.theta();
    let initial = problem.evaluate(&theta, None);
    if !initial.total().is_finite() {
        return Err(Error::Divergence(0));
    }
    let cfg = problem.config.clone();
    let mut trainer = Trainer { problem, trace: Vec::new(), last: initial, every: 1 };
    trainer.trace.push(TraceRow { iter: 0, data: initial.data, physics: initial.physics, sparsity: initial.sparsity });
    let report = match cfg.optimizer {
        OptimizerKind::Lbfgs => lbfgs(&mut trainer, &mut theta, &cfg.lbfgs),
        OptimizerKind::Adam => adam(&mut trainer, &mut theta, &cfg.adam),
    };
    let trace = std::mem::take(&mut trainer.trace);
    if report.reason == StopReason::NonFinite {
        return Err(Error::Divergence(report.iterations));
    }
    problem.set_theta(&theta);
    let final_losses = problem.evaluate(&theta, None);
    let stalled = matches!(report.reason, StopReason::Plateau | StopReason::LineSearch) && report.iterations < cfg.min_iters;
    let low_confidence = stalled || final_losses.physics > cfg.physics_tol;
    Ok(TrainReport {
        optimizer: report,
        fit_iterations: 0,
        initial,
        final_losses,
        trace,
        stalled,
        low_confidence,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fit only the network to the measurements for at most `iters`
/// iterations; the attack unknowns are left untouched.
pub fn fit_data(problem: &mut PinnProblem<'_>, iters: usize) -> Result<TrainReport> {
    let saved = problem.config.clone();
    problem.config.physics_weight = 0.0;
    problem.config.alpha = 0.0;
    for stop in [&mut problem.config.lbfgs.stop, &mut problem.config.adam.stop] {
        stop.max_iters = iters;
        stop.rel_tol = saved.fit_rel_tol;
        stop.window = saved.fit_window;
    }
    let report = train(problem);
    problem.config = saved;
    report
}

/// Fit a network to `ms` alone, e.g. no-attack measurements for the
/// pre-trained mode.
pub fn pretrain(model: &GridModel, ms: &MeasurementSet, sensing: &[usize], config: PinnConfig, iters: usize) -> Result<StateNet> {
    let mut p = PinnProblem::new(model, ms, sensing, config)?;
    fit_data(&mut p, iters)?;
    Ok(p.net.clone())
}

/// Data-fit phase (unless `fit_iters` is 0) followed by joint training.
/// A fit that stays well above the noise floor ends training early.
pub fn train_staged(problem: &mut PinnProblem<'_>) -> Result<TrainReport> {
    let start = Instant::now();
    let cfg = problem.config.clone();
    let fit = if cfg.fit_iters > 0 { Some(fit_data(problem, cfg.fit_iters)?) } else { None };
    if let Some(fit) = &fit {
        let limit = cfg.fit_floor_ratio * problem.noise_floor.max(1e-3);
        if fit.final_losses.data > limit {
            let mut report = fit.clone();
            report.fit_iterations = fit.optimizer.iterations;
            report.optimizer.iterations = 0;
            report.final_losses = problem.losses();
            report.stalled = true;
            report.low_confidence = true;
            report.seconds = start.elapsed().as_secs_f64();
            return Ok(report);
        }
    }
    let mut report = train(problem)?;
    if let Some(fit) = fit {
        let offset = fit.optimizer.iterations;
        let mut trace = fit.trace;
        trace.extend(report.trace.iter().skip(1).map(|r| TraceRow { iter: r.iter + offset, ..*r }));
        report.trace = trace;
        report.fit_iterations = offset;
        report.initial = fit.initial;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Train on `ms` and package the attack estimates.
pub fn identify(
    model: &GridModel,
    ms: &MeasurementSet,
    truth: &AttackConfig,
    config: PinnConfig,
    warm_start: Option<StateNet>,
) -> Result<(EstimateResult, TrainReport)> {
    let start = Instant::now();
    let mut p = PinnProblem::new(model, ms, truth.sensing_buses(), config)?;
    if let Some(net) = warm_start {
        p.set_net(net)?;
        p.config.fit_iters = p.config.fit_iters.min(p.config.warm_fit_iters);
        // the shortened fit says nothing about representability
        p.config.fit_floor_ratio = f64::INFINITY;
    }
    let report = train_staged(&mut p)?;
    let steps: Vec<f64> = p.steps.iter().copied().collect();
    let mut res = EstimateResult::new(EstimatorKind::Pinn, model, truth, p.gains.clone(), steps)?;
    res.converged = !report.stalled && report.optimizer.reason != StopReason::IterationCap;
    res.low_confidence = report.low_confidence;
    res.notes.push(format!(
        "{:?} after {} + {} iterations; losses data {:.3e} physics {:.3e}",
        report.optimizer.reason,
        report.fit_iterations,
        report.optimizer.iterations,
        report.final_losses.data,
        report.final_losses.physics
    ));
    res.seconds = start.elapsed().as_secs_f64();
    Ok((res, report))
}
