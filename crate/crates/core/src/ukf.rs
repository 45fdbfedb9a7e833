//! Unscented Kalman filter over the state augmented with attack parameters.
//!
//! The physical part is `[δ (all buses), ω (generators)]`; the parameter
//! part holds the gains and step of either one victim row or every load row.
//! Parameters follow a random walk. Frames measure δ and generator ω
//! directly, so the update is the exact linear Kalman update.
//!
//! Load buses have tiny damping, which makes the swing equations stiff.
//! Sigma points are propagated with a two-stage Rosenbrock (W-method)
//! scheme whose Jacobian is taken once per frame at the mean; it is
//! L-stable, second order for any Jacobian approximation, and far cheaper
//! than an explicit scheme at the step sizes the stiffness would demand.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::estimate::{EstimateResult, EstimatorKind};
use crate::grid::GridModel;
use crate::pmu::MeasurementSet;

/// Which parameters are augmented into the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UkfMode {
    /// Gains and step of one victim load bus (S + 1 unknowns).
    Row { victim: usize },
    /// Every gain and step.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    /// Spread of the sigma points around the mean.
    pub spread: f64,
    /// Prior distribution weight (2 is optimal for Gaussians).
    pub secondary: f64,
    /// Tertiary scaling.
    pub prior: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self { spread: 1e-3, secondary: 2.0, prior: 0.0 }
    }
}

impl SigmaParams {
    /// Mean weights, covariance weights and point scaling for dimension n.
    pub fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let nf = n as f64;
        let lambda = self.spread * self.spread * (nf + self.prior) - nf;
        let denom = nf + lambda;
        let wi = 1.0 / (2.0 * denom);
        let mut wm = vec![wi; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / denom;
        wc[0] = wm[0] + (1.0 - self.spread * self.spread + self.secondary);
        (wm, wc, denom.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UkfConfig {
    pub mode: UkfMode,
    pub sigma: SigmaParams,
    /// Initial variance of each gain and each step.
    pub gain_var0: f64,
    pub step_var0: f64,
    /// Random-walk variance per frame for parameters and physical states.
    /// A nonzero state walk absorbs the discretization and noise mismatch;
    /// with none the filter grows overconfident and the correlated sensing
    /// columns pick up large offsetting gains.
    pub param_walk: f64,
    pub state_walk: f64,
    /// Measurement variance; `None` uses the synthesis σ² of the set.
    pub meas_var: Option<f64>,
    /// Floor applied to the measurement variance.
    pub meas_var_floor: f64,
    /// Rosenbrock substeps per frame.
    pub substeps: usize,
    /// Record the parameter trace every this many frames.
    pub trace_every: usize,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            mode: UkfMode::Row { victim: 19 },
            sigma: SigmaParams::default(),
            gain_var0: 10.0,
            step_var0: 0.01,
            param_walk: 1e-6,
            state_walk: 1e-3,
            meas_var: None,
            meas_var_floor: 1e-8,
            substeps: 4,
            trace_every: 1,
        }
    }
}

const GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

/// Filter state: augmented mean and covariance plus fixed model data.
#[derive(Debug, Clone)]
pub struct UkfFilter<'a> {
    model: &'a GridModel,
    sensing: Vec<usize>,
    /// Generator state index of each sensing bus.
    sense_gen: Vec<usize>,
    /// Load indices whose rows are filtered.
    rows: Vec<usize>,
    config: UkfConfig,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    meas_var: f64,
    steps_done: usize,
}

impl<'a> UkfFilter<'a> {
    /// Start from a measured physical state with variance `state_var`.
    pub fn new(model: &'a GridModel, sensing: &[usize], config: UkfConfig, x0: &[f64], meas_var: f64) -> Result<Self> {
        if x0.len() != model.state_dim() {
            return Err(Error::Dimension { expected: model.state_dim(), got: x0.len() });
        }
        let sense_gen = sensing
            .iter()
            .map(|&b| model.gen_index(b).ok_or_else(|| Error::Invalid(format!("UKF sensing bus {b} must be a generator bus"))))
            .collect::<Result<Vec<_>>>()?;
        let rows = match config.mode {
            UkfMode::Row { victim } => vec![model.load_index(victim).ok_or(Error::NotLoadBus(victim))?],
            UkfMode::Full => (0..model.n_loads()).collect(),
        };
        if config.substeps == 0 {
            return Err(Error::Invalid("substeps must be positive".into()));
        }
        if !(config.sigma.spread > 0.0) {
            return Err(Error::Invalid("sigma-point spread must be positive".into()));
        }
        let meas_var = meas_var.max(config.meas_var_floor);
        let np = model.state_dim();
        let s = sensing.len();
        let nparam = rows.len() * (s + 1);
        let mut mean = DVector::zeros(np + nparam);
        mean.rows_mut(0, np).copy_from_slice(x0);
        let mut diag = vec![meas_var; np];
        diag.extend(std::iter::repeat(config.gain_var0).take(rows.len() * s));
        diag.extend(std::iter::repeat(config.step_var0).take(rows.len()));
        let cov = DMatrix::from_diagonal(&DVector::from_vec(diag));
        Ok(Self { model, sensing: sensing.to_vec(), sense_gen, rows, config, mean, cov, meas_var, steps_done: 0 })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn physical_dim(&self) -> usize {
        self.model.state_dim()
    }
    pub fn n_params(&self) -> usize {
        self.dim() - self.physical_dim()
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Overwrite the parameter part of the mean (e.g. to start at truth).
    pub fn set_params(&mut self, gains: &DMatrix<f64>, steps: &[f64]) -> Result<()> {
        let (l, s) = (self.model.n_loads(), self.sensing.len());
        if gains.shape() != (l, s) || steps.len() != l {
            return Err(Error::Shape("attack parameter shape".into()));
        }
        let np = self.physical_dim();
        let nr = self.rows.len();
        for (r, &row) in self.rows.iter().enumerate() {
            for c in 0..s {
                self.mean[np + r * s + c] = gains[(row, c)];
            }
            self.mean[np + nr * s + r] = steps[row];
        }
        Ok(())
    }

    /// Set the variance of every parameter (off-diagonal terms cleared).
    pub fn set_param_variance(&mut self, var: f64) {
        let np = self.physical_dim();
        let n = self.dim();
        for i in np..n {
            for j in 0..n {
                self.cov[(i, j)] = 0.0;
                self.cov[(j, i)] = 0.0;
            }
            self.cov[(i, i)] = var;
        }
    }

    /// Full gain matrix (unfiltered rows are zero).
    pub fn gains(&self) -> DMatrix<f64> {
        let (l, s) = (self.model.n_loads(), self.sensing.len());
        let np = self.physical_dim();
        let mut k = DMatrix::zeros(l, s);
        for (r, &row) in self.rows.iter().enumerate() {
            for c in 0..s {
                k[(row, c)] = self.mean[np + r * s + c];
            }
        }
        k
    }

    pub fn steps(&self) -> Vec<f64> {
        let np = self.physical_dim();
        let s = self.sensing.len();
        let nr = self.rows.len();
        let mut e = vec![0.0; self.model.n_loads()];
        for (r, &row) in self.rows.iter().enumerate() {
            e[row] = self.mean[np + nr * s + r];
        }
        e
    }

    /// Human-readable name of parameter `i` (0-based within the parameters).
    pub fn param_label(&self, i: usize) -> String {
        let s = self.sensing.len();
        let nr = self.rows.len();
        if i < nr * s {
            let bus = self.model.load_buses()[self.rows[i / s]];
            format!("K_{}_{}", bus, self.sensing[i % s])
        } else {
            format!("eps_{}", self.model.load_buses()[self.rows[i - nr * s]])
        }
    }

    /// Attacked swing equations with the parameters stored in `p`.
    fn rhs(&self, x: &[f64], p: &[f64], dx: &mut [f64]) {
        let m = self.model;
        let n = m.n_buses();
        let s = self.sensing.len();
        let nr = self.rows.len();
        let (delta, omega) = x.split_at(n);
        m.flows_into(delta, &mut dx[..n]);
        for (k, &g) in m.gen_buses().iter().enumerate() {
            let d = m.damping()[g - 1];
            dx[n + k] = (-(d + m.gov_p_gain()[k]) * omega[k] - m.gov_i_gain()[k] * delta[g - 1] - dx[g - 1]) / m.inertia()[k];
            dx[g - 1] = omega[k];
        }
        let mut attack = vec![0.0; m.n_loads()];
        for (r, &row) in self.rows.iter().enumerate() {
            let mut acc = -p[nr * s + r];
            for c in 0..s {
                acc += p[r * s + c] * omega[self.sense_gen[c]];
            }
            attack[row] = acc;
        }
        for (k, &l) in m.load_buses().iter().enumerate() {
            dx[l - 1] = (attack[k] - m.secure_load()[k] - dx[l - 1]) / m.damping()[l - 1];
        }
    }

    /// Jacobian of the physical dynamics at `(x, p)`.
    fn jacobian(&self, x: &[f64], p: &[f64]) -> DMatrix<f64> {
        let m = self.model;
        let n = m.n_buses();
        let dim = m.state_dim();
        let s = self.sensing.len();
        // flow Jacobian
        let mut jf = DMatrix::<f64>::zeros(n, n);
        for &(i, j, b) in m.branches() {
            let c = b * (x[i] - x[j]).cos();
            jf[(i, i)] += c;
            jf[(i, j)] -= c;
            jf[(j, j)] += c;
            jf[(j, i)] -= c;
        }
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for (k, &g) in m.gen_buses().iter().enumerate() {
            let inv_m = 1.0 / m.inertia()[k];
            jac[(g - 1, n + k)] = 1.0;
            for c in 0..n {
                jac[(n + k, c)] = -jf[(g - 1, c)] * inv_m;
            }
            jac[(n + k, g - 1)] -= m.gov_i_gain()[k] * inv_m;
            jac[(n + k, n + k)] = -(m.damping()[g - 1] + m.gov_p_gain()[k]) * inv_m;
        }
        for &l in m.load_buses() {
            let inv_d = 1.0 / m.damping()[l - 1];
            for c in 0..n {
                jac[(l - 1, c)] = -jf[(l - 1, c)] * inv_d;
            }
        }
        for (r, &row) in self.rows.iter().enumerate() {
            let bus = m.load_buses()[row];
            let inv_d = 1.0 / m.damping()[bus - 1];
            for c in 0..s {
                jac[(bus - 1, n + self.sense_gen[c])] += p[r * s + c] * inv_d;
            }
        }
        jac
    }

    /// Advance one physical state over `dt` with a fixed iteration matrix.
    fn propagate(&self, lu: &LU<f64, Dyn, Dyn>, x: &mut [f64], p: &[f64], h: f64) {
        let dim = x.len();
        let mut f = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        for _ in 0..self.config.substeps {
            self.rhs(x, p, &mut f);
            let k1 = lu.solve(&DVector::from_column_slice(&f)).expect("iteration matrix is invertible");
            for i in 0..dim {
                y[i] = x[i] + h * k1[i];
            }
            self.rhs(&y, p, &mut f);
            for i in 0..dim {
                f[i] -= 2.0 * k1[i];
            }
            let k2 = lu.solve(&DVector::from_column_slice(&f)).expect("iteration matrix is invertible");
            for i in 0..dim {
                x[i] += h * (1.5 * k1[i] + 0.5 * k2[i]);
            }
        }
    }

    /// Time update over `dt`.
    pub fn predict(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Invalid("dt must be positive".into()));
        }
        let n = self.dim();
        let np = self.physical_dim();
        let chol = factor(&self.cov, self.steps_done)?;
        let (wm, wc, scale) = self.config.sigma.weights(n);
        let h = dt / self.config.substeps as f64;
        let mean = self.mean.as_slice().to_vec();
        let jac = self.jacobian(&mean[..np], &mean[np..]);
        let w = DMatrix::identity(np, np) - jac * (GAMMA * h);
        let lu = w.lu();
        if !lu.is_invertible() {
            return Err(Error::Invalid("singular Rosenbrock iteration matrix".into()));
        }
        let mut points = DMatrix::zeros(n, 2 * n + 1);
        points.column_mut(0).copy_from(&self.mean);
        for i in 0..n {
            let col = chol.column(i) * scale;
            points.column_mut(1 + i).copy_from(&(&self.mean + &col));
            points.column_mut(1 + n + i).copy_from(&(&self.mean - &col));
        }
        for j in 0..2 * n + 1 {
            let mut col: Vec<f64> = points.column(j).iter().copied().collect();
            let (x, p) = col.split_at_mut(np);
            self.propagate(&lu, x, p, h);
            points.column_mut(j).copy_from_slice(&col);
        }
        let (mean, cov) = combine(&points, &wm, &wc);
        self.mean = mean;
        self.cov = cov;
        for i in 0..n {
            self.cov[(i, i)] += if i < np { self.config.state_walk } else { self.config.param_walk };
        }
        Ok(())
    }

    /// Measurement update with `[δ (all buses), ω (generators)]`.
    pub fn update(&mut self, z: &[f64]) -> Result<()> {
        let m = self.physical_dim();
        if z.len() != m {
            return Err(Error::Dimension { expected: m, got: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("measurement frame has missing channels".into()));
        }
        let mut s = self.cov.view((0, 0), (m, m)).into_owned();
        for i in 0..m {
            s[(i, i)] += self.meas_var;
        }
        let s_chol = Cholesky::new(s).ok_or(Error::Cholesky(self.steps_done))?;
        let pht = self.cov.columns(0, m).into_owned();
        // gain = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ
        let gain = s_chol.solve(&pht.transpose()).transpose();
        let innov = DVector::from_column_slice(z) - self.mean.rows(0, m);
        self.mean += &gain * innov;
        self.cov -= &gain * pht.transpose();
        self.cov = condition(&self.cov, self.steps_done)?;
        Ok(())
    }

    /// One predict/update cycle.
    pub fn step(&mut self, z: &[f64], dt: f64) -> Result<()> {
        self.predict(dt)?;
        self.update(z)?;
        self.steps_done += 1;
        Ok(())
    }
}

/// Weighted mean and covariance of sigma points (columns).
fn combine(points: &DMatrix<f64>, wm: &[f64], wc: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.nrows();
    let base = points.column(0).into_owned();
    // Offsets from the centre point keep the huge centre weight out of the sum.
    let mut mean = base.clone();
    for j in 1..points.ncols() {
        mean.axpy(wm[j], &(points.column(j) - &base), 1.0);
    }
    let mut dev = points.clone();
    for j in 0..points.ncols() {
        let mut c = dev.column_mut(j);
        c -= &mean;
    }
    let mut weighted = dev.clone();
    for j in 0..points.ncols() {
        weighted.column_mut(j).scale_mut(wc[j]);
    }
    let mut cov = DMatrix::zeros(n, n);
    cov.gemm(1.0, &weighted, &dev.transpose(), 0.0);
    (mean, symmetrize(&cov))
}

/// Unscented transform of `(mean, cov)` through `f`.
pub fn unscented_transform<F>(mean: &DVector<f64>, cov: &DMatrix<f64>, sigma: &SigmaParams, f: F) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = mean.len();
    let chol = factor(cov, 0)?;
    let (wm, wc, scale) = sigma.weights(n);
    let first = f(mean);
    let mut out = DMatrix::zeros(first.len(), 2 * n + 1);
    out.column_mut(0).copy_from(&first);
    for i in 0..n {
        let col = chol.column(i) * scale;
        out.column_mut(1 + i).copy_from(&f(&(mean + &col)));
        out.column_mut(1 + n + i).copy_from(&f(&(mean - &col)));
    }
    Ok(combine(&out, &wm, &wc))
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Lower Cholesky factor, adding growing jitter if needed.
fn factor(p: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let scale = (p.trace() / n.max(1) as f64).abs().max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut q = p.clone();
        for i in 0..n {
            q[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(q) {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 100.0 };
    }
    Err(Error::Cholesky(step))
}

/// Symmetrize and make sure the smallest eigenvalue is ≥ −1e-9. Negative
/// eigenvalues beyond that are clipped to zero.
fn condition(p: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let p = symmetrize(p);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Cholesky(step));
    }
    let mut shifted = p.clone();
    for i in 0..p.nrows() {
        shifted[(i, i)] += 1e-9;
    }
    if Cholesky::new(shifted).is_some() {
        return Ok(p);
    }
    let eig = SymmetricEigen::new(p);
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let fixed = symmetrize(&fixed);
    let mut shifted = fixed.clone();
    for i in 0..fixed.nrows() {
        shifted[(i, i)] += 1e-9;
    }
    if Cholesky::new(shifted).is_some() {
        Ok(fixed)
    } else {
        Err(Error::Cholesky(step))
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(p)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamTraceRow {
    pub t: f64,
    pub param: usize,
    pub estimate: f64,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct UkfRun {
    pub result: EstimateResult,
    pub labels: Vec<String>,
    pub trace: Vec<ParamTraceRow>,
    /// Frame at which the filter broke down, if it did.
    pub aborted_at: Option<usize>,
}

impl UkfRun {
    /// `t,param_id,estimate,variance`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut cw = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        cw.write_record(["t", "param_id", "estimate", "variance"]).map_err(err)?;
        for r in &self.trace {
            cw.write_record([r.t.to_string(), self.labels[r.param].clone(), r.estimate.to_string(), r.variance.to_string()])
                .map_err(err)?;
        }
        cw.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    /// Trace of one parameter as (t, estimate, variance).
    pub fn series(&self, label: &str) -> Vec<(f64, f64, f64)> {
        match self.labels.iter().position(|l| l == label) {
            Some(i) => self.trace.iter().filter(|r| r.param == i).map(|r| (r.t, r.estimate, r.variance)).collect(),
            None => Vec::new(),
        }
    }
}

fn frame(model: &GridModel, ms: &MeasurementSet, k: usize) -> Vec<f64> {
    let mut z: Vec<f64> = ms.angles().row(k).iter().copied().collect();
    z.extend(model.gen_buses().iter().map(|&b| ms.freq(k, b)));
    z
}

/// Filter every frame of `ms` and package the final estimates. A filter
/// breakdown is returned as an error.
pub fn run_ukf(model: &GridModel, ms: &MeasurementSet, truth: &AttackConfig, config: UkfConfig) -> Result<UkfRun> {
    let (run, failure) = filter_frames(model, ms, truth, config)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(run),
    }
}

/// Like [`run_ukf`], but a breakdown mid-run keeps the estimates of the last
/// good frame and marks the result low-confidence.
pub fn run_ukf_tolerant(model: &GridModel, ms: &MeasurementSet, truth: &AttackConfig, config: UkfConfig) -> Result<UkfRun> {
    let (mut run, failure) = filter_frames(model, ms, truth, config)?;
    if let Some(e) = failure {
        run.result.converged = false;
        run.result.low_confidence = true;
        run.result.notes.push(format!("filter stopped: {e}"));
    }
    Ok(run)
}

fn filter_frames(model: &GridModel, ms: &MeasurementSet, truth: &AttackConfig, config: UkfConfig) -> Result<(UkfRun, Option<Error>)> {
    let start = Instant::now();
    if ms.n_buses() != model.n_buses() {
        return Err(Error::Dimension { expected: model.n_buses(), got: ms.n_buses() });
    }
    let all: Vec<usize> = (1..=model.n_buses()).collect();
    ms.require(&all)?;
    if ms.slots() < 2 {
        return Err(Error::Invalid("UKF needs at least two frames".into()));
    }
    let sigma = ms.meta().noise.sigma;
    let meas_var = config.meas_var.unwrap_or(sigma * sigma);
    let every = config.trace_every.max(1);
    let kind = match config.mode {
        UkfMode::Row { .. } => EstimatorKind::UkfRow,
        UkfMode::Full => EstimatorKind::UkfFull,
    };
    let mut filter = UkfFilter::new(model, truth.sensing_buses(), config, &frame(model, ms, 0), meas_var)?;
    let labels: Vec<String> = (0..filter.n_params()).map(|i| filter.param_label(i)).collect();
    let mut trace = Vec::new();
    let record = |f: &UkfFilter, t: f64, trace: &mut Vec<ParamTraceRow>| {
        let np = f.physical_dim();
        for i in 0..f.n_params() {
            trace.push(ParamTraceRow { t, param: i, estimate: f.mean[np + i], variance: f.cov[(np + i, np + i)] });
        }
    };
    record(&filter, ms.time(0), &mut trace);
    let dt = ms.period();
    let (mut gains, mut steps) = (filter.gains(), filter.steps());
    let mut failure = None;
    let mut aborted_at = None;
    for k in 1..ms.slots() {
        if let Err(e) = filter.step(&frame(model, ms, k), dt) {
            failure = Some(e);
            aborted_at = Some(k);
            break;
        }
        gains = filter.gains();
        steps = filter.steps();
        if k % every == 0 || k + 1 == ms.slots() {
            record(&filter, ms.time(k), &mut trace);
        }
    }
    let mut result = EstimateResult::new(kind, model, truth, gains, steps)?;
    result.seconds = start.elapsed().as_secs_f64();
    Ok((UkfRun { result, labels, trace, aborted_at }, failure))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_weights_sum_to_one() {
        for n in [1, 5, 60, 368] {
            let (wm, wc, _) = SigmaParams::default().weights(n);
            let s: f64 = wm.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
            assert_eq!(wc.len(), 2 * n + 1);
        }
    }

    #[test]
    fn linear_transform_is_exact() {
        let mean = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.0, 1.0, 0.0, 0.4, 0.2, 0.3]);
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.8]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (m, c) = unscented_transform(&mean, &p, &SigmaParams::default(), |x| &a * x + &b).unwrap();
        assert!((m - (&a * &mean + &b)).amax() < 1e-10);
        assert!((c - &a * &p * a.transpose()).amax() < 1e-10);
    }

    #[test]
    fn conditioning_clips_negative_eigenvalues() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let q = condition(&p, 0).unwrap();
        assert!(min_eigenvalue(&q) >= -1e-12);
    }
}
