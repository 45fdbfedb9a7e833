//! Sparse-regression identifier: per-load-bus linear systems solved as a
//! LASSO problem by cyclic coordinate descent.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::estimate::{EstimateResult, EstimatorKind};
use crate::grid::GridModel;
use crate::pmu::MeasurementSet;

/// θ̇ = Ω k for one load bus, with k = (K_{i,k_1..k_S}, ε_i).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub bus: usize,
    pub damping: f64,
    pub sensing: Vec<usize>,
    pub response: DVector<f64>,
    pub design: DMatrix<f64>,
}

/// Buses whose channels the regression for `bus` reads: the bus itself,
/// its network neighbours and the sensing buses.
pub fn information_pattern(model: &GridModel, bus: usize, sensing: &[usize]) -> Vec<usize> {
    let mut v = vec![bus];
    v.extend_from_slice(model.neighbors().neighbors(bus));
    v.extend_from_slice(sensing);
    v.sort_unstable();
    v.dedup();
    v
}

pub fn assemble(model: &GridModel, ms: &MeasurementSet, bus: usize, sensing: &[usize]) -> Result<RegressionSystem> {
    let r = model.load_index(bus).ok_or(Error::NotLoadBus(bus))?;
    if ms.n_buses() != model.n_buses() {
        return Err(Error::Dimension { expected: model.n_buses(), got: ms.n_buses() });
    }
    let nbrs = model.neighbors();
    let nbrs = nbrs.neighbors(bus);
    ms.require(&[bus])?;
    ms.require(nbrs)?;
    ms.require(sensing)?;
    let d = model.damping()[bus - 1];
    let pls = model.secure_load()[r];
    let t = ms.slots();
    let s = sensing.len();
    let mut response = DVector::zeros(t);
    let mut design = DMatrix::zeros(t, s + 1);
    for k in 0..t {
        let di = ms.angle(k, bus);
        let flow: f64 = nbrs.iter().map(|&j| model.b(bus, j) * (di - ms.angle(k, j)).sin()).sum();
        response[k] = ms.freq(k, bus) + (pls + flow) / d;
        for (c, &sb) in sensing.iter().enumerate() {
            design[(k, c)] = ms.freq(k, sb) / d;
        }
        design[(k, s)] = -1.0 / d;
    }
    Ok(RegressionSystem { bus, damping: d, sensing: sensing.to_vec(), response, design })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub lambda: f64,
    /// Relative KKT tolerance.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Keep gain coordinates (all but the last) nonnegative.
    pub nonnegative: bool,
    /// Scale columns and the response to unit norm before thresholding, so
    /// λ is a threshold on correlations and comparable across buses.
    pub standardize: bool,
    /// Keep the per-sweep objective values.
    pub trace: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { lambda: 0.3, tol: 1e-9, max_sweeps: 200_000, nonnegative: true, standardize: true, trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseSolution {
    /// (K_{i,k_1..k_S}, ε_i) in the original units.
    pub coef: Vec<f64>,
    pub lambda: f64,
    /// Per-coordinate penalty weights: ‖θ̇‖·‖Ω_j‖ when standardized, else 1.
    pub weights: Vec<f64>,
    /// ‖Ωk − θ̇‖² + λ Σ w_j |k_j|.
    pub objective: f64,
    pub sweeps: usize,
    /// KKT violation scaled by max(1, ‖2Zᵀy‖∞) in the working coordinates.
    pub kkt_residual: f64,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

impl SparseSolution {
    pub fn gains(&self) -> &[f64] {
        &self.coef[..self.coef.len() - 1]
    }
    pub fn step(&self) -> f64 {
        self.coef[self.coef.len() - 1]
    }
}

/// ‖Ωk − y‖² + λ Σ w_j |k_j| evaluated directly.
pub fn lasso_objective(design: &DMatrix<f64>, response: &DVector<f64>, coef: &[f64], weights: &[f64], lambda: f64) -> f64 {
    let k = DVector::from_column_slice(coef);
    let r = design * k - response;
    r.norm_squared() + lambda * coef.iter().zip(weights).map(|(c, w)| w * c.abs()).sum::<f64>()
}

fn soft(z: f64, t: f64, nonneg: bool) -> f64 {
    if nonneg {
        (z - t).max(0.0)
    } else {
        z.signum() * (z.abs() - t).max(0.0)
    }
}

struct Working {
    gram: DMatrix<f64>,
    corr: DVector<f64>,
    yy: f64,
    lambda: f64,
    constrained: Vec<bool>,
    scale: f64,
}

impl Working {
    fn objective(&self, b: &DVector<f64>) -> f64 {
        let q = (b.transpose() * &self.gram * b)[(0, 0)];
        q - 2.0 * self.corr.dot(b) + self.yy + self.lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn kkt(&self, b: &DVector<f64>) -> f64 {
        // gradient of the smooth part: 2(Gb − c)
        let g = (&self.gram * b - &self.corr) * 2.0;
        let mut worst: f64 = 0.0;
        for j in 0..b.len() {
            if self.gram[(j, j)] == 0.0 {
                continue;
            }
            let v = if b[j] != 0.0 {
                (g[j] + self.lambda * b[j].signum()).abs()
            } else if self.constrained[j] {
                (-g[j] - self.lambda).max(0.0)
            } else {
                (g[j].abs() - self.lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst / self.scale
    }

    /// Exact minimizer on the current support with signs held fixed, if it
    /// keeps those signs.
    fn polish(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let act: Vec<usize> = (0..b.len()).filter(|&j| b[j] != 0.0).collect();
        if act.is_empty() {
            return None;
        }
        let n = act.len();
        let ga = DMatrix::from_fn(n, n, |r, c| self.gram[(act[r], act[c])]);
        let rhs = DVector::from_fn(n, |r, _| self.corr[act[r]] - 0.5 * self.lambda * b[act[r]].signum());
        let sol = ga.lu().solve(&rhs)?;
        let mut out = DVector::zeros(b.len());
        for (r, &j) in act.iter().enumerate() {
            if !sol[r].is_finite() || sol[r].signum() != b[j].signum() {
                return None;
            }
            out[j] = sol[r];
        }
        Some(out)
    }
}

/// Solve min ‖Ωk − θ̇‖² + λ Σ w_j |k_j| (w_j = 1 unless standardized).
pub fn lasso(sys: &RegressionSystem, opts: &LassoOptions) -> Result<SparseSolution> {
    lasso_raw(&sys.design, &sys.response, opts)
}

pub fn lasso_raw(design: &DMatrix<f64>, response: &DVector<f64>, opts: &LassoOptions) -> Result<SparseSolution> {
    if !(opts.lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda {} must be nonnegative", opts.lambda)));
    }
    let (t, p) = design.shape();
    if t == 0 || p == 0 || response.len() != t {
        return Err(Error::Shape(format!("design {t}x{p}, response {}", response.len())));
    }
    if design.iter().chain(response.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite value in regression system".into()));
    }
    let norms: Vec<f64> = (0..p).map(|j| design.column(j).norm()).collect();
    let ynorm = response.norm();
    let yscale = if opts.standardize && ynorm > 0.0 { ynorm } else { 1.0 };
    let weights: Vec<f64> = if opts.standardize { norms.iter().map(|n| n * yscale).collect() } else { vec![1.0; p] };
    let mut z = design.clone();
    if opts.standardize {
        for j in 0..p {
            if norms[j] > 0.0 {
                z.column_mut(j).unscale_mut(norms[j]);
            }
        }
    }
    let y = response / yscale;
    let gram = z.transpose() * &z;
    let corr = z.transpose() * &y;
    let scale = (2.0 * corr.amax()).max(1.0);
    let w = Working {
        gram,
        corr,
        yy: y.norm_squared(),
        lambda: opts.lambda,
        constrained: (0..p).map(|j| opts.nonnegative && j + 1 < p).collect(),
        scale,
    };

    let mut b = DVector::zeros(p);
    let mut trace = Vec::new();
    let mut obj = w.objective(&b);
    if opts.trace {
        trace.push(obj);
    }
    let mut sweeps = 0;
    let mut kkt = w.kkt(&b);
    let mut converged = kkt <= opts.tol;
    while !converged && sweeps < opts.max_sweeps {
        for j in 0..p {
            let gjj = w.gram[(j, j)];
            if gjj == 0.0 {
                continue;
            }
            // c_j − Σ_{l≠j} G_jl b_l
            let rho = w.corr[j] - w.gram.row(j).dot(&b.transpose()) + gjj * b[j];
            b[j] = soft(rho, 0.5 * w.lambda, w.constrained[j]) / gjj;
        }
        sweeps += 1;
        let next = w.objective(&b);
        if opts.trace {
            trace.push(next);
        }
        obj = next;
        // Newton-type polish every few sweeps once a support has formed.
        if sweeps % 20 == 0 || sweeps == 1 {
            if let Some(pb) = w.polish(&b) {
                let po = w.objective(&pb);
                if po <= obj {
                    b = pb;
                    obj = po;
                    if opts.trace {
                        trace.push(obj);
                    }
                }
            }
        }
        kkt = w.kkt(&b);
        converged = kkt <= opts.tol;
    }
    let coef: Vec<f64> = (0..p)
        .map(|j| if opts.standardize && norms[j] > 0.0 { b[j] * yscale / norms[j] } else { b[j] })
        .collect();
    let objective = lasso_objective(design, response, &coef, &weights, opts.lambda);
    Ok(SparseSolution {
        coef,
        lambda: opts.lambda,
        weights,
        objective,
        sweeps,
        kkt_residual: kkt,
        converged,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrOptions {
    pub lasso: LassoOptions,
    /// Re-solve unpenalized least squares on the LASSO support (gains kept
    /// nonnegative when the LASSO option is on) to remove shrinkage bias.
    pub refit: bool,
    /// |K̂| above this is reported as an attacked entry.
    pub report_threshold: f64,
}

impl Default for SrOptions {
    fn default() -> Self {
        Self { lasso: LassoOptions::default(), refit: true, report_threshold: 0.5 }
    }
}

/// Result for one load bus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusEstimate {
    pub bus: usize,
    /// Final (K_{i,k_1..k_S}, ε_i).
    pub coef: Vec<f64>,
    pub lasso: SparseSolution,
}

/// Least squares restricted to the nonzero coordinates of `coef`. Gain
/// coordinates that turn negative under `nonnegative` are dropped and the
/// fit repeated.
pub fn refit_support(design: &DMatrix<f64>, response: &DVector<f64>, coef: &[f64], nonnegative: bool) -> Vec<f64> {
    let p = coef.len();
    let mut active: Vec<usize> = (0..p).filter(|&j| coef[j] != 0.0).collect();
    loop {
        if active.is_empty() {
            return vec![0.0; p];
        }
        let sub = DMatrix::from_fn(design.nrows(), active.len(), |r, c| design[(r, active[c])]);
        let Some(sol) = sub.clone().svd(true, true).solve(response, 1e-12).ok() else {
            return coef.to_vec();
        };
        let neg: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|&(r, &j)| nonnegative && j + 1 < p && sol[r] < 0.0)
            .map(|(_, &j)| j)
            .collect();
        if neg.is_empty() {
            let mut out = vec![0.0; p];
            for (r, &j) in active.iter().enumerate() {
                out[j] = sol[r];
            }
            return out;
        }
        active.retain(|j| !neg.contains(j));
    }
}

/// Assemble and solve one load bus from whatever channels `ms` carries.
pub fn identify_bus(model: &GridModel, ms: &MeasurementSet, bus: usize, sensing: &[usize], opts: &SrOptions) -> Result<BusEstimate> {
    let sys = assemble(model, ms, bus, sensing)?;
    let sol = lasso(&sys, &opts.lasso)?;
    let coef = if opts.refit {
        refit_support(&sys.design, &sys.response, &sol.coef, opts.lasso.nonnegative)
    } else {
        sol.coef.clone()
    };
    Ok(BusEstimate { bus, coef, lasso: sol })
}

/// Per-bus solutions from [`identify_all`].
#[derive(Debug)]
pub struct SrOutcome {
    pub result: EstimateResult,
    pub per_bus: Vec<(usize, Result<BusEstimate>)>,
}

/// Solve every load bus independently (in parallel) and collect the gain
/// matrix. Failing rows are left at zero and noted.
pub fn identify_all(model: &GridModel, ms: &MeasurementSet, truth: &AttackConfig, opts: &SrOptions) -> Result<SrOutcome> {
    let start = Instant::now();
    let sensing = truth.sensing_buses().to_vec();
    let per_bus: Vec<(usize, Result<BusEstimate>)> = model
        .load_buses()
        .par_iter()
        .map(|&bus| (bus, identify_bus(model, ms, bus, &sensing, opts)))
        .collect();
    let s = sensing.len();
    let mut gains = DMatrix::zeros(model.n_loads(), s);
    let mut steps = vec![0.0; model.n_loads()];
    let mut notes = Vec::new();
    let mut converged = true;
    for (r, (bus, est)) in per_bus.iter().enumerate() {
        match est {
            Ok(est) => {
                for c in 0..s {
                    gains[(r, c)] = est.coef[c];
                }
                steps[r] = est.coef[s];
                if !est.lasso.converged {
                    converged = false;
                    notes.push(format!("bus {bus}: not converged (kkt {:.2e})", est.lasso.kkt_residual));
                }
            }
            Err(e) => {
                converged = false;
                notes.push(format!("bus {bus}: {e}"));
            }
        }
    }
    let mut result = EstimateResult::new(EstimatorKind::Sr, model, truth, gains, steps)?;
    result.converged = converged;
    result.notes = notes;
    result.seconds = start.elapsed().as_secs_f64();
    Ok(SrOutcome { result, per_bus })
}

/// Unpenalized least squares via normal equations, used as an oracle.
pub fn least_squares(design: &DMatrix<f64>, response: &DVector<f64>) -> Option<DVector<f64>> {
    let g = design.transpose() * design;
    let c = design.transpose() * response;
    g.cholesky().map(|ch| ch.solve(&c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_one_column() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, -1.0, 0.5]);
        let y = DVector::from_column_slice(&[2.0, 3.0, -2.5, 1.0]);
        let lambda = 0.7;
        let opts = LassoOptions { lambda, standardize: false, nonnegative: false, ..Default::default() };
        let sol = lasso_raw(&x, &y, &opts).unwrap();
        let z = x.column(0).dot(&y);
        let closed = z.signum() * (z.abs() - lambda / 2.0).max(0.0) / x.column(0).norm_squared();
        assert!((sol.coef[0] - closed).abs() < 1e-14);
    }

    #[test]
    fn large_lambda_gives_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let lmax = (x.transpose() * &y).amax() * 2.0;
        let opts = LassoOptions { lambda: lmax * 1.0001, standardize: false, nonnegative: false, ..Default::default() };
        let sol = lasso_raw(&x, &y, &opts).unwrap();
        assert!(sol.coef.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn zero_lambda_is_least_squares() {
        let x = DMatrix::from_row_slice(5, 3, &[1.0, 0.2, -1.0, 0.5, 1.0, -1.0, 0.1, 0.3, -1.0, 2.0, -0.4, -1.0, 0.7, 0.9, -1.0]);
        let y = DVector::from_column_slice(&[0.3, 1.0, -0.2, 0.8, 0.1]);
        let ls = least_squares(&x, &y).unwrap();
        let opts = LassoOptions { lambda: 0.0, nonnegative: false, ..Default::default() };
        let sol = lasso_raw(&x, &y, &opts).unwrap();
        for j in 0..3 {
            assert!((sol.coef[j] - ls[j]).abs() < 1e-9, "{:?} vs {:?}", sol.coef, ls);
        }
    }

    #[test]
    fn nonnegativity_clamps_gain_but_not_step() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 2.0, -1.0, 3.0, -1.0]);
        // y = -1·x + 0.5·(-1) → unconstrained gain is negative
        let y = DVector::from_column_slice(&[-1.5, -2.5, -3.5]);
        let sol = lasso_raw(&x, &y, &LassoOptions { lambda: 1e-6, ..Default::default() }).unwrap();
        assert_eq!(sol.coef[0], 0.0);
        assert!(sol.converged);
    }
}
