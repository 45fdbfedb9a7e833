//! Gradient-based minimizers used by the PINN: limited-memory BFGS with a
//! backtracking line search, and Adam.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Why an optimizer run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Relative decrease below tolerance over the plateau window.
    Plateau,
    GradientTolerance,
    IterationCap,
    /// Line search could not find a decrease.
    LineSearch,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_iters: usize,
    /// Stop when (f[k−w] − f[k]) / max(|f[k]|, tiny) < rel_tol.
    pub rel_tol: f64,
    pub window: usize,
    pub grad_tol: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { max_iters: 50_000, rel_tol: 1e-9, window: 50, grad_tol: 1e-12 }
    }
}

impl StopRule {
    fn plateau(&self, hist: &[f64]) -> bool {
        let n = hist.len();
        if n <= self.window {
            return false;
        }
        let (old, new) = (hist[n - 1 - self.window], hist[n - 1]);
        (old - new) / new.abs().max(1e-300) < self.rel_tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    pub final_value: f64,
}

/// Objective: fills the gradient and returns the value.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
    /// Called after every accepted iterate; may modify x in place
    /// (projection). Returns true if x was changed.
    fn project(&mut self, _x: &mut [f64]) -> bool {
        false
    }
    /// Called after each iteration with the iterate count and value.
    fn observe(&mut self, _iter: usize, _value: f64) {}
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub stop: StopRule,
    /// Armijo constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 20, stop: StopRule::default(), c1: 1e-4, max_backtracks: 30 }
    }
}

pub fn lbfgs<O: Objective>(obj: &mut O, x: &mut Vec<f64>, opts: &LbfgsOptions) -> OptimReport {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = obj.eval(x, &mut g);
    let mut evals = 1;
    let mut hist = vec![f];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iters = 0;
    let finish = |iters, evals, reason, f| OptimReport { iterations: iters, evaluations: evals, reason, final_value: f };
    if !f.is_finite() {
        return finish(0, evals, StopReason::NonFinite, f);
    }
    loop {
        if iters >= opts.stop.max_iters {
            return finish(iters, evals, StopReason::IterationCap, f);
        }
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= opts.stop.grad_tol {
            return finish(iters, evals, StopReason::GradientTolerance, f);
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / gnorm.max(1.0),
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut xn = vec![0.0; n];
        let mut gn = vec![0.0; n];
        let mut accepted = false;
        let mut fnew = f;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            obj.project(&mut xn);
            fnew = obj.eval(&xn, &mut gn);
            evals += 1;
            if fnew.is_finite() && fnew <= f + opts.c1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if mem.is_empty() {
                return finish(iters, evals, StopReason::LineSearch, f);
            }
            // retry from steepest descent with a fresh memory
            mem.clear();
            continue;
        }
        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        f = fnew;
        iters += 1;
        hist.push(f);
        obj.observe(iters, f);
        if opts.stop.plateau(&hist) {
            return finish(iters, evals, StopReason::Plateau, f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamOptions {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub stop: StopRule,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, stop: StopRule { window: 500, rel_tol: 1e-6, ..StopRule::default() } }
    }
}

pub fn adam<O: Objective>(obj: &mut O, x: &mut [f64], opts: &AdamOptions) -> OptimReport {
    let n = x.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut hist = Vec::new();
    let mut f = f64::NAN;
    for it in 0..opts.stop.max_iters {
        f = obj.eval(x, &mut g);
        if !f.is_finite() {
            return OptimReport { iterations: it, evaluations: it + 1, reason: StopReason::NonFinite, final_value: f };
        }
        hist.push(f);
        obj.observe(it, f);
        if opts.stop.plateau(&hist) {
            return OptimReport { iterations: it, evaluations: it + 1, reason: StopReason::Plateau, final_value: f };
        }
        let t = (it + 1) as i32;
        let (b1t, b2t) = (1.0 - opts.beta1.powi(t), 1.0 - opts.beta2.powi(t));
        for i in 0..n {
            m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g[i];
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g[i] * g[i];
            x[i] -= opts.learning_rate * (m[i] / b1t) / ((v[i] / b2t).sqrt() + opts.eps);
        }
        obj.project(x);
    }
    OptimReport { iterations: opts.stop.max_iters, evaluations: opts.stop.max_iters, reason: StopReason::IterationCap, final_value: f }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;
    impl Objective for Rosenbrock {
        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let r = lbfgs(&mut Rosenbrock, &mut x, &LbfgsOptions::default());
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] - 1.0).abs() < 1e-5, "{x:?} {r:?}");
    }

    struct Quad;
    impl Objective for Quad {
        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
            g[0] = 2.0 * (x[0] - 3.0);
            (x[0] - 3.0).powi(2)
        }
        fn project(&mut self, x: &mut [f64]) -> bool {
            let c = x[0] > 2.0;
            x[0] = x[0].min(2.0);
            c
        }
    }

    #[test]
    fn projection_is_respected() {
        let mut x = vec![0.0];
        lbfgs(&mut Quad, &mut x, &LbfgsOptions::default());
        assert!((x[0] - 2.0).abs() < 1e-12);
        let mut x = vec![0.0];
        adam(&mut Quad, &mut x, &AdamOptions { learning_rate: 0.05, ..Default::default() });
        assert!((x[0] - 2.0).abs() < 1e-9);
    }
}
