//! Explicit Dormand–Prince 4(5) integrator with adaptive step control.

use crate::error::{Error, Result};

// Butcher tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 5th-order weights minus embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            h_init: None,
            h_max: f64::INFINITY,
            h_min: 1e-14,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    pub t_end: f64,
}

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y5: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y5: vec![0.0; n],
        }
    }

    /// One Dormand–Prince step from (t, y) with k[0] = f(t, y) already set.
    /// Leaves the 5th-order solution in `y5` and f(t+h, y5) in `k[6]`.
    fn step<F>(&mut self, f: &mut F, t: f64, y: &[f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, tmp, k6);
        for i in 0..n {
            self.y5[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + h, &self.y5, k7);
    }

    fn error_norm(&self, y: &[f64], h: f64, opts: &OdeOptions) -> f64 {
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        let n = y.len();
        let mut acc = 0.0;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(self.y5[i].abs());
            acc += (e / sc).powi(2);
        }
        (acc / n as f64).sqrt()
    }
}

fn rms_scaled(v: &[f64], y: &[f64], opts: &OdeOptions) -> f64 {
    let n = v.len() as f64;
    (v.iter()
        .zip(y)
        .map(|(a, b)| (a / (opts.atol + opts.rtol * b.abs())).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Adaptive integration of `y' = f(t, y)` from `t0` to `t1`.
///
/// `stops` lists times (ascending, inside `(t0, t1]`) the integrator must land
/// on exactly. `observer` sees `(t, y, f(t, y))` at the initial point and every
/// accepted step, and may stop the integration early.
pub fn dopri5<F, O>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    stops: &[f64],
    opts: &OdeOptions,
    mut observer: O,
) -> Result<OdeStats>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(f64, &[f64], &[f64]) -> Control,
{
    let n = y0.len();
    let mut st = Stages::new(n);
    let mut stats = OdeStats { t_end: t0, ..Default::default() };
    let mut t = t0;
    let mut y = y0.to_vec();
    f(t, &y, &mut st.k[0]);
    stats.evaluations += 1;
    if observer(t, &y, &st.k[0]) == Control::Stop || t1 <= t0 {
        return Ok(stats);
    }

    let mut h = match opts.h_init {
        Some(h) => h,
        None => {
            // Hairer–Nørsett–Wanner starting step heuristic.
            let d0 = rms_scaled(&y, &y, opts);
            let d1 = rms_scaled(&st.k[0], &y, opts);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            let h0 = h0.min(t1 - t0);
            let y1: Vec<f64> = y.iter().zip(&st.k[0]).map(|(a, b)| a + h0 * b).collect();
            let mut f1 = vec![0.0; n];
            f(t + h0, &y1, &mut f1);
            stats.evaluations += 1;
            let diff: Vec<f64> = f1.iter().zip(&st.k[0]).map(|(a, b)| (a - b) / h0).collect();
            let d2 = rms_scaled(&diff, &y, opts);
            let h1 = if d1.max(d2) <= 1e-15 {
                (h0 * 1e-3).max(1e-6)
            } else {
                (0.01 / d1.max(d2)).powf(0.2)
            };
            (100.0 * h0).min(h1)
        }
    }
    .min(opts.h_max)
    .min(t1 - t0);

    let mut stop_idx = stops.iter().position(|&s| s > t).unwrap_or(stops.len());
    let mut last_rejected = false;
    while t < t1 {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::StepUnderflow { time: t, step: h });
        }
        if h < opts.h_min || !h.is_finite() {
            return Err(Error::StepUnderflow { time: t, step: h });
        }
        let target = if stop_idx < stops.len() { stops[stop_idx].min(t1) } else { t1 };
        let mut h_try = h;
        let mut landing = false;
        if t + h_try >= target - 1e-12 * target.abs().max(1.0) {
            h_try = target - t;
            landing = true;
        }
        st.step(&mut f, t, &y, h_try);
        stats.evaluations += 6;
        let err = st.error_norm(&y, h_try, opts);
        if err.is_finite() && err <= 1.0 {
            t = if landing { target } else { t + h_try };
            std::mem::swap(&mut y, &mut st.y5);
            st.k.swap(0, 6);
            stats.accepted += 1;
            if landing && stop_idx < stops.len() && target >= stops[stop_idx] {
                stop_idx += 1;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            let fac = if last_rejected { fac.min(1.0) } else { fac };
            // A landing step may be artificially short; do not shrink h on account of it.
            h = if landing { h.max(h_try * fac) } else { h_try * fac };
            h = h.min(opts.h_max);
            last_rejected = false;
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::StepUnderflow { time: t, step: h });
            }
            if observer(t, &y, &st.k[0]) == Control::Stop {
                break;
            }
        } else {
            stats.rejected += 1;
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 1.0) } else { 0.1 };
            h = h_try * fac;
            last_rejected = true;
        }
    }
    stats.t_end = t;
    Ok(stats)
}

/// Fixed-step Dormand–Prince (5th-order solution propagated), used for
/// convergence-order studies.
pub fn dopri5_fixed<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, steps: usize) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut st = Stages::new(n);
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut t = t0;
    f(t, &y, &mut st.k[0]);
    for _ in 0..steps {
        st.step(&mut f, t, &y, h);
        std::mem::swap(&mut y, &mut st.y5);
        st.k.swap(0, 6);
        t += h;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = -y[0];
    }

    #[test]
    fn fifth_order_convergence_on_exponential() {
        let exact = (-1.0f64).exp();
        let errs: Vec<f64> = [4usize, 8, 16, 32]
            .iter()
            .map(|&n| (dopri5_fixed(decay, 0.0, &[1.0], 1.0, n)[0] - exact).abs())
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 5.0).abs() < 0.35, "observed order {order}");
        }
    }

    #[test]
    fn adaptive_meets_tolerance_and_lands_on_stops() {
        let mut seen = Vec::new();
        let opts = OdeOptions { rtol: 1e-10, atol: 1e-12, ..Default::default() };
        let stops = [0.25, 0.5, 0.75];
        dopri5(decay, 0.0, &[1.0], 1.0, &stops, &opts, |t, y, _| {
            seen.push((t, y[0]));
            Control::Continue
        })
        .unwrap();
        for s in stops {
            assert!(seen.iter().any(|&(t, _)| t == s), "missing stop {s}");
        }
        let &(t_end, y_end) = seen.last().unwrap();
        assert_eq!(t_end, 1.0);
        assert!((y_end - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn observer_can_stop() {
        let stats = dopri5(decay, 0.0, &[1.0], 10.0, &[], &OdeOptions::default(), |t, _, _| {
            if t > 1.0 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert!(stats.t_end > 1.0 && stats.t_end < 10.0);
    }

    #[test]
    fn blow_up_reports_underflow() {
        // y' = y^2 from y(0)=1 blows up at t=1.
        let res = dopri5(
            |_t, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0],
            0.0,
            &[1.0],
            2.0,
            &[],
            &OdeOptions::default(),
            |_, _, _| Control::Continue,
        );
        match res {
            Err(Error::StepUnderflow { time, .. }) => assert!((time - 1.0).abs() < 1e-3),
            other => panic!("expected underflow, got {other:?}"),
        }
    }
}
