//! Table and figure CSV export.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use laa_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::run::{run_scenario, FiveNumber, Method, ScenarioReport, Settings};
use crate::scenario::{find, sweep_windows, Scenario};

/// Which artifacts to produce and how many repetitions to spend on each
/// estimator family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub reps: usize,
    pub pinn_reps: usize,
    pub ukf_reps: usize,
    pub ukf_full_reps: usize,
    /// Subset of table1..3, fig4..7; empty means all.
    pub artifacts: Vec<String>,
    pub seed_base: Option<u64>,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self { reps: 100, pinn_reps: 3, ukf_reps: 20, ukf_full_reps: 3, artifacts: Vec::new(), seed_base: None }
    }
}

impl BenchPlan {
    fn wants(&self, name: &str) -> bool {
        self.artifacts.is_empty() || self.artifacts.iter().any(|a| a == name)
    }

    fn reps_for(&self, method: Method) -> usize {
        match method {
            Method::Sr => self.reps,
            Method::Pinn | Method::PinnPretrained => self.pinn_reps,
            Method::UkfRow => self.ukf_reps,
            Method::UkfFull => self.ukf_full_reps,
        }
        .max(1)
    }
}

pub const ARTIFACTS: [&str; 7] = ["table1", "table2", "table3", "fig4", "fig5", "fig6", "fig7"];

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn writer(dir: &Path, name: &str) -> Result<(csv::Writer<BufWriter<File>>, PathBuf)> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(io_err(&path))?;
    Ok((csv::Writer::from_writer(BufWriter::new(file)), path))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn five(f: Option<FiveNumber>) -> [String; 5] {
    match f {
        Some(f) => [fmt(f.min), fmt(f.q1), fmt(f.median), fmt(f.q3), fmt(f.max)],
        None => Default::default(),
    }
}

/// Run `methods` on `scenario`, each with its own repetition budget, and
/// merge the reports.
pub fn run_methods(scenario: &Scenario, methods: &[Method], settings: &Settings, plan: &BenchPlan) -> Result<ScenarioReport> {
    let mut scenario = scenario.clone();
    if let Some(seed) = plan.seed_base {
        scenario.seed_base = seed;
    }
    let mut merged: Option<ScenarioReport> = None;
    for &m in methods {
        let rep = run_scenario(&scenario, &[m], settings, Some(plan.reps_for(m)))?;
        match merged.as_mut() {
            None => merged = Some(rep),
            Some(all) => {
                all.records.extend(rep.records);
                all.summaries.extend(rep.summaries);
            }
        }
    }
    merged.ok_or_else(|| Error::Invalid("no estimators selected".into()))
}

/// Produce the selected artifacts in `dir`; returns the written paths.
pub fn run_bench(dir: &Path, settings: &Settings, plan: &BenchPlan) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let fast = find("ieee39-fast-single")?;
    let slow = find("ieee39-slow-single")?;

    let need_main = plan.wants("table1") || plan.wants("table3") || plan.wants("fig5") || plan.wants("fig6");
    let (fast_rep, slow_rep) = if need_main {
        let fast_methods = [Method::Sr, Method::Pinn, Method::PinnPretrained, Method::UkfRow, Method::UkfFull];
        let slow_methods = [Method::Sr, Method::Pinn, Method::UkfRow, Method::UkfFull];
        (Some(run_methods(&fast, &fast_methods, settings, plan)?), Some(run_methods(&slow, &slow_methods, settings, plan)?))
    } else {
        (None, None)
    };

    if plan.wants("table1") {
        let (mut w, path) = writer(dir, "table1.csv")?;
        w.write_record(["scenario", "regime", "window_s", "estimator", "runs", "failures", "low_confidence", "mean_eta2", "median_eta2"])
            .map_err(csv_err)?;
        for rep in [&fast_rep, &slow_rep].into_iter().flatten() {
            for s in rep.summaries.iter().filter(|s| s.method != Method::PinnPretrained) {
                w.write_record([
                    rep.scenario.id.clone(),
                    rep.scenario.regime.tag().into(),
                    fmt(rep.scenario.window[1] - rep.scenario.window[0]),
                    s.method.tag().into(),
                    s.runs.to_string(),
                    s.failures.to_string(),
                    s.low_confidence.to_string(),
                    fmt(s.mean_eta2),
                    fmt(s.median_eta2),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    if plan.wants("table2") {
        let logistic = find("ieee39-fast-logistic")?;
        let rep = run_methods(&logistic, &[Method::Sr, Method::Pinn], settings, plan)?;
        let (mut w, path) = writer(dir, "table2.csv")?;
        w.write_record(["scenario", "noise", "sigma", "estimator", "runs", "failures", "mean_eta2", "median_eta2"]).map_err(csv_err)?;
        for s in &rep.summaries {
            w.write_record([
                rep.scenario.id.clone(),
                "logistic".into(),
                fmt(rep.scenario.noise.sigma),
                s.method.tag().into(),
                s.runs.to_string(),
                s.failures.to_string(),
                fmt(s.mean_eta2),
                fmt(s.median_eta2),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    if plan.wants("table3") {
        let rep = fast_rep.as_ref().expect("main runs done");
        let (mut w, path) = writer(dir, "table3.csv")?;
        w.write_record(["scenario", "estimator", "runs", "mean_seconds", "mean_iterations"]).map_err(csv_err)?;
        for m in [Method::Sr, Method::Pinn, Method::PinnPretrained] {
            if let Some(s) = rep.summary(m) {
                let iters: Vec<f64> = rep
                    .records
                    .iter()
                    .filter(|r| r.method == m)
                    .filter_map(|r| r.pinn_report.as_ref().map(|p| p.total_iterations() as f64))
                    .collect();
                let mean_iters = if iters.is_empty() { f64::NAN } else { iters.iter().sum::<f64>() / iters.len() as f64 };
                w.write_record([rep.scenario.id.clone(), m.tag().into(), s.runs.to_string(), fmt(s.mean_seconds), fmt(mean_iters)])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    if plan.wants("fig4") {
        let (mut w, path) = writer(dir, "fig4_boxplot.csv")?;
        w.write_record(["regime", "window_s", "estimator", "victim_bus", "sensing_bus", "runs", "min", "q1", "median", "q3", "max"])
            .map_err(csv_err)?;
        for base in [&fast, &slow] {
            let methods = [Method::Sr, Method::Pinn];
            for t1 in sweep_windows(base.regime) {
                let sc = base.with_window_end(t1);
                let rep = run_methods(&sc, &methods, settings, plan)?;
                for s in &rep.summaries {
                    for e in &s.entries {
                        let mut row = vec![
                            base.regime.tag().to_string(),
                            fmt(t1),
                            s.method.tag().into(),
                            e.victim.to_string(),
                            e.sensing.to_string(),
                            (s.runs - s.failures).to_string(),
                        ];
                        row.extend(five(e.eta1));
                        w.write_record(&row).map_err(csv_err)?;
                    }
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    if plan.wants("fig5") {
        let (mut w, path) = writer(dir, "fig5_losstrace.csv")?;
        w.write_record(["regime", "iter", "L1", "L2", "L3", "total"]).map_err(csv_err)?;
        for rep in [&fast_rep, &slow_rep].into_iter().flatten() {
            if let Some(tr) = rep.first_record(Method::Pinn).and_then(|r| r.pinn_report.as_ref()) {
                for r in &tr.trace {
                    w.write_record([
                        rep.scenario.regime.tag().to_string(),
                        r.iter.to_string(),
                        fmt(r.data),
                        fmt(r.physics),
                        fmt(r.sparsity),
                        fmt(r.data + r.physics + r.sparsity),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    if plan.wants("fig6") {
        let (mut w, path) = writer(dir, "fig6_ukftrace.csv")?;
        w.write_record(["regime", "t", "param_id", "estimate", "variance"]).map_err(csv_err)?;
        for rep in [&fast_rep, &slow_rep].into_iter().flatten() {
            if let Some(run) = rep.first_record(Method::UkfRow).and_then(|r| r.ukf_run.as_ref()) {
                for r in &run.trace {
                    w.write_record([
                        rep.scenario.regime.tag().to_string(),
                        fmt(r.t),
                        run.labels[r.param].clone(),
                        fmt(r.estimate),
                        fmt(r.variance),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    if plan.wants("fig7") {
        let multi = find("ieee39-fast-multi")?;
        let rep = run_methods(&multi, &[Method::Sr, Method::Pinn], settings, plan)?;
        let (mut w, path) = writer(dir, "fig7_boxplot.csv")?;
        w.write_record([
            "estimator",
            "victim_bus",
            "sensing_bus",
            "K_true",
            "runs",
            "min",
            "q1",
            "median",
            "q3",
            "max",
            "median_estimate",
            "max_median_false",
        ])
        .map_err(csv_err)?;
        for s in &rep.summaries {
            for e in &s.entries {
                let mut row = vec![s.method.tag().to_string(), e.victim.to_string(), e.sensing.to_string(), fmt(e.truth), (s.runs - s.failures).to_string()];
                row.extend(five(e.eta1));
                row.push(fmt(e.median_estimate));
                row.push(fmt(s.max_median_false));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
