//! Estimator output shared by all identifiers, plus the η₁ / η₂ error metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::grid::GridModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Sr,
    Pinn,
    UkfRow,
    UkfFull,
}

impl EstimatorKind {
    pub fn tag(self) -> &'static str {
        match self {
            EstimatorKind::Sr => "sr",
            EstimatorKind::Pinn => "pinn",
            EstimatorKind::UkfRow => "ukf-row",
            EstimatorKind::UkfFull => "ukf-full",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr" | "lasso" => Ok(EstimatorKind::Sr),
            "pinn" => Ok(EstimatorKind::Pinn),
            "ukf" | "ukf-row" => Ok(EstimatorKind::UkfRow),
            "ukf-full" => Ok(EstimatorKind::UkfFull),
            _ => Err(Error::Invalid(format!("unknown estimator `{s}`"))),
        }
    }
}

/// Relative error (K − K̂)/K of one attacked entry.
pub fn eta1(k_true: f64, k_est: f64) -> Result<f64> {
    if k_true == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((k_true - k_est) / k_true)
}

/// Sum of squared entry errors over the whole gain matrix.
pub fn eta2(k_true: &DMatrix<f64>, k_est: &DMatrix<f64>) -> Result<f64> {
    if k_true.shape() != k_est.shape() {
        return Err(Error::Shape(format!("truth {:?} vs estimate {:?}", k_true.shape(), k_est.shape())));
    }
    Ok(k_true.iter().zip(k_est.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Estimated gains and steps for every load bus, with the matching truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub estimator: EstimatorKind,
    pub load_buses: Vec<usize>,
    pub sensing_buses: Vec<usize>,
    /// |𝒩_L| × S, row-major when serialized.
    #[serde(serialize_with = "ser_matrix")]
    pub gains: DMatrix<f64>,
    pub steps: Vec<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub true_gains: DMatrix<f64>,
    pub true_steps: Vec<f64>,
    /// (victim, sensing, η₁) for every attacked entry.
    pub eta1: Vec<(usize, usize, f64)>,
    pub eta2: f64,
    pub seconds: f64,
    pub converged: bool,
    /// Set by estimators that detect unreliable output (training stall,
    /// covariance trouble).
    pub low_confidence: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl EstimateResult {
    /// Fill in the metrics against `truth`.
    pub fn new(
        estimator: EstimatorKind,
        model: &GridModel,
        truth: &AttackConfig,
        gains: DMatrix<f64>,
        steps: Vec<f64>,
    ) -> Result<Self> {
        if gains.shape() != truth.gains().shape() {
            return Err(Error::Shape(format!("estimate {:?} vs truth {:?}", gains.shape(), truth.gains().shape())));
        }
        if steps.len() != model.n_loads() {
            return Err(Error::Dimension { expected: model.n_loads(), got: steps.len() });
        }
        let mut r = EstimateResult {
            estimator,
            load_buses: model.load_buses().to_vec(),
            sensing_buses: truth.sensing_buses().to_vec(),
            gains,
            steps,
            true_gains: truth.gains().clone(),
            true_steps: truth.static_step().to_vec(),
            eta1: Vec::new(),
            eta2: 0.0,
            seconds: 0.0,
            converged: true,
            low_confidence: false,
            notes: Vec::new(),
        };
        r.recompute_metrics()?;
        Ok(r)
    }

    pub fn recompute_metrics(&mut self) -> Result<()> {
        self.eta2 = eta2(&self.true_gains, &self.gains)?;
        self.eta1.clear();
        for (r, &v) in self.load_buses.iter().enumerate() {
            for (c, &s) in self.sensing_buses.iter().enumerate() {
                let k = self.true_gains[(r, c)];
                if k != 0.0 {
                    self.eta1.push((v, s, eta1(k, self.gains[(r, c)])?));
                }
            }
        }
        Ok(())
    }

    pub fn gain(&self, victim: usize, sensing: usize) -> Option<f64> {
        let r = self.load_buses.iter().position(|&b| b == victim)?;
        let c = self.sensing_buses.iter().position(|&b| b == sensing)?;
        Some(self.gains[(r, c)])
    }

    pub fn eta1_of(&self, victim: usize, sensing: usize) -> Option<f64> {
        self.eta1.iter().find(|e| e.0 == victim && e.1 == sensing).map(|e| e.2)
    }

    /// Largest |K̂| over entries whose truth is zero.
    pub fn max_false_gain(&self) -> f64 {
        self.gains
            .iter()
            .zip(self.true_gains.iter())
            .filter(|(_, t)| **t == 0.0)
            .map(|(g, _)| g.abs())
            .fold(0.0, f64::max)
    }

    /// Entries with |K̂| above `threshold`, as (victim, sensing, K̂).
    pub fn reported(&self, threshold: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (r, &v) in self.load_buses.iter().enumerate() {
            for (c, &s) in self.sensing_buses.iter().enumerate() {
                let k = self.gains[(r, c)];
                if k.abs() > threshold {
                    out.push((v, s, k));
                }
            }
        }
        out
    }

    /// `victim_bus,sensing_bus,K_true,K_est,eta1`, one row per entry.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut cw = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        cw.write_record(["victim_bus", "sensing_bus", "K_true", "K_est", "eta1"]).map_err(err)?;
        for (r, &v) in self.load_buses.iter().enumerate() {
            for (c, &s) in self.sensing_buses.iter().enumerate() {
                let kt = self.true_gains[(r, c)];
                let ke = self.gains[(r, c)];
                let e1 = if kt != 0.0 { format!("{}", (kt - ke) / kt) } else { String::new() };
                cw.write_record([v.to_string(), s.to_string(), kt.to_string(), ke.to_string(), e1]).map_err(err)?;
            }
        }
        cw.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    /// Write `<stem>.csv` (per entry) and `<stem>.json` (summary).
    pub fn save(&self, stem: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let file = std::fs::File::create(&csv_path).map_err(|source| Error::Io { path: csv_path.clone(), source })?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let summary = serde_json::json!({
            "estimator": self.estimator.tag(),
            "eta2": self.eta2,
            "eta1": self.eta1,
            "steps": self.load_buses.iter().zip(&self.steps).map(|(b, e)| (*b, *e)).collect::<Vec<_>>(),
            "seconds": self.seconds,
            "converged": self.converged,
            "low_confidence": self.low_confidence,
            "notes": self.notes,
            "settings": extra,
        });
        let json_path = stem.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&summary).expect("json"))
            .map_err(|source| Error::Io { path: json_path.clone(), source })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta1_examples() {
        assert_eq!(eta1(18.0, 18.0).unwrap(), 0.0);
        assert!((eta1(18.0, 17.1).unwrap() - 0.05).abs() < 1e-12);
        assert!((eta1(25.0, 26.25).unwrap() + 0.05).abs() < 1e-12);
        assert!(matches!(eta1(0.0, 1.0), Err(Error::ZeroTruth)));
    }

    #[test]
    fn eta2_examples() {
        let t = DMatrix::from_element(29, 10, 0.0);
        assert_eq!(eta2(&t, &t).unwrap(), 0.0);
        let mut e = t.clone();
        e[(3, 4)] = 3.0;
        assert_eq!(eta2(&t, &e).unwrap(), 9.0);
        let mut k = t.clone();
        k[(18, 2)] = 18.0;
        assert_eq!(eta2(&k, &t).unwrap(), 324.0);
        assert!(eta2(&k, &DMatrix::zeros(2, 2)).is_err());
    }
}
