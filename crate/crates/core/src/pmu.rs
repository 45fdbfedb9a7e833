//! Synthetic PMU measurements: uniform sampling of a trajectory plus
//! Gaussian or Logistic noise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    None,
    Gaussian,
    Logistic,
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(NoiseFamily::None),
            "gaussian" | "normal" => Ok(NoiseFamily::Gaussian),
            "logistic" => Ok(NoiseFamily::Logistic),
            _ => Err(Error::Invalid(format!("unknown noise family `{s}`"))),
        }
    }
}

/// How the angle channel's σ relates to the frequency channel's σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleNoiseUnit {
    /// σ applied directly in radians.
    #[default]
    Radians,
    /// σ applied to the angle normalized by π, i.e. σ·π radians.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub sigma: f64,
    #[serde(default)]
    pub angle_unit: AngleNoiseUnit,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { family: NoiseFamily::None, sigma: 0.0, angle_unit: AngleNoiseUnit::Radians }
    }
    pub fn gaussian(sigma: f64) -> Self {
        Self { family: NoiseFamily::Gaussian, sigma, angle_unit: AngleNoiseUnit::Radians }
    }
    pub fn logistic(sigma: f64) -> Self {
        Self { family: NoiseFamily::Logistic, sigma, angle_unit: AngleNoiseUnit::Radians }
    }
}

/// Everything about a measurement set other than the samples themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub rate_hz: f64,
    pub t0: f64,
    pub t1: f64,
    pub n_buses: usize,
    pub gen_buses: Vec<usize>,
    pub noise: NoiseSpec,
    pub seed: Option<u64>,
    /// Load-bus frequency rebuilt from angle differences instead of measured.
    #[serde(default)]
    pub finite_difference: bool,
    /// Buses without a PMU channel (their columns are NaN).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<usize>,
}

/// Uniformly sampled angle and frequency channels, one column per bus.
///
/// Frequency at a generator bus is its ω; at a load bus it is δ̇.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    meta: MeasurementMeta,
    angle: DMatrix<f64>,
    freq: DMatrix<f64>,
}

/// Number of samples in `[t0, t1]` at `rate_hz`.
pub fn slot_count(t0: f64, t1: f64, rate_hz: f64) -> usize {
    ((t1 - t0) * rate_hz + 1e-9).floor() as usize + 1
}

/// Sample a trajectory at `rate_hz` over `[t0, t1]`.
pub fn sample(traj: &Trajectory, rate_hz: f64, t0: f64, t1: f64) -> Result<MeasurementSet> {
    if !(1.0..=1000.0).contains(&rate_hz) {
        return Err(Error::Invalid(format!("sampling rate {rate_hz} outside [1, 1000]")));
    }
    if traj.is_empty() || !(t1 >= t0) || t0 < traj.start() - 1e-9 || t1 > traj.end() + 1e-9 {
        let (start, end) = if traj.is_empty() { (f64::NAN, f64::NAN) } else { (traj.start(), traj.end()) };
        return Err(Error::Window { t0, t1, start, end });
    }
    let n = traj.n_buses();
    let slots = slot_count(t0, t1, rate_hz);
    let mut angle = DMatrix::zeros(slots, n);
    let mut freq = DMatrix::zeros(slots, n);
    for k in 0..slots {
        let t = (t0 + k as f64 / rate_hz).clamp(traj.start(), traj.end());
        let (x, dx) = traj.interpolate(t)?;
        for b in 0..n {
            angle[(k, b)] = x[b];
            freq[(k, b)] = dx[b];
        }
    }
    Ok(MeasurementSet {
        meta: MeasurementMeta {
            rate_hz,
            t0,
            t1,
            n_buses: n,
            gen_buses: traj.gen_buses().to_vec(),
            noise: NoiseSpec::none(),
            seed: None,
            finite_difference: false,
            missing: Vec::new(),
        },
        angle,
        freq,
    })
}

fn noise_sampler(family: NoiseFamily, sigma: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    let scale = sigma * 3f64.sqrt() / std::f64::consts::PI;
    move |rng: &mut ChaCha8Rng| match family {
        NoiseFamily::None => 0.0,
        NoiseFamily::Gaussian => normal.sample(rng),
        NoiseFamily::Logistic => {
            // inverse CDF on the open interval
            let u: f64 = loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            };
            scale * (u / (1.0 - u)).ln()
        }
    }
}

/// Draw `n` i.i.d. noise values; exposed for statistical tests.
pub fn noise_samples(family: NoiseFamily, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = noise_sampler(family, sigma);
    (0..n).map(|_| draw(&mut rng)).collect()
}

/// Add i.i.d. noise to every angle and frequency sample. σ = 0 or family
/// `None` leaves the samples untouched.
pub fn add_noise(ms: &MeasurementSet, noise: NoiseSpec, seed: u64) -> Result<MeasurementSet> {
    if !(noise.sigma >= 0.0) || !noise.sigma.is_finite() {
        return Err(Error::Invalid(format!("noise sigma {} must be finite and nonnegative", noise.sigma)));
    }
    let mut out = ms.clone();
    out.meta.noise = noise;
    out.meta.seed = Some(seed);
    if noise.sigma == 0.0 || noise.family == NoiseFamily::None {
        return Ok(out);
    }
    let angle_factor = match noise.angle_unit {
        AngleNoiseUnit::Radians => 1.0,
        AngleNoiseUnit::Normalized => std::f64::consts::PI,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = noise_sampler(noise.family, noise.sigma);
    // Column-major storage: one channel at a time, angles first.
    for v in out.angle.iter_mut() {
        *v += angle_factor * draw(&mut rng);
    }
    for v in out.freq.iter_mut() {
        *v += draw(&mut rng);
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

impl MeasurementSet {
    /// Build from raw channel matrices (slots × buses).
    pub fn from_parts(meta: MeasurementMeta, angle: DMatrix<f64>, freq: DMatrix<f64>) -> Result<Self> {
        if angle.shape() != freq.shape() || angle.ncols() != meta.n_buses {
            return Err(Error::Shape(format!(
                "angle {:?} and frequency {:?} channels for {} buses",
                angle.shape(),
                freq.shape(),
                meta.n_buses
            )));
        }
        if angle.nrows() != slot_count(meta.t0, meta.t1, meta.rate_hz) {
            return Err(Error::Shape(format!(
                "{} slots, window implies {}",
                angle.nrows(),
                slot_count(meta.t0, meta.t1, meta.rate_hz)
            )));
        }
        if !(meta.rate_hz > 0.0) {
            return Err(Error::Invalid("sampling rate must be positive".into()));
        }
        Ok(Self { meta, angle, freq })
    }

    pub fn meta(&self) -> &MeasurementMeta {
        &self.meta
    }
    pub fn slots(&self) -> usize {
        self.angle.nrows()
    }
    pub fn n_buses(&self) -> usize {
        self.meta.n_buses
    }
    pub fn period(&self) -> f64 {
        1.0 / self.meta.rate_hz
    }
    pub fn time(&self, k: usize) -> f64 {
        self.meta.t0 + k as f64 / self.meta.rate_hz
    }
    pub fn times(&self) -> Vec<f64> {
        (0..self.slots()).map(|k| self.time(k)).collect()
    }
    pub fn gen_buses(&self) -> &[usize] {
        &self.meta.gen_buses
    }
    pub fn angles(&self) -> &DMatrix<f64> {
        &self.angle
    }
    pub fn freqs(&self) -> &DMatrix<f64> {
        &self.freq
    }
    /// δ at a 1-based bus, slot k.
    pub fn angle(&self, k: usize, bus: usize) -> f64 {
        self.angle[(k, bus - 1)]
    }
    /// δ̇ (or ω at a generator) at a 1-based bus, slot k.
    pub fn freq(&self, k: usize, bus: usize) -> f64 {
        self.freq[(k, bus - 1)]
    }

    pub fn has_bus(&self, bus: usize) -> bool {
        bus >= 1 && bus <= self.meta.n_buses && !self.meta.missing.contains(&bus)
    }

    pub fn require(&self, buses: &[usize]) -> Result<()> {
        match buses.iter().find(|&&b| !self.has_bus(b)) {
            Some(&b) => Err(Error::MissingChannel(b)),
            None => Ok(()),
        }
    }

    /// Copy with every bus outside `keep` blanked out.
    pub fn restricted_to(&self, keep: &[usize]) -> MeasurementSet {
        let mut out = self.clone();
        for b in 1..=self.meta.n_buses {
            if !keep.contains(&b) && !out.meta.missing.contains(&b) {
                out.meta.missing.push(b);
                out.angle.column_mut(b - 1).fill(f64::NAN);
                out.freq.column_mut(b - 1).fill(f64::NAN);
            }
        }
        out.meta.missing.sort_unstable();
        out
    }

    /// Replace load-bus frequency channels by central differences of the
    /// (possibly noisy) angle channels; one-sided at the window ends.
    pub fn with_finite_difference_freq(&self) -> MeasurementSet {
        let mut out = self.clone();
        out.meta.finite_difference = true;
        let t = self.slots();
        if t < 2 {
            return out;
        }
        let h = self.period();
        for b in 0..self.meta.n_buses {
            if self.meta.gen_buses.contains(&(b + 1)) {
                continue;
            }
            for k in 0..t {
                let d = if k == 0 {
                    (self.angle[(1, b)] - self.angle[(0, b)]) / h
                } else if k == t - 1 {
                    (self.angle[(t - 1, b)] - self.angle[(t - 2, b)]) / h
                } else {
                    (self.angle[(k + 1, b)] - self.angle[(k - 1, b)]) / (2.0 * h)
                };
                out.freq[(k, b)] = d;
            }
        }
        out
    }

    /// Sub-window `[t0, t1]` of the existing slots (same rate).
    pub fn window(&self, t0: f64, t1: f64) -> Result<MeasurementSet> {
        let h = self.period();
        let first = ((t0 - self.meta.t0) / h - 1e-6).ceil().max(0.0) as usize;
        let last_f = ((t1 - self.meta.t0) / h + 1e-6).floor();
        if last_f < 0.0 || first as f64 > last_f || last_f as usize >= self.slots() {
            return Err(Error::Window { t0, t1, start: self.meta.t0, end: self.time(self.slots() - 1) });
        }
        let last = last_f as usize;
        let rows = last - first + 1;
        let mut meta = self.meta.clone();
        meta.t0 = self.time(first);
        meta.t1 = self.time(last);
        Ok(MeasurementSet {
            meta,
            angle: self.angle.rows(first, rows).into_owned(),
            freq: self.freq.rows(first, rows).into_owned(),
        })
    }

    fn header(&self) -> Vec<String> {
        let n = self.meta.n_buses;
        let mut h = vec!["t".to_string()];
        h.extend((1..=n).map(|b| format!("delta_{b}")));
        h.extend((1..=n).map(|b| format!("freq_{b}")));
        h
    }

    /// Write `<stem>.csv` and `<stem>.json` (metadata sidecar).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
                let file = File::create(&csv_path).map_err(io_err(&csv_path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# units: t [s]; delta [rad]; freq [Hz deviation from nominal]").map_err(io_err(&csv_path))?;
        {
            let mut cw = csv::Writer::from_writer(&mut w);
            cw.write_record(self.header()).map_err(|e| Error::Parse(e.to_string()))?;
            for k in 0..self.slots() {
                let mut row = vec![format!("{}", self.time(k))];
                row.extend(self.angle.row(k).iter().map(|v| format!("{v:e}")));
                row.extend(self.freq.row(k).iter().map(|v| format!("{v:e}")));
                cw.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
            }
            cw.flush().map_err(io_err(&csv_path))?;
        }
        w.flush().map_err(io_err(&csv_path))?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&json_path, meta).map_err(io_err(&json_path))?;
        Ok(())
    }

    /// Read a set written by [`MeasurementSet::save`].
    pub fn load(stem: impl AsRef<Path>) -> Result<MeasurementSet> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|source| Error::Io { path: json_path.clone(), source })?;
        let meta: MeasurementMeta = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", json_path.display())))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(&csv_path)
            .map_err(|e| Error::Parse(format!("{}: {e}", csv_path.display())))?;
        let n = meta.n_buses;
        let mut angle = Vec::new();
        let mut freq = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.len() != 1 + 2 * n {
                return Err(Error::Parse(format!("row {rows} has {} fields, expected {}", rec.len(), 1 + 2 * n)));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}"))))
                .collect::<Result<_>>()?;
            angle.extend_from_slice(&vals[1..=n]);
            freq.extend_from_slice(&vals[n + 1..]);
            rows += 1;
        }
        let angle = DMatrix::from_row_slice(rows, n, &angle);
        let freq = DMatrix::from_row_slice(rows, n, &freq);
        MeasurementSet::from_parts(meta, angle, freq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_count_matches_rate_times_window() {
        assert_eq!(slot_count(0.0, 15.0, 50.0), 751);
        assert_eq!(slot_count(30.0, 70.0, 50.0), 2001);
        assert_eq!(slot_count(0.0, 0.0, 50.0), 1);
    }

    #[test]
    fn logistic_inverse_cdf_is_symmetric() {
        let x = noise_samples(NoiseFamily::Logistic, 1.0, 20_000, 3);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn noise_family_parse() {
        assert_eq!("Logistic".parse::<NoiseFamily>().unwrap(), NoiseFamily::Logistic);
        assert!("cauchy".parse::<NoiseFamily>().is_err());
    }
}
