//! Grid data model, case-file I/O and the no-attack equilibrium.
//!
//! Buses are identified by 1-based ids `1..=N`. Internally every per-bus
//! vector is indexed by `id - 1`; per-generator and per-load vectors follow
//! the ascending order of `gen_buses` / `load_buses`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    pub kind: BusKind,
    /// Damping coefficient D_i (pu).
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub bus: usize,
    /// Inertia M_i (pu s^2).
    pub inertia: f64,
    pub gov_p_gain: f64,
    pub gov_i_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from: usize,
    pub to: usize,
    /// Line susceptance B_ij (pu on `base_mva`).
    pub susceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub bus: usize,
    /// Secure (unalterable) demand P^LS (pu).
    pub secure: f64,
    /// Vulnerable demand P^LV (pu); optional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vulnerable: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub nominal_freq_hz: f64,
    pub max_freq_dev_hz: f64,
}

/// On-disk JSON representation of a test system. See `cases/README.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub generators: Vec<GeneratorRecord>,
    pub branches: Vec<BranchRecord>,
    pub loads: Vec<LoadRecord>,
    pub limits: Limits,
}

/// Static topology and dynamic parameters of one test system.
///
/// Immutable after construction; share it by reference or `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    name: String,
    description: Option<String>,
    base_mva: f64,
    n_buses: usize,
    gen_buses: Vec<usize>,
    load_buses: Vec<usize>,
    inertia: Vec<f64>,
    damping: Vec<f64>,
    gov_p_gain: Vec<f64>,
    gov_i_gain: Vec<f64>,
    susceptance: DMatrix<f64>,
    secure_load: Vec<f64>,
    vulnerable_load: Option<Vec<f64>>,
    nominal_freq_hz: f64,
    max_freq_dev_hz: f64,
    // derived
    branches: Vec<(usize, usize, f64)>,
    gen_pos: Vec<Option<usize>>,
    load_pos: Vec<Option<usize>>,
}

/// Per-bus adjacency lists (1-based ids), derived from nonzero susceptance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMap {
    adjacency: Vec<Vec<usize>>,
}

impl NeighborMap {
    pub fn neighbors(&self, bus: usize) -> &[usize] {
        &self.adjacency[bus - 1]
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("non-finite value {v}")))
    }
}

impl GridModel {
    pub fn from_case(case: CaseFile) -> Result<Self> {
        let n = case.buses.len();
        if n == 0 {
            return Err(Error::validation("buses", "no buses"));
        }
        if !(case.base_mva > 0.0) {
            return Err(Error::validation("base_mva", "must be positive"));
        }
        let mut kinds: Vec<Option<BusKind>> = vec![None; n];
        let mut damping = vec![0.0; n];
        for b in &case.buses {
            if b.id == 0 || b.id > n {
                return Err(Error::validation(
                    "buses",
                    format!("bus id {} outside 1..={n}", b.id),
                ));
            }
            if kinds[b.id - 1].is_some() {
                return Err(Error::validation("buses", format!("duplicate bus id {}", b.id)));
            }
            finite("buses.damping", b.damping)?;
            if b.damping <= 0.0 {
                return Err(Error::validation(
                    "buses.damping",
                    format!("bus {} has nonpositive damping {}", b.id, b.damping),
                ));
            }
            kinds[b.id - 1] = Some(b.kind);
            damping[b.id - 1] = b.damping;
        }
        let kinds: Vec<BusKind> = kinds.into_iter().map(|k| k.expect("all ids seen")).collect();
        let gen_buses: Vec<usize> = (1..=n).filter(|&i| kinds[i - 1] == BusKind::Generator).collect();
        let load_buses: Vec<usize> = (1..=n).filter(|&i| kinds[i - 1] == BusKind::Load).collect();

        let mut gen_pos = vec![None; n];
        for (k, &b) in gen_buses.iter().enumerate() {
            gen_pos[b - 1] = Some(k);
        }
        let mut load_pos = vec![None; n];
        for (k, &b) in load_buses.iter().enumerate() {
            load_pos[b - 1] = Some(k);
        }

        let ng = gen_buses.len();
        let mut inertia = vec![f64::NAN; ng];
        let mut gov_p_gain = vec![0.0; ng];
        let mut gov_i_gain = vec![0.0; ng];
        for g in &case.generators {
            let k = match g.bus.checked_sub(1).and_then(|i| gen_pos.get(i).copied().flatten()) {
                Some(k) => k,
                None => {
                    return Err(Error::validation(
                        "generators",
                        format!("bus {} is not a generator bus (index overlap)", g.bus),
                    ))
                }
            };
            if !inertia[k].is_nan() {
                return Err(Error::validation("generators", format!("duplicate generator at bus {}", g.bus)));
            }
            finite("generators.inertia", g.inertia)?;
            finite("generators.gov_p_gain", g.gov_p_gain)?;
            finite("generators.gov_i_gain", g.gov_i_gain)?;
            if g.inertia <= 0.0 {
                return Err(Error::validation(
                    "generators.inertia",
                    format!("bus {} has nonpositive inertia {}", g.bus, g.inertia),
                ));
            }
            inertia[k] = g.inertia;
            gov_p_gain[k] = g.gov_p_gain;
            gov_i_gain[k] = g.gov_i_gain;
        }
        if let Some(k) = inertia.iter().position(|m| m.is_nan()) {
            return Err(Error::validation(
                "generators",
                format!("generator bus {} has no generator record", gen_buses[k]),
            ));
        }

        let mut b = DMatrix::zeros(n, n);
        for br in &case.branches {
            if br.from == 0 || br.from > n || br.to == 0 || br.to > n {
                return Err(Error::validation(
                    "branches",
                    format!("branch {}-{} references an unknown bus", br.from, br.to),
                ));
            }
            if br.from == br.to {
                return Err(Error::validation("branches", format!("self-loop at bus {}", br.from)));
            }
            finite("branches.susceptance", br.susceptance)?;
            b[(br.from - 1, br.to - 1)] += br.susceptance;
            b[(br.to - 1, br.from - 1)] += br.susceptance;
        }

        let nl = load_buses.len();
        let mut secure = vec![f64::NAN; nl];
        let mut vulnerable: Vec<Option<f64>> = vec![None; nl];
        for l in &case.loads {
            let k = match l.bus.checked_sub(1).and_then(|i| load_pos.get(i).copied().flatten()) {
                Some(k) => k,
                None => {
                    return Err(Error::validation(
                        "loads",
                        format!("bus {} is not a load bus (index overlap)", l.bus),
                    ))
                }
            };
            if !secure[k].is_nan() {
                return Err(Error::validation("loads", format!("duplicate load at bus {}", l.bus)));
            }
            finite("loads.secure", l.secure)?;
            if l.secure < 0.0 {
                return Err(Error::validation("loads.secure", format!("bus {} has negative load", l.bus)));
            }
            if let Some(v) = l.vulnerable {
                finite("loads.vulnerable", v)?;
                if v < 0.0 {
                    return Err(Error::validation(
                        "loads.vulnerable",
                        format!("bus {} has negative vulnerable load", l.bus),
                    ));
                }
            }
            secure[k] = l.secure;
            vulnerable[k] = l.vulnerable;
        }
        // Load buses without a record carry no demand.
        for s in secure.iter_mut() {
            if s.is_nan() {
                *s = 0.0;
            }
        }
        let vulnerable_load = if nl > 0 && vulnerable.iter().all(Option::is_some) {
            Some(vulnerable.into_iter().map(|v| v.unwrap()).collect())
        } else {
            None
        };

        finite("limits.nominal_freq_hz", case.limits.nominal_freq_hz)?;
        if case.limits.nominal_freq_hz <= 0.0 {
            return Err(Error::validation("limits.nominal_freq_hz", "must be positive"));
        }
        if !(case.limits.max_freq_dev_hz > 0.0) {
            return Err(Error::validation("limits.max_freq_dev_hz", "must be positive"));
        }

        Self::assemble(
            case.name,
            case.description,
            case.base_mva,
            gen_buses,
            load_buses,
            inertia,
            damping,
            gov_p_gain,
            gov_i_gain,
            b,
            secure,
            vulnerable_load,
            case.limits,
            gen_pos,
            load_pos,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        name: String,
        description: Option<String>,
        base_mva: f64,
        gen_buses: Vec<usize>,
        load_buses: Vec<usize>,
        inertia: Vec<f64>,
        damping: Vec<f64>,
        gov_p_gain: Vec<f64>,
        gov_i_gain: Vec<f64>,
        susceptance: DMatrix<f64>,
        secure_load: Vec<f64>,
        vulnerable_load: Option<Vec<f64>>,
        limits: Limits,
        gen_pos: Vec<Option<usize>>,
        load_pos: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = damping.len();
        let mut branches = Vec::new();
        for i in 0..n {
            if susceptance[(i, i)] != 0.0 {
                return Err(Error::validation("susceptance", format!("nonzero diagonal at bus {}", i + 1)));
            }
            for j in (i + 1)..n {
                let bij = susceptance[(i, j)];
                if bij != susceptance[(j, i)] {
                    return Err(Error::validation(
                        "susceptance",
                        format!("asymmetric entry B[{},{}] = {} vs B[{},{}] = {}", i + 1, j + 1, bij, j + 1, i + 1, susceptance[(j, i)]),
                    ));
                }
                if bij != 0.0 {
                    branches.push((i, j, bij));
                }
            }
        }
        Ok(Self {
            name,
            description,
            base_mva,
            n_buses: n,
            gen_buses,
            load_buses,
            inertia,
            damping,
            gov_p_gain,
            gov_i_gain,
            susceptance,
            secure_load,
            vulnerable_load,
            nominal_freq_hz: limits.nominal_freq_hz,
            max_freq_dev_hz: limits.max_freq_dev_hz,
            branches,
            gen_pos,
            load_pos,
        })
    }

    /// Build a model directly from a dense susceptance matrix; validates
    /// symmetry and the zero diagonal.
    pub fn with_susceptance(mut case: CaseFile, susceptance: DMatrix<f64>) -> Result<Self> {
        case.branches.clear();
        let base = Self::from_case(case)?;
        if susceptance.nrows() != base.n_buses || susceptance.ncols() != base.n_buses {
            return Err(Error::validation("susceptance", "shape does not match bus count"));
        }
        Self::assemble(
            base.name,
            base.description,
            base.base_mva,
            base.gen_buses,
            base.load_buses,
            base.inertia,
            base.damping,
            base.gov_p_gain,
            base.gov_i_gain,
            susceptance,
            base.secure_load,
            base.vulnerable_load,
            Limits {
                nominal_freq_hz: base.nominal_freq_hz,
                max_freq_dev_hz: base.max_freq_dev_hz,
            },
            base.gen_pos,
            base.load_pos,
        )
    }

    pub fn to_case(&self) -> CaseFile {
        let buses = (1..=self.n_buses)
            .map(|id| BusRecord {
                id,
                kind: if self.gen_pos[id - 1].is_some() { BusKind::Generator } else { BusKind::Load },
                damping: self.damping[id - 1],
            })
            .collect();
        let generators = self
            .gen_buses
            .iter()
            .enumerate()
            .map(|(k, &bus)| GeneratorRecord {
                bus,
                inertia: self.inertia[k],
                gov_p_gain: self.gov_p_gain[k],
                gov_i_gain: self.gov_i_gain[k],
            })
            .collect();
        let branches = self
            .branches
            .iter()
            .map(|&(i, j, b)| BranchRecord { from: i + 1, to: j + 1, susceptance: b })
            .collect();
        let loads = self
            .load_buses
            .iter()
            .enumerate()
            .map(|(k, &bus)| LoadRecord {
                bus,
                secure: self.secure_load[k],
                vulnerable: self.vulnerable_load.as_ref().map(|v| v[k]),
            })
            .collect();
        CaseFile {
            name: self.name.clone(),
            description: self.description.clone(),
            base_mva: self.base_mva,
            buses,
            generators,
            branches,
            loads,
            limits: Limits {
                nominal_freq_hz: self.nominal_freq_hz,
                max_freq_dev_hz: self.max_freq_dev_hz,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }
    pub fn n_buses(&self) -> usize {
        self.n_buses
    }
    pub fn n_gens(&self) -> usize {
        self.gen_buses.len()
    }
    pub fn n_loads(&self) -> usize {
        self.load_buses.len()
    }
    pub fn gen_buses(&self) -> &[usize] {
        &self.gen_buses
    }
    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }
    pub fn inertia(&self) -> &[f64] {
        &self.inertia
    }
    /// Per-bus damping indexed by `bus - 1`.
    pub fn damping(&self) -> &[f64] {
        &self.damping
    }
    pub fn gov_p_gain(&self) -> &[f64] {
        &self.gov_p_gain
    }
    pub fn gov_i_gain(&self) -> &[f64] {
        &self.gov_i_gain
    }
    pub fn susceptance(&self) -> &DMatrix<f64> {
        &self.susceptance
    }
    /// B_ij for 1-based ids.
    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.susceptance[(i - 1, j - 1)]
    }
    pub fn secure_load(&self) -> &[f64] {
        &self.secure_load
    }
    pub fn vulnerable_load(&self) -> Option<&[f64]> {
        self.vulnerable_load.as_deref()
    }
    pub fn nominal_freq_hz(&self) -> f64 {
        self.nominal_freq_hz
    }
    pub fn max_freq_dev_hz(&self) -> f64 {
        self.max_freq_dev_hz
    }
    /// Upper-triangular branch list `(i, j, B_ij)` with 0-based indices.
    pub fn branches(&self) -> &[(usize, usize, f64)] {
        &self.branches
    }
    /// Position of `bus` in `gen_buses`.
    pub fn gen_index(&self, bus: usize) -> Option<usize> {
        bus.checked_sub(1).and_then(|i| self.gen_pos.get(i).copied().flatten())
    }
    /// Position of `bus` in `load_buses`.
    pub fn load_index(&self, bus: usize) -> Option<usize> {
        bus.checked_sub(1).and_then(|i| self.load_pos.get(i).copied().flatten())
    }
    pub fn is_generator(&self, bus: usize) -> bool {
        self.gen_index(bus).is_some()
    }

    /// Dimension of the dynamic state `[δ_1..δ_N, ω_g1..ω_gG]`.
    pub fn state_dim(&self) -> usize {
        self.n_buses + self.gen_buses.len()
    }

    pub fn neighbors(&self) -> NeighborMap {
        let mut adjacency = vec![Vec::new(); self.n_buses];
        for &(i, j, _) in &self.branches {
            adjacency[i].push(j + 1);
            adjacency[j].push(i + 1);
        }
        for a in adjacency.iter_mut() {
            a.sort_unstable();
        }
        NeighborMap { adjacency }
    }

    /// Network flow P^F_i = Σ_j B_ij sin(δ_i − δ_j) for every bus.
    pub fn flows_into(&self, delta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(i, j, b) in &self.branches {
            let f = b * (delta[i] - delta[j]).sin();
            out[i] += f;
            out[j] -= f;
        }
    }

    pub fn flows(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_buses];
        self.flows_into(delta, &mut out);
        out
    }

    /// Absolute frequency in Hz for a deviation state value.
    pub fn absolute_hz(&self, omega: f64) -> f64 {
        self.nominal_freq_hz + omega
    }
}

pub fn load_case(path: impl AsRef<Path>) -> Result<GridModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_case(&text)
}

pub fn parse_case(text: &str) -> Result<GridModel> {
    let case: CaseFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    GridModel::from_case(case)
}

pub fn serialize_case(model: &GridModel) -> String {
    serde_json::to_string_pretty(&model.to_case()).expect("case serializes")
}

pub fn save_case(model: &GridModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_case(model)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Algebraic residual of the no-attack steady state:
/// `−Kᴵ_i δ_i − P^F_i` at generators, `−P^LS_i − P^F_i` at loads.
pub fn equilibrium_residual(model: &GridModel, delta: &[f64]) -> Vec<f64> {
    let pf = model.flows(delta);
    let mut r = vec![0.0; model.n_buses()];
    for (k, &g) in model.gen_buses().iter().enumerate() {
        r[g - 1] = -model.gov_i_gain()[k] * delta[g - 1] - pf[g - 1];
    }
    for (k, &l) in model.load_buses().iter().enumerate() {
        r[l - 1] = -model.secure_load()[k] - pf[l - 1];
    }
    r
}

const EQ_TOL: f64 = 1e-12;
const EQ_MAX_ITER: usize = 100;

/// No-attack equilibrium angles δ* (ω* = 0), Newton from δ = 0.
pub fn equilibrium(model: &GridModel) -> Result<Vec<f64>> {
    equilibrium_from(model, &vec![0.0; model.n_buses()])
}

/// Damped Newton on the steady-state equations starting from `guess`.
pub fn equilibrium_from(model: &GridModel, guess: &[f64]) -> Result<Vec<f64>> {
    let n = model.n_buses();
    if guess.len() != n {
        return Err(Error::Dimension { expected: n, got: guess.len() });
    }
    let inf_norm = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut delta = guess.to_vec();
    let mut r = equilibrium_residual(model, &delta);
    let mut norm = inf_norm(&r);
    for iter in 0..EQ_MAX_ITER {
        if norm <= EQ_TOL {
            return Ok(delta);
        }
        // Jacobian of the residual: −diag(Kᴵ) − L(δ), L the cos-weighted Laplacian.
        let mut jac = DMatrix::zeros(n, n);
        for &(i, j, b) in model.branches() {
            let c = b * (delta[i] - delta[j]).cos();
            jac[(i, i)] -= c;
            jac[(j, j)] -= c;
            jac[(i, j)] += c;
            jac[(j, i)] += c;
        }
        for (k, &g) in model.gen_buses().iter().enumerate() {
            jac[(g - 1, g - 1)] -= model.gov_i_gain()[k];
        }
        let rhs = DVector::from_iterator(n, r.iter().map(|v| -v));
        let step = match jac.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => return Err(Error::NoEquilibrium { iterations: iter, residual: norm }),
        };
        // Backtracking on the residual norm.
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = delta.iter().zip(step.iter()).map(|(d, s)| d + alpha * s).collect();
            let rt = equilibrium_residual(model, &trial);
            let nt = inf_norm(&rt);
            if nt < norm || alpha < 1e-4 {
                delta = trial;
                r = rt;
                norm = nt;
                break;
            }
            alpha *= 0.5;
        }
    }
    if norm <= EQ_TOL * 100.0 {
        return Ok(delta);
    }
    Err(Error::NoEquilibrium { iterations: EQ_MAX_ITER, residual: norm })
}
