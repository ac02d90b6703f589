//! Bell-type jump processes on a finite configuration space.
//!
//! Each basis vector of a small Hilbert space is assigned to one
//! configuration, and configurations are grouped into labeled sectors
//! (particle numbers). The process jumps from `q'` to `q` with rate
//!
//! `σ(q'→q) = (2/ħ) Im⁺⟨ψ|P(q) H P(q')|ψ⟩ / ⟨ψ|P(q')|ψ⟩`
//!
//! and does nothing between jumps. With these rates the occupation law
//! `⟨ψ_t|P(q)|ψ_t⟩` is carried along by the process.

use std::collections::BTreeMap;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::seeding::{label, substream};

pub const MAX_DIMENSION: usize = 64;
const HERMITIAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JumpError {
    #[error("invalid sector space: {0}")]
    Space(String),
    #[error("configuration {0} has zero occupation")]
    ZeroOccupation(usize),
    #[error("state has length {got}, space has dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown configuration {0}")]
    UnknownConfig(String),
    #[error("invalid simulation request: {0}")]
    Request(String),
    #[error("sector space file: {0}")]
    Parse(String),
}

/// A labeled group of configurations, e.g. all one-particle positions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sector {
    pub label: String,
    pub configs: Vec<String>,
}

/// Finite configuration space with a Hamiltonian on its joint basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSpace {
    sectors: Vec<Sector>,
    /// (sector, label) of each global configuration index.
    configs: Vec<(usize, String)>,
    /// Configuration of each basis vector.
    assignment: Vec<usize>,
    /// Basis vectors of each configuration.
    members: Vec<Vec<usize>>,
    hamiltonian: DMatrix<Complex64>,
    hbar: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BasisEntry {
    sector: String,
    config: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    #[serde(default = "one")]
    hbar: f64,
    sectors: Vec<Sector>,
    #[serde(default)]
    basis: Option<Vec<BasisEntry>>,
    hamiltonian: Vec<[f64; 2]>,
}

fn one() -> f64 {
    1.0
}

impl SectorSpace {
    /// One basis vector per configuration, in sector order.
    pub fn new(sectors: Vec<Sector>, hamiltonian: DMatrix<Complex64>, hbar: f64) -> Result<Self, JumpError> {
        let n: usize = sectors.iter().map(|s| s.configs.len()).sum();
        Self::with_assignment(sectors, (0..n).collect(), hamiltonian, hbar)
    }

    /// `assignment[i]` is the global configuration index of basis vector `i`,
    /// where configurations are numbered in sector order.
    pub fn with_assignment(sectors: Vec<Sector>, assignment: Vec<usize>, hamiltonian: DMatrix<Complex64>, hbar: f64) -> Result<Self, JumpError> {
        let bad = |m: String| Err(JumpError::Space(m));
        if !(hbar > 0.0 && hbar.is_finite()) {
            return bad(format!("hbar must be positive, got {hbar}"));
        }
        let mut configs = Vec::new();
        let mut seen = BTreeMap::new();
        for (s, sector) in sectors.iter().enumerate() {
            if sector.configs.is_empty() {
                return bad(format!("sector {} has no configurations", sector.label));
            }
            if seen.insert(sector.label.clone(), ()).is_some() {
                return bad(format!("duplicate sector {}", sector.label));
            }
            for c in &sector.configs {
                if configs.iter().any(|(cs, l): &(usize, String)| *cs == s && l == c) {
                    return bad(format!("duplicate configuration {c} in sector {}", sector.label));
                }
                configs.push((s, c.clone()));
            }
        }
        let dim = assignment.len();
        if dim == 0 || dim > MAX_DIMENSION {
            return bad(format!("dimension {dim} outside 1..={MAX_DIMENSION}"));
        }
        if hamiltonian.nrows() != dim || hamiltonian.ncols() != dim {
            return bad(format!("hamiltonian is {}x{}, basis has {dim} vectors", hamiltonian.nrows(), hamiltonian.ncols()));
        }
        let mut members = vec![Vec::new(); configs.len()];
        for (i, &q) in assignment.iter().enumerate() {
            if q >= configs.len() {
                return bad(format!("basis vector {i} assigned to unknown configuration {q}"));
            }
            members[q].push(i);
        }
        if let Some(q) = members.iter().position(Vec::is_empty) {
            return bad(format!("configuration {} has no basis vectors", configs[q].1));
        }
        for i in 0..dim {
            for j in 0..dim {
                if (hamiltonian[(i, j)] - hamiltonian[(j, i)].conj()).norm() > HERMITIAN_TOLERANCE {
                    return bad(format!("hamiltonian is not Hermitian at ({i}, {j})"));
                }
            }
        }
        Ok(Self { sectors, configs, assignment, members, hamiltonian, hbar })
    }

    /// Parses the JSON definition: sector labels with configuration labels,
    /// an optional basis assignment, and the row-major Hamiltonian as `[re, im]` pairs.
    pub fn from_json(text: &str) -> Result<Self, JumpError> {
        let f: SpaceFile = serde_json::from_str(text).map_err(|e| JumpError::Parse(e.to_string()))?;
        let n_configs: usize = f.sectors.iter().map(|s| s.configs.len()).sum();
        let assignment = match &f.basis {
            None => (0..n_configs).collect(),
            Some(entries) => {
                let mut lookup = BTreeMap::new();
                let mut k = 0;
                for s in &f.sectors {
                    for c in &s.configs {
                        lookup.insert((s.label.clone(), c.clone()), k);
                        k += 1;
                    }
                }
                entries
                    .iter()
                    .map(|e| {
                        lookup
                            .get(&(e.sector.clone(), e.config.clone()))
                            .copied()
                            .ok_or_else(|| JumpError::UnknownConfig(format!("{}/{}", e.sector, e.config)))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let dim = assignment.len();
        if f.hamiltonian.len() != dim * dim {
            return Err(JumpError::Space(format!("hamiltonian has {} entries, expected {}", f.hamiltonian.len(), dim * dim)));
        }
        let h = DMatrix::from_row_iterator(dim, dim, f.hamiltonian.iter().map(|[re, im]| Complex64::new(*re, *im)));
        Self::with_assignment(f.sectors, assignment, h, f.hbar)
    }

    pub fn to_json(&self) -> String {
        let dim = self.dimension();
        let f = SpaceFile {
            hbar: self.hbar,
            sectors: self.sectors.clone(),
            basis: Some(
                self.assignment
                    .iter()
                    .map(|&q| BasisEntry { sector: self.sectors[self.configs[q].0].label.clone(), config: self.configs[q].1.clone() })
                    .collect(),
            ),
            hamiltonian: (0..dim * dim).map(|k| {
                let z = self.hamiltonian[(k / dim, k % dim)];
                [z.re, z.im]
            }).collect(),
        };
        serde_json::to_string_pretty(&f).expect("serializable")
    }

    pub fn dimension(&self) -> usize {
        self.assignment.len()
    }

    pub fn config_count(&self) -> usize {
        self.configs.len()
    }

    pub fn sectors(&self) -> &[Sector] {
        &self.sectors
    }

    pub fn hamiltonian(&self) -> &DMatrix<Complex64> {
        &self.hamiltonian
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn sector_of(&self, config: usize) -> usize {
        self.configs[config].0
    }

    pub fn config_label(&self, config: usize) -> &str {
        &self.configs[config].1
    }

    /// Global index of `config` in the sector labeled `sector`.
    pub fn config_index(&self, sector: &str, config: &str) -> Result<usize, JumpError> {
        self.configs
            .iter()
            .position(|(s, c)| self.sectors[*s].label == sector && c == config)
            .ok_or_else(|| JumpError::UnknownConfig(format!("{sector}/{config}")))
    }

    /// Basis vectors spanning the range of `P(config)`.
    pub fn projection(&self, config: usize) -> &[usize] {
        &self.members[config]
    }

    fn check(&self, psi: &DVector<Complex64>) -> Result<(), JumpError> {
        if psi.len() != self.dimension() {
            return Err(JumpError::Dimension { expected: self.dimension(), got: psi.len() });
        }
        Ok(())
    }

    /// `⟨ψ|P(q)|ψ⟩` for every configuration.
    pub fn occupations(&self, psi: &DVector<Complex64>) -> Vec<f64> {
        self.members.iter().map(|m| m.iter().map(|&i| psi[i].norm_sqr()).sum()).collect()
    }

    /// `⟨ψ|P(to) H P(from)|ψ⟩`.
    pub fn transition_element(&self, psi: &DVector<Complex64>, from: usize, to: usize) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for &i in &self.members[to] {
            for &j in &self.members[from] {
                s += psi[i].conj() * self.hamiltonian[(i, j)] * psi[j];
            }
        }
        s
    }

    /// `d⟨ψ|P(q)|ψ⟩/dt = (2/ħ) Im⟨ψ|P(q) H|ψ⟩` from the Schrödinger equation.
    pub fn occupation_derivative(&self, psi: &DVector<Complex64>) -> Vec<f64> {
        let hpsi = &self.hamiltonian * psi;
        self.members
            .iter()
            .map(|m| 2.0 / self.hbar * m.iter().map(|&i| (psi[i].conj() * hpsi[i]).im).sum::<f64>())
            .collect()
    }
}

/// Jump rate `σ(from → to)` for the state `psi`.
pub fn jump_rate(psi: &DVector<Complex64>, space: &SectorSpace, from: usize, to: usize) -> Result<f64, JumpError> {
    space.check(psi)?;
    if from >= space.config_count() || to >= space.config_count() {
        return Err(JumpError::UnknownConfig(format!("{}", from.max(to))));
    }
    let occupation: f64 = space.members[from].iter().map(|&j| psi[j].norm_sqr()).sum();
    if !(occupation > 0.0) {
        return Err(JumpError::ZeroOccupation(from));
    }
    if from == to {
        return Ok(0.0);
    }
    let flux = 2.0 / space.hbar * space.transition_element(psi, from, to).im;
    Ok(flux.max(0.0) / occupation)
}

/// Right-hand side of the master equation `Σ_q' σ(q'→q)p_q' − σ(q→q')p_q`
/// built from the jump rates. Unoccupied configurations contribute no flow.
pub fn master_equation(psi: &DVector<Complex64>, space: &SectorSpace) -> Result<Vec<f64>, JumpError> {
    space.check(psi)?;
    let p = space.occupations(psi);
    let n = space.config_count();
    let mut flow = vec![0.0; n];
    for from in 0..n {
        if p[from] == 0.0 {
            continue;
        }
        for to in 0..n {
            if to == from {
                continue;
            }
            let current = jump_rate(psi, space, from, to)? * p[from];
            flow[to] += current;
            flow[from] -= current;
        }
    }
    Ok(flow)
}

/// Exact `ψ(t) = exp(−iHt/ħ) ψ0` via the eigendecomposition of `H`.
#[derive(Debug, Clone)]
pub struct ExactEvolution {
    vectors: DMatrix<Complex64>,
    energies: DVector<f64>,
    coefficients: DVector<Complex64>,
    hbar: f64,
}

impl ExactEvolution {
    pub fn new(space: &SectorSpace, psi0: &DVector<Complex64>) -> Result<Self, JumpError> {
        space.check(psi0)?;
        let eig = space.hamiltonian.clone().symmetric_eigen();
        let coefficients = eig.eigenvectors.adjoint() * psi0;
        Ok(Self { vectors: eig.eigenvectors, energies: eig.eigenvalues, coefficients, hbar: space.hbar })
    }

    pub fn state(&self, t: f64) -> DVector<Complex64> {
        let phased = DVector::from_iterator(
            self.coefficients.len(),
            self.coefficients.iter().zip(self.energies.iter()).map(|(c, e)| c * Complex64::from_polar(1.0, -e * t / self.hbar)),
        );
        &self.vectors * phased
    }
}

/// Configuration and sector at a moment.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SectorState {
    pub sector: usize,
    pub config: usize,
    pub time: f64,
}

/// One realization: the initial state followed by every jump.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MarkovPath {
    pub states: Vec<SectorState>,
    pub seed: u64,
    pub path_id: u64,
    /// Candidate events whose rate exceeded the thinning bound.
    pub bound_violations: usize,
}

impl MarkovPath {
    pub fn jump_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.states[1..].iter().map(|s| s.time)
    }

    /// Configuration occupied at time `t`.
    pub fn config_at(&self, t: f64) -> usize {
        let k = self.states.partition_point(|s| s.time <= t);
        self.states[k.saturating_sub(1)].config
    }

    pub fn first_jump(&self) -> Option<f64> {
        self.states.get(1).map(|s| s.time)
    }
}

/// Thinning settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct JumpOptions {
    /// Mesh on which rate bounds are refreshed; `None` means `1e-3 × t_final`.
    pub dt_rate: Option<f64>,
    /// Safety factor applied to the largest sampled rate in a mesh interval.
    pub bound_factor: f64,
}

impl Default for JumpOptions {
    fn default() -> Self {
        Self { dt_rate: None, bound_factor: 1.25 }
    }
}

/// Thinning sampler for one `(space, ψ0, t_final)`; the rate bounds on the
/// mesh are computed once and shared by every path.
pub struct JumpSimulator<'a> {
    space: &'a SectorSpace,
    evolution: &'a ExactEvolution,
    t_final: f64,
    dt: f64,
    intervals: usize,
    bound_factor: f64,
    /// Total exit rate of each configuration at the mesh nodes and midpoints
    /// (node `2k` is `k·dt`, node `2k+1` is `(k+½)·dt`).
    node_totals: Vec<Vec<f64>>,
}

impl<'a> JumpSimulator<'a> {
    pub fn new(space: &'a SectorSpace, evolution: &'a ExactEvolution, t_final: f64, opts: &JumpOptions) -> Result<Self, JumpError> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(JumpError::Request(format!("t_final must be positive, got {t_final}")));
        }
        let dt_rate = opts.dt_rate.unwrap_or(1e-3 * t_final);
        if !(dt_rate > 0.0) {
            return Err(JumpError::Request(format!("dt_rate must be positive, got {dt_rate}")));
        }
        if !(opts.bound_factor >= 1.0) {
            return Err(JumpError::Request(format!("bound_factor must be at least 1, got {}", opts.bound_factor)));
        }
        let intervals = (t_final / dt_rate - 1e-9).ceil().max(1.0) as usize;
        let dt = t_final / intervals as f64;
        let mut sim = Self { space, evolution, t_final, dt, intervals, bound_factor: opts.bound_factor, node_totals: Vec::new() };
        sim.node_totals = (0..=2 * intervals)
            .into_par_iter()
            .map(|k| {
                let psi = evolution.state(sim.node_time(k));
                (0..space.config_count()).map(|q| exit_rates(&psi, space, q).iter().sum()).collect()
            })
            .collect();
        Ok(sim)
    }

    fn node_time(&self, k: usize) -> f64 {
        if k == 2 * self.intervals {
            self.t_final
        } else {
            0.5 * k as f64 * self.dt
        }
    }

    /// One path from configuration `q0` at time 0.
    pub fn path(&self, q0: usize, seed: u64, path_id: u64) -> Result<MarkovPath, JumpError> {
        let space = self.space;
        if q0 >= space.config_count() {
            return Err(JumpError::UnknownConfig(q0.to_string()));
        }
        if !(space.occupations(&self.evolution.state(0.0))[q0] > 0.0) {
            return Err(JumpError::ZeroOccupation(q0));
        }
        let mut rng = substream(seed, label::JUMPS, path_id);
        let mut q = q0;
        let mut path = MarkovPath {
            states: vec![SectorState { sector: space.sector_of(q0), config: q0, time: 0.0 }],
            seed,
            path_id,
            bound_violations: 0,
        };
        for k in 0..self.intervals {
            let end = self.node_time(2 * k + 2);
            let mut s = self.node_time(2 * k);
            let mut fresh = 0.0;
            'interval: loop {
                let sampled = [2 * k, 2 * k + 1, 2 * k + 2].iter().map(|&n| self.node_totals[n][q]).fold(fresh, f64::max);
                let bound = self.bound_factor * sampled;
                if !(bound > 0.0) {
                    break;
                }
                loop {
                    let u: f64 = rng.random();
                    s -= (1.0 - u).ln() / bound;
                    if s >= end {
                        break 'interval;
                    }
                    let psi = self.evolution.state(s);
                    let rates = checked_exit_rates(&psi, space, q)?;
                    let total: f64 = rates.iter().sum();
                    if total > bound {
                        path.bound_violations += 1;
                    }
                    if rng.random::<f64>() * bound < total {
                        let mut pick = rng.random::<f64>() * total;
                        let mut to = rates.iter().rposition(|&r| r > 0.0).unwrap_or(q);
                        for (j, r) in rates.iter().enumerate() {
                            if *r > 0.0 && pick < *r {
                                to = j;
                                break;
                            }
                            pick -= r;
                        }
                        q = to;
                        path.states.push(SectorState { sector: space.sector_of(q), config: q, time: s });
                        // the bound depends on the configuration; include the rate right after the jump
                        fresh = checked_exit_rates(&psi, space, q)?.iter().sum();
                        continue 'interval;
                    }
                }
            }
        }
        Ok(path)
    }

    /// `n` paths in parallel; path `i` uses stream `i`.
    pub fn paths(&self, q0: usize, seed: u64, n: usize) -> Result<Vec<MarkovPath>, JumpError> {
        (0..n as u64).into_par_iter().map(|i| self.path(q0, seed, i)).collect()
    }
}

/// Rates out of `from` (zero where the occupation vanishes).
fn exit_rates(psi: &DVector<Complex64>, space: &SectorSpace, from: usize) -> Vec<f64> {
    checked_exit_rates(psi, space, from).unwrap_or_else(|_| vec![0.0; space.config_count()])
}

fn checked_exit_rates(psi: &DVector<Complex64>, space: &SectorSpace, from: usize) -> Result<Vec<f64>, JumpError> {
    (0..space.config_count()).map(|to| jump_rate(psi, space, from, to)).collect()
}

/// Simulates one path from `q0` at time 0 to `t_final`.
pub fn simulate(
    space: &SectorSpace,
    evolution: &ExactEvolution,
    q0: usize,
    t_final: f64,
    seed: u64,
    path_id: u64,
    opts: &JumpOptions,
) -> Result<MarkovPath, JumpError> {
    JumpSimulator::new(space, evolution, t_final, opts)?.path(q0, seed, path_id)
}

/// Simulates `n` paths in parallel; path `i` uses stream `i`.
pub fn simulate_many(
    space: &SectorSpace,
    evolution: &ExactEvolution,
    q0: usize,
    t_final: f64,
    seed: u64,
    n: usize,
    opts: &JumpOptions,
) -> Result<Vec<MarkovPath>, JumpError> {
    JumpSimulator::new(space, evolution, t_final, opts)?.paths(q0, seed, n)
}

/// Empirical configuration occupation against `⟨ψ_t|P(q)|ψ_t⟩`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OccupationReport {
    pub time: f64,
    pub empirical: Vec<f64>,
    pub expected: Vec<f64>,
    pub total_variation: f64,
    /// Three times the expected multinomial fluctuation of the TV statistic.
    pub tv_bound: f64,
    pub sample_count: usize,
}

impl OccupationReport {
    pub fn within_bound(&self) -> bool {
        self.total_variation <= self.tv_bound
    }

    /// Whether configuration `q` lies within `k` binomial standard deviations.
    pub fn config_within(&self, q: usize, k: f64) -> bool {
        let p = self.expected[q];
        let sd = (p * (1.0 - p) / self.sample_count as f64).sqrt();
        (self.empirical[q] - p).abs() <= k * sd
    }
}

pub fn occupation_check(paths: &[MarkovPath], space: &SectorSpace, evolution: &ExactEvolution, times: &[f64]) -> Result<Vec<OccupationReport>, JumpError> {
    if paths.len() < 100 {
        return Err(JumpError::Request(format!("occupation checks need at least 100 paths, got {}", paths.len())));
    }
    let n = paths.len();
    Ok(times
        .iter()
        .map(|&t| {
            let mut empirical = vec![0.0; space.config_count()];
            for p in paths {
                empirical[p.config_at(t)] += 1.0 / n as f64;
            }
            let expected = space.occupations(&evolution.state(t));
            OccupationReport {
                time: t,
                total_variation: crate::ensembles::total_variation(&empirical, &expected),
                tv_bound: 3.0 * crate::ensembles::expected_multinomial_tv(&expected, n),
                empirical,
                expected,
                sample_count: n,
            }
        })
        .collect())
}

/// Writes paths as CSV `path_id,t,sector,config`, one row per state.
pub fn write_paths_csv<W: Write>(mut w: W, space: &SectorSpace, paths: &[MarkovPath]) -> io::Result<()> {
    writeln!(w, "path_id,t,sector,config")?;
    for p in paths {
        for s in &p.states {
            writeln!(w, "{},{},{},{}", p.path_id, s.time, space.sectors[s.sector].label, space.config_label(s.config))?;
        }
    }
    Ok(())
}

/// Two configurations `1`, `2` in sectors `one`, `two`, coupled by `g σ_x`.
pub fn two_level(g: f64) -> SectorSpace {
    let c = |re: f64| Complex64::new(re, 0.0);
    SectorSpace::new(
        vec![
            Sector { label: "one".into(), configs: vec!["1".into()] },
            Sector { label: "two".into(), configs: vec!["2".into()] },
        ],
        DMatrix::from_row_slice(2, 2, &[c(0.0), c(g), c(g), c(0.0)]),
        1.0,
    )
    .expect("valid two-level space")
}

/// Random Hermitian space of dimension `dim`, its configurations spread
/// over `sectors` sectors; some configurations own several basis vectors.
pub fn random_space(dim: usize, sectors: usize, rng: &mut impl Rng) -> SectorSpace {
    let configs = (dim * 3 / 4).max(sectors);
    let mut assignment: Vec<usize> = (0..configs).collect();
    while assignment.len() < dim {
        assignment.push(rng.random_range(0..configs));
    }
    let per = configs.div_ceil(sectors);
    let secs: Vec<Sector> = (0..sectors)
        .map(|s| Sector {
            label: format!("n{s}"),
            configs: (s * per..((s + 1) * per).min(configs)).map(|k| format!("c{k}")).collect(),
        })
        .filter(|s| !s.configs.is_empty())
        .collect();
    let mut h = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
    for i in 0..dim {
        h[(i, i)] = Complex64::new(rng.random_range(-1.0..1.0), 0.0);
        for j in 0..i {
            let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    SectorSpace::with_assignment(secs, assignment, h, 1.0).expect("valid random space")
}

/// Random normalized state.
pub fn random_state(dim: usize, rng: &mut impl Rng) -> DVector<Complex64> {
    let v = DVector::from_iterator(dim, (0..dim).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))));
    let n = v.norm();
    v / Complex64::new(n, 0.0)
}
