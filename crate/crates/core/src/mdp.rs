//! Delay / last-observed-state MDP under the R-max-delay constraint.
//!
//! A state records, for every arm, how many ticks ago it was last pulled
//! (`d_a`) and what it showed then (`i_a`). Pulling arm `a` resets `d_a` to 1,
//! replaces `i_a` with the observation and ages every other arm by one tick.
//! An arm whose delay reaches `R` must be pulled next, which keeps the state
//! space finite.
//!
//! Arms and observation states are 0-based throughout.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::ArmModel;

const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_SWEEPS: usize = 100_000;
const DIRECT_SOLVE_LIMIT: usize = 3_000;

/// Arm count `K`, max delay `R` and per-arm state count `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub arms: usize,
    pub max_delay: usize,
    pub states: usize,
}

impl MdpConfig {
    pub fn new(arms: usize, max_delay: usize, states: usize) -> Result<Self> {
        if arms < 2 {
            return Err(Error::TooFew {
                what: "arms",
                min: 2,
                got: arms,
            });
        }
        if states < 2 {
            return Err(Error::TooFew {
                what: "states",
                min: 2,
                got: states,
            });
        }
        if max_delay < arms {
            return Err(Error::MaxDelayTooSmall {
                r: max_delay,
                k: arms,
            });
        }
        Ok(Self {
            arms,
            max_delay,
            states,
        })
    }
}

/// Decoded MDP state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MdpState {
    pub delays: Vec<usize>,
    pub last: Vec<usize>,
}

/// Enumerated reachable states with successor tables.
///
/// State index = `delay_vector_index * S^K + last_code`, where delay vectors
/// are sorted lexicographically and `last_code` reads the last-observed
/// vector as a base-`S` number with arm 0 most significant. The index order
/// is therefore lexicographic in `(d, i)`.
#[derive(Debug, Clone)]
pub struct StateSpace {
    cfg: MdpConfig,
    delay_vectors: Vec<Vec<usize>>,
    delay_index: HashMap<Vec<usize>, usize>,
    codes: usize,
    forced: Vec<Option<usize>>,
    // (s * K + a) * S + j  ->  next state, usize::MAX where (s, a) is invalid
    next: Vec<usize>,
}

/// Breadth-first closure of the delay dynamics from `(K, K-1, ..., 1)`.
pub fn enumerate_states(cfg: MdpConfig) -> Result<StateSpace> {
    let cfg = MdpConfig::new(cfg.arms, cfg.max_delay, cfg.states)?;
    let k = cfg.arms;
    let r = cfg.max_delay;
    let start: Vec<usize> = (1..=k).rev().collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(start.clone());
    queue.push_back(start);
    while let Some(d) = queue.pop_front() {
        for a in admissible_arms(&d, r) {
            let next = age_delays(&d, a);
            if seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    let mut delay_vectors: Vec<Vec<usize>> = seen.into_iter().collect();
    delay_vectors.sort();
    let delay_index: HashMap<Vec<usize>, usize> = delay_vectors
        .iter()
        .enumerate()
        .map(|(idx, d)| (d.clone(), idx))
        .collect();
    let s_obs = cfg.states;
    let codes = s_obs.pow(k as u32);
    let n_states = delay_vectors.len() * codes;

    let mut forced = Vec::with_capacity(n_states);
    let mut next = vec![usize::MAX; n_states * k * s_obs];
    for (dv_idx, d) in delay_vectors.iter().enumerate() {
        let force = d.iter().position(|&x| x == r);
        let arms = admissible_arms(d, r);
        for code in 0..codes {
            let s = dv_idx * codes + code;
            forced.push(force);
            for &a in &arms {
                let nd = age_delays(d, a);
                let nd_idx = delay_index[&nd];
                let place = s_obs.pow((k - 1 - a) as u32);
                let cleared = code - ((code / place) % s_obs) * place;
                for j in 0..s_obs {
                    next[(s * k + a) * s_obs + j] = nd_idx * codes + cleared + j * place;
                }
            }
        }
    }
    Ok(StateSpace {
        cfg,
        delay_vectors,
        delay_index,
        codes,
        forced,
        next,
    })
}

fn admissible_arms(d: &[usize], r: usize) -> Vec<usize> {
    match d.iter().position(|&x| x == r) {
        Some(a) => vec![a],
        None => (0..d.len()).collect(),
    }
}

fn age_delays(d: &[usize], pulled: usize) -> Vec<usize> {
    d.iter()
        .enumerate()
        .map(|(b, &x)| if b == pulled { 1 } else { x + 1 })
        .collect()
}

impl StateSpace {
    pub fn config(&self) -> MdpConfig {
        self.cfg
    }

    pub fn n_states(&self) -> usize {
        self.forced.len()
    }

    pub fn n_arms(&self) -> usize {
        self.cfg.arms
    }

    pub fn n_obs(&self) -> usize {
        self.cfg.states
    }

    pub fn max_delay(&self) -> usize {
        self.cfg.max_delay
    }

    pub fn delay_vectors(&self) -> &[Vec<usize>] {
        &self.delay_vectors
    }

    /// Length of the state-action vectors (`n_states * K`).
    pub fn n_pairs(&self) -> usize {
        self.n_states() * self.cfg.arms
    }

    pub fn delays(&self, s: usize) -> &[usize] {
        &self.delay_vectors[s / self.codes]
    }

    pub fn delay(&self, s: usize, arm: usize) -> usize {
        self.delays(s)[arm]
    }

    pub fn last(&self, s: usize, arm: usize) -> usize {
        let place = self.cfg.states.pow((self.cfg.arms - 1 - arm) as u32);
        (s % self.codes / place) % self.cfg.states
    }

    pub fn delay_vector_index(&self, s: usize) -> usize {
        s / self.codes
    }

    pub fn state(&self, s: usize) -> MdpState {
        MdpState {
            delays: self.delays(s).to_vec(),
            last: (0..self.cfg.arms).map(|a| self.last(s, a)).collect(),
        }
    }

    pub fn index_of(&self, state: &MdpState) -> Option<usize> {
        let dv = *self.delay_index.get(&state.delays)?;
        if state.last.len() != self.cfg.arms || state.last.iter().any(|&i| i >= self.cfg.states)
        {
            return None;
        }
        let code = state
            .last
            .iter()
            .fold(0, |acc, &i| acc * self.cfg.states + i);
        Some(dv * self.codes + code)
    }

    /// The arm that must be pulled in `s`, if any arm is at delay `R`.
    pub fn forced(&self, s: usize) -> Option<usize> {
        self.forced[s]
    }

    pub fn is_valid(&self, s: usize, arm: usize) -> bool {
        arm < self.cfg.arms && self.forced[s].is_none_or(|f| f == arm)
    }

    pub fn admissible(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cfg.arms).filter(move |&a| self.is_valid(s, a))
    }

    /// True when no forced state exists outside the single round-robin cycle,
    /// i.e. every state has exactly one admissible arm.
    pub fn fully_forced(&self) -> bool {
        self.forced.iter().all(Option::is_some)
    }

    pub fn successor(&self, s: usize, arm: usize, obs: usize) -> Result<usize> {
        if s >= self.n_states() {
            return Err(Error::InvalidAction { state: s, arm });
        }
        if !self.is_valid(s, arm) {
            return Err(Error::InvalidAction { state: s, arm });
        }
        if obs >= self.cfg.states {
            return Err(Error::DimensionMismatch {
                what: "observation state",
                expected: self.cfg.states,
                got: obs,
            });
        }
        Ok(self.next[(s * self.cfg.arms + arm) * self.cfg.states + obs])
    }

    /// Successor without admissibility checks; `usize::MAX` for invalid pairs.
    pub(crate) fn next_raw(&self, s: usize, arm: usize, obs: usize) -> usize {
        self.next[(s * self.cfg.arms + arm) * self.cfg.states + obs]
    }

    /// State reached after the warm-up pulls of arms `0..K` in order.
    pub fn initial_state(&self, observed: &[usize]) -> Result<usize> {
        let state = MdpState {
            delays: (1..=self.cfg.arms).rev().collect(),
            last: observed.to_vec(),
        };
        self.index_of(&state).ok_or(Error::DimensionMismatch {
            what: "warm-up observations",
            expected: self.cfg.arms,
            got: observed.len(),
        })
    }
}

/// Controlled kernel: for each valid `(s, a)`, the probability of each
/// observation `j`, which determines the successor uniquely.
#[derive(Debug, Clone)]
pub struct Kernel {
    arms: usize,
    obs: usize,
    // (s * K + a) * S + j, zero rows for invalid pairs
    probs: Vec<f64>,
}

/// Builds `Q_{θ,R}` from one model per arm. Each model needs powers up to `R`.
pub fn kernel(space: &StateSpace, arms: &[ArmModel]) -> Result<Kernel> {
    let k = space.n_arms();
    if arms.len() != k {
        return Err(Error::ArmCountMismatch {
            expected: k,
            got: arms.len(),
        });
    }
    let s_obs = space.n_obs();
    let mut probs = vec![0.0; space.n_pairs() * s_obs];
    for s in 0..space.n_states() {
        for a in space.admissible(s) {
            let pd = arms[a].tpm_power(space.delay(s, a))?;
            let i = space.last(s, a);
            for j in 0..s_obs {
                probs[(s * k + a) * s_obs + j] = pd[(i, j)];
            }
        }
    }
    Ok(Kernel {
        arms: k,
        obs: s_obs,
        probs,
    })
}

impl Kernel {
    /// Observation probabilities for pulling `arm` in `s`.
    pub fn row(&self, s: usize, arm: usize) -> &[f64] {
        let start = (s * self.arms + arm) * self.obs;
        &self.probs[start..start + self.obs]
    }

    /// Sparse successor distribution of a valid pair.
    pub fn successors(&self, space: &StateSpace, s: usize, arm: usize) -> Vec<(usize, f64)> {
        if !space.is_valid(s, arm) {
            return Vec::new();
        }
        self.row(s, arm)
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(j, &p)| (space.next_raw(s, arm, j), p))
            .collect()
    }

    /// Returns the first ordered pair `(from, to)` with no path under any
    /// admissible action, or `None` when the MDP communicates.
    pub fn unreachable_pair(&self, space: &StateSpace) -> Option<(usize, usize)> {
        let n = space.n_states();
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for s in 0..n {
            for a in space.admissible(s) {
                for (t, _) in self.successors(space, s, a) {
                    fwd[s].push(t);
                    bwd[t].push(s);
                }
            }
        }
        let reach = |adj: &Vec<Vec<usize>>| {
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for &w in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            seen
        };
        let f = reach(&fwd);
        if let Some(t) = f.iter().position(|x| !x) {
            return Some((0, t));
        }
        let b = reach(&bwd);
        b.iter().position(|x| !x).map(|s| (s, 0))
    }
}

/// Stationary randomized policy: a distribution over arms per state.
#[derive(Debug, Clone, PartialEq)]
pub struct SrsPolicy {
    arms: usize,
    probs: Vec<f64>,
}

impl SrsPolicy {
    /// Uniform over arms in free states, the forced arm otherwise.
    pub fn uniform(space: &StateSpace) -> Self {
        let k = space.n_arms();
        let mut probs = vec![0.0; space.n_pairs()];
        for s in 0..space.n_states() {
            match space.forced(s) {
                Some(a) => probs[s * k + a] = 1.0,
                None => probs[s * k..(s + 1) * k].fill(1.0 / k as f64),
            }
        }
        Self { arms: k, probs }
    }

    /// Deterministic policy; forced states override `choice`.
    pub fn deterministic(space: &StateSpace, choice: &[usize]) -> Result<Self> {
        if choice.len() != space.n_states() {
            return Err(Error::DimensionMismatch {
                what: "policy choices",
                expected: space.n_states(),
                got: choice.len(),
            });
        }
        let k = space.n_arms();
        let mut probs = vec![0.0; space.n_pairs()];
        for (s, &a) in choice.iter().enumerate() {
            let a = space.forced(s).unwrap_or(a);
            if a >= k {
                return Err(Error::InvalidAction { state: s, arm: a });
            }
            probs[s * k + a] = 1.0;
        }
        Ok(Self { arms: k, probs })
    }

    /// Policy induced by an occupancy, `π(a|s) ∝ ν(s, a)`, falling back to
    /// uniform on states without mass.
    pub fn from_occupancy(space: &StateSpace, nu: &Occupancy) -> Self {
        let mut pol = Self::uniform(space);
        let k = space.n_arms();
        for s in 0..space.n_states() {
            if space.forced(s).is_some() {
                continue;
            }
            let row = &nu.values()[s * k..(s + 1) * k];
            let total: f64 = row.iter().sum();
            if total > 1e-300 {
                for a in 0..k {
                    pol.probs[s * k + a] = row[a] / total;
                }
            }
        }
        pol
    }

    /// Builds a policy from raw per-state rows (`n_states * K`, row-major).
    pub fn from_rows(space: &StateSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.n_pairs() {
            return Err(Error::DimensionMismatch {
                what: "policy table",
                expected: space.n_pairs(),
                got: probs.len(),
            });
        }
        let k = space.n_arms();
        for s in 0..space.n_states() {
            let row = &probs[s * k..(s + 1) * k];
            let sum: f64 = row.iter().sum();
            let leaked: f64 = (0..k)
                .filter(|&a| !space.is_valid(s, a))
                .map(|a| row[a])
                .sum();
            if (sum - 1.0).abs() > 1e-9 || leaked > 1e-12 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidAction { state: s, arm: 0 });
            }
        }
        Ok(Self { arms: k, probs })
    }

    pub fn prob(&self, s: usize, arm: usize) -> f64 {
        self.probs[s * self.arms + arm]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.arms..(s + 1) * self.arms]
    }
}

/// Weight vector over `(state, arm)` pairs, row-major by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    arms: usize,
    values: Vec<f64>,
}

impl Occupancy {
    pub fn new(arms: usize, values: Vec<f64>) -> Self {
        Self { arms, values }
    }

    pub fn zeros(space: &StateSpace) -> Self {
        Self::new(space.n_arms(), vec![0.0; space.n_pairs()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn get(&self, s: usize, arm: usize) -> f64 {
        self.values[s * self.arms + arm]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn state_mass(&self, s: usize) -> f64 {
        self.values[s * self.arms..(s + 1) * self.arms].iter().sum()
    }

    /// `(1 - w) * self + w * other`.
    pub fn blend(&self, other: &Occupancy, w: f64) -> Occupancy {
        Occupancy::new(
            self.arms,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        )
    }

    /// Sup-norm distance.
    pub fn distance(&self, other: &Occupancy) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Non-zero entries as `(state, arm, value)`.
    pub fn sparse(&self) -> Vec<(usize, usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(idx, &v)| (idx / self.arms, idx % self.arms, v))
            .collect()
    }
}

/// Sparse state-to-state chain induced by a policy.
fn state_chain(space: &StateSpace, kern: &Kernel, pol: &SrsPolicy) -> Vec<Vec<(usize, f64)>> {
    (0..space.n_states())
        .map(|s| {
            let mut out: Vec<(usize, f64)> = Vec::new();
            for a in space.admissible(s) {
                let w = pol.prob(s, a);
                if w <= 0.0 {
                    continue;
                }
                for (t, p) in kern.successors(space, s, a) {
                    out.push((t, w * p));
                }
            }
            out
        })
        .collect()
}

/// Stationary distribution of the state-action chain induced by `pol`,
/// returned as `ν(s, a) = μ(s) π(a|s)`.
///
/// Runs power iteration on the lazy chain `(I + P_π) / 2` from the uniform
/// start; if the sweep cap is hit it falls back to a direct solve, which
/// fails with [`Error::NonErgodicPolicy`] when the stationary law is not
/// unique.
pub fn stationary_occupancy(space: &StateSpace, kern: &Kernel, pol: &SrsPolicy) -> Result<Occupancy> {
    let chain = state_chain(space, kern, pol);
    let mu = match lazy_power(&chain, None) {
        Some(mu) => mu,
        None => direct_stationary(&chain)?,
    };
    let k = space.n_arms();
    let mut values = vec![0.0; space.n_pairs()];
    for s in 0..space.n_states() {
        for a in 0..k {
            values[s * k + a] = mu[s] * pol.prob(s, a);
        }
    }
    Ok(Occupancy::new(k, values))
}

pub(crate) fn lazy_power(chain: &[Vec<(usize, f64)>], start: Option<Vec<f64>>) -> Option<Vec<f64>> {
    let n = chain.len();
    let mut mu = start.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let mut next = vec![0.0; n];
    for _ in 0..STATIONARY_MAX_SWEEPS {
        next.iter_mut().zip(&mu).for_each(|(x, m)| *x = 0.5 * m);
        for (s, row) in chain.iter().enumerate() {
            let m = 0.5 * mu[s];
            if m == 0.0 {
                continue;
            }
            for &(t, p) in row {
                next[t] += m * p;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let delta: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if delta <= STATIONARY_TOL {
            return Some(mu);
        }
    }
    None
}

fn direct_stationary(chain: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = chain.len();
    if n > DIRECT_SOLVE_LIMIT {
        return Err(Error::NoConvergence {
            what: "stationary occupancy",
            iterations: STATIONARY_MAX_SWEEPS,
        });
    }
    let mut p = DMatrix::<f64>::zeros(n, n);
    for (s, row) in chain.iter().enumerate() {
        for &(t, q) in row {
            p[(s, t)] += q;
        }
    }
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let mu = a.lu().solve(&b).ok_or(Error::NonErgodicPolicy)?;
    if mu.iter().any(|x| !x.is_finite() || *x < -1e-9) {
        return Err(Error::NonErgodicPolicy);
    }
    Ok(mu.iter().map(|x| x.max(0.0)).collect())
}

/// Feasibility diagnostics for an occupancy against the flow and
/// max-delay constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OccupancyReport {
    pub flow_residual: f64,
    pub delay_violation: f64,
    pub invalid_mass: f64,
    pub negative_mass: f64,
    pub total_mass: f64,
    pub pass: bool,
}

pub fn check_occupancy(space: &StateSpace, kern: &Kernel, nu: &Occupancy, tol: f64) -> OccupancyReport {
    let n = space.n_states();
    let k = space.n_arms();
    let mut inflow = vec![0.0; n];
    let mut invalid_mass = 0.0;
    let mut negative_mass = 0.0;
    let mut delay_violation: f64 = 0.0;
    for s in 0..n {
        for a in 0..k {
            let w = nu.get(s, a);
            if w < 0.0 {
                negative_mass -= w;
            }
            if !space.is_valid(s, a) {
                invalid_mass += w.abs();
                continue;
            }
            for (t, p) in kern.successors(space, s, a) {
                inflow[t] += w * p;
            }
        }
        if let Some(f) = space.forced(s) {
            delay_violation = delay_violation.max((nu.get(s, f) - nu.state_mass(s)).abs());
        }
    }
    let flow_residual = (0..n)
        .map(|s| (nu.state_mass(s) - inflow[s]).abs())
        .fold(0.0, f64::max);
    let total_mass = nu.total();
    let pass = flow_residual <= tol
        && delay_violation <= tol
        && invalid_mass <= tol
        && negative_mass <= tol
        && (total_mass - 1.0).abs() <= tol.max(1e-10);
    OccupancyReport {
        flow_residual,
        delay_violation,
        invalid_mass,
        negative_mass,
        total_mass,
        pass,
    }
}
