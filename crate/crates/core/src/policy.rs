//! The Rstl-Dtrack sampling, stopping and recommendation rules.
//!
//! Time `t` counts actions from 0. Arms `0..K` are pulled once each in
//! order, after which the MDP state is `(K, ..., 1)` with the observed
//! vector. From `t = K` on, every action and observation is counted against
//! the pre-transition state, so after the observation at time `n` the counts
//! sum to `n - K + 1`.

use std::sync::Arc;

use log::trace;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Generator;
use crate::mdp::{Occupancy, StateSpace};
use crate::oracle::{
    self, separable_infimum, separable_upper_bound, ArmObjective, InnerInf, Instance, KlCache,
    SolverConfig, TIE_TOL,
};

/// How unforced actions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    /// `ε_n π^unif + (1 - ε_n) π^η` with cached occupancies.
    #[default]
    Dtrack,
    /// Always `π^unif`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub delta: f64,
    pub eta: f64,
    /// `β` in `ε_n = n^{-β}`; `None` means `1 / (2 (1 + n_states))`.
    pub epsilon_exponent: Option<f64>,
    pub update_period: u64,
    pub check_period: u64,
    pub max_steps: u64,
    pub sampling: SamplingRule,
    pub solver: SolverConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            eta: 0.5,
            epsilon_exponent: None,
            update_period: 50,
            check_period: 1,
            max_steps: 1_000_000,
            sampling: SamplingRule::Dtrack,
            solver: SolverConfig {
                max_iter: 50,
                ..SolverConfig::default()
            },
        }
    }
}

impl PolicyConfig {
    pub fn default_exponent(n_states: usize) -> f64 {
        1.0 / (2.0 * (1.0 + n_states as f64))
    }

    pub fn exponent(&self, n_states: usize) -> f64 {
        self.epsilon_exponent
            .unwrap_or_else(|| Self::default_exponent(n_states))
    }

    pub fn validate(&self, n_states: usize) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config("eta", "must lie in (0, 1)"));
        }
        let beta = self.exponent(n_states);
        let cap = Self::default_exponent(n_states);
        if !(beta > 0.0 && beta <= cap * (1.0 + 1e-12)) {
            return Err(Error::config(
                "epsilon_exponent",
                format!("must lie in (0, {cap}] for {n_states} MDP states"),
            ));
        }
        if self.update_period == 0 {
            return Err(Error::config("update_period", "must be at least 1"));
        }
        if self.check_period == 0 {
            return Err(Error::config("check_period", "must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be at least 1"));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::config("solver", "tol must be positive and max_iter at least 1"));
        }
        Ok(())
    }
}

/// Outcome of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop(usize),
    /// `max_steps` reached without stopping.
    Censored,
}

#[derive(Debug, Clone)]
struct Caches {
    nu_star: Occupancy,
    nu_unif: Occupancy,
    /// `π^η` rows, `n_states * K`.
    tracking: Vec<f64>,
}

/// Mutable state of one Rstl-Dtrack run.
#[derive(Debug, Clone)]
pub struct RstlDtrack {
    cfg: PolicyConfig,
    generator: Generator,
    space: Arc<StateSpace>,
    beta: f64,
    t: u64,
    state: Option<usize>,
    warmup: Vec<usize>,
    counts: Vec<u64>,
    transitions: Vec<u64>,
    pulls: Vec<u64>,
    reward_sums: Vec<f64>,
    caches: Option<Caches>,
    kl: KlCache,
    last_inner: Option<(usize, InnerInf)>,
    last_z: Option<f64>,
    stopping: bool,
}

impl RstlDtrack {
    pub fn new(generator: Generator, space: Arc<StateSpace>, cfg: PolicyConfig) -> Result<Self> {
        cfg.validate(space.n_states())?;
        if generator.n_states() != space.n_obs() {
            return Err(Error::DimensionMismatch {
                what: "generator states",
                expected: space.n_obs(),
                got: generator.n_states(),
            });
        }
        let k = space.n_arms();
        let s = space.n_obs();
        Ok(Self {
            beta: cfg.exponent(space.n_states()),
            kl: KlCache::new(&generator, space.max_delay()),
            cfg,
            generator,
            t: 0,
            state: None,
            warmup: Vec::with_capacity(k),
            counts: vec![0; space.n_pairs()],
            transitions: vec![0; space.n_pairs() * s],
            pulls: vec![0; k],
            reward_sums: vec![0.0; k],
            caches: None,
            last_inner: None,
            last_z: None,
            stopping: true,
            space,
        })
    }

    /// Turns the stopping rule off; the run then ends only at `max_steps`.
    pub fn disable_stopping(&mut self) {
        self.stopping = false;
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    /// Time index of the next action.
    pub fn time(&self) -> u64 {
        self.t
    }

    /// Current MDP state; `None` during warm-up.
    pub fn state(&self) -> Option<usize> {
        self.state
    }

    /// `N(n, s, a)`, row-major by state.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, s: usize, arm: usize) -> u64 {
        self.counts[s * self.space.n_arms() + arm]
    }

    pub fn state_count(&self, s: usize) -> u64 {
        let k = self.space.n_arms();
        self.counts[s * k..(s + 1) * k].iter().sum()
    }

    /// Observed successor counts `C(s, a, j)`.
    pub fn transition_count(&self, s: usize, arm: usize, obs: usize) -> u64 {
        self.transitions[(s * self.space.n_arms() + arm) * self.space.n_obs() + obs]
    }

    pub fn pulls(&self) -> &[u64] {
        &self.pulls
    }

    /// `η̂_a`: mean of `f` over all pulls of `a`, 0 before the first pull.
    pub fn mean_estimates(&self) -> Vec<f64> {
        self.pulls
            .iter()
            .zip(&self.reward_sums)
            .map(|(&n, &s)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }

    /// `θ̂_a = Ȧ^{-1}(η̂_a)` after clamping.
    pub fn theta_estimates(&self) -> Result<Vec<f64>> {
        self.mean_estimates()
            .into_iter()
            .map(|e| self.generator.mean_to_theta(e))
            .collect()
    }

    /// `ε_n = n^{-β}`.
    pub fn epsilon(&self, n: u64) -> f64 {
        (n.max(1) as f64).powf(-self.beta)
    }

    /// Cached `ν*` and `ν^unif` at the last refresh.
    pub fn cached_occupancies(&self) -> Option<(&Occupancy, &Occupancy)> {
        self.caches.as_ref().map(|c| (&c.nu_star, &c.nu_unif))
    }

    /// The distribution `π_n(·|s)` used at the current time.
    pub fn sampling_distribution(&self, s: usize) -> Result<Vec<f64>> {
        let k = self.space.n_arms();
        if let Some(f) = self.space.forced(s) {
            let mut row = vec![0.0; k];
            row[f] = 1.0;
            return Ok(row);
        }
        let unif = 1.0 / k as f64;
        match self.cfg.sampling {
            SamplingRule::Uniform => Ok(vec![unif; k]),
            SamplingRule::Dtrack => {
                let caches = self.caches.as_ref().ok_or(Error::StaleCache)?;
                let eps = self.epsilon(self.t);
                Ok((0..k)
                    .map(|a| eps * unif + (1.0 - eps) * caches.tracking[s * k + a])
                    .collect())
            }
        }
    }

    /// Chooses `A_t`.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let k = self.space.n_arms();
        if (self.t as usize) < k {
            return Ok(self.t as usize);
        }
        let s = self.state.ok_or(Error::StaleCache)?;
        if let Some(f) = self.space.forced(s) {
            return Ok(f);
        }
        let row = self.sampling_distribution(s)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(a);
            }
        }
        Ok(row.iter().rposition(|p| *p > 0.0).unwrap_or(k - 1))
    }

    /// Records the observation of `arm` at time `t`, then applies the
    /// stopping rule. `tie_rng` is consumed only when stopping.
    pub fn observe<R: Rng + ?Sized>(&mut self, arm: usize, obs: usize, tie_rng: &mut R) -> Result<Decision> {
        let k = self.space.n_arms();
        let s_obs = self.space.n_obs();
        if arm >= k {
            return Err(Error::InvalidAction { state: self.state.unwrap_or(0), arm });
        }
        if obs >= s_obs {
            return Err(Error::DimensionMismatch {
                what: "observation state",
                expected: s_obs,
                got: obs,
            });
        }
        let n = self.t;
        if (n as usize) < k {
            if arm != n as usize {
                return Err(Error::InvalidAction { state: 0, arm });
            }
            self.warmup.push(obs);
            if n as usize == k - 1 {
                self.state = Some(self.space.initial_state(&self.warmup)?);
            }
        } else {
            let s = self.state.ok_or(Error::StaleCache)?;
            let next = self.space.successor(s, arm, obs)?;
            self.counts[s * k + arm] += 1;
            self.transitions[(s * k + arm) * s_obs + obs] += 1;
            self.state = Some(next);
        }
        self.pulls[arm] += 1;
        self.reward_sums[arm] += self.generator.reward()[obs];
        self.t += 1;

        let warm_done = n as usize == k - 1;
        if self.cfg.sampling == SamplingRule::Dtrack
            && (warm_done || (n as usize >= k && n % self.cfg.update_period == 0))
        {
            self.refresh()?;
        }
        if self.stopping && n as usize >= k && n % self.cfg.check_period == 0 && self.should_stop()? {
            return Ok(Decision::Stop(self.recommend(tie_rng)));
        }
        if self.t >= self.cfg.max_steps {
            return Ok(Decision::Censored);
        }
        Ok(Decision::Continue)
    }

    /// Recomputes `ν*` and `ν^unif` at the current `θ̂`.
    pub fn refresh(&mut self) -> Result<()> {
        let theta_hat = self.theta_estimates()?;
        let inst = Instance::with_tie_break(self.generator.clone(), theta_hat, Arc::clone(&self.space))?;
        let warm = self.caches.as_ref().map(|c| &c.nu_star);
        let lb = oracle::t_star(&inst, &self.cfg.solver, warm, &mut self.kl)?;
        let nu_unif = oracle::unif_occupancy(&inst)?;
        let k = self.space.n_arms();
        let eta = self.cfg.eta;
        let mut tracking = vec![0.0; self.space.n_pairs()];
        for s in 0..self.space.n_states() {
            let num: Vec<f64> = (0..k)
                .map(|a| eta * nu_unif.get(s, a) + (1.0 - eta) * lb.nu_star.get(s, a))
                .collect();
            let den: f64 = num.iter().sum();
            for a in 0..k {
                tracking[s * k + a] = if den > 0.0 {
                    num[a] / den
                } else if self.space.is_valid(s, a) {
                    1.0 / self.space.admissible(s).count() as f64
                } else {
                    0.0
                };
            }
        }
        trace!("refresh at t = {}: t_star {:.4e}", self.t, lb.t_star);
        self.caches = Some(Caches {
            nu_star: lb.nu_star,
            nu_unif,
            tracking,
        });
        Ok(())
    }

    /// The arm defining `Alt(θ̂)`: largest clamped estimate, smallest index on ties.
    pub fn empirical_best(&self) -> Result<usize> {
        let (lo, hi) = self.generator.mean_range()?;
        let clamped: Vec<f64> = self
            .mean_estimates()
            .into_iter()
            .map(|e| e.clamp(lo, hi))
            .collect();
        Ok(oracle::best_arm(&clamped))
    }

    fn objectives(&self) -> Vec<ArmObjective> {
        let k = self.space.n_arms();
        let s_obs = self.space.n_obs();
        let r = self.space.max_delay();
        let mut weights = vec![vec![0.0; r * s_obs * s_obs]; k];
        let mut baseline = vec![0.0; k];
        for s in 0..self.space.n_states() {
            for (a, w) in weights.iter_mut().enumerate() {
                let n = self.counts[s * k + a];
                if n == 0 {
                    continue;
                }
                let base = ((self.space.delay(s, a) - 1) * s_obs + self.space.last(s, a)) * s_obs;
                let nf = n as f64;
                baseline[a] -= nf * nf.ln();
                for j in 0..s_obs {
                    let c = self.transitions[(s * k + a) * s_obs + j];
                    if c > 0 {
                        let cf = c as f64;
                        w[base + j] += cf;
                        baseline[a] += cf * cf.ln();
                    }
                }
            }
        }
        weights
            .into_iter()
            .zip(baseline)
            .map(|(w, b)| ArmObjective::new(w, b))
            .collect()
    }

    /// `Z(n)`: the count-weighted empirical KL infimum over `Alt(θ̂(n))`.
    pub fn test_statistic(&mut self) -> Result<f64> {
        let best = self.empirical_best()?;
        let objs = self.objectives();
        let inner = separable_infimum(&objs, best, self.generator.interval(), None, &mut self.kl)?;
        let z = inner.value;
        self.last_inner = Some((best, inner));
        self.last_z = Some(z);
        Ok(z)
    }

    /// Last fully evaluated `Z(n)`, if any.
    pub fn last_statistic(&self) -> Option<f64> {
        self.last_z
    }

    /// `ζ(n, δ) = ln(1/δ) + (S_R - 1) Σ_{s,a} ln(e (1 + N(n,s,a) / (S_R - 1)))`.
    pub fn threshold(&self) -> f64 {
        threshold(&self.counts, self.space.n_states(), self.cfg.delta)
    }

    /// `Z(n) ≥ ζ(n, δ)`. A cheap upper bound on `Z` at the previous
    /// minimizers skips the full solve when it already falls short.
    pub fn should_stop(&mut self) -> Result<bool> {
        let zeta = self.threshold();
        if let Some((prev_best, prev)) = &self.last_inner {
            let best = self.empirical_best()?;
            if best == *prev_best {
                let objs = self.objectives();
                let ub = separable_upper_bound(&objs, best, prev, &mut self.kl)?;
                if ub < zeta {
                    return Ok(false);
                }
            }
        }
        Ok(self.test_statistic()? >= zeta)
    }

    /// `argmax η̂` with a uniform tie-break among estimates within 1e-12.
    pub fn recommend<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let means = self.mean_estimates();
        let top = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..means.len())
            .filter(|&a| means[a] >= top - TIE_TOL)
            .collect();
        if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.gen_range(0..tied.len())]
        }
    }
}

/// `ζ` over a full count table, zero counts included.
pub fn threshold(counts: &[u64], n_states: usize, delta: f64) -> f64 {
    let m = (n_states - 1) as f64;
    let sum: f64 = counts.iter().map(|&c| 1.0 + (c as f64 / m).ln_1p()).sum();
    (1.0 / delta).ln() + m * sum
}
