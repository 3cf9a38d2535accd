//! Inner infimum `ψ(ν, θ)`, the lower-bound program `T_R*(θ)` and `T*_unif(θ)`.
//!
//! Every KL term of the objective depends on the alternative `λ` only
//! through the parameter of the arm being pulled, so the weighted sum splits
//! into one function per arm,
//!
//! `g_b(x) = baseline_b - Σ_{d,i,j} M_b[d][i][j] · ln P_x^d(j | i)`,
//!
//! where `M_b` aggregates the weights of all states that share `(d_b, i_b)`.
//! The alternative set only couples the candidate arm `a` and the best arm,
//! through `λ_a ≥ λ_best`, which reduces the infimum to a one-dimensional
//! search for their meeting point.

use std::collections::HashMap;
use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{ArmModel, Generator, ThetaInterval};
use crate::mdp::{self, Kernel, Occupancy, SrsPolicy, StateSpace};

/// Means closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-12;
const LOG_FLOOR: f64 = 1e-300;
const GOLDEN_TOL: f64 = 1e-10;
const SCAN_POINTS: usize = 8;
const CACHE_SNAP: f64 = 1e-9;
const CACHE_LIMIT: usize = 1 << 14;

/// Problem instance `θ` together with its MDP and kernel.
#[derive(Debug, Clone)]
pub struct Instance {
    generator: Generator,
    theta: Vec<f64>,
    arms: Vec<ArmModel>,
    space: Arc<StateSpace>,
    kernel: Kernel,
    best: usize,
}

impl Instance {
    /// Builds an instance with a strictly unique best arm.
    pub fn new(generator: Generator, theta: Vec<f64>, space: Arc<StateSpace>) -> Result<Self> {
        let inst = Self::with_tie_break(generator, theta, space)?;
        let top = inst.arms[inst.best].mean();
        let ties = inst
            .arms
            .iter()
            .filter(|m| (m.mean() - top).abs() <= TIE_TOL)
            .count();
        if ties > 1 {
            return Err(Error::NonUniqueBest);
        }
        Ok(inst)
    }

    /// Builds an instance, resolving ties for the best arm by smallest index.
    pub fn with_tie_break(generator: Generator, theta: Vec<f64>, space: Arc<StateSpace>) -> Result<Self> {
        if theta.len() != space.n_arms() {
            return Err(Error::ArmCountMismatch {
                expected: space.n_arms(),
                got: theta.len(),
            });
        }
        if generator.n_states() != space.n_obs() {
            return Err(Error::DimensionMismatch {
                what: "generator states",
                expected: space.n_obs(),
                got: generator.n_states(),
            });
        }
        let arms = theta
            .iter()
            .map(|&t| generator.arm_model(t, space.max_delay()))
            .collect::<Result<Vec<_>>>()?;
        let kernel = mdp::kernel(&space, &arms)?;
        let means: Vec<f64> = arms.iter().map(ArmModel::mean).collect();
        let best = best_arm(&means);
        Ok(Self {
            generator,
            theta,
            arms,
            space,
            kernel,
            best,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn arms(&self) -> &[ArmModel] {
        &self.arms
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn shared_space(&self) -> Arc<StateSpace> {
        Arc::clone(&self.space)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn best(&self) -> usize {
        self.best
    }

    pub fn means(&self) -> Vec<f64> {
        self.arms.iter().map(ArmModel::mean).collect()
    }
}

/// Index of the largest value, smallest index among values within
/// [`TIE_TOL`] of the maximum.
pub fn best_arm(means: &[f64]) -> usize {
    let top = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    means
        .iter()
        .position(|&m| m >= top - TIE_TOL)
        .unwrap_or(0)
}

/// Memo of `ln P_x^d` tables keyed by `x` snapped to a 1e-9 grid.
///
/// The table is shared by all arms because every arm lives in the same
/// family. The cache is owned by one caller at a time.
#[derive(Debug, Clone)]
pub struct KlCache {
    generator: Generator,
    max_power: usize,
    tables: HashMap<i64, Arc<Vec<f64>>>,
}

impl KlCache {
    pub fn new(generator: &Generator, max_power: usize) -> Self {
        Self {
            generator: generator.clone(),
            max_power,
            tables: HashMap::new(),
        }
    }

    pub fn for_instance(inst: &Instance) -> Self {
        Self::new(inst.generator(), inst.space().max_delay())
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// `ln P_x^d(j|i)` laid out as `((d - 1) * S + i) * S + j`.
    pub fn log_powers(&mut self, x: f64) -> Result<Arc<Vec<f64>>> {
        let key = (x / CACHE_SNAP).round() as i64;
        if let Some(t) = self.tables.get(&key) {
            return Ok(Arc::clone(t));
        }
        if self.tables.len() >= CACHE_LIMIT {
            self.tables.clear();
        }
        let table = Arc::new(log_power_table(&self.generator, x, self.max_power)?);
        self.tables.insert(key, Arc::clone(&table));
        Ok(table)
    }

    /// `D_KL(P_θ^d(·|i) ‖ P_λ^d(·|i))`.
    pub fn kl(&mut self, theta: f64, lambda: f64, d: usize, i: usize) -> Result<f64> {
        let s = self.generator.n_states();
        let lt = self.log_powers(theta)?;
        let ll = self.log_powers(lambda)?;
        let base = ((d - 1) * s + i) * s;
        Ok((0..s)
            .map(|j| {
                let p = lt[base + j].exp();
                if p <= LOG_FLOOR {
                    0.0
                } else {
                    p * (lt[base + j] - ll[base + j])
                }
            })
            .sum::<f64>()
            .max(0.0))
    }
}

fn log_power_table(generator: &Generator, x: f64, max_power: usize) -> Result<Vec<f64>> {
    let p = generator.transition_matrix(x)?;
    let s = generator.n_states();
    let mut out = Vec::with_capacity(max_power * s * s);
    let mut pd = p.clone();
    for d in 1..=max_power {
        if d > 1 {
            pd = &pd * &p;
        }
        for i in 0..s {
            for j in 0..s {
                out.push(pd[(i, j)].max(LOG_FLOOR).ln());
            }
        }
    }
    Ok(out)
}

/// Aggregated weights of one arm's KL terms, indexed like the log tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmObjective {
    weights: Vec<f64>,
    baseline: f64,
    mass: f64,
}

impl ArmObjective {
    /// `weights[((d - 1) * S + i) * S + j]` multiplies `-ln P_x^d(j|i)`.
    pub fn new(weights: Vec<f64>, baseline: f64) -> Self {
        let mass = weights.iter().sum();
        Self {
            weights,
            baseline,
            mass,
        }
    }

    /// Objective for `ν`-weighted KL divergences from the true rows of `model`.
    pub fn from_rows(row_weights: &[f64], model: &ArmModel, s: usize) -> Result<Self> {
        let r = row_weights.len() / s;
        let mut weights = vec![0.0; r * s * s];
        let mut baseline = 0.0;
        for d in 1..=r {
            let pd = model.tpm_power(d)?;
            for i in 0..s {
                let w = row_weights[(d - 1) * s + i];
                if w == 0.0 {
                    continue;
                }
                for j in 0..s {
                    let p = pd[(i, j)];
                    if p > 0.0 {
                        let m = w * p;
                        weights[((d - 1) * s + i) * s + j] = m;
                        baseline += m * p.max(LOG_FLOOR).ln();
                    }
                }
            }
        }
        Ok(Self::new(weights, baseline))
    }

    /// Objective for empirical transition counts `C(d, i, j)`:
    /// `Σ C ln(C / N) - Σ C ln P_x^d(j|i)`.
    pub fn from_counts(counts: &[f64], s: usize) -> Self {
        let mut baseline = 0.0;
        for row in counts.chunks(s) {
            let n: f64 = row.iter().sum();
            if n > 0.0 {
                baseline -= n * n.ln();
                for &c in row {
                    if c > 0.0 {
                        baseline += c * c.ln();
                    }
                }
            }
        }
        Self::new(counts.to_vec(), baseline)
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn eval(&self, cache: &mut KlCache, x: f64) -> Result<f64> {
        if self.mass == 0.0 {
            return Ok(0.0);
        }
        let logs = cache.log_powers(x)?;
        let dot: f64 = self
            .weights
            .iter()
            .zip(logs.iter())
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, l)| w * l)
            .sum();
        Ok((self.baseline - dot).max(0.0))
    }
}

/// Result of the inner infimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerInf {
    pub value: f64,
    pub lambda_star: Vec<f64>,
    pub worst_arm: usize,
    /// Per-arm meeting point with the best arm (`NaN` for the best arm).
    pub meeting: Vec<f64>,
    /// Per-arm unconstrained minimizer of `g_b`.
    pub minimizer: Vec<f64>,
}

fn golden<F>(mut f: F, lo: f64, hi: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > GOLDEN_TOL * (1.0 + a.abs().max(b.abs())) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)?))
}

/// Minimizes `f` on `[lo, hi]`: a coarse scan picks a bracket, golden-section
/// refines it, and the endpoints are compared last.
pub(crate) fn scan_min<F>(mut f: F, lo: f64, hi: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if hi <= lo {
        return Ok((lo, f(lo)?));
    }
    let step = (hi - lo) / SCAN_POINTS as f64;
    let mut vals = Vec::with_capacity(SCAN_POINTS + 1);
    for k in 0..=SCAN_POINTS {
        let x = if k == SCAN_POINTS { hi } else { lo + k as f64 * step };
        vals.push((x, f(x)?));
    }
    let k = (0..vals.len())
        .min_by(|&p, &q| vals[p].1.total_cmp(&vals[q].1))
        .unwrap_or(0);
    let a = vals[k.saturating_sub(1)].0;
    let b = vals[(k + 1).min(SCAN_POINTS)].0;
    let refined = golden(&mut f, a, b)?;
    Ok(if refined.1 <= vals[k].1 { refined } else { vals[k] })
}

/// The separable infimum over the closure of `Alt` for a fixed best arm.
///
/// `minimizer[b]`, when known, must be the unconstrained argmin of `g_b`
/// on the interval; otherwise it is found numerically.
pub fn separable_infimum(
    objectives: &[ArmObjective],
    best: usize,
    interval: ThetaInterval,
    known_minimizer: Option<&[f64]>,
    cache: &mut KlCache,
) -> Result<InnerInf> {
    let k = objectives.len();
    let mut minimizer = vec![0.0; k];
    let mut min_value = vec![0.0; k];
    for b in 0..k {
        match known_minimizer {
            Some(m) => {
                minimizer[b] = m[b];
                min_value[b] = objectives[b].eval(cache, m[b])?;
            }
            None if objectives[b].mass() == 0.0 => {
                minimizer[b] = f64::NAN;
                min_value[b] = 0.0;
            }
            None => {
                let (x, v) = scan_min(|x| objectives[b].eval(cache, x), interval.lo, interval.hi)?;
                minimizer[b] = x;
                min_value[b] = v;
            }
        }
    }
    let others_total: f64 = min_value.iter().sum();
    let mut out = InnerInf {
        value: f64::INFINITY,
        lambda_star: minimizer.clone(),
        worst_arm: if best == 0 { 1 } else { 0 },
        meeting: vec![f64::NAN; k],
        minimizer: minimizer.clone(),
    };
    for a in (0..k).filter(|&a| a != best) {
        let rest = others_total - min_value[a] - min_value[best];
        let (x_a, x_best, pair) =
            meeting_point(&objectives[a], &objectives[best], minimizer[a], minimizer[best], interval, cache)?;
        out.meeting[a] = x_a;
        let value = pair + rest;
        if value < out.value {
            out.value = value;
            out.worst_arm = a;
            out.lambda_star = minimizer
                .iter()
                .map(|&m| if m.is_nan() { interval.clamp(0.0) } else { m })
                .collect();
            out.lambda_star[a] = x_a;
            out.lambda_star[best] = x_best;
        }
    }
    out.value = out.value.max(0.0);
    Ok(out)
}

/// `inf_{λ_a ≥ λ_best} g_a(λ_a) + g_best(λ_best)` and its minimizers.
fn meeting_point(
    ga: &ArmObjective,
    gb: &ArmObjective,
    ma: f64,
    mb: f64,
    interval: ThetaInterval,
    cache: &mut KlCache,
) -> Result<(f64, f64, f64)> {
    match (ga.mass() == 0.0, gb.mass() == 0.0) {
        (true, true) => return Ok((interval.lo, interval.lo, 0.0)),
        (true, false) => return Ok((mb, mb, gb.eval(cache, mb)?)),
        (false, true) => return Ok((ma, ma, ga.eval(cache, ma)?)),
        _ => {}
    }
    if ma >= mb {
        return Ok((ma, mb, ga.eval(cache, ma)? + gb.eval(cache, mb)?));
    }
    let (x, v) = scan_min(|x| Ok(ga.eval(cache, x)? + gb.eval(cache, x)?), ma, mb)?;
    Ok((x, x, v))
}

/// Upper bound on the separable infimum from previous meeting points,
/// exact when they are still optimal. Never below the infimum.
pub fn separable_upper_bound(
    objectives: &[ArmObjective],
    best: usize,
    previous: &InnerInf,
    cache: &mut KlCache,
) -> Result<f64> {
    let k = objectives.len();
    let mut at_min = vec![0.0; k];
    for b in 0..k {
        let m = previous.minimizer[b];
        at_min[b] = match (m.is_nan(), objectives[b].mass() > 0.0) {
            (false, _) => objectives[b].eval(cache, m)?,
            (true, false) => 0.0,
            (true, true) => return Ok(f64::INFINITY),
        };
    }
    let total: f64 = at_min.iter().sum();
    let mut bound = f64::INFINITY;
    for a in (0..k).filter(|&a| a != best) {
        let x = previous.meeting[a];
        if x.is_nan() {
            continue;
        }
        let pair = objectives[a].eval(cache, x)? + objectives[best].eval(cache, x)?;
        bound = bound.min(pair + total - at_min[a] - at_min[best]);
    }
    Ok(bound)
}

/// Per-arm `ν`-weights aggregated by `(d_b, i_b)`, laid out `(d - 1) * S + i`.
pub fn arm_row_weights(space: &StateSpace, nu: &[f64]) -> Vec<Vec<f64>> {
    let k = space.n_arms();
    let s = space.n_obs();
    let r = space.max_delay();
    let mut out = vec![vec![0.0; r * s]; k];
    for st in 0..space.n_states() {
        for (b, row) in out.iter_mut().enumerate() {
            let w = nu[st * k + b];
            if w != 0.0 && space.is_valid(st, b) {
                row[(space.delay(st, b) - 1) * s + space.last(st, b)] += w;
            }
        }
    }
    out
}

/// `ψ(ν, θ)`. `nu` may be unnormalized; the value scales linearly.
pub fn psi(inst: &Instance, nu: &Occupancy, cache: &mut KlCache) -> Result<InnerInf> {
    if nu.values().len() != inst.space().n_pairs() {
        return Err(Error::DimensionMismatch {
            what: "occupancy",
            expected: inst.space().n_pairs(),
            got: nu.values().len(),
        });
    }
    if nu.values().iter().any(|v| !v.is_finite() || *v < -1e-12) {
        return Err(Error::InfeasibleOccupancy(
            "entries must be finite and non-negative".into(),
        ));
    }
    let s = inst.space().n_obs();
    let rows = arm_row_weights(inst.space(), nu.values());
    let objectives = rows
        .iter()
        .zip(inst.arms())
        .map(|(w, m)| ArmObjective::from_rows(w, m, s))
        .collect::<Result<Vec<_>>>()?;
    separable_infimum(
        &objectives,
        inst.best(),
        inst.generator().interval(),
        Some(inst.theta()),
        cache,
    )
}

/// Danskin supergradient of `ψ` at the infimizer `λ*`: the KL term of every
/// valid pair, zero elsewhere.
pub fn supergradient(inst: &Instance, lambda: &[f64], cache: &mut KlCache) -> Result<Vec<f64>> {
    let space = inst.space();
    let k = space.n_arms();
    let mut c = vec![0.0; space.n_pairs()];
    for st in 0..space.n_states() {
        for a in space.admissible(st) {
            if lambda[a] != inst.theta()[a] {
                c[st * k + a] = cache.kl(inst.theta()[a], lambda[a], space.delay(st, a), space.last(st, a))?;
            }
        }
    }
    Ok(c)
}

/// Solver tolerances for the lower-bound program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Target gap between the best upper bound and the best `ψ` found.
    pub tol: f64,
    pub max_iter: usize,
    pub rvi_tol: f64,
    pub rvi_max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            rvi_tol: 1e-10,
            rvi_max_sweeps: 50_000,
        }
    }
}

/// Optimal average reward and an optimal stationary occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOracle {
    pub gain: f64,
    pub policy: Vec<usize>,
    pub occupancy: Occupancy,
}

const APERIODICITY: f64 = 0.5;

/// `max_{ν ∈ Σ_R} ⟨reward, ν⟩` by relative value iteration.
///
/// Iterates on the aperiodic transform `τ P + (1 - τ) I`, which has the same
/// gain and optimal policies. The greedy policy's stationary occupancy from a
/// uniform start is returned as the maximizer.
pub fn average_reward(space: &StateSpace, kernel: &Kernel, reward: &[f64], cfg: &SolverConfig) -> Result<LinearOracle> {
    let n = space.n_states();
    let k = space.n_arms();
    let succ: Vec<Vec<Vec<(usize, f64)>>> = (0..n)
        .map(|s| (0..k).map(|a| kernel.successors(space, s, a)).collect())
        .collect();
    let mut h = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut policy = vec![0; n];
    let mut converged = false;
    let mut gain = 0.0;
    let mut sweeps = 0;
    while sweeps < cfg.rvi_max_sweeps {
        sweeps += 1;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in space.admissible(s) {
                let q = reward[s * k + a] + succ[s][a].iter().map(|&(t, p)| p * h[t]).sum::<f64>();
                if q > best + 1e-15 {
                    best = q;
                    policy[s] = a;
                }
            }
            w[s] = APERIODICITY * best + (1.0 - APERIODICITY) * h[s];
        }
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            let d = w[s] - h[s];
            (lo.min(d), hi.max(d))
        });
        gain = 0.5 * (lo + hi) / APERIODICITY;
        let offset = w[0];
        for s in 0..n {
            h[s] = w[s] - offset;
        }
        if hi - lo <= cfg.rvi_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RviNoConvergence(sweeps));
    }
    let pol = SrsPolicy::deterministic(space, &policy)?;
    let occupancy = mdp::stationary_occupancy(space, kernel, &pol)?;
    Ok(LinearOracle {
        gain,
        policy,
        occupancy,
    })
}

/// Result of the lower-bound program.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBound {
    /// Best `ψ` attained by an iterate, a lower bound on `T_R*`.
    pub t_star: f64,
    /// Smallest linear-oracle value seen, an upper bound on `T_R*`.
    pub upper: f64,
    pub nu_star: Occupancy,
    /// `upper - t_star`, a certificate on the suboptimality of `nu_star`.
    pub fw_gap: f64,
    pub iterations: usize,
    pub inner: InnerInf,
}

/// `T_R*(θ) = max_{ν ∈ Σ_R(θ)} ψ(ν, θ)` by Frank–Wolfe with step `2/(t+2)`.
///
/// `warm` seeds the first iterate; it is mapped into the polytope by taking
/// the stationary occupancy of the policy it induces.
pub fn t_star(inst: &Instance, cfg: &SolverConfig, warm: Option<&Occupancy>, cache: &mut KlCache) -> Result<LowerBound> {
    let space = inst.space();
    let start_policy = match warm {
        Some(nu) if nu.values().len() == space.n_pairs() => SrsPolicy::from_occupancy(space, nu),
        _ => SrsPolicy::uniform(space),
    };
    let mut nu = mdp::stationary_occupancy(space, inst.kernel(), &start_policy)?;
    let mut best_nu = nu.clone();
    let mut best_inner = psi(inst, &nu, cache)?;
    let mut upper = f64::INFINITY;
    let mut iterations = 0;
    let mut inner = best_inner.clone();
    for t in 0..cfg.max_iter.max(1) {
        iterations = t + 1;
        let c = supergradient(inst, &inner.lambda_star, cache)?;
        let lmo = average_reward(space, inst.kernel(), &c, cfg)?;
        upper = upper.min(lmo.gain);
        if upper - best_inner.value <= cfg.tol {
            break;
        }
        let step = 2.0 / (t as f64 + 2.0);
        nu = nu.blend(&lmo.occupancy, step);
        inner = psi(inst, &nu, cache)?;
        if inner.value > best_inner.value {
            best_inner = inner.clone();
            best_nu = nu.clone();
        }
    }
    let fw_gap = (upper - best_inner.value).max(0.0);
    debug!(
        "t_star: value {:.6e}, gap {:.3e}, iterations {}",
        best_inner.value, fw_gap, iterations
    );
    Ok(LowerBound {
        t_star: best_inner.value,
        upper,
        nu_star: best_nu,
        fw_gap,
        iterations,
        inner: best_inner,
    })
}

/// `T*_unif(θ) = ψ(ν^unif_θ, θ)`.
pub fn t_unif(inst: &Instance, cache: &mut KlCache) -> Result<f64> {
    let nu = unif_occupancy(inst)?;
    Ok(psi(inst, &nu, cache)?.value)
}

/// Stationary occupancy of the uniform policy under the instance kernel.
pub fn unif_occupancy(inst: &Instance) -> Result<Occupancy> {
    mdp::stationary_occupancy(inst.space(), inst.kernel(), &SrsPolicy::uniform(inst.space()))
}
