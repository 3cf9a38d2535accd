//! Monte Carlo harness: restless hidden chains, seeded trials, trajectory
//! audits and batch statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Kernel, StateSpace};
use crate::oracle::Instance;
use crate::policy::{Decision, PolicyConfig, RstlDtrack};

/// Stream id for the hidden arm chains.
pub const STREAM_ARMS: u64 = 0;
/// Stream id for the policy's action draws.
pub const STREAM_POLICY: u64 = 1;
/// Stream id for the recommendation tie-break.
pub const STREAM_TIES: u64 = 2;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `mix(a, b) = splitmix64(a ^ splitmix64(b))`.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// RNG for one stream of one trial.
pub fn stream_rng(trial_seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(trial_seed, stream))
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

/// The K hidden chains. Every tick advances all of them by one step of
/// their own `P_θ`, whether or not they were observed.
#[derive(Debug, Clone)]
pub struct RestlessArms {
    rows: Vec<Vec<Vec<f64>>>,
    states: Vec<usize>,
    rng: ChaCha8Rng,
}

impl RestlessArms {
    /// Initial hidden states are drawn from each arm's stationary law.
    pub fn new(inst: &Instance, mut rng: ChaCha8Rng) -> Self {
        let rows: Vec<Vec<Vec<f64>>> = inst
            .arms()
            .iter()
            .map(|m| {
                let p = m.matrix();
                (0..p.nrows())
                    .map(|i| p.row(i).iter().cloned().collect())
                    .collect()
            })
            .collect();
        let states = inst
            .arms()
            .iter()
            .map(|m| {
                let mu: Vec<f64> = m.stationary().iter().cloned().collect();
                sample_row(&mu, &mut rng)
            })
            .collect();
        Self { rows, states, rng }
    }

    pub fn current(&self, arm: usize) -> usize {
        self.states[arm]
    }

    pub fn tick(&mut self) {
        for (a, st) in self.states.iter_mut().enumerate() {
            *st = sample_row(&self.rows[a][*st], &mut self.rng);
        }
    }
}

/// Per-trial recording switches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialOptions {
    /// Times `n` at which count proportions (and, with a trajectory, raw
    /// counts) are captured.
    pub checkpoints: Vec<u64>,
    /// Ignore the stopping rule and run to `max_steps`.
    pub non_stopping: bool,
    pub record_trajectory: bool,
}

/// Count proportions `N(n, ·) / (n - K + 1)` at time `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub n: u64,
    pub proportions: Vec<f64>,
}

/// MDP path from time `K` on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// State at time `K`.
    pub initial: usize,
    /// `(s_t, a_t, s_{t+1})` for `t = K, K+1, ...`.
    pub transitions: Vec<(usize, usize, usize)>,
    /// `(n, N(n, ·, ·))` at the checkpoints.
    pub counts: Vec<(u64, Vec<u64>)>,
    pub arms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    /// Stopping time (index of the last action), or the last time reached
    /// when censored.
    pub tau: u64,
    pub recommended: Option<usize>,
    pub correct: bool,
    pub censored: bool,
    pub snapshots: Vec<Snapshot>,
    pub trajectory: Option<Trajectory>,
}

/// Runs one trial; deterministic in `(inst, cfg, seed, opts)`.
pub fn run_trial(
    inst: &Instance,
    cfg: &PolicyConfig,
    trial: u64,
    seed: u64,
    opts: &TrialOptions,
) -> Result<TrialRecord> {
    let mut env = RestlessArms::new(inst, stream_rng(seed, STREAM_ARMS));
    let mut action_rng = stream_rng(seed, STREAM_POLICY);
    let mut tie_rng = stream_rng(seed, STREAM_TIES);
    let mut policy = RstlDtrack::new(inst.generator().clone(), inst.shared_space(), cfg.clone())?;
    if opts.non_stopping {
        policy.disable_stopping();
    }
    let k = inst.space().n_arms() as u64;
    let mut snapshots = Vec::new();
    let mut traj = opts.record_trajectory.then(|| Trajectory {
        arms: k as usize,
        ..Trajectory::default()
    });
    loop {
        let n = policy.time();
        let before = policy.state();
        let arm = policy.select(&mut action_rng)?;
        let obs = env.current(arm);
        env.tick();
        let decision = policy.observe(arm, obs, &mut tie_rng)?;
        if let Some(tr) = traj.as_mut() {
            match before {
                Some(s) => tr.transitions.push((s, arm, policy.state().unwrap_or(s))),
                None if n + 1 == k => tr.initial = policy.state().unwrap_or(0),
                None => {}
            }
        }
        if n >= k && opts.checkpoints.contains(&n) {
            let total = (n - k + 1) as f64;
            snapshots.push(Snapshot {
                n,
                proportions: policy.counts().iter().map(|&c| c as f64 / total).collect(),
            });
            if let Some(tr) = traj.as_mut() {
                tr.counts.push((n, policy.counts().to_vec()));
            }
        }
        match decision {
            Decision::Continue => {}
            Decision::Stop(rec) => {
                return Ok(TrialRecord {
                    trial,
                    seed,
                    tau: n,
                    recommended: Some(rec),
                    correct: rec == inst.best(),
                    censored: false,
                    snapshots,
                    trajectory: traj,
                });
            }
            Decision::Censored => {
                return Ok(TrialRecord {
                    trial,
                    seed,
                    tau: n,
                    recommended: None,
                    correct: false,
                    censored: true,
                    snapshots,
                    trajectory: traj,
                });
            }
        }
    }
}

/// Aggregate statistics of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub trials: u64,
    pub error_count: u64,
    /// `error_count / (trials - censored_count)`, 0 when every trial is censored.
    pub error_rate: f64,
    pub censored_count: u64,
    /// Mean `τ` over uncensored trials.
    pub mean_tau: f64,
    pub tau_over_log_inv_delta: f64,
    /// `η T*_unif + (1 - η) T_R*`.
    pub bound_denominator: f64,
    /// `mean_tau · bound_denominator / ln(1/δ)`.
    pub ratio: f64,
}

impl RunStats {
    pub fn from_records(records: &[TrialRecord], delta: f64, eta: f64, t_star: f64, t_unif: f64) -> Self {
        let trials = records.len() as u64;
        let censored_count = records.iter().filter(|r| r.censored).count() as u64;
        let finished: Vec<&TrialRecord> = records.iter().filter(|r| !r.censored).collect();
        let error_count = finished.iter().filter(|r| !r.correct).count() as u64;
        let done = finished.len() as f64;
        let error_rate = if finished.is_empty() { 0.0 } else { error_count as f64 / done };
        let mean_tau = if finished.is_empty() {
            0.0
        } else {
            finished.iter().map(|r| r.tau as f64).sum::<f64>() / done
        };
        let log_inv = (1.0 / delta).ln();
        let bound_denominator = eta * t_unif + (1.0 - eta) * t_star;
        Self {
            trials,
            error_count,
            error_rate,
            censored_count,
            mean_tau,
            tau_over_log_inv_delta: mean_tau / log_inv,
            bound_denominator,
            ratio: mean_tau * bound_denominator / log_inv,
        }
    }
}

/// Runs `trials` seeded trials on a pool of `threads` workers. Trial `i`
/// uses seed `mix(master_seed, i)`; records come back in trial order.
pub fn run_batch(
    inst: &Instance,
    cfg: &PolicyConfig,
    trials: u64,
    master_seed: u64,
    threads: usize,
    opts: &TrialOptions,
) -> Result<Vec<TrialRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|i| run_trial(inst, cfg, i, mix(master_seed, i), opts))
            .collect()
    })
}

/// Outcome of [`flow_audit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub checked_times: usize,
    pub checked_states: usize,
}

/// Checks `N(n, s') = 1{s_K = s'} + #{K ≤ t ≤ n-1 : s_{t+1} = s'}` at every
/// recorded count snapshot.
pub fn flow_audit(traj: &Trajectory, space: &StateSpace) -> Result<AuditReport> {
    let k = traj.arms as u64;
    let n_states = space.n_states();
    for (n, counts) in &traj.counts {
        let steps = (*n - k) as usize;
        let mut expected = vec![0u64; n_states];
        expected[traj.initial] += 1;
        for &(_, _, next) in traj.transitions.iter().take(steps) {
            expected[next] += 1;
        }
        for (s, &e) in expected.iter().enumerate() {
            let counted: u64 = counts[s * traj.arms..(s + 1) * traj.arms].iter().sum();
            if counted != e {
                return Err(Error::AuditFailure {
                    n: *n,
                    state: s,
                    counted,
                    expected: e,
                });
            }
        }
    }
    Ok(AuditReport {
        checked_times: traj.counts.len(),
        checked_states: n_states,
    })
}

/// Per-state residual `N(n, s') - Σ_{s,a} N(n, s, a) Q(s' | s, a)` of one
/// count table.
pub fn flow_residuals(counts: &[u64], space: &StateSpace, kernel: &Kernel) -> Vec<f64> {
    let k = space.n_arms();
    let mut res: Vec<f64> = (0..space.n_states())
        .map(|s| counts[s * k..(s + 1) * k].iter().sum::<u64>() as f64)
        .collect();
    for s in 0..space.n_states() {
        for a in space.admissible(s) {
            let c = counts[s * k + a] as f64;
            if c == 0.0 {
                continue;
            }
            for (t, p) in kernel.successors(space, s, a) {
                res[t] -= c * p;
            }
        }
    }
    res
}

/// Mean and standard deviation of the residuals across trajectories,
/// per state, at the snapshot taken at time `n`.
pub fn averaged_residuals(trajs: &[Trajectory], n: u64, space: &StateSpace, kernel: &Kernel) -> Vec<(f64, f64)> {
    let rows: Vec<Vec<f64>> = trajs
        .iter()
        .filter_map(|t| t.counts.iter().find(|(m, _)| *m == n))
        .map(|(_, c)| flow_residuals(c, space, kernel))
        .collect();
    let m = rows.len() as f64;
    (0..space.n_states())
        .map(|s| {
            let mean = rows.iter().map(|r| r[s]).sum::<f64>() / m;
            let var = rows.iter().map(|r| (r[s] - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            (mean, var.sqrt())
        })
        .collect()
}

/// Sup-norm distance from `proportions` to `η ν_unif + (1 - η) ν*`.
pub fn tracking_distance(proportions: &[f64], nu_unif: &[f64], nu_star: &[f64], eta: f64) -> f64 {
    proportions
        .iter()
        .zip(nu_unif.iter().zip(nu_star))
        .map(|(p, (u, s))| (p - (eta * u + (1.0 - eta) * s)).abs())
        .fold(0.0, f64::max)
}
