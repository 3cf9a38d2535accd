//! Invariant suite run by `restless-bai validate` on a configured instance.

use serde::Serialize;

use crate::config::Experiment;
use crate::error::Result;
use crate::mdp::{self, Occupancy, SrsPolicy};
use crate::oracle::{self, Instance, KlCache};
use crate::policy::PolicyConfig;
use crate::sim::{self, TrialOptions};

const GRID: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: impl Into<String>) -> InvariantResult {
    InvariantResult {
        name,
        pass,
        detail: detail.into(),
    }
}

/// Number of delay vectors reachable from `(K, ..., 1)`: the `K` cyclic
/// rotations when `R = K`, otherwise every injection `[K] → {1..R}` with
/// minimum 1.
pub fn reachable_delay_vectors(k: usize, r: usize) -> usize {
    if r == k {
        return k;
    }
    let fact: usize = (1..=k).product();
    fact * binomial(r - 1, k - 1)
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// `min_{λ_a ≥ λ_best}` of the `ν`-weighted KL sum over a `GRID × GRID`
/// lattice on `Θ²`, minimized over `a ≠ best`. Computed per state from fresh
/// matrix powers, without the aggregation used by the solver.
pub fn grid_psi(inst: &Instance, nu: &Occupancy) -> Result<f64> {
    let space = inst.space();
    let g = inst.generator();
    let iv = g.interval();
    let r = space.max_delay();
    let s_obs = space.n_obs();
    let xs: Vec<f64> = (0..GRID)
        .map(|k| iv.lo + (iv.hi - iv.lo) * k as f64 / (GRID - 1) as f64)
        .collect();
    let models = xs
        .iter()
        .map(|&x| g.arm_model(x, r))
        .collect::<Result<Vec<_>>>()?;
    let k = space.n_arms();
    // cost[b][x] = Σ_s ν(s,b) KL(P_θb^d(·|i) ‖ P_x^d(·|i))
    let mut cost = vec![vec![0.0; GRID]; k];
    for (b, row) in cost.iter_mut().enumerate() {
        for (xi, model) in models.iter().enumerate() {
            let mut total = 0.0;
            for st in 0..space.n_states() {
                let w = nu.get(st, b);
                if w == 0.0 || !space.is_valid(st, b) {
                    continue;
                }
                let d = space.delay(st, b);
                let i = space.last(st, b);
                let p = inst.arms()[b].tpm_power(d)?;
                let q = model.tpm_power(d)?;
                for j in 0..s_obs {
                    if p[(i, j)] > 0.0 {
                        total += w * p[(i, j)] * (p[(i, j)] / q[(i, j)].max(1e-300)).ln();
                    }
                }
            }
            row[xi] = total;
        }
    }
    let best = inst.best();
    let mut value = f64::INFINITY;
    for a in (0..k).filter(|&a| a != best) {
        for xa in 0..GRID {
            for xb in 0..=xa {
                value = value.min(cost[a][xa] + cost[best][xb]);
            }
        }
    }
    Ok(value)
}

/// Runs every check against the experiment's instance.
pub fn run_suite(exp: &Experiment) -> Result<Vec<InvariantResult>> {
    let inst = &exp.instance;
    let g = &exp.generator;
    let space = inst.space();
    let kernel = inst.kernel();
    let mut out = Vec::new();

    let rho0 = g.perron(0.0)?.rho;
    out.push(check("perron root at 0", (rho0 - 1.0).abs() <= 1e-10, format!("rho(0) = {rho0}")));

    let iv = g.interval();
    let grid: Vec<f64> = (0..=20)
        .map(|k| iv.lo + (iv.hi - iv.lo) * k as f64 / 20.0)
        .collect();
    let mut worst_row: f64 = 0.0;
    let mut pattern_ok = true;
    let mut means = Vec::new();
    let mut worst_trip: f64 = 0.0;
    for &t in &grid {
        let m = g.arm_model(t, 1)?;
        for i in 0..g.n_states() {
            worst_row = worst_row.max((m.matrix().row(i).sum() - 1.0).abs());
            for j in 0..g.n_states() {
                pattern_ok &= (m.matrix()[(i, j)] > 0.0) == (g.matrix()[(i, j)] > 0.0);
            }
        }
        means.push(m.mean());
        worst_trip = worst_trip.max((g.mean_to_theta(m.mean())? - t).abs());
    }
    out.push(check(
        "tilted rows stochastic",
        worst_row <= 1e-12 && pattern_ok,
        format!("max row error {worst_row:.2e}, zero pattern kept: {pattern_ok}"),
    ));
    let increasing = means.windows(2).all(|w| w[0] < w[1]);
    out.push(check("mean strictly increasing", increasing, format!("{} grid points", grid.len())));
    out.push(check(
        "mean inverse round trip",
        worst_trip <= 1e-8,
        format!("max |theta error| {worst_trip:.2e}"),
    ));

    let cfg = space.config();
    let expected = reachable_delay_vectors(cfg.arms, cfg.max_delay);
    let got = space.delay_vectors().len();
    out.push(check(
        "delay vector count",
        got == expected && space.n_states() == got * cfg.states.pow(cfg.arms as u32),
        format!("{got} delay vectors, {} states (expected {expected})", space.n_states()),
    ));

    let mut closed = true;
    let mut worst_kernel: f64 = 0.0;
    for s in 0..space.n_states() {
        for a in space.admissible(s) {
            worst_kernel = worst_kernel.max((kernel.row(s, a).iter().sum::<f64>() - 1.0).abs());
            for j in 0..cfg.states {
                let t = space.successor(s, a, j)?;
                let d = space.delays(t);
                closed &= d[a] == 1 && (0..cfg.arms).all(|b| b == a || d[b] == space.delay(s, b) + 1);
            }
        }
    }
    out.push(check("successor closure", closed, "all admissible transitions stay in the space"));
    out.push(check(
        "kernel rows stochastic",
        worst_kernel <= 1e-10,
        format!("max row error {worst_kernel:.2e}"),
    ));
    let unreachable = kernel.unreachable_pair(space);
    out.push(check(
        "communicating",
        unreachable.is_none(),
        match unreachable {
            Some((a, b)) => format!("no path from {a} to {b}"),
            None => "every ordered pair connected".into(),
        },
    ));

    let nu_unif = mdp::stationary_occupancy(space, kernel, &SrsPolicy::uniform(space))?;
    let rep = mdp::check_occupancy(space, kernel, &nu_unif, 1e-8);
    out.push(check(
        "uniform occupancy feasible",
        rep.pass,
        format!("flow {:.2e}, invalid mass {:.2e}", rep.flow_residual, rep.invalid_mass),
    ));

    let mut cache = KlCache::for_instance(inst);
    let inner = oracle::psi(inst, &nu_unif, &mut cache)?;
    let grid_value = grid_psi(inst, &nu_unif)?;
    let diff = (inner.value - grid_value).abs();
    out.push(check(
        "inner infimum vs grid",
        diff <= 1e-3 && inner.value <= grid_value + 1e-9,
        format!("golden {:.6e}, grid {:.6e}", inner.value, grid_value),
    ));

    let lb = oracle::t_star(inst, &exp.config.bound_solver, None, &mut cache)?;
    let tol = exp.config.bound_solver.tol;
    out.push(check(
        "lower bound certificate",
        lb.fw_gap <= tol,
        format!("t_star {:.6e}, gap {:.2e} after {} iterations", lb.t_star, lb.fw_gap, lb.iterations),
    ));
    out.push(check(
        "uniform below optimum",
        inner.value <= lb.t_star + tol && lb.t_star > 0.0,
        format!("t_unif {:.6e}, t_star {:.6e}", inner.value, lb.t_star),
    ));
    let star_rep = mdp::check_occupancy(space, kernel, &lb.nu_star, 1e-8);
    out.push(check(
        "optimal occupancy feasible",
        star_rep.pass,
        format!("flow {:.2e}", star_rep.flow_residual),
    ));

    let k = cfg.arms as u64;
    let audit_cfg = PolicyConfig {
        max_steps: 200 + 1,
        ..exp.policy.clone()
    };
    let opts = TrialOptions {
        checkpoints: vec![k + 10, 100, 200],
        non_stopping: true,
        record_trajectory: true,
    };
    let mut audited = 0;
    let mut audit_error = None;
    for i in 0..5 {
        let rec = sim::run_trial(inst, &audit_cfg, i, sim::mix(exp.config.master_seed, i), &opts)?;
        if let Some(traj) = rec.trajectory {
            match sim::flow_audit(&traj, space) {
                Ok(_) => audited += 1,
                Err(e) => audit_error = Some(e.to_string()),
            }
        }
    }
    out.push(check(
        "trajectory flow identity",
        audit_error.is_none() && audited == 5,
        audit_error.unwrap_or_else(|| format!("{audited} trajectories")),
    ));

    let det_opts = TrialOptions {
        non_stopping: true,
        ..TrialOptions::default()
    };
    let det_cfg = PolicyConfig {
        max_steps: 500,
        ..exp.policy.clone()
    };
    let seed = sim::mix(exp.config.master_seed, 0);
    let a = sim::run_trial(inst, &det_cfg, 0, seed, &det_opts)?;
    let b = sim::run_trial(inst, &det_cfg, 0, seed, &det_opts)?;
    out.push(check("seeded determinism", a == b, format!("seed {seed}")));

    Ok(out)
}
