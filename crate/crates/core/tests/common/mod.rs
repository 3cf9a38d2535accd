#![allow(dead_code)]

//! Brute-force references shared by the integration tests. Nothing here
//! reuses the solver's aggregation or search code.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use restless_bai::family::Generator;
use restless_bai::mdp::{enumerate_states, Kernel, MdpConfig, Occupancy, SrsPolicy, StateSpace};
use restless_bai::oracle::Instance;

pub const GRID: usize = 200;

pub fn space(k: usize, r: usize, s: usize) -> Arc<StateSpace> {
    Arc::new(enumerate_states(MdpConfig { arms: k, max_delay: r, states: s }).unwrap())
}

pub fn two_state(a: f64, b: f64, lo: f64, hi: f64) -> Generator {
    Generator::from_rows(&[vec![a, 1.0 - a], vec![b, 1.0 - b]], vec![0.0, 1.0], lo, hi).unwrap()
}

fn mat_pow(p: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(p.nrows(), p.nrows());
    for _ in 0..d {
        out = &out * p;
    }
    out
}

/// `P_x^d` for `d = 1..=r`, built by repeated multiplication.
pub fn powers(g: &Generator, x: f64, r: usize) -> Vec<DMatrix<f64>> {
    let p = g.transition_matrix(x).unwrap();
    (1..=r).map(|d| mat_pow(&p, d)).collect()
}

fn grid(g: &Generator) -> Vec<f64> {
    let iv = g.interval();
    (0..GRID)
        .map(|k| iv.lo + (iv.hi - iv.lo) * k as f64 / (GRID - 1) as f64)
        .collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// `min over λ_other ≥ λ_best` of `Σ_b cost_b(λ_b)` on the grid, K = 2.
fn grid_min_pair(cost: &[Vec<f64>], best: usize) -> f64 {
    let other = 1 - best;
    let mut v = f64::INFINITY;
    for xo in 0..GRID {
        for xb in 0..=xo {
            v = v.min(cost[other][xo] + cost[best][xb]);
        }
    }
    v
}

/// Grid brute force of `ψ(ν, θ)` for two arms.
pub fn grid_psi(inst: &Instance, nu: &Occupancy) -> f64 {
    let sp = inst.space();
    assert_eq!(sp.n_arms(), 2);
    let g = inst.generator();
    let r = sp.max_delay();
    let truth: Vec<Vec<DMatrix<f64>>> = inst.theta().iter().map(|&t| powers(g, t, r)).collect();
    let xs = grid(g);
    let alts: Vec<Vec<DMatrix<f64>>> = xs.iter().map(|&x| powers(g, x, r)).collect();
    let mut cost = vec![vec![0.0; GRID]; 2];
    for b in 0..2 {
        for (xi, alt) in alts.iter().enumerate() {
            let mut total = 0.0;
            for s in 0..sp.n_states() {
                let w = nu.get(s, b);
                if w == 0.0 || !sp.is_valid(s, b) {
                    continue;
                }
                let d = sp.delay(s, b);
                let i = sp.last(s, b);
                let p: Vec<f64> = truth[b][d - 1].row(i).iter().cloned().collect();
                let q: Vec<f64> = alt[d - 1].row(i).iter().cloned().collect();
                total += w * kl(&p, &q);
            }
            cost[b][xi] = total;
        }
    }
    grid_min_pair(&cost, inst.best())
}

/// Grid brute force of `Z(n)` for two arms from raw counts.
pub fn grid_z(
    g: &Generator,
    sp: &StateSpace,
    counts: &dyn Fn(usize, usize) -> u64,
    transitions: &dyn Fn(usize, usize, usize) -> u64,
    best: usize,
) -> f64 {
    let r = sp.max_delay();
    let s_obs = sp.n_obs();
    let xs = grid(g);
    let alts: Vec<Vec<DMatrix<f64>>> = xs.iter().map(|&x| powers(g, x, r)).collect();
    let mut cost = vec![vec![0.0; GRID]; 2];
    for b in 0..2 {
        for (xi, alt) in alts.iter().enumerate() {
            let mut total = 0.0;
            for s in 0..sp.n_states() {
                let n = counts(s, b);
                if n == 0 {
                    continue;
                }
                let p: Vec<f64> = (0..s_obs)
                    .map(|j| transitions(s, b, j) as f64 / n as f64)
                    .collect();
                let d = sp.delay(s, b);
                let i = sp.last(s, b);
                let q: Vec<f64> = alt[d - 1].row(i).iter().cloned().collect();
                total += n as f64 * kl(&p, &q);
            }
            cost[b][xi] = total;
        }
    }
    grid_min_pair(&cost, best)
}

/// Random policy giving every admissible arm positive probability.
pub fn random_policy<R: Rng>(sp: &StateSpace, rng: &mut R) -> SrsPolicy {
    let k = sp.n_arms();
    let mut probs = vec![0.0; sp.n_pairs()];
    for s in 0..sp.n_states() {
        match sp.forced(s) {
            Some(f) => probs[s * k + f] = 1.0,
            None => {
                let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let t: f64 = w.iter().sum();
                for a in 0..k {
                    probs[s * k + a] = w[a] / t;
                }
            }
        }
    }
    SrsPolicy::from_rows(sp, probs).unwrap()
}

/// Dense state-to-state matrix of a deterministic choice vector.
fn policy_matrix(sp: &StateSpace, kern: &Kernel, choice: &[usize]) -> DMatrix<f64> {
    let n = sp.n_states();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for (t, p) in kern.successors(sp, s, choice[s]) {
            m[(s, t)] += p;
        }
    }
    m
}

/// Best average reward over every deterministic stationary policy and
/// every start state, by Cesàro limits of the lazy chain.
pub fn enumerate_gain(sp: &StateSpace, kern: &Kernel, reward: &[f64]) -> f64 {
    let n = sp.n_states();
    let k = sp.n_arms();
    let free: Vec<usize> = (0..n).filter(|&s| sp.forced(s).is_none()).collect();
    let mut best = f64::NEG_INFINITY;
    let combos = k.pow(free.len() as u32);
    for code in 0..combos {
        let mut choice: Vec<usize> = (0..n).map(|s| sp.forced(s).unwrap_or(0)).collect();
        let mut c = code;
        for &s in &free {
            choice[s] = c % k;
            c /= k;
        }
        let m = policy_matrix(sp, kern, &choice);
        let lazy = (m + DMatrix::identity(n, n)) * 0.5;
        for start in 0..n {
            let mut mu = nalgebra::RowDVector::zeros(n);
            mu[start] = 1.0;
            for _ in 0..20_000 {
                let next = &mu * &lazy;
                let diff = (&next - &mu).abs().sum();
                mu = next;
                if diff < 1e-15 {
                    break;
                }
            }
            let gain: f64 = (0..n).map(|s| mu[s] * reward[s * k + choice[s]]).sum();
            best = best.max(gain);
        }
    }
    best
}
