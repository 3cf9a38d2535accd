//! Single-parameter exponential family of transition matrices.
//!
//! A [`Generator`] fixes an irreducible stochastic matrix `P` and a reward
//! vector `f`. Tilting every column `j` by `exp(θ f(j))` gives a non-negative
//! matrix whose Perron root `ρ(θ)` and right eigenvector `v` renormalize it to
//! the stochastic matrix
//!
//! ```text
//! P_θ(j | i) = v(j) P(j | i) exp(θ f(j)) / (ρ(θ) v(i))
//! ```
//!
//! The stationary mean `η_θ = Σ f(i) μ_θ(i)` is the derivative of `log ρ(θ)`
//! and is strictly increasing in `θ`, so means and parameters are
//! interchangeable through [`Generator::mean_to_theta`].

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const PERRON_TOL: f64 = 1e-12;
const PERRON_MAX_ITER: usize = 10_000;
const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_ITER: usize = 10_000;

/// Closed parameter interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ThetaInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::BadInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.lo && theta <= self.hi
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.lo, self.hi)
    }
}

/// Which structural checks a candidate generator passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FamilyReport {
    pub row_stochastic: bool,
    pub irreducible: bool,
    pub f_non_constant: bool,
    pub a1: bool,
    pub a2: bool,
    pub a3: bool,
    pub a4: bool,
}

impl FamilyReport {
    /// Evaluates every check without failing early.
    pub fn inspect(p: &DMatrix<f64>, f: &[f64]) -> Self {
        let s = p.nrows();
        let row_stochastic = p.ncols() == s
            && p.iter().all(|x| x.is_finite() && *x >= 0.0)
            && (0..s).all(|i| (p.row(i).sum() - 1.0).abs() <= ROW_SUM_TOL);
        let all: Vec<usize> = (0..s).collect();
        let irreducible = unreachable_pair(p, &all).is_none();
        let (max_f, min_f) = extremes(f);
        let f_non_constant = max_f > min_f;
        let top: Vec<usize> = (0..s).filter(|&i| f[i] == max_f).collect();
        let bottom: Vec<usize> = (0..s).filter(|&i| f[i] == min_f).collect();
        Self {
            row_stochastic,
            irreducible,
            f_non_constant,
            a1: sub_irreducible(p, &top),
            a2: enters(p, &top),
            a3: sub_irreducible(p, &bottom),
            a4: enters(p, &bottom),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.row_stochastic
            && self.irreducible
            && self.f_non_constant
            && self.a1
            && self.a2
            && self.a3
            && self.a4
    }
}

fn extremes(f: &[f64]) -> (f64, f64) {
    f.iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &x| {
            (hi.max(x), lo.min(x))
        })
}

/// States reachable from `start` using only edges inside `subset`.
fn reachable_within(p: &DMatrix<f64>, subset: &[usize], start: usize) -> Vec<bool> {
    let s = p.nrows();
    let mut inside = vec![false; s];
    for &i in subset {
        inside[i] = true;
    }
    let mut seen = vec![false; s];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for j in 0..s {
            if inside[j] && !seen[j] && p[(i, j)] > 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

fn unreachable_pair(p: &DMatrix<f64>, subset: &[usize]) -> Option<(usize, usize)> {
    for &from in subset {
        let seen = reachable_within(p, subset, from);
        if let Some(&to) = subset.iter().find(|&&to| !seen[to]) {
            return Some((from, to));
        }
    }
    None
}

/// Irreducibility of the principal submatrix on `subset`. A single state
/// counts as irreducible only when it has a self-loop, so that the tilted
/// chain can concentrate on it.
fn sub_irreducible(p: &DMatrix<f64>, subset: &[usize]) -> bool {
    match subset {
        [] => false,
        [i] => p[(*i, *i)] > 0.0,
        _ => unreachable_pair(p, subset).is_none(),
    }
}

fn enters(p: &DMatrix<f64>, subset: &[usize]) -> bool {
    (0..p.nrows())
        .filter(|i| !subset.contains(i))
        .all(|i| subset.iter().any(|&j| p[(i, j)] > 0.0))
}

/// Checks a candidate `(P, f)` pair and names the first failed property.
pub fn validate_family(p: &DMatrix<f64>, f: &[f64]) -> Result<FamilyReport> {
    let s = p.nrows();
    if s < 2 {
        return Err(Error::TooFew {
            what: "states",
            min: 2,
            got: s,
        });
    }
    if p.ncols() != s {
        return Err(Error::DimensionMismatch {
            what: "generator columns",
            expected: s,
            got: p.ncols(),
        });
    }
    if f.len() != s {
        return Err(Error::DimensionMismatch {
            what: "reward vector",
            expected: s,
            got: f.len(),
        });
    }
    for row in 0..s {
        for col in 0..s {
            let value = p[(row, col)];
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidEntry { row, col, value });
            }
        }
    }
    for row in 0..s {
        let sum = p.row(row).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::NonStochasticRow { row, sum });
        }
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::config("f", "entries must be finite"));
    }
    let all: Vec<usize> = (0..s).collect();
    if let Some((from, to)) = unreachable_pair(p, &all) {
        return Err(Error::ReducibleGenerator { from, to });
    }
    let report = FamilyReport::inspect(p, f);
    if !report.f_non_constant {
        return Err(Error::ConstantReward);
    }
    let checks = [
        (report.a1, "A1", "submatrix on argmax f is not irreducible"),
        (report.a2, "A2", "some state cannot step into argmax f"),
        (report.a3, "A3", "submatrix on argmin f is not irreducible"),
        (report.a4, "A4", "some state cannot step into argmin f"),
    ];
    for (ok, name, detail) in checks {
        if !ok {
            return Err(Error::AssumptionViolated {
                name,
                detail: detail.to_string(),
            });
        }
    }
    Ok(report)
}

/// Perron root and right eigenvector of the tilted matrix at one `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedSpectrum {
    pub theta: f64,
    pub rho: f64,
    /// Strictly positive, scaled to unit sup-norm.
    pub v: DVector<f64>,
}

/// A validated generator `(P, f)` together with its parameter interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    p: DMatrix<f64>,
    f: Vec<f64>,
    interval: ThetaInterval,
}

impl Generator {
    pub fn new(p: DMatrix<f64>, f: Vec<f64>, interval: ThetaInterval) -> Result<Self> {
        validate_family(&p, &f)?;
        Ok(Self { p, f, interval })
    }

    /// Convenience constructor from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], f: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        let s = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != s) {
            return Err(Error::DimensionMismatch {
                what: "generator row",
                expected: s,
                got: bad.len(),
            });
        }
        let p = DMatrix::from_fn(s, s, |i, j| rows[i][j]);
        Self::new(p, f, ThetaInterval::new(lo, hi)?)
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn reward(&self) -> &[f64] {
        &self.f
    }

    pub fn interval(&self) -> ThetaInterval {
        self.interval
    }

    fn tilted(&self, theta: f64) -> DMatrix<f64> {
        let s = self.n_states();
        DMatrix::from_fn(s, s, |i, j| self.p[(i, j)] * (theta * self.f[j]).exp())
    }

    /// Perron root of the tilted matrix by power iteration. A shifted
    /// iteration handles generators whose tilt has other eigenvalues on the
    /// spectral circle.
    pub fn perron(&self, theta: f64) -> Result<TiltedSpectrum> {
        if !theta.is_finite() {
            return Err(Error::ThetaOutOfRange {
                theta,
                lo: self.interval.lo,
                hi: self.interval.hi,
            });
        }
        let tilted = self.tilted(theta);
        if let Some(spectrum) = power_iterate(&tilted, 0.0) {
            return Ok(TiltedSpectrum { theta, ..spectrum });
        }
        let shift = tilted.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
        power_iterate(&tilted, shift)
            .map(|spectrum| TiltedSpectrum { theta, ..spectrum })
            .ok_or(Error::NoConvergence {
                what: "Perron power iteration",
                iterations: 2 * PERRON_MAX_ITER,
            })
    }

    /// The normalized stochastic matrix `P_θ`.
    pub fn transition_matrix(&self, theta: f64) -> Result<DMatrix<f64>> {
        let spectrum = self.perron(theta)?;
        Ok(normalize_tilt(&self.tilted(theta), &spectrum))
    }

    /// Builds the arm model at `θ`, with a lazily filled power cache for
    /// exponents `1..=max_power`.
    pub fn arm_model(&self, theta: f64, max_power: usize) -> Result<ArmModel> {
        if !self.interval.contains(theta) {
            return Err(Error::ThetaOutOfRange {
                theta,
                lo: self.interval.lo,
                hi: self.interval.hi,
            });
        }
        let p = self.transition_matrix(theta)?;
        let mu = stationary_distribution(&p)?;
        let eta = mu.iter().zip(&self.f).map(|(m, f)| m * f).sum();
        Ok(ArmModel {
            theta,
            p,
            mu,
            eta,
            powers: (0..max_power.max(1)).map(|_| OnceLock::new()).collect(),
        })
    }

    /// Stationary mean `η_θ`; no range check on `θ`.
    pub fn mean_at(&self, theta: f64) -> Result<f64> {
        let p = self.transition_matrix(theta)?;
        let mu = stationary_distribution(&p)?;
        Ok(mu.iter().zip(&self.f).map(|(m, f)| m * f).sum())
    }

    /// Achievable mean range `[η(θ_lo), η(θ_hi)]`.
    pub fn mean_range(&self) -> Result<(f64, f64)> {
        Ok((
            self.mean_at(self.interval.lo)?,
            self.mean_at(self.interval.hi)?,
        ))
    }

    /// Inverts the mean map by bisection after clamping `eta` into the
    /// achievable range.
    pub fn mean_to_theta(&self, eta: f64) -> Result<f64> {
        let (lo_mean, hi_mean) = self.mean_range()?;
        let target = if eta.is_nan() {
            lo_mean
        } else {
            eta.clamp(lo_mean, hi_mean)
        };
        let mut lo = self.interval.lo;
        let mut hi = self.interval.hi;
        if target <= lo_mean {
            return Ok(lo);
        }
        if target >= hi_mean {
            return Ok(hi);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let m = self.mean_at(mid)?;
            if (m - target).abs() <= 1e-14 {
                return Ok(mid);
            }
            if m < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn power_iterate(m: &DMatrix<f64>, shift: f64) -> Option<TiltedSpectrum> {
    let s = m.nrows();
    let shifted = m + DMatrix::<f64>::identity(s, s) * shift;
    let mut v = DVector::from_element(s, 1.0);
    for _ in 0..PERRON_MAX_ITER {
        let w = &shifted * &v;
        let norm = w.amax();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        let next = w / norm;
        let delta = (&next - &v).amax();
        v = next;
        if delta <= PERRON_TOL {
            let rho = (m * &v).amax();
            return v
                .iter()
                .all(|x| *x > 0.0)
                .then_some(TiltedSpectrum { theta: 0.0, rho, v });
        }
    }
    None
}

fn normalize_tilt(tilted: &DMatrix<f64>, spectrum: &TiltedSpectrum) -> DMatrix<f64> {
    let s = tilted.nrows();
    let mut p = DMatrix::from_fn(s, s, |i, j| {
        spectrum.v[j] * tilted[(i, j)] / (spectrum.rho * spectrum.v[i])
    });
    // remove the O(tol) drift left by the eigen solve
    for i in 0..s {
        let sum = p.row(i).sum();
        p.row_mut(i).scale_mut(1.0 / sum);
    }
    p
}

/// Stationary distribution of an irreducible stochastic matrix: power
/// iteration on the transpose, falling back to a direct solve when it stalls.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let s = p.nrows();
    let pt = p.transpose();
    let mut mu = DVector::from_element(s, 1.0 / s as f64);
    for _ in 0..STATIONARY_MAX_ITER {
        let mut next = &pt * &mu;
        let total = next.sum();
        next /= total;
        let delta = (&next - &mu).abs().sum();
        mu = next;
        if delta <= STATIONARY_TOL {
            return Ok(mu);
        }
    }
    solve_stationary(p)
}

/// Direct solve of `μ (P - I) = 0` with the normalization row replacing the
/// last balance equation.
pub fn solve_stationary(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let s = p.nrows();
    let mut a = p.transpose() - DMatrix::<f64>::identity(s, s);
    let mut b = DVector::zeros(s);
    for j in 0..s {
        a[(s - 1, j)] = 1.0;
    }
    b[s - 1] = 1.0;
    let mu = a.lu().solve(&b).ok_or(Error::NonErgodicPolicy)?;
    if mu.iter().any(|x| !x.is_finite() || *x < -1e-10) {
        return Err(Error::NonErgodicPolicy);
    }
    let mu = mu.map(|x| x.max(0.0));
    let total = mu.sum();
    Ok(mu / total)
}

/// One arm's transition matrix `P_θ`, stationary law and mean.
#[derive(Debug)]
pub struct ArmModel {
    theta: f64,
    p: DMatrix<f64>,
    mu: DVector<f64>,
    eta: f64,
    powers: Vec<OnceLock<DMatrix<f64>>>,
}

impl Clone for ArmModel {
    fn clone(&self) -> Self {
        Self {
            theta: self.theta,
            p: self.p.clone(),
            mu: self.mu.clone(),
            eta: self.eta,
            powers: self
                .powers
                .iter()
                .map(|c| {
                    let cell = OnceLock::new();
                    if let Some(m) = c.get() {
                        let _ = cell.set(m.clone());
                    }
                    cell
                })
                .collect(),
        }
    }
}

impl ArmModel {
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn stationary(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn mean(&self) -> f64 {
        self.eta
    }

    pub fn max_power(&self) -> usize {
        self.powers.len()
    }

    /// `P_θ^d` for `1 <= d <= max_power`, computed once and cached.
    pub fn tpm_power(&self, d: usize) -> Result<&DMatrix<f64>> {
        if d == 0 || d > self.powers.len() {
            return Err(Error::PowerOutOfRange {
                d,
                max: self.powers.len(),
            });
        }
        Ok(self.power_unchecked(d))
    }

    fn power_unchecked(&self, d: usize) -> &DMatrix<f64> {
        if let Some(m) = self.powers[d - 1].get() {
            return m;
        }
        let m = if d == 1 {
            self.p.clone()
        } else {
            self.power_unchecked(d - 1) * &self.p
        };
        let _ = self.powers[d - 1].set(m);
        self.powers[d - 1].get().expect("power just set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iid() -> Generator {
        Generator::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]], vec![0.0, 1.0], -3.0, 3.0)
            .unwrap()
    }

    #[test]
    fn strictly_positive_generator_passes_all_checks() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let report = validate_family(&p, &[0.0, 1.0]).unwrap();
        assert!(report.all_pass());
    }

    #[test]
    fn identity_generator_is_reducible() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            validate_family(&p, &[0.0, 1.0]),
            Err(Error::ReducibleGenerator { .. })
        ));
    }

    #[test]
    fn constant_reward_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(validate_family(&p, &[1.0, 1.0]), Err(Error::ConstantReward));
    }

    #[test]
    fn short_row_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.5, 0.5]);
        assert!(matches!(
            validate_family(&p, &[0.0, 1.0]),
            Err(Error::NonStochasticRow { row: 0, .. })
        ));
    }

    #[test]
    fn periodic_flip_violates_a1() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            validate_family(&p, &[0.0, 1.0]),
            Err(Error::AssumptionViolated { name: "A1", .. })
        ));
    }

    #[test]
    fn a2_names_unreachable_top_set() {
        // state 0 is the only argmax; state 2 never steps into it
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[0.5, 0.5, 0.0, 0.3, 0.3, 0.4, 0.0, 0.5, 0.5],
        );
        assert!(matches!(
            validate_family(&p, &[1.0, 0.5, 0.0]),
            Err(Error::AssumptionViolated { name: "A2", .. })
        ));
    }

    #[test]
    fn perron_at_zero_is_one() {
        let g = Generator::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.0, 1.0], -2.0, 2.0)
            .unwrap();
        let spectrum = g.perron(0.0).unwrap();
        assert_eq!(spectrum.rho, 1.0);
        assert!(spectrum.v.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn identical_rows_perron_closed_form() {
        let spectrum = iid().perron(2f64.ln()).unwrap();
        assert!((spectrum.rho - 1.5).abs() < 1e-12);
        assert!((spectrum.v[0] - spectrum.v[1]).abs() < 1e-12);
    }

    #[test]
    fn two_state_perron_matches_quadratic_root() {
        let g = Generator::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.0, 1.0], -2.0, 2.0)
            .unwrap();
        let e = 1f64.exp();
        // char. polynomial of [[0.9, 0.1e], [0.2, 0.8e]]
        let tr = 0.9 + 0.8 * e;
        let det = 0.9 * 0.8 * e - 0.1 * e * 0.2;
        let root = 0.5 * (tr + (tr * tr - 4.0 * det).sqrt());
        let spectrum = g.perron(1.0).unwrap();
        assert!((spectrum.rho - root).abs() < 1e-10 * root);
        assert!((spectrum.rho - 2.2159).abs() < 1e-4);
    }

    #[test]
    fn arm_model_out_of_range() {
        assert!(matches!(
            iid().arm_model(5.0, 2),
            Err(Error::ThetaOutOfRange { .. })
        ));
    }

    #[test]
    fn symmetric_generator_mean_at_zero() {
        let g = Generator::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]], vec![0.0, 1.0], -1.0, 1.0)
            .unwrap();
        let m = g.arm_model(0.0, 1).unwrap();
        assert!((m.stationary()[0] - 0.5).abs() < 1e-12);
        assert!((m.mean() - 0.5).abs() < 1e-12);
        assert_eq!(m.matrix(), g.matrix());
    }

    #[test]
    fn mean_to_theta_inverts_logistic() {
        let theta = iid().mean_to_theta(0.75).unwrap();
        assert!((theta - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn mean_to_theta_clamps() {
        let g = iid();
        assert_eq!(g.mean_to_theta(-10.0).unwrap(), -3.0);
        assert_eq!(g.mean_to_theta(10.0).unwrap(), 3.0);
    }

    #[test]
    fn tpm_power_hand_expansion() {
        let g = Generator::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.0, 1.0], -2.0, 2.0)
            .unwrap();
        let m = g.arm_model(0.4, 3).unwrap();
        let p = m.matrix();
        let (a, b) = (p[(0, 0)], p[(1, 0)]);
        let sq = m.tpm_power(2).unwrap();
        assert!((sq[(0, 0)] - (a * a + (1.0 - a) * b)).abs() < 1e-14);
        assert!((sq[(1, 0)] - (b * a + (1.0 - b) * b)).abs() < 1e-14);
        assert_eq!(m.tpm_power(1).unwrap(), p);
        assert!(matches!(m.tpm_power(4), Err(Error::PowerOutOfRange { .. })));
        assert!(matches!(m.tpm_power(0), Err(Error::PowerOutOfRange { .. })));
    }

    #[test]
    fn rank_one_powers_are_idempotent() {
        let m = iid().arm_model(0.7, 4).unwrap();
        for d in 1..=4 {
            let pd = m.tpm_power(d).unwrap();
            assert!((pd - m.matrix()).amax() < 1e-14);
        }
    }
}
