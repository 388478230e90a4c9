//! Exact steady-state analysis of composed estimators.
//!
//! Everything here is computed from linear algebra on the chain, not from
//! simulation: stationary distributions of the full `S`-state chain
//! ([`stationary_distribution`]), the class-level decomposition into the
//! sampled birth–death chain and per-class holding times
//! ([`sampled_analysis`]), exact asymptotic risk ([`exact_risk`]) and its
//! worst case over a bias grid ([`worst_case_risk`]), verification of the
//! decay and holding-time dominance properties ([`lemma3_check`],
//! [`lemma4_check`]), stationarity cut balance ([`cut_flow_check`]), and
//! the deterministic orbit risk at the endpoint biases
//! ([`endpoint_orbit_risk`]).
//!
//! The stationary solver is subtraction-free state elimination (see
//! `solver`), not power iteration: these chains are metastable — expected
//! holding times grow like `2^{Θ(N)}` in the mismatched classes — so
//! iterative methods can sit on a wrong inter-class mass split while
//! passing any affordable residual test.  Elimination is exact up to
//! rounding regardless of the spectral gap, and every solve is still
//! verified against the `‖πP − π‖₁ ≤ 1e−12` residual contract afterwards.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimator_build::{BuildError, ComposedLayout};
use crate::isit::{self, IsitError, MiniChain};
use crate::machine_core::{Machine, MachineError, TransitionMatrix};
use crate::solver;

/// Residual tolerance every stationary solve is checked against.
pub const RESIDUAL_TOLERANCE: f64 = 1e-12;

/// Errors from steady-state analysis.
#[derive(Debug, Error)]
pub enum AnalysisError {
    /// The bias must lie strictly inside the unit interval.
    #[error("theta must lie strictly inside (0, 1) (got {theta})")]
    ThetaOutOfRange { theta: f64 },
    /// Orbit risk is defined only at the two endpoint biases.
    #[error("endpoint orbit risk needs theta exactly 0 or 1 (got {theta})")]
    ThetaNotEndpoint { theta: f64 },
    /// The decay check applies only inside the stated class bracket.
    #[error("theta = {theta} outside the bracket [{lo}, {hi}] of class {class}")]
    OutsideBracket {
        theta: f64,
        class: usize,
        lo: f64,
        hi: f64,
    },
    /// A solved distribution failed its residual contract.
    #[error("stationary residual {residual:.3e} exceeds tolerance {tolerance:.0e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    /// The linear solve itself failed.
    #[error("numerical failure: {message}")]
    Numerical { message: String },
    /// Underlying machine access failed.
    #[error(transparent)]
    Machine(#[from] MachineError),
    /// Mini-chain reconstruction or analysis failed.
    #[error(transparent)]
    Isit(#[from] IsitError),
    /// Layout access failed.
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// Class-level steady-state picture of a composed machine at one bias:
/// the sampled birth–death chain over classes, per-class expected holding
/// times, and the stationary distribution of the quantized process
/// assembled from them.
///
/// All arrays are indexed by `class − 1`.
#[derive(Clone, Debug, Serialize)]
pub struct SampledAnalysis {
    /// The bias analyzed.
    pub theta: f64,
    /// Right-move probability of each class of the sampled chain
    /// (`p[0] = 1` and `p[K−1] = 0` under the boundary routing).
    pub p: Vec<f64>,
    /// Left-move probability, `q[k] = 1 − p[k]`.
    pub q: Vec<f64>,
    /// Stationary distribution of the sampled (class-jump) process.
    pub mu: Vec<f64>,
    /// Expected steps a visit spends in each class before deciding.
    pub holding: Vec<f64>,
    /// Stationary distribution of the quantized process:
    /// `pi[k] ∝ holding[k] · mu[k]`.
    pub pi: Vec<f64>,
}

/// A bias grid: uniform steps over `[lo, hi]`, optionally augmented with
/// every class estimate `k/(K+2)` and the midpoints between them.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridSpec {
    /// Smallest bias evaluated.
    pub lo: f64,
    /// Largest bias evaluated.
    pub hi: f64,
    /// Uniform step width.
    pub step: f64,
    /// Whether class estimates and inter-class midpoints are added.
    pub class_points: bool,
}

impl GridSpec {
    /// The default grid for a `K`-class machine: step `1/(8(K+2))` over
    /// `[10⁻³, 1 − 10⁻³]`, with class points and midpoints included.
    ///
    /// The range is clipped away from the endpoints deliberately: the most
    /// extreme biases are exercised through [`endpoint_orbit_risk`] and the
    /// near-boundary grid points, where double precision still resolves the
    /// chain.
    pub fn default_for(k: usize) -> GridSpec {
        GridSpec {
            lo: 1e-3,
            hi: 1.0 - 1e-3,
            step: 1.0 / (8.0 * (k + 2) as f64),
            class_points: true,
        }
    }

    /// The sorted, de-duplicated bias points of this grid for a `K`-class
    /// machine.
    pub fn points(&self, k: usize) -> Vec<f64> {
        let mut pts = Vec::new();
        let mut i = 0usize;
        loop {
            let t = self.lo + i as f64 * self.step;
            if t >= self.hi - 1e-15 {
                break;
            }
            pts.push(t);
            i += 1;
        }
        pts.push(self.hi);
        if self.class_points {
            let spacing = (k + 2) as f64;
            for class in 1..=k {
                let t = class as f64 / spacing;
                if t >= self.lo && t <= self.hi {
                    pts.push(t);
                }
            }
            for j in 0..=k {
                let t = (2 * j + 1) as f64 / (2.0 * spacing);
                if t >= self.lo && t <= self.hi {
                    pts.push(t);
                }
            }
        }
        pts.sort_by(|a, b| a.partial_cmp(b).expect("grid points are finite"));
        pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        pts
    }
}

/// Exact risk over a bias grid, with the worst case normalized by the
/// nominal state count.
#[derive(Clone, Debug, Serialize)]
pub struct RiskReport {
    /// The evaluated biases, ascending.
    pub theta_grid: Vec<f64>,
    /// Exact asymptotic risk at each bias.
    pub risk: Vec<f64>,
    /// Largest risk on the grid.
    pub worst: f64,
    /// Physical state count of the machine.
    pub s_physical: usize,
    /// Nominal state count `Σ N_k` (the count the analytical budget and
    /// the normalized constant refer to).
    pub sum_nk: usize,
    /// `worst · sum_nk`.
    pub normalized: f64,
    /// Whether `normalized ≤ 600`.
    pub bound600: bool,
}

impl RiskReport {
    /// Renders the per-bias rows as CSV with columns
    /// `theta,risk,risk_times_S`, where the last column is the risk scaled
    /// by `sum_nk`.  Values carry full `f64` precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,risk,risk_times_S\n");
        for (t, r) in self.theta_grid.iter().zip(&self.risk) {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e}\n",
                t,
                r,
                r * self.sum_nk as f64
            ));
        }
        out
    }
}

fn check_theta(theta: f64) -> Result<(), AnalysisError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(AnalysisError::ThetaOutOfRange { theta });
    }
    Ok(())
}

/// Stationary distribution `π` of the chain induced by a machine at a
/// fixed bias, verified to satisfy `‖πP − π‖₁ ≤ 1e−12`.
///
/// # Errors
///
/// [`AnalysisError::Numerical`] if the elimination solve fails;
/// [`AnalysisError::ResidualTooLarge`] if the verified residual is above
/// tolerance.
pub fn stationary_distribution(tm: &TransitionMatrix) -> Result<Vec<f64>, AnalysisError> {
    let n = tm.dimension();
    let mut rows = Vec::with_capacity(n);
    for state in 1..=n {
        rows.push(
            tm.row(state)
                .iter()
                .map(|&(t, w)| (t - 1, w))
                .collect::<Vec<_>>(),
        );
    }
    let pi = solver::stationary(&rows).map_err(|e| AnalysisError::Numerical {
        message: e.to_string(),
    })?;
    let residual = stationary_residual(&pi, &rows);
    if residual > RESIDUAL_TOLERANCE {
        return Err(AnalysisError::ResidualTooLarge {
            residual,
            tolerance: RESIDUAL_TOLERANCE,
        });
    }
    Ok(pi)
}

/// `‖πP − π‖₁` for 0-based sparse rows.
fn stationary_residual(pi: &[f64], rows: &[Vec<(usize, f64)>]) -> f64 {
    let mut flow = vec![0.0f64; pi.len()];
    for (i, row) in rows.iter().enumerate() {
        for &(j, w) in row {
            flow[j] += pi[i] * w;
        }
    }
    flow.iter().zip(pi).map(|(f, p)| (f - p).abs()).sum()
}

/// Sums a full-chain stationary distribution over each class of a layout.
pub fn class_aggregate(pi: &[f64], layout: &ComposedLayout) -> Vec<f64> {
    layout
        .class_ranges()
        .iter()
        .map(|&(lo, hi)| pi[lo - 1..=hi - 1].iter().sum())
        .collect()
}

/// Risk of a class-level distribution against the class estimates:
/// `Σ_k pi[k]·(estimates[k] − θ)²`.
fn risk_of(pi_class: &[f64], estimates: &[f64], theta: f64) -> f64 {
    pi_class
        .iter()
        .zip(estimates)
        .map(|(p, e)| p * (e - theta) * (e - theta))
        .sum()
}

/// Exact asymptotic risk `R_θ = Σ_k π_k (θ̂_k − θ)²` of a composed machine,
/// with `π` solved on the full chain and aggregated per class.
///
/// # Errors
///
/// [`AnalysisError::ThetaOutOfRange`] unless `θ ∈ (0,1)`; solver errors.
pub fn exact_risk(
    m: &Machine,
    layout: &ComposedLayout,
    theta: f64,
) -> Result<f64, AnalysisError> {
    check_theta(theta)?;
    let tm = crate::machine_core::transition_matrix(m, theta)?;
    let pi = stationary_distribution(&tm)?;
    let pi_class = class_aggregate(&pi, layout);
    Ok(risk_of(&pi_class, layout.estimates(), theta))
}

/// Stationary distribution of the `K`-class sampled birth–death chain with
/// right-move probabilities `p` (and left moves `1 − p[k]`).
fn sampled_mu(p: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    let k = p.len();
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(k);
    for (i, &pi_right) in p.iter().enumerate() {
        let mut row = Vec::with_capacity(2);
        // Zero-probability moves are omitted: at extreme biases the exit
        // probabilities underflow and the unreachable classes must simply
        // receive zero mass, which elimination handles exactly.
        if i + 1 < k && pi_right > 0.0 {
            row.push((i + 1, pi_right));
        }
        if i > 0 && pi_right < 1.0 {
            row.push((i - 1, 1.0 - pi_right));
        }
        rows.push(row);
    }
    solver::stationary(&rows).map_err(|e| AnalysisError::Numerical {
        message: e.to_string(),
    })
}

/// The quantized-process distribution from the renewal–reward
/// decomposition: `pi[k] = holding[k]·mu[k] / Σ_j holding[j]·mu[j]`.
pub fn lemma1_pi(mu: &[f64], holding: &[f64]) -> Vec<f64> {
    let weights: Vec<f64> = mu.iter().zip(holding).map(|(m, h)| m * h).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Class-level analysis of a composed machine at bias `theta`: per-class
/// exit probabilities and holding times from the mini-chain absorbing
/// solves, the sampled chain's stationary law, and the quantized-process
/// distribution assembled by the renewal–reward formula.
///
/// The boundary classes route both exits to their single neighbor, so
/// `p[0] = 1` and `p[K−1] = 0` exactly, while their holding times are the
/// ordinary decision times of the boundary blocks.
///
/// # Errors
///
/// [`AnalysisError::ThetaOutOfRange`] unless `θ ∈ (0,1)`; propagated
/// mini-chain or solver failures.
pub fn sampled_analysis(
    layout: &ComposedLayout,
    theta: f64,
) -> Result<SampledAnalysis, AnalysisError> {
    check_theta(theta)?;
    let k = layout.k();
    let mut p = Vec::with_capacity(k);
    let mut holding = Vec::with_capacity(k);
    for (idx, mp) in layout.mini_params().iter().enumerate() {
        let chain = MiniChain::from_parts(mp.n, mp.s, mp.p, mp.q)?;
        let exit = isit::exit_analysis(&chain, theta)?;
        holding.push(exit.expected_decision_time);
        p.push(if idx == 0 {
            1.0
        } else if idx == k - 1 {
            0.0
        } else {
            exit.prob_exit_right
        });
    }
    let q: Vec<f64> = p.iter().map(|&x| 1.0 - x).collect();
    let mu = sampled_mu(&p)?;
    let pi = lemma1_pi(&mu, &holding);
    Ok(SampledAnalysis {
        theta,
        p,
        q,
        mu,
        holding,
        pi,
    })
}

/// Verifies the geometric decay of the sampled chain's stationary mass
/// away from the bracket class `k` (1-based): for every distance `i`,
///
/// ```text
/// mu[k−i] ≤ mu[k−1]·(ε/(1−ε))^{i−1}   and   mu[k+i] ≤ mu[k+1]·(ε/(1−ε))^{i−1}
/// ```
///
/// # Errors
///
/// [`AnalysisError::OutsideBracket`] unless
/// `θ ∈ [k/(K+2), (k+1)/(K+2)]` (up to rounding slack).
pub fn lemma3_check(
    sa: &SampledAnalysis,
    class: usize,
    epsilon: f64,
) -> Result<bool, AnalysisError> {
    let k = sa.mu.len();
    let spacing = (k + 2) as f64;
    let lo = class as f64 / spacing;
    let hi = (class + 1) as f64 / spacing;
    if class < 1 || class > k || sa.theta < lo - 1e-12 || sa.theta > hi + 1e-12 {
        return Err(AnalysisError::OutsideBracket {
            theta: sa.theta,
            class,
            lo,
            hi,
        });
    }
    let ratio = epsilon / (1.0 - epsilon);
    // Tiny relative slack: the two sides are computed by different float
    // expressions and the lemma's content is the geometric envelope, not
    // last-ulp ordering.
    let slack = 1.0 + 1e-9;
    for i in 1..class {
        let bound = sa.mu[class - 2] * ratio.powi(i as i32 - 1);
        if sa.mu[class - 1 - i] > bound * slack {
            return Ok(false);
        }
    }
    for i in 1..=k - class {
        let bound = sa.mu[class] * ratio.powi(i as i32 - 1);
        if sa.mu[class - 1 + i] > bound * slack {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Verifies holding-time dominance: any class on the far side of the bias
/// (so the chain drifts away from it) holds at least `(1−ε)` times as long
/// as every class beyond it in the drift direction —
///
/// for every `j` with `θ < j/(K+2)`: `E[T_j] ≥ (1−ε)·E[T_i]` for all
/// `i > j`, and symmetrically below.
pub fn lemma4_check(sa: &SampledAnalysis, epsilon: f64) -> bool {
    let k = sa.holding.len();
    let spacing = (k + 2) as f64;
    let slack = 1.0 + 1e-9;
    for j in 1..=k {
        let tj = sa.holding[j - 1];
        if sa.theta < j as f64 / spacing {
            for i in j + 1..=k {
                if tj * slack < (1.0 - epsilon) * sa.holding[i - 1] {
                    return false;
                }
            }
        }
        if sa.theta > (j + 1) as f64 / spacing {
            for i in 1..j {
                if tj * slack < (1.0 - epsilon) * sa.holding[i - 1] {
                    return false;
                }
            }
        }
    }
    true
}

/// Evaluates [`exact_risk`] over a bias grid in parallel and reports the
/// worst case, normalized by the nominal state count `Σ N_k`.
///
/// Grid points are independent solves, so the result is bitwise
/// independent of the parallel schedule.
///
/// # Errors
///
/// Propagates the first solve failure.
pub fn worst_case_risk(
    m: &Machine,
    layout: &ComposedLayout,
    spec: &GridSpec,
) -> Result<RiskReport, AnalysisError> {
    let theta_grid = spec.points(layout.k());
    let risk: Vec<f64> = theta_grid
        .par_iter()
        .map(|&theta| exact_risk(m, layout, theta))
        .collect::<Result<Vec<_>, _>>()?;
    let worst = risk.iter().cloned().fold(0.0f64, f64::max);
    let sum_nk: usize = layout.mini_params().iter().map(|mp| mp.n).sum();
    let normalized = worst * sum_nk as f64;
    Ok(RiskReport {
        theta_grid,
        risk,
        worst,
        s_physical: layout.num_states(),
        sum_nk,
        normalized,
        bound600: normalized <= 600.0,
    })
}

/// Risk of the deterministic orbit at an endpoint bias.
///
/// At `θ = 0` (respectively `1`) the input is a constant bit stream, so
/// the machine walks a deterministic path from its initial state into a
/// cycle; the asymptotic risk is the average of `(θ̂(state) − θ)²` over
/// that cycle.
///
/// # Errors
///
/// [`AnalysisError::ThetaNotEndpoint`] unless `θ` is exactly 0 or 1.
pub fn endpoint_orbit_risk(m: &Machine, theta: f64) -> Result<f64, AnalysisError> {
    if theta != 0.0 && theta != 1.0 {
        return Err(AnalysisError::ThetaNotEndpoint { theta });
    }
    let bit = theta as u8;
    // Walk until a state repeats; the steps between its first and second
    // visits form the cycle.
    let mut first_visit = vec![usize::MAX; m.num_states() + 1];
    let mut path = Vec::new();
    let mut state = m.initial();
    while first_visit[state] == usize::MAX {
        first_visit[state] = path.len();
        path.push(state);
        state = m.step(state, bit)?;
    }
    let cycle = &path[first_visit[state]..];
    let mut total = 0.0;
    for &s in cycle {
        let err = m.estimate(s)? - theta;
        total += err * err;
    }
    Ok(total / cycle.len() as f64)
}

/// Checks the stationary cut-balance identity: probability flow out of
/// `cut` equals flow into it, `Σ_{i∈cut, j∉cut} π_i P_ij =
/// Σ_{i∉cut, j∈cut} π_i P_ij`, within `1e−10`.
///
/// `cut` lists 1-based states; `pi` must be stationary for `tm`.
pub fn cut_flow_check(pi: &[f64], tm: &TransitionMatrix, cut: &[usize]) -> bool {
    let mut in_cut = vec![false; tm.dimension() + 1];
    for &s in cut {
        if s >= 1 && s <= tm.dimension() {
            in_cut[s] = true;
        }
    }
    let mut out_flow = 0.0;
    let mut in_flow = 0.0;
    for state in 1..=tm.dimension() {
        for &(target, w) in tm.row(state) {
            if in_cut[state] && !in_cut[target] {
                out_flow += pi[state - 1] * w;
            } else if !in_cut[state] && in_cut[target] {
                in_flow += pi[state - 1] * w;
            }
        }
    }
    (out_flow - in_flow).abs() <= 1e-10
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator_build::build_estimator;
    use crate::machine_core::{transition_matrix, Machine};

    fn two_state_machine(est: [f64; 2]) -> Machine {
        // On bit 1 swap states, on bit 0 stay: at bias θ this induces the
        // symmetric two-state chain with switch probability θ.
        Machine::new(2, vec![1, 2], vec![2, 1], est.to_vec(), 1).unwrap()
    }

    #[test]
    fn stationary_of_symmetric_two_state_chain_is_uniform() {
        let m = two_state_machine([0.25, 0.75]);
        let tm = transition_matrix(&m, 0.3).unwrap();
        let pi = stationary_distribution(&tm).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-14);
        assert!((pi[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn risk_of_matches_hand_weighted_sum() {
        // Class masses (1/2, 1/2) against estimates (1/4, 3/4) at θ = 1/2:
        // both classes err by 1/4, so the risk is 1/16.
        let r = risk_of(&[0.5, 0.5], &[0.25, 0.75], 0.5);
        assert!((r - 0.0625).abs() < 1e-15);
        // Mass concentrated on a matched class gives zero risk.
        let r = risk_of(&[0.0, 1.0], &[0.25, 0.75], 0.75);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn deterministic_alternation_decomposition() {
        // Two classes with p₁ = 1, p₂ = 0 alternate deterministically, so
        // each is visited half the time; holding times (2, 1) then tilt the
        // quantized law to (2/3, 1/3).
        let mu = sampled_mu(&[1.0, 0.0]).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15);
        assert!((mu[1] - 0.5).abs() < 1e-15);
        let pi = lemma1_pi(&mu, &[2.0, 1.0]);
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sampled_chain_boundary_probabilities_are_pinned() {
        let (_, layout) = build_estimator(4, 0.1).unwrap();
        let sa = sampled_analysis(&layout, 0.5).unwrap();
        assert_eq!(sa.p[0], 1.0);
        assert_eq!(sa.p[3], 0.0);
        assert_eq!(sa.q[0], 0.0);
        assert_eq!(sa.q[3], 1.0);
        let mass: f64 = sa.mu.iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let mass: f64 = sa.pi.iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert!(sa.holding.iter().all(|&h| h >= 1.0));
    }

    #[test]
    fn sampled_chain_satisfies_detailed_balance() {
        let (_, layout) = build_estimator(4, 0.1).unwrap();
        for theta in [0.3, 0.5, 0.62] {
            let sa = sampled_analysis(&layout, theta).unwrap();
            for i in 1..4 {
                let up = sa.mu[i - 1] * sa.p[i - 1];
                let down = sa.mu[i] * sa.q[i];
                let scale = up.abs().max(down.abs()).max(1e-300);
                assert!(
                    (up - down).abs() / scale < 1e-10,
                    "detailed balance broken at {i}: {up} vs {down}"
                );
            }
        }
    }

    #[test]
    fn decomposition_matches_full_chain_aggregation() {
        let (machine, layout) = build_estimator(4, 0.1).unwrap();
        for theta in [0.35, 0.5] {
            let tm = transition_matrix(&machine, theta).unwrap();
            let full = stationary_distribution(&tm).unwrap();
            let aggregated = class_aggregate(&full, &layout);
            let sa = sampled_analysis(&layout, theta).unwrap();
            for (k, (a, b)) in aggregated.iter().zip(&sa.pi).enumerate() {
                assert!(
                    (a - b).abs() < 1e-8,
                    "theta={theta}, class {}: full {a} vs decomposition {b}",
                    k + 1
                );
            }
        }
    }

    #[test]
    fn lemma3_bracket_is_enforced_and_holds_at_center() {
        let (_, layout) = build_estimator(4, 0.1).unwrap();
        let sa = sampled_analysis(&layout, 0.5).unwrap();
        // θ = 0.5 lies in [3/6, 4/6]: class 3 is the bracket.
        assert!(lemma3_check(&sa, 3, 0.1).unwrap());
        assert!(matches!(
            lemma3_check(&sa, 1, 0.1),
            Err(AnalysisError::OutsideBracket { .. })
        ));
    }

    #[test]
    fn lemma4_holds_on_a_small_machine() {
        let (_, layout) = build_estimator(4, 0.1).unwrap();
        for theta in [0.3, 0.5, 0.7] {
            let sa = sampled_analysis(&layout, theta).unwrap();
            assert!(lemma4_check(&sa, 0.1), "theta={theta}");
        }
    }

    #[test]
    fn grid_contains_class_points_and_respects_bounds() {
        let spec = GridSpec::default_for(4);
        let pts = spec.points(4);
        assert!(pts.windows(2).all(|w| w[0] < w[1]), "grid must be sorted");
        assert_eq!(pts.first().copied().unwrap(), 1e-3);
        assert_eq!(pts.last().copied().unwrap(), 1.0 - 1e-3);
        for class in 1..=4 {
            let t = class as f64 / 6.0;
            assert!(
                pts.iter().any(|&x| (x - t).abs() < 1e-12),
                "class point {t} missing"
            );
        }
        // Midpoint of the first bracket.
        assert!(pts.iter().any(|&x| (x - 1.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn risk_report_is_consistent() {
        let (machine, layout) = build_estimator(2, 0.1).unwrap();
        let report = worst_case_risk(&machine, &layout, &GridSpec::default_for(2)).unwrap();
        assert_eq!(report.theta_grid.len(), report.risk.len());
        assert!(report.risk.iter().all(|&r| (0.0..=1.0).contains(&r)));
        let max = report.risk.iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(report.worst, max);
        assert_eq!(report.sum_nk, 358);
        assert_eq!(report.s_physical, 354);
        assert_eq!(report.normalized, report.worst * 358.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("theta,risk,risk_times_S\n"));
        assert_eq!(csv.lines().count(), report.theta_grid.len() + 1);
    }

    #[test]
    fn endpoint_orbit_risk_of_identity_machine() {
        let m = Machine::new(1, vec![1], vec![1], vec![0.0], 1).unwrap();
        assert_eq!(endpoint_orbit_risk(&m, 0.0).unwrap(), 0.0);
        assert!(matches!(
            endpoint_orbit_risk(&m, 0.5),
            Err(AnalysisError::ThetaNotEndpoint { .. })
        ));
    }

    #[test]
    fn endpoint_orbit_matches_run_length_weighting() {
        // Under a constant stream the orbit settles into the two boundary
        // classes; its risk is the run-length-weighted mean of their
        // squared errors.
        let (machine, layout) = build_estimator(4, 0.1).unwrap();
        let mp = layout.mini_params();
        let spacing = 6.0;

        let r0 = endpoint_orbit_risk(&machine, 0.0).unwrap();
        let (a, b) = ((mp[0].s - 1) as f64, (mp[1].s - 1) as f64);
        let expect0 = (a * (1.0f64 / spacing).powi(2) + b * (2.0f64 / spacing).powi(2)) / (a + b);
        assert!((r0 - expect0).abs() < 1e-12, "theta=0: {r0} vs {expect0}");

        let r1 = endpoint_orbit_risk(&machine, 1.0).unwrap();
        let (a, b) = (
            (mp[3].n - mp[3].s) as f64,
            (mp[2].n - mp[2].s) as f64,
        );
        let expect1 = (a * (2.0f64 / spacing).powi(2) + b * (3.0f64 / spacing).powi(2)) / (a + b);
        assert!((r1 - expect1).abs() < 1e-12, "theta=1: {r1} vs {expect1}");
    }

    #[test]
    fn cut_flow_balance() {
        let (machine, layout) = build_estimator(3, 0.1).unwrap();
        let tm = transition_matrix(&machine, 0.4).unwrap();
        let pi = stationary_distribution(&tm).unwrap();
        // Full set: both flows are zero.
        let all: Vec<usize> = (1..=machine.num_states()).collect();
        assert!(cut_flow_check(&pi, &tm, &all));
        // Single state: stationarity itself.
        assert!(cut_flow_check(&pi, &tm, &[machine.initial()]));
        // Class prefixes.
        for k in 1..=3 {
            let hi = layout.class_ranges()[k - 1].1;
            let cut: Vec<usize> = (1..=hi).collect();
            assert!(cut_flow_check(&pi, &tm, &cut), "prefix cut at class {k}");
        }
    }
}
