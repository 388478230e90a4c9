//! Run-counting hypothesis-testing mini-chains.
//!
//! An `ISIT(N, p, q)` chain decides between the composite hypotheses
//! `θ ≥ p` and `θ ≤ q` (with `q < p`) by counting runs: starting from a
//! neutral state `s`, an unbroken run of `N − s` ones reaches the right
//! exit (deciding for the larger bias) and an unbroken run of `s − 1`
//! zeros reaches the left exit.  Any bit that breaks a run restarts the
//! opposite counter at length one.  The chain has `N − 2` physical states;
//! the two exits are virtual and are bound to concrete targets only when
//! mini-chains are composed into a full estimator.
//!
//! This module provides the construction ([`build_isit`] with
//! [`initial_state`] and [`required_states`]), the exact exit analysis by
//! absorbing-chain solve ([`exit_analysis`], [`worst_error_over_hypothesis`]),
//! the closed-form exit probabilities used as an independent cross-check
//! ([`closed_form_exit`]), and the analytical error bound
//! ([`pe_upper_bound`]).

use thiserror::Error;

use crate::solver::{self, AbsorbTarget};

/// Slack for floating-point comparisons of parameters that are themselves
/// computed as ratios of small integers (e.g. `p = (k+1)/(K+2)` versus the
/// band edge `1 − 1/(K+2)`, which differ by at most an ulp).
const PARAM_TOLERANCE: f64 = 1e-9;

/// Errors from mini-chain construction and analysis.
#[derive(Debug, Error)]
pub enum IsitError {
    /// Hypothesis thresholds must satisfy `0 < q < p < 1`.
    #[error("hypothesis thresholds must satisfy 0 < q < p < 1 (got p = {p}, q = {q})")]
    HypothesisOrder { p: f64, q: f64 },
    /// The nominal state count must be at least 4.
    #[error("nominal state count must be at least 4 (got {n})")]
    StateCountTooSmall { n: usize },
    /// The entry state must be an interior state.
    #[error("entry state s = {s} outside [2, N-1] for N = {n}")]
    EntryStateOutOfRange { s: usize, n: usize },
    /// The accuracy parameter must lie in `(0, 1/2)`.
    #[error("epsilon must lie in (0, 1/2) (got {epsilon})")]
    EpsilonOutOfRange { epsilon: f64 },
    /// `p` is outside the admissible band `[2/K, 1 − 1/K]`.
    #[error("p = {p} outside the admissible band [2/K, 1-1/K] for K = {k}")]
    OutsideBand { p: f64, k: usize },
    /// The error bound requires adjacent hypotheses `q = p − 1/K`.
    #[error("error bound requires q = p - 1/K (got q = {q}, expected {expected})")]
    HypothesesNotAdjacent { q: f64, expected: f64 },
    /// The error bound requires `N` at or above its stated minimum.
    #[error("N = {n} is below the error bound's minimum {minimum} for these parameters")]
    StateCountBelowMinimum { n: usize, minimum: usize },
    /// A queried state is not an interior state of the chain.
    #[error("state {state} is not an interior state of an N = {n} chain")]
    StateOutOfRange { state: usize, n: usize },
    /// Input bits must be 0 or 1.
    #[error("input bit must be 0 or 1 (got {bit})")]
    InvalidBit { bit: u8 },
    /// The bias must lie strictly inside the unit interval.
    #[error("theta must lie strictly inside (0, 1) (got {theta})")]
    ThetaOutOfRange { theta: f64 },
    /// The absorbing-chain solve failed.
    #[error("numerical failure: {message}")]
    Numerical { message: String },
}

/// Which exit of a mini-chain a quantity refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitSide {
    /// The zeros-run exit (decide for the smaller bias).
    Left,
    /// The ones-run exit (decide for the larger bias).
    Right,
}

/// Result of one transition of a mini-chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    /// The chain moves to the given interior state (in `[2, N−1]`).
    Interior(usize),
    /// The zeros run completed; the chain leaves through the left exit.
    ExitLeft,
    /// The ones run completed; the chain leaves through the right exit.
    ExitRight,
}

/// A run-counting mini-chain `ISIT(N, p, q)`.
///
/// States are labeled `1..=N` with `1` and `N` the virtual exits; the
/// interior states are `2..=N−1`.  State `s` is the neutral entry state,
/// `s + j` counts a ones run of length `j`, and `s − j` counts a zeros run
/// of length `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniChain {
    n: usize,
    s: usize,
    p: f64,
    q: f64,
}

impl MiniChain {
    /// Assembles a mini-chain from explicit parts, validating
    /// `0 < q < p < 1`, `N ≥ 4`, and `2 ≤ s ≤ N−1`.
    ///
    /// [`build_isit`] is the usual entry point; this constructor exists so a
    /// chain can be rebuilt from recorded parameters.
    pub fn from_parts(n: usize, s: usize, p: f64, q: f64) -> Result<Self, IsitError> {
        check_hypotheses(p, q)?;
        if n < 4 {
            return Err(IsitError::StateCountTooSmall { n });
        }
        if s < 2 || s > n - 1 {
            return Err(IsitError::EntryStateOutOfRange { s, n });
        }
        Ok(MiniChain { n, s, p, q })
    }

    /// Nominal state count `N`, including the two virtual exits.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Neutral entry state `s`.
    pub fn s(&self) -> usize {
        self.s
    }

    /// Right hypothesis threshold `p`.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Left hypothesis threshold `q`.
    pub fn q(&self) -> f64 {
        self.q
    }

    /// Number of physical interior states, `N − 2`.
    pub fn interior_count(&self) -> usize {
        self.n - 2
    }

    /// One transition from interior state `state` on input `bit`.
    ///
    /// A one extends a ones run (or starts one from the neutral state or a
    /// zeros run); a zero does the mirror image.  Completing a run of
    /// `N − s` ones exits right; completing a run of `s − 1` zeros exits
    /// left.
    ///
    /// # Errors
    ///
    /// [`IsitError::StateOutOfRange`] if `state` is not in `[2, N−1]`;
    /// [`IsitError::InvalidBit`] if `bit` is not 0 or 1.
    pub fn next(&self, state: usize, bit: u8) -> Result<StepOutcome, IsitError> {
        if state < 2 || state > self.n - 1 {
            return Err(IsitError::StateOutOfRange {
                state,
                n: self.n,
            });
        }
        let target = match bit {
            1 => {
                if state >= self.s {
                    state + 1
                } else {
                    self.s + 1
                }
            }
            0 => {
                if state <= self.s {
                    state - 1
                } else {
                    self.s - 1
                }
            }
            other => return Err(IsitError::InvalidBit { bit: other }),
        };
        Ok(if target == self.n {
            StepOutcome::ExitRight
        } else if target == 1 {
            StepOutcome::ExitLeft
        } else {
            StepOutcome::Interior(target)
        })
    }
}

/// Exact exit behavior of a mini-chain at a fixed bias.
#[derive(Clone, Copy, Debug)]
pub struct ExitAnalysis {
    /// The bias the analysis was run at.
    pub theta: f64,
    /// Probability of leaving through the right (ones-run) exit.
    pub prob_exit_right: f64,
    /// Probability of leaving through the left (zeros-run) exit.
    pub prob_exit_left: f64,
    /// Expected number of steps from the entry state to either exit.
    pub expected_decision_time: f64,
}

/// Worst-case decision errors of a mini-chain over its two composite
/// hypotheses.  By monotonicity of the exit probabilities in `θ`, the
/// suprema are attained at the hypothesis boundaries.
#[derive(Clone, Copy, Debug)]
pub struct WorstError {
    /// Probability of (incorrectly) exiting right when `θ = q`.
    pub p01: f64,
    /// Probability of (incorrectly) exiting left when `θ = p`.
    pub p10: f64,
}

fn check_hypotheses(p: f64, q: f64) -> Result<(), IsitError> {
    if !(0.0 < q && q < p && p < 1.0) {
        return Err(IsitError::HypothesisOrder { p, q });
    }
    Ok(())
}

/// The neutral entry state for an `N`-state chain testing `p` against `q`:
///
/// ```text
/// s = 2 + round( (N−3) · log(pq) / (log p(1−p) + log q(1−q)) )
/// ```
///
/// rounded half-up and clamped to `[2, N−1]`.  The logarithm base cancels
/// in the ratio.  This split balances the two runs' log-likelihood ratios
/// so both error exponents match.
///
/// # Errors
///
/// [`IsitError::HypothesisOrder`] unless `0 < q < p < 1`;
/// [`IsitError::StateCountTooSmall`] if `N < 4`.
pub fn initial_state(n: usize, p: f64, q: f64) -> Result<usize, IsitError> {
    check_hypotheses(p, q)?;
    if n < 4 {
        return Err(IsitError::StateCountTooSmall { n });
    }
    let ratio = (p * q).log2() / ((p * (1.0 - p)).log2() + (q * (1.0 - q)).log2());
    let offset = ((n - 3) as f64 * ratio + 0.5).floor();
    debug_assert!(offset >= 0.0);
    let s = 2usize.saturating_add(offset as usize);
    Ok(s.clamp(2, n - 1))
}

/// The state count
///
/// ```text
/// N(ε, p, K) = 3 + ⌈ K · 6 · log₂( 2 / (ε·(p − 1/K)·(1−p)) ) ⌉
/// ```
///
/// sufficient for the chain testing `p` against `q = p − 1/K` to decide
/// with worst-case error below `ε`.
///
/// # Errors
///
/// [`IsitError::EpsilonOutOfRange`] unless `ε ∈ (0, 1/2)`;
/// [`IsitError::OutsideBand`] unless `2/K ≤ p ≤ 1 − 1/K` (up to rounding
/// slack, since callers form `p` as a ratio of small integers).
pub fn required_states(epsilon: f64, p: f64, k: usize) -> Result<usize, IsitError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(IsitError::EpsilonOutOfRange { epsilon });
    }
    check_band(p, k)?;
    let kf = k as f64;
    let value = kf * 6.0 * (2.0 / (epsilon * (p - 1.0 / kf) * (1.0 - p))).log2();
    Ok(3 + value.ceil() as usize)
}

fn check_band(p: f64, k: usize) -> Result<(), IsitError> {
    let kf = k as f64;
    if k < 2 || p < 2.0 / kf - PARAM_TOLERANCE || p > 1.0 - 1.0 / kf + PARAM_TOLERANCE {
        return Err(IsitError::OutsideBand { p, k });
    }
    Ok(())
}

/// Builds the mini-chain `ISIT(N, p, q)` with its entry state from
/// [`initial_state`].
///
/// # Errors
///
/// Propagates [`initial_state`] errors.
pub fn build_isit(n: usize, p: f64, q: f64) -> Result<MiniChain, IsitError> {
    let s = initial_state(n, p, q)?;
    MiniChain::from_parts(n, s, p, q)
}

/// Exact exit probabilities and expected decision time at bias `theta`,
/// computed by solving the absorbing chain on the `N − 2` interior states.
///
/// # Errors
///
/// [`IsitError::ThetaOutOfRange`] unless `θ ∈ (0, 1)`;
/// [`IsitError::Numerical`] if the solve fails.
pub fn exit_analysis(c: &MiniChain, theta: f64) -> Result<ExitAnalysis, IsitError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(IsitError::ThetaOutOfRange { theta });
    }
    let rows = absorbing_rows(c, theta)?;
    let outcome = solver::absorb_from(&rows, c.s - 2).map_err(|e| IsitError::Numerical {
        message: e.to_string(),
    })?;
    Ok(ExitAnalysis {
        theta,
        prob_exit_right: outcome.exit_right,
        prob_exit_left: outcome.exit_left,
        expected_decision_time: outcome.expected_time,
    })
}

/// Absorbing-chain rows over the interior states, indexed `u − 2` for
/// paper state `u ∈ [2, N−1]`.
fn absorbing_rows(c: &MiniChain, theta: f64) -> Result<Vec<Vec<(AbsorbTarget, f64)>>, IsitError> {
    let mut rows = Vec::with_capacity(c.interior_count());
    for u in 2..=c.n - 1 {
        let mut row = Vec::with_capacity(2);
        for (bit, w) in [(1u8, theta), (0u8, 1.0 - theta)] {
            let target = match c.next(u, bit)? {
                StepOutcome::Interior(t) => AbsorbTarget::Interior(t - 2),
                StepOutcome::ExitLeft => AbsorbTarget::Left,
                StepOutcome::ExitRight => AbsorbTarget::Right,
            };
            row.push((target, w));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Closed-form exit probability from the entry state of an `(N, s)` chain
/// at bias `theta`:
///
/// ```text
/// left  = (1 − θ^{N−s})     / (1 + θ^{N−s−1}/(1−θ)^{s−2} − θ^{N−s−1})
/// right = (1 − (1−θ)^{s−1}) / (1 + (1−θ)^{s−2}/θ^{N−s−1} − (1−θ)^{s−2})
/// ```
///
/// Evaluated in the log domain: with runs hundreds of bits long the powers
/// underflow far before the probabilities do, so the expression is
/// normalized by the larger of the two powers before exponentiation.
///
/// # Errors
///
/// [`IsitError::EntryStateOutOfRange`], [`IsitError::StateCountTooSmall`],
/// or [`IsitError::ThetaOutOfRange`] on bad arguments.
pub fn closed_form_exit(n: usize, s: usize, theta: f64, side: ExitSide) -> Result<f64, IsitError> {
    if n < 4 {
        return Err(IsitError::StateCountTooSmall { n });
    }
    if s < 2 || s > n - 1 {
        return Err(IsitError::EntryStateOutOfRange { s, n });
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(IsitError::ThetaOutOfRange { theta });
    }
    // a = θ^{N−s−1}, b = (1−θ)^{s−2}, both ≤ 1.  Writing the denominator as
    // a + b·(1−a) and scaling by m = max(log a, log b) keeps every factor
    // representable even when a or b underflows.
    let log_a = (n - s - 1) as f64 * theta.ln();
    let log_b = (s - 2) as f64 * (1.0 - theta).ln();
    let m = log_a.max(log_b);
    let a_scaled = (log_a - m).exp();
    let b_scaled = (log_b - m).exp();
    let one_minus_a = -((n - s - 1) as f64 * theta.ln()).exp_m1();
    let denom = a_scaled + b_scaled * one_minus_a;
    let value = match side {
        ExitSide::Left => {
            let numer = -((n - s) as f64 * theta.ln()).exp_m1();
            numer * b_scaled / denom
        }
        ExitSide::Right => {
            let numer = -((s - 1) as f64 * (1.0 - theta).ln()).exp_m1();
            numer * a_scaled / denom
        }
    };
    debug_assert!((0.0..=1.0 + 1e-12).contains(&value));
    Ok(value)
}

/// The analytical bound on the worst-case decision error of an `N`-state
/// chain testing `p` against `q = p − 1/K`:
///
/// ```text
/// Pe ≤ (2 / p_min) · 2^{ −r(p,q)·(N−3) },   p_min = min{p(1−p), q(1−q)},
/// r(p,q) = (log p·log(1−q) − log q·log(1−p)) / (log p(1−p) + log q(1−q)).
/// ```
///
/// # Errors
///
/// Domain errors if `p` is outside its band, `q ≠ p − 1/K`, or `N` is below
/// `3 + ⌈K·6·log₂(2/p_min)⌉`, the smallest count the bound is stated for.
pub fn pe_upper_bound(n: usize, p: f64, q: f64, k: usize) -> Result<f64, IsitError> {
    check_hypotheses(p, q)?;
    check_band(p, k)?;
    let expected_q = p - 1.0 / k as f64;
    if (q - expected_q).abs() > PARAM_TOLERANCE {
        return Err(IsitError::HypothesesNotAdjacent {
            q,
            expected: expected_q,
        });
    }
    let p_min = (p * (1.0 - p)).min(q * (1.0 - q));
    let minimum = 3 + (k as f64 * 6.0 * (2.0 / p_min).log2()).ceil() as usize;
    if n < minimum {
        return Err(IsitError::StateCountBelowMinimum { n, minimum });
    }
    let r = exponent_rate(p, q);
    Ok((2.0 / p_min) * (-r * (n - 3) as f64).exp2())
}

/// The error exponent `r(p, q)`; positive whenever `0 < q < p < 1`.
fn exponent_rate(p: f64, q: f64) -> f64 {
    let (lp, lq) = (p.log2(), q.log2());
    let (lcp, lcq) = ((1.0 - p).log2(), (1.0 - q).log2());
    (lp * lcq - lq * lcp) / ((lp + lcp) + (lq + lcq))
}

/// Worst-case decision errors over the two composite hypotheses: the wrong
/// exit probabilities evaluated at the boundary biases `θ = q` and `θ = p`,
/// where they are largest.
///
/// # Errors
///
/// Propagates [`exit_analysis`] errors.
pub fn worst_error_over_hypothesis(c: &MiniChain) -> Result<WorstError, IsitError> {
    let at_q = exit_analysis(c, c.q)?;
    let at_p = exit_analysis(c, c.p)?;
    Ok(WorstError {
        p01: at_q.prob_exit_right,
        p10: at_p.prob_exit_left,
    })
}
