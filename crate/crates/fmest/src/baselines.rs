//! The randomized `S`-state reference estimator.
//!
//! The classical randomized machine moves on a path of `S` states with
//! estimates `i/(S−1)`: on a one it steps right with probability
//! `(S−1−i)/(S−1)`, on a zero left with probability `i/(S−1)`, otherwise it
//! stays.  Detailed balance gives it a `Binomial(S−1, θ)` stationary law,
//! hence the exact asymptotic risk `θ(1−θ)/(S−1)` — the `Θ(1/S)` randomized
//! reference the deterministic construction is measured against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::solver;

/// Errors from the randomized baseline.
#[derive(Debug, Error)]
pub enum BaselineError {
    /// The path machine needs at least two states.
    #[error("randomized machine needs at least 2 states (got {s})")]
    TooFewStates { s: usize },
    /// A queried state is outside `0..S`.
    #[error("state {state} out of range for {num_states} states")]
    StateOutOfRange { state: usize, num_states: usize },
    /// The bias must lie strictly inside the unit interval.
    #[error("theta must lie strictly inside (0, 1) (got {theta})")]
    ThetaOutOfRange { theta: f64 },
    /// Simulation needs at least one step.
    #[error("simulation needs at least one step")]
    ZeroSteps,
    /// The stationary solve failed.
    #[error("numerical failure: {message}")]
    Numerical { message: String },
}

/// The randomized path estimator on states `0..S` (0-indexed, unlike the
/// deterministic machines, because the state index doubles as the
/// numerator of the estimate `i/(S−1)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomizedMachine {
    num_states: usize,
    initial: usize,
}

impl RandomizedMachine {
    /// Number of states `S`.
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Starting state (the middle of the path).
    pub fn initial(&self) -> usize {
        self.initial
    }

    fn check_state(&self, state: usize) -> Result<(), BaselineError> {
        if state >= self.num_states {
            return Err(BaselineError::StateOutOfRange {
                state,
                num_states: self.num_states,
            });
        }
        Ok(())
    }

    /// Probability of moving right on a one: `(S−1−i)/(S−1)`.
    pub fn up_prob(&self, state: usize) -> Result<f64, BaselineError> {
        self.check_state(state)?;
        Ok((self.num_states - 1 - state) as f64 / (self.num_states - 1) as f64)
    }

    /// Probability of moving left on a zero: `i/(S−1)`.
    pub fn down_prob(&self, state: usize) -> Result<f64, BaselineError> {
        self.check_state(state)?;
        Ok(state as f64 / (self.num_states - 1) as f64)
    }

    /// The estimate `i/(S−1)` attached to a state.
    pub fn estimate(&self, state: usize) -> Result<f64, BaselineError> {
        self.check_state(state)?;
        Ok(state as f64 / (self.num_states - 1) as f64)
    }
}

/// Builds the `S`-state randomized path estimator, starting at the middle
/// state `⌊(S−1)/2⌋`.
///
/// # Errors
///
/// [`BaselineError::TooFewStates`] if `S < 2`.
pub fn build_samaniego(s: usize) -> Result<RandomizedMachine, BaselineError> {
    if s < 2 {
        return Err(BaselineError::TooFewStates { s });
    }
    Ok(RandomizedMachine {
        num_states: s,
        initial: (s - 1) / 2,
    })
}

/// The exact asymptotic risk of the `S`-state randomized machine at bias
/// `theta`: the variance of `Binomial(S−1, θ)/(S−1)`, which is
/// `θ(1−θ)/(S−1)`.
///
/// # Errors
///
/// Domain errors for `S < 2` or `θ ∉ (0,1)`.
pub fn samaniego_exact_risk(s: usize, theta: f64) -> Result<f64, BaselineError> {
    if s < 2 {
        return Err(BaselineError::TooFewStates { s });
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(BaselineError::ThetaOutOfRange { theta });
    }
    Ok(theta * (1.0 - theta) / (s - 1) as f64)
}

/// Stationary distribution of the randomized machine at bias `theta`,
/// solved from the chain (not assumed binomial — the binomial law is what
/// tests verify against).
///
/// # Errors
///
/// Domain errors as in [`samaniego_exact_risk`]; solver failures.
pub fn samaniego_stationary(
    rm: &RandomizedMachine,
    theta: f64,
) -> Result<Vec<f64>, BaselineError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(BaselineError::ThetaOutOfRange { theta });
    }
    let s = rm.num_states();
    let mut rows = Vec::with_capacity(s);
    for i in 0..s {
        let up = theta * rm.up_prob(i)?;
        let down = (1.0 - theta) * rm.down_prob(i)?;
        let mut row = Vec::with_capacity(3);
        if i + 1 < s {
            row.push((i + 1, up));
        }
        if i > 0 {
            row.push((i - 1, down));
        }
        row.push((i, 1.0 - up - down));
        rows.push(row);
    }
    solver::stationary(&rows).map_err(|e| BaselineError::Numerical {
        message: e.to_string(),
    })
}

/// The probability mass function of `Binomial(n, theta)` over `0..=n`,
/// via the multiplicative recurrence.
pub fn binomial_pmf(n: usize, theta: f64) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(n + 1);
    let mut value = (1.0 - theta).powi(n as i32);
    let odds = theta / (1.0 - theta);
    pmf.push(value);
    for k in 0..n {
        value *= (n - k) as f64 / (k + 1) as f64 * odds;
        pmf.push(value);
    }
    pmf
}

/// Time-averaged squared estimation error of the randomized machine over
/// `n` steps on a seeded Bernoulli(`theta`) stream.
///
/// Each step consumes two draws from the generator — the input bit and the
/// machine's internal coin — so runs with the same seed are bit-identical.
/// No burn-in is applied; the path machine mixes in `O(S)` steps.
///
/// # Errors
///
/// Domain errors for `θ ∉ (0,1)` or `n = 0`.
pub fn simulate_randomized(
    rm: &RandomizedMachine,
    theta: f64,
    n: u64,
    seed: u64,
) -> Result<f64, BaselineError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(BaselineError::ThetaOutOfRange { theta });
    }
    if n == 0 {
        return Err(BaselineError::ZeroSteps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = rm.initial();
    let mut total = 0.0f64;
    for _ in 0..n {
        let bit = rng.random_bool(theta);
        let move_prob = if bit {
            rm.up_prob(state)?
        } else {
            rm.down_prob(state)?
        };
        let moves = rng.random_bool(move_prob);
        if moves {
            if bit {
                state += 1;
            } else {
                state -= 1;
            }
        }
        let err = rm.estimate(state)? - theta;
        total += err * err;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_two_state_machine() {
        let rm = build_samaniego(2).unwrap();
        assert_eq!(rm.estimate(0).unwrap(), 0.0);
        assert_eq!(rm.estimate(1).unwrap(), 1.0);
        assert_eq!(rm.up_prob(0).unwrap(), 1.0);
        assert_eq!(rm.down_prob(0).unwrap(), 0.0);
        assert_eq!(rm.initial(), 0);
        assert!(matches!(
            build_samaniego(1),
            Err(BaselineError::TooFewStates { s: 1 })
        ));
    }

    #[test]
    fn three_state_middle_probabilities() {
        let rm = build_samaniego(3).unwrap();
        assert_eq!(rm.up_prob(1).unwrap(), 0.5);
        assert_eq!(rm.down_prob(1).unwrap(), 0.5);
        assert_eq!(rm.initial(), 1);
    }

    #[test]
    fn stationary_is_binomial() {
        let rm = build_samaniego(5).unwrap();
        let pi = samaniego_stationary(&rm, 0.3).unwrap();
        // Binomial(4, 0.3) by hand.
        let expect = [0.2401, 0.4116, 0.2646, 0.0756, 0.0081];
        for (a, b) in pi.iter().zip(expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let pmf = binomial_pmf(4, 0.3);
        for (a, b) in pi.iter().zip(&pmf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_matches_binomial_across_sizes() {
        for s in [2usize, 8, 33, 64] {
            for theta in [0.1, 0.5, 0.73] {
                let rm = build_samaniego(s).unwrap();
                let pi = samaniego_stationary(&rm, theta).unwrap();
                let pmf = binomial_pmf(s - 1, theta);
                for (i, (a, b)) in pi.iter().zip(&pmf).enumerate() {
                    assert!(
                        (a - b).abs() < 1e-10,
                        "S={s}, theta={theta}, state {i}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn exact_risk_identities() {
        assert_eq!(samaniego_exact_risk(2, 0.5).unwrap(), 0.25);
        assert_eq!(samaniego_exact_risk(11, 0.5).unwrap(), 0.025);
        // risk·(S−1) = θ(1−θ) exactly.
        for s in [2usize, 7, 101] {
            for theta in [0.2, 0.5, 0.9] {
                let r = samaniego_exact_risk(s, theta).unwrap();
                assert_eq!(r * (s - 1) as f64, theta * (1.0 - theta));
            }
        }
        // Worst case over θ is at θ = 1/2.
        let s = 21;
        let worst = samaniego_exact_risk(s, 0.5).unwrap();
        assert_eq!(worst, 0.25 / (s - 1) as f64);
        for theta in [0.1, 0.3, 0.7, 0.95] {
            assert!(samaniego_exact_risk(s, theta).unwrap() <= worst);
        }
    }

    #[test]
    fn exact_risk_agrees_with_pmf_summation() {
        let (s, theta) = (6usize, 0.37);
        let pmf = binomial_pmf(s - 1, theta);
        let summed: f64 = pmf
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let e = i as f64 / (s - 1) as f64 - theta;
                p * e * e
            })
            .sum();
        let direct = samaniego_exact_risk(s, theta).unwrap();
        assert!((summed - direct).abs() < 1e-15);
    }

    #[test]
    fn simulation_converges_to_exact_risk() {
        let rm = build_samaniego(2).unwrap();
        let r = simulate_randomized(&rm, 0.5, 200_000, 11).unwrap();
        assert!((r - 0.25).abs() < 5e-3, "empirical {r}");
        let rm = build_samaniego(5).unwrap();
        let r = simulate_randomized(&rm, 0.05, 200_000, 12).unwrap();
        let exact = samaniego_exact_risk(5, 0.05).unwrap();
        assert!((r - exact).abs() < 5e-3, "empirical {r} vs exact {exact}");
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let rm = build_samaniego(9).unwrap();
        let a = simulate_randomized(&rm, 0.4, 10_000, 99).unwrap();
        let b = simulate_randomized(&rm, 0.4, 10_000, 99).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = simulate_randomized(&rm, 0.4, 10_000, 100).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn rejects_bad_parameters() {
        let rm = build_samaniego(4).unwrap();
        assert!(matches!(
            simulate_randomized(&rm, 1.0, 10, 0),
            Err(BaselineError::ThetaOutOfRange { .. })
        ));
        assert!(matches!(
            simulate_randomized(&rm, 0.5, 0, 0),
            Err(BaselineError::ZeroSteps)
        ));
        assert!(matches!(
            rm.estimate(4),
            Err(BaselineError::StateOutOfRange { .. })
        ));
    }
}
