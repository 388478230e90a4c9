//! Shared test helpers: dense linear-algebra oracles and random machine
//! generators.
//!
//! The production solver is sparse state elimination; these helpers solve
//! the same systems densely with LU factorization so the two can be checked
//! against each other without sharing any code path.

#![allow(dead_code)]

use fmest::machine_core::{Machine, TransitionMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` if a pivot degenerates.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("finite matrix entries")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let (pivot_rows, rest) = a.split_at_mut(col + 1);
        let pivot_row = &pivot_rows[col];
        for (offset, row) in rest.iter_mut().enumerate() {
            let factor = row[col] / pivot_row[col];
            if factor == 0.0 {
                continue;
            }
            for (entry, pivot_entry) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *entry -= factor * pivot_entry;
            }
            b[col + 1 + offset] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut sum = b[row];
        for k in row + 1..n {
            sum -= a[row][k] * x[k];
        }
        x[row] = sum / a[row][row];
    }
    Some(x)
}

/// Stationary distribution of a transition matrix by a dense solve of
/// `πP = π`, with the last stationarity equation replaced by `Σπ = 1`.
pub fn dense_stationary(tm: &TransitionMatrix) -> Vec<f64> {
    let n = tm.dimension();
    // A = Pᵀ − I, acting on the column vector π.
    let mut a = vec![vec![0.0; n]; n];
    for state in 1..=n {
        for &(target, weight) in tm.row(state) {
            a[target - 1][state - 1] += weight;
        }
        a[state - 1][state - 1] -= 1.0;
    }
    a[n - 1].fill(1.0);
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    solve_dense(a, b).expect("irreducible test chains have a unique stationary law")
}

/// Exit behavior of the `(N, s)` decision walk at bias `θ`, solved densely
/// from first principles: `(I − Q)x = r` for the right-exit probability and
/// `(I − Q)t = 1` for the expected decision time.
///
/// The walk is reimplemented here (rather than imported) so the production
/// transition rule is cross-checked, not assumed: on a one the state moves
/// to `u+1` from `u ≥ s` and restarts at `s+1` otherwise; on a zero it moves
/// to `u−1` from `u ≤ s` and restarts at `s−1` otherwise.  State `N` is the
/// right exit, state `1` the left exit.
pub fn dense_exit(n: usize, s: usize, theta: f64) -> (f64, f64, f64) {
    assert!(n >= 4 && s >= 2 && s < n);
    let interior = n - 2;
    let idx = |u: usize| u - 2;
    let mut coeff = vec![vec![0.0; interior]; interior];
    let mut right = vec![0.0; interior];
    let mut ones = vec![1.0; interior];
    for u in 2..=n - 1 {
        coeff[idx(u)][idx(u)] = 1.0;
        let on_one = if u >= s { u + 1 } else { s + 1 };
        let on_zero = if u <= s { u - 1 } else { s - 1 };
        for (target, weight) in [(on_one, theta), (on_zero, 1.0 - theta)] {
            if target == n {
                right[idx(u)] += weight;
            } else if target > 1 {
                coeff[idx(u)][idx(target)] -= weight;
            }
        }
    }
    let x = solve_dense(coeff.clone(), right).expect("absorbing system is nonsingular");
    let t = {
        let sol = solve_dense(coeff, std::mem::take(&mut ones));
        sol.expect("absorbing system is nonsingular")
    };
    let p_right = x[idx(s)];
    (p_right, 1.0 - p_right, t[idx(s)])
}

/// A random machine whose bit-0 edges form one cycle through every state,
/// so the chain is strongly connected at any interior bias.
pub fn random_connected_machine(rng: &mut ChaCha8Rng, num_states: usize) -> Machine {
    let mut order: Vec<usize> = (1..=num_states).collect();
    // Fisher–Yates shuffle for a random cycle.
    for i in (1..num_states).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut next0 = vec![0usize; num_states];
    for i in 0..num_states {
        next0[order[i] - 1] = order[(i + 1) % num_states];
    }
    let next1: Vec<usize> = (0..num_states)
        .map(|_| rng.random_range(1..=num_states))
        .collect();
    let estimate: Vec<f64> = (0..num_states).map(|_| rng.random_range(0.0..=1.0)).collect();
    let initial = rng.random_range(1..=num_states);
    Machine::new(num_states, next0, next1, estimate, initial)
        .expect("generated tables are structurally valid")
}

/// Largest absolute componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// 1-norm of the componentwise difference.
pub fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
