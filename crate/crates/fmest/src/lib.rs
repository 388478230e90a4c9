//! Finite-memory estimation of a Bernoulli bias.
//!
//! A deterministic estimation machine reads an i.i.d. Bernoulli(θ) bit stream
//! one bit at a time while remembering nothing but its current state, one of
//! `S` possibilities.  Each state carries an estimate `θ̂(state) ∈ [0,1]`, and
//! the quality of the machine is its asymptotic quadratic risk
//!
//! ```text
//! R_θ = lim_{n→∞} (1/n) Σ_{i≤n} E (θ̂(M_i) − θ)²ᵢ
//! ```
//!
//! i.e. the long-run time average of the instantaneous squared error.  With
//! randomized transitions, `S` states suffice for worst-case risk `Θ(1/S)`
//! (the Samaniego machine, [`baselines`]).  The construction implemented here
//! shows the same rate is achievable **deterministically**: `K` run-counting
//! hypothesis testers ([`isit`]) are glued through designated entry states
//! into a single machine whose state classes carry the quantized estimates
//! `k/(K+2)` ([`estimator_build`]), and whose worst-case risk, normalized by
//! the total state count, stays bounded by a modest constant.
//!
//! Module map:
//!
//! - [`machine_core`] — the [`machine_core::Machine`] type: transition
//!   tables, validation, execution, serialization, and the θ-parameterized
//!   transition matrix of the induced Markov chain.
//! - [`isit`] — the ISIT(N,p,q) run-counting mini-chain: construction, exact
//!   exit analysis, closed-form cross-checks, error-probability bounds.
//! - [`estimator_build`] — composition of `K` mini-chains into the full
//!   estimator, state budgets, and capacity planning.
//! - [`chain_analysis`] — exact steady-state analysis: stationary
//!   distributions, the renewal decomposition of the class process, drift and
//!   holding-time diagnostics, risk sweeps, endpoint orbits.
//! - [`baselines`] — the randomized reference machine and its exact risk.
//! - [`montecarlo`] — seeded stream simulation with batch-means error bars.
//!
//! All analysis here is numerically exact (direct state-elimination solves
//! with residual verification); simulation exists to corroborate, not to
//! define, the reported quantities.

pub mod baselines;
pub mod chain_analysis;
pub mod estimator_build;
pub mod isit;
pub mod machine_core;
pub mod montecarlo;

mod solver;
