//! Composition of run-counting mini-chains into a full deterministic
//! estimator.
//!
//! The `S`-state estimator for `K` classes glues together `K` mini-chains
//! (see [`crate::isit`]): class `k` holds the block `ISIT(N_k, p_k, q_k)`
//! with `q_k = k/(K+2)`, `p_k = (k+1)/(K+2)`, and `N_k` sized so each block
//! decides with worst-case error below `ε`.  Every state in class `k`
//! estimates `θ̂_k = k/(K+2)`.  A block's right exit enters the next class
//! and its left exit the previous one, always through that class's
//! designated entry state, so the class-level view of the machine is a
//! birth–death chain.  The boundary blocks route both exits to their single
//! neighbor.
//!
//! [`build_estimator`] produces the machine together with a
//! [`ComposedLayout`] describing the partition; [`state_budget`] and
//! [`choose_k`] size constructions against a state budget.

use thiserror::Error;

use crate::isit::{self, IsitError, MiniChain, StepOutcome};
use crate::machine_core::{
    BuildMetadata, Machine, MachineDocument, MachineError, MiniChainParams,
};

/// Errors from estimator composition.
#[derive(Debug, Error)]
pub enum BuildError {
    /// At least two classes are required so both boundary blocks exist.
    #[error("need at least 2 classes (got K = {k})")]
    TooFewClasses { k: usize },
    /// The accuracy parameter must lie in `(0, 1/2)`.
    #[error("epsilon must lie in (0, 1/2) (got {epsilon})")]
    EpsilonOutOfRange { epsilon: f64 },
    /// The requested state cap cannot fit even the smallest composition.
    #[error("state cap {cap} too small; the smallest composition (K = 2) needs {minimum} states")]
    StateCapTooSmall { cap: usize, minimum: usize },
    /// A document operation needs composition annotations that are absent.
    #[error("document carries no {what}; it was not written by the composed-estimator builder")]
    MissingAnnotations { what: &'static str },
    /// A document's annotations disagree with the machine rebuilt from its
    /// recorded parameters.
    #[error("document does not match the machine rebuilt from its metadata: {what} differs")]
    Mismatch { what: &'static str },
    /// A queried state index is outside the machine.
    #[error("state {state} out of range for a machine with {num_states} states")]
    StateOutOfRange { state: usize, num_states: usize },
    /// Mini-chain construction failed.
    #[error(transparent)]
    Isit(#[from] IsitError),
    /// Machine assembly failed.
    #[error(transparent)]
    Machine(#[from] MachineError),
}

/// How a composed machine's global state space decomposes into classes.
///
/// Classes are labeled `1..=K`; all `Vec` fields are indexed by
/// `class − 1`.  Global states are 1-based, matching
/// [`Machine`](crate::machine_core::Machine).
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedLayout {
    k: usize,
    epsilon: f64,
    class_ranges: Vec<(usize, usize)>,
    entry: Vec<usize>,
    class_map: Vec<usize>,
    estimates: Vec<f64>,
    mini_params: Vec<MiniChainParams>,
}

impl ComposedLayout {
    /// Number of classes `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// The accuracy parameter the blocks were sized for.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Inclusive global state ranges `[first, last]` of each class, in
    /// class order; together they partition `1..=S`.
    pub fn class_ranges(&self) -> &[(usize, usize)] {
        &self.class_ranges
    }

    /// Global entry state of each class — the only state reachable from
    /// outside the class.
    pub fn entry(&self) -> &[usize] {
        &self.entry
    }

    /// Class label of every global state (`class_map[i]` labels state
    /// `i + 1`).
    pub fn class_map(&self) -> &[usize] {
        &self.class_map
    }

    /// The estimate `k/(K+2)` attached to each class.
    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    /// Construction parameters of each class's block.
    pub fn mini_params(&self) -> &[MiniChainParams] {
        &self.mini_params
    }

    /// Total number of physical states.
    pub fn num_states(&self) -> usize {
        self.class_map.len()
    }

    /// Class label of a global state.
    ///
    /// # Errors
    ///
    /// [`BuildError::StateOutOfRange`] if `state` is not in `1..=S`.
    pub fn class_of(&self, state: usize) -> Result<usize, BuildError> {
        if state < 1 || state > self.class_map.len() {
            return Err(BuildError::StateOutOfRange {
                state,
                num_states: self.class_map.len(),
            });
        }
        Ok(self.class_map[state - 1])
    }

    /// The metadata block recorded in machine files.
    pub fn to_metadata(&self) -> BuildMetadata {
        BuildMetadata {
            k: self.k,
            epsilon: self.epsilon,
            mini_params: self.mini_params.clone(),
        }
    }

    /// Packages a built machine and this layout as a document for
    /// serialization.
    pub fn to_document(&self, machine: &Machine) -> MachineDocument {
        MachineDocument {
            machine: machine.clone(),
            class_map: Some(self.class_map.clone()),
            metadata: Some(self.to_metadata()),
        }
    }

    /// Recovers the layout of a machine loaded from a document by rebuilding
    /// the construction from the recorded `(K, ε)` and checking that every
    /// table matches bit for bit.
    ///
    /// # Errors
    ///
    /// [`BuildError::MissingAnnotations`] if the document has no metadata or
    /// class map; [`BuildError::Mismatch`] if the document's machine is not
    /// the one its metadata describes.
    pub fn from_document(doc: &MachineDocument) -> Result<ComposedLayout, BuildError> {
        let metadata = doc
            .metadata
            .as_ref()
            .ok_or(BuildError::MissingAnnotations { what: "metadata" })?;
        let class_map = doc
            .class_map
            .as_ref()
            .ok_or(BuildError::MissingAnnotations { what: "class map" })?;
        let (machine, layout) = build_estimator(metadata.k, metadata.epsilon)?;
        if metadata.mini_params != layout.mini_params {
            return Err(BuildError::Mismatch {
                what: "mini-chain parameters",
            });
        }
        if *class_map != layout.class_map {
            return Err(BuildError::Mismatch { what: "class map" });
        }
        if machine != doc.machine {
            return Err(BuildError::Mismatch {
                what: "transition or estimate table",
            });
        }
        Ok(layout)
    }
}

/// State accounting for a `(K, ε)` composition.
#[derive(Clone, Copy, Debug)]
pub struct StateBudget {
    /// `Σ N_k`: the nominal count, including each block's two virtual
    /// exits.
    pub sum_nk: usize,
    /// `Σ (N_k − 2)`: the number of physical states of the built machine.
    pub physical_s: usize,
    /// The analytical budget `6(K+2)²·log₂(2e/ε)` that `sum_nk` is sized
    /// against.
    pub bound: f64,
    /// Whether `sum_nk ≤ bound` actually holds for this pair.
    pub within_bound: bool,
}

fn check_epsilon(epsilon: f64) -> Result<(), BuildError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(BuildError::EpsilonOutOfRange { epsilon });
    }
    Ok(())
}

/// The block parameters `(N_k, s_k, p_k, q_k)` for classes `1..=K`.
fn block_params(k: usize, epsilon: f64) -> Result<Vec<MiniChainParams>, BuildError> {
    let spacing = k + 2;
    let mut params = Vec::with_capacity(k);
    for class in 1..=k {
        let p = (class + 1) as f64 / spacing as f64;
        let q = class as f64 / spacing as f64;
        let n = isit::required_states(epsilon, p, spacing)?;
        let s = isit::initial_state(n, p, q)?;
        params.push(MiniChainParams { n, s, p, q });
    }
    Ok(params)
}

/// Builds the `K`-class deterministic estimator with per-block accuracy
/// `ε`.
///
/// The machine starts at the entry state of the middle class `⌈K/2⌉`.  Its
/// state space is strongly connected and every cross-class edge lands on
/// the destination class's entry state.
///
/// # Errors
///
/// [`BuildError::TooFewClasses`] if `K < 2`;
/// [`BuildError::EpsilonOutOfRange`] unless `ε ∈ (0, 1/2)`.
pub fn build_estimator(k: usize, epsilon: f64) -> Result<(Machine, ComposedLayout), BuildError> {
    if k < 2 {
        return Err(BuildError::TooFewClasses { k });
    }
    check_epsilon(epsilon)?;
    let params = block_params(k, epsilon)?;

    // First pass: global offsets, ranges, and entry states for all classes,
    // so cross-class exits can be wired in the second pass.
    let mut class_ranges = Vec::with_capacity(k);
    let mut entry = Vec::with_capacity(k);
    let mut base = 0usize;
    for mp in &params {
        class_ranges.push((base + 1, base + mp.n - 2));
        entry.push(base + mp.s - 1);
        base += mp.n - 2;
    }
    let num_states = base;

    // Second pass: translate each block's run semantics into the global
    // tables.  Block-local state u ∈ [2, N−1] occupies global base + u − 1.
    let mut next0 = vec![0usize; num_states];
    let mut next1 = vec![0usize; num_states];
    let mut estimate = vec![0.0f64; num_states];
    let mut class_map = vec![0usize; num_states];
    let estimates: Vec<f64> = (1..=k)
        .map(|class| class as f64 / (k + 2) as f64)
        .collect();

    for (idx, mp) in params.iter().enumerate() {
        let chain = MiniChain::from_parts(mp.n, mp.s, mp.p, mp.q)?;
        let left_target = if idx == 0 { entry[1] } else { entry[idx - 1] };
        let right_target = if idx == k - 1 {
            entry[k - 2]
        } else {
            entry[idx + 1]
        };
        let base = class_ranges[idx].0 - 1;
        for u in 2..=mp.n - 1 {
            let g = base + u - 1;
            for bit in [0u8, 1u8] {
                let target = match chain.next(u, bit)? {
                    StepOutcome::Interior(t) => base + t - 1,
                    StepOutcome::ExitLeft => left_target,
                    StepOutcome::ExitRight => right_target,
                };
                if bit == 0 {
                    next0[g - 1] = target;
                } else {
                    next1[g - 1] = target;
                }
            }
            estimate[g - 1] = estimates[idx];
            class_map[g - 1] = idx + 1;
        }
    }

    let initial = entry[k.div_ceil(2) - 1];
    let machine = Machine::new(num_states, next0, next1, estimate, initial)?;
    let layout = ComposedLayout {
        k,
        epsilon,
        class_ranges,
        entry,
        class_map,
        estimates,
        mini_params: params,
    };
    Ok((machine, layout))
}

/// State accounting for a `(K, ε)` composition, without building it.
///
/// Reports both the nominal count `Σ N_k` and the physical count
/// `Σ (N_k − 2)`, plus the analytical budget the nominal count is sized
/// against.  The comparison outcome is returned rather than asserted, so
/// callers can surface pairs where the sizing overshoots the budget.
///
/// # Errors
///
/// Same domain errors as [`build_estimator`].
pub fn state_budget(k: usize, epsilon: f64) -> Result<StateBudget, BuildError> {
    if k < 2 {
        return Err(BuildError::TooFewClasses { k });
    }
    check_epsilon(epsilon)?;
    let params = block_params(k, epsilon)?;
    let sum_nk: usize = params.iter().map(|mp| mp.n).sum();
    let physical_s = sum_nk - 2 * k;
    let spacing = (k + 2) as f64;
    let bound = 6.0 * spacing * spacing * (2.0 * std::f64::consts::E / epsilon).log2();
    Ok(StateBudget {
        sum_nk,
        physical_s,
        bound,
        within_bound: sum_nk as f64 <= bound,
    })
}

/// The largest `K` whose composition fits within `state_cap` nominal
/// states.
///
/// # Errors
///
/// [`BuildError::StateCapTooSmall`] (naming the minimum feasible cap) if
/// even `K = 2` does not fit; domain errors for bad `ε`.
pub fn choose_k(state_cap: usize, epsilon: f64) -> Result<usize, BuildError> {
    check_epsilon(epsilon)?;
    let minimum = state_budget(2, epsilon)?.sum_nk;
    if state_cap < minimum {
        return Err(BuildError::StateCapTooSmall {
            cap: state_cap,
            minimum,
        });
    }
    let mut best = 2;
    for k in 3.. {
        if state_budget(k, epsilon)?.sum_nk > state_cap {
            break;
        }
        best = k;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_class_estimates() {
        let (_, layout) = build_estimator(3, 0.1).unwrap();
        assert_eq!(layout.estimates(), &[1.0 / 5.0, 2.0 / 5.0, 3.0 / 5.0]);
    }

    #[test]
    fn built_machine_is_strongly_connected() {
        let (machine, layout) = build_estimator(4, 0.1).unwrap();
        let d = machine.validate();
        assert!(d.structural_ok && d.strongly_connected && d.reachable_from_initial);
        assert_eq!(machine.num_states(), layout.num_states());
    }

    #[test]
    fn class_ranges_partition_the_state_space() {
        let (machine, layout) = build_estimator(5, 0.1).unwrap();
        let mut covered = 0usize;
        let mut expected_start = 1usize;
        for (class, &(lo, hi)) in layout.class_ranges().iter().enumerate() {
            assert_eq!(lo, expected_start, "class {} range not contiguous", class + 1);
            assert!(hi >= lo);
            let e = layout.entry()[class];
            assert!((lo..=hi).contains(&e), "entry outside its class");
            covered += hi - lo + 1;
            expected_start = hi + 1;
        }
        assert_eq!(covered, machine.num_states());
        let physical: usize = layout
            .mini_params()
            .iter()
            .map(|mp| mp.n - 2)
            .sum();
        assert_eq!(physical, machine.num_states());
    }

    #[test]
    fn estimates_follow_the_class_map() {
        let (machine, layout) = build_estimator(4, 0.1).unwrap();
        for state in 1..=machine.num_states() {
            let class = layout.class_of(state).unwrap();
            assert_eq!(
                machine.estimate(state).unwrap(),
                layout.estimates()[class - 1],
                "state {state}"
            );
        }
    }

    #[test]
    fn cross_class_edges_use_entry_states_and_neighbors_only() {
        let (machine, layout) = build_estimator(6, 0.1).unwrap();
        let k = layout.k();
        for state in 1..=machine.num_states() {
            let from = layout.class_of(state).unwrap();
            for target in [machine.next0(state).unwrap(), machine.next1(state).unwrap()] {
                let to = layout.class_of(target).unwrap();
                if to != from {
                    assert_eq!(
                        target,
                        layout.entry()[to - 1],
                        "cross-class edge {state}->{target} misses the entry state"
                    );
                    let expected: &[usize] = if from == 1 {
                        &[2]
                    } else if from == k {
                        &[k - 1]
                    } else {
                        &[from - 1, from + 1]
                    };
                    assert!(
                        expected.contains(&to),
                        "class {from} may not jump to class {to}"
                    );
                }
            }
        }
    }

    #[test]
    fn initial_state_is_the_middle_entry() {
        let (m4, l4) = build_estimator(4, 0.1).unwrap();
        assert_eq!(m4.initial(), l4.entry()[1]); // ⌈4/2⌉ = class 2
        let (m5, l5) = build_estimator(5, 0.1).unwrap();
        assert_eq!(m5.initial(), l5.entry()[2]); // ⌈5/2⌉ = class 3
    }

    #[test]
    fn budget_matches_hand_evaluation() {
        // K=10, ε=0.01: 6·144·log₂(543.656…) ≈ 7851.0.
        let b = state_budget(10, 0.01).unwrap();
        assert!((b.bound - 7851.0).abs() < 1.0, "bound = {}", b.bound);
        assert_eq!(b.physical_s, b.sum_nk - 20);
        // K=4, ε=0.1: 216·log₂(54.366…) ≈ 1245.2.
        let b = state_budget(4, 0.1).unwrap();
        assert!((b.bound - 1245.2).abs() < 0.5, "bound = {}", b.bound);
        assert!(b.within_bound);
    }

    #[test]
    fn budget_sums_match_independent_evaluation() {
        // Frozen from an independent evaluation of the two sizing formulas.
        assert_eq!(state_budget(2, 0.1).unwrap().sum_nk, 358);
        assert_eq!(state_budget(4, 0.1).unwrap().sum_nk, 1050);
        assert_eq!(state_budget(4, 0.01).unwrap().sum_nk, 1530);
        assert_eq!(state_budget(10, 0.01).unwrap().sum_nk, 7564);
        assert!(state_budget(10, 0.01).unwrap().within_bound);
        // Known overshoot: at (K=10, ε=0.1) the per-block sizing sums to
        // 5174, above the analytical budget 4980.6; the flag reports it.
        let b = state_budget(10, 0.1).unwrap();
        assert_eq!(b.sum_nk, 5174);
        assert!(!b.within_bound);
    }

    #[test]
    fn budget_bound_monotone_in_k() {
        let mut last = 0.0;
        for k in 2..=12 {
            let b = state_budget(k, 0.05).unwrap();
            assert!(b.bound > last);
            last = b.bound;
        }
    }

    #[test]
    fn choose_k_is_exact_at_budget_boundaries() {
        let b10 = state_budget(10, 0.01).unwrap().sum_nk;
        assert_eq!(choose_k(b10, 0.01).unwrap(), 10);
        assert_eq!(choose_k(b10 - 1, 0.01).unwrap(), 9);
        let minimum = state_budget(2, 0.01).unwrap().sum_nk;
        match choose_k(minimum - 1, 0.01) {
            Err(BuildError::StateCapTooSmall { minimum: m, .. }) => {
                assert_eq!(m, minimum)
            }
            other => panic!("expected StateCapTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn choose_k_monotone_in_cap() {
        let mut last = 0;
        for cap in [400, 800, 1600, 3200, 6400] {
            let k = choose_k(cap, 0.1).unwrap();
            assert!(k >= last);
            last = k;
        }
    }

    #[test]
    fn document_round_trip_recovers_the_layout() {
        let (machine, layout) = build_estimator(3, 0.1).unwrap();
        let doc = layout.to_document(&machine);
        let bytes = doc.to_json_bytes();
        let reloaded = MachineDocument::from_json_bytes(&bytes).unwrap();
        let recovered = ComposedLayout::from_document(&reloaded).unwrap();
        assert_eq!(recovered, layout);
    }

    #[test]
    fn from_document_rejects_tampered_annotations() {
        let (machine, layout) = build_estimator(3, 0.1).unwrap();
        let mut doc = layout.to_document(&machine);
        doc.class_map.as_mut().unwrap()[0] = 2;
        assert!(matches!(
            ComposedLayout::from_document(&doc),
            Err(BuildError::Mismatch { .. })
        ));
        let doc = MachineDocument {
            machine: machine.clone(),
            class_map: Some(layout.class_map().to_vec()),
            metadata: None,
        };
        assert!(matches!(
            ComposedLayout::from_document(&doc),
            Err(BuildError::MissingAnnotations { what: "metadata" })
        ));
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(matches!(
            build_estimator(1, 0.1),
            Err(BuildError::TooFewClasses { k: 1 })
        ));
        assert!(matches!(
            build_estimator(4, 0.5),
            Err(BuildError::EpsilonOutOfRange { .. })
        ));
        assert!(matches!(
            build_estimator(4, 0.0),
            Err(BuildError::EpsilonOutOfRange { .. })
        ));
    }
}
