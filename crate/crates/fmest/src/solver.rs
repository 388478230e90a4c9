//! Subtraction-free state-elimination solvers for finite Markov chains.
//!
//! Both solvers are variants of Gaussian elimination specialized to
//! stochastic matrices in which **no subtraction ever occurs**: every
//! denominator is a sum of nonnegative off-diagonal masses rather than
//! `1 − p_zz`.  This keeps the computation forward-stable even when the
//! chains are extremely stiff — the composed estimators analyzed by this
//! crate have spectral gaps far below machine precision at some biases, where
//! iterative methods stall on metastable mixtures and naive elimination loses
//! all relative accuracy.  State elimination is exact up to rounding of
//! individual sums and products, independent of conditioning.
//!
//! Elimination order is chosen greedily by minimum fill (in-degree ×
//! out-degree, ties broken by state index), which keeps the run-counting
//! topologies handled here near-linear.  All interfaces are 0-based and
//! crate-internal; the public modules translate to 1-based state labels.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

/// `2ⁿ` as an exact `f64` (zero below the subnormal range, infinite above).
const fn pow2(n: i64) -> f64 {
    if n >= 1024 {
        f64::INFINITY
    } else if n >= -1022 {
        f64::from_bits(((n + 1023) as u64) << 52)
    } else if n >= -1074 {
        f64::from_bits(1u64 << (n + 1074))
    } else {
        0.0
    }
}

const EXT_HI: f64 = pow2(256);
const EXT_LO: f64 = pow2(-256);

/// Nonnegative extended-range number `mantissa · 2^exp2`, with the mantissa
/// normalized into `[2⁻²⁵⁶, 2²⁵⁶)` (or exactly zero).
///
/// Ratios between stationary masses of the chains handled here span far
/// beyond `f64` range, so back-substitution accumulates in this
/// representation.  All scalings are by exact powers of two, so the
/// arithmetic rounds exactly like plain `f64` with an unbounded exponent.
#[derive(Clone, Copy, Debug)]
struct Ext {
    mantissa: f64,
    exp2: i64,
}

const EXT_ZERO: Ext = Ext {
    mantissa: 0.0,
    exp2: 0,
};

impl Ext {
    fn from_f64(x: f64) -> Ext {
        debug_assert!(x >= 0.0 && x.is_finite());
        Ext {
            mantissa: x,
            exp2: 0,
        }
        .normalized()
    }

    fn normalized(mut self) -> Ext {
        if self.mantissa == 0.0 {
            return EXT_ZERO;
        }
        while self.mantissa >= EXT_HI {
            self.mantissa *= EXT_LO;
            self.exp2 += 256;
        }
        while self.mantissa < EXT_LO {
            self.mantissa *= EXT_HI;
            self.exp2 -= 256;
        }
        self
    }

    fn is_zero(self) -> bool {
        self.mantissa == 0.0
    }

    fn mul_f64(self, w: f64) -> Ext {
        let w = Ext::from_f64(w);
        if self.is_zero() || w.is_zero() {
            return EXT_ZERO;
        }
        Ext {
            mantissa: self.mantissa * w.mantissa,
            exp2: self.exp2 + w.exp2,
        }
        .normalized()
    }

    fn div_f64(self, d: f64) -> Ext {
        let d = Ext::from_f64(d);
        debug_assert!(!d.is_zero());
        if self.is_zero() {
            return EXT_ZERO;
        }
        Ext {
            mantissa: self.mantissa / d.mantissa,
            exp2: self.exp2 - d.exp2,
        }
        .normalized()
    }

    fn add(self, other: Ext) -> Ext {
        if self.is_zero() {
            return other;
        }
        if other.is_zero() {
            return self;
        }
        let (hi, lo) = if self.exp2 >= other.exp2 {
            (self, other)
        } else {
            (other, self)
        };
        // `pow2` underflows to zero for very negative shifts, which rounds
        // the vanishing addend away exactly as plain f64 addition would.
        let sum = hi.mantissa + lo.mantissa * pow2(lo.exp2 - hi.exp2);
        Ext {
            mantissa: sum,
            exp2: hi.exp2,
        }
        .normalized()
    }

    /// `self / total` as a plain f64, over- and underflow-safe.
    fn ratio(self, total: Ext) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let mut m = self.mantissa / total.mantissa;
        let mut e = self.exp2 - total.exp2;
        while e >= 256 {
            m *= EXT_HI;
            e -= 256;
            if m.is_infinite() {
                return f64::INFINITY;
            }
        }
        while e <= -256 {
            m *= EXT_LO;
            e += 256;
            if m == 0.0 {
                return 0.0;
            }
        }
        m * pow2(e)
    }
}

/// Failures of the elimination solvers.
#[derive(Debug, Error)]
pub(crate) enum SolveFailure {
    /// A state lost all outgoing probability mass before being eliminated;
    /// the chain (as represented in floating point) is not irreducible.
    #[error("state {state} has no outgoing mass during elimination; chain is not irreducible")]
    Reducible { state: usize },
    /// Overflow or an invalid operation produced a non-finite value.
    #[error("non-finite value during {context}")]
    NonFinite { context: &'static str },
    /// The chain has no states.
    #[error("empty chain")]
    Empty,
}

// ---------------------------------------------------------------------------
// Shared sparse scaffolding
// ---------------------------------------------------------------------------

/// Sparse mutable digraph with in-neighbor sets kept in lockstep with the
/// weighted out-edges.  `BTreeMap`/`BTreeSet` keep iteration deterministic.
struct Graph {
    out: Vec<BTreeMap<usize, f64>>,
    ins: Vec<BTreeSet<usize>>,
}

impl Graph {
    fn new(n: usize) -> Self {
        Graph {
            out: vec![BTreeMap::new(); n],
            ins: vec![BTreeSet::new(); n],
        }
    }

    /// Adds weight to edge `i → j`, merging with any existing mass.
    /// Self-loops are deliberately dropped: eliminating them is equivalent to
    /// the denominators below summing off-diagonal mass only.
    fn add(&mut self, i: usize, j: usize, w: f64) {
        if i == j || w == 0.0 {
            return;
        }
        *self.out[i].entry(j).or_insert(0.0) += w;
        self.ins[j].insert(i);
    }

    fn fill_cost(&self, z: usize) -> u64 {
        (self.ins[z].len() as u64) * (self.out[z].len() as u64)
    }
}

/// Min-fill elimination queue with lazy (re-validated) priorities.
/// A `skip` state, if any, is never yielded — it survives elimination.
struct FillQueue {
    heap: BinaryHeap<Reverse<(u64, usize)>>,
    skip: Option<usize>,
}

impl FillQueue {
    fn new(graph: &Graph, skip: Option<usize>) -> Self {
        let mut heap = BinaryHeap::with_capacity(graph.out.len());
        for z in 0..graph.out.len() {
            if Some(z) != skip {
                heap.push(Reverse((graph.fill_cost(z), z)));
            }
        }
        FillQueue { heap, skip }
    }

    /// Pops the state with the currently smallest fill cost among `alive`
    /// states; stale heap entries are re-pushed with their fresh cost.
    fn pop(&mut self, graph: &Graph, alive: &[bool]) -> Option<usize> {
        while let Some(Reverse((cost, z))) = self.heap.pop() {
            if !alive[z] || Some(z) == self.skip {
                continue;
            }
            let fresh = graph.fill_cost(z);
            if fresh == cost {
                return Some(z);
            }
            self.heap.push(Reverse((fresh, z)));
        }
        None
    }

    fn touch(&mut self, graph: &Graph, z: usize) {
        if Some(z) != self.skip {
            self.heap.push(Reverse((graph.fill_cost(z), z)));
        }
    }
}

// ---------------------------------------------------------------------------
// Stationary distribution
// ---------------------------------------------------------------------------

/// One elimination record for back-substitution: the eliminated state, its
/// off-diagonal outflow at elimination time, and the in-edges it had then.
struct Elimination {
    state: usize,
    denom: f64,
    in_edges: Vec<(usize, f64)>,
}

/// Stationary distribution of an irreducible finite chain by state
/// elimination with back-substitution.
///
/// `rows[i]` lists `(target, probability)` with the row summing to 1
/// (self-loops permitted; they are discarded, which the algorithm absorbs
/// into its denominators).  The result is normalized to sum 1.  Masses whose
/// ratio to the maximum falls below roughly `1e-300` underflow to zero; this
/// is inherent to returning `f64` and harmless to the analyses built on top.
pub(crate) fn stationary(rows: &[Vec<(usize, f64)>]) -> Result<Vec<f64>, SolveFailure> {
    let n = rows.len();
    if n == 0 {
        return Err(SolveFailure::Empty);
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }

    let mut graph = Graph::new(n);
    for (i, row) in rows.iter().enumerate() {
        for &(j, w) in row {
            debug_assert!(j < n && w >= 0.0);
            graph.add(i, j, w);
        }
    }

    let mut queue = FillQueue::new(&graph, None);
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut eliminations: Vec<Elimination> = Vec::with_capacity(n - 1);

    while remaining > 1 {
        let z = queue
            .pop(&graph, &alive)
            .expect("elimination queue exhausted with states remaining");
        let out_z = std::mem::take(&mut graph.out[z]);
        let ins_z = std::mem::take(&mut graph.ins[z]);
        let denom: f64 = out_z.values().sum();
        if denom.is_nan() || denom <= 0.0 {
            return Err(SolveFailure::Reducible { state: z });
        }
        for &j in out_z.keys() {
            graph.ins[j].remove(&z);
        }
        let mut in_edges = Vec::with_capacity(ins_z.len());
        for &i in &ins_z {
            let w_iz = graph.out[i]
                .remove(&z)
                .expect("in-neighbor set out of sync with out-edges");
            for (&j, &w_zj) in &out_z {
                graph.add(i, j, w_iz * (w_zj / denom));
            }
            in_edges.push((i, w_iz));
            queue.touch(&graph, i);
        }
        for &j in out_z.keys() {
            queue.touch(&graph, j);
        }
        eliminations.push(Elimination {
            state: z,
            denom,
            in_edges,
        });
        alive[z] = false;
        remaining -= 1;
    }

    let survivor = alive
        .iter()
        .position(|&a| a)
        .expect("no survivor after elimination");

    // Back-substitution: the unnormalized stationary mass of each eliminated
    // state is the π-weighted inflow it received, divided by its outflow.
    // Mass ratios routinely exceed f64 range, hence the extended
    // representation; the final normalized values underflow to zero honestly.
    let mut value = vec![EXT_ZERO; n];
    value[survivor] = Ext::from_f64(1.0);
    for elim in eliminations.iter().rev() {
        let mut v = EXT_ZERO;
        for &(i, w_iz) in &elim.in_edges {
            v = v.add(value[i].mul_f64(w_iz));
        }
        value[elim.state] = v.div_f64(elim.denom);
    }

    let mut total = EXT_ZERO;
    for v in &value {
        total = total.add(*v);
    }
    if total.is_zero() || total.mantissa.is_nan() {
        return Err(SolveFailure::NonFinite {
            context: "stationary normalization",
        });
    }
    Ok(value.iter().map(|v| v.ratio(total)).collect())
}

// ---------------------------------------------------------------------------
// Absorbing chains
// ---------------------------------------------------------------------------

/// Transition target of an absorbing-chain row: another interior state or
/// one of the two exits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AbsorbTarget {
    Interior(usize),
    Left,
    Right,
}

/// Exit probabilities and expected absorption time from a designated start
/// state.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AbsorbingOutcome {
    pub exit_left: f64,
    pub exit_right: f64,
    pub expected_time: f64,
}

/// Solves a two-exit absorbing chain from `start` by eliminating every other
/// interior state.
///
/// `rows[i]` lists `(target, probability)` with the row summing to 1.  Each
/// state carries three accumulators — mass handed to the left exit, mass
/// handed to the right exit, and expected time spent — updated with the same
/// subtraction-free schema as [`stationary`].  After full elimination the
/// start state's accumulators read off the hit probabilities (normalized so
/// they sum to 1 exactly) and the expected decision time.
pub(crate) fn absorb_from(
    rows: &[Vec<(AbsorbTarget, f64)>],
    start: usize,
) -> Result<AbsorbingOutcome, SolveFailure> {
    let n = rows.len();
    if n == 0 {
        return Err(SolveFailure::Empty);
    }
    let mut graph = Graph::new(n);
    let mut a_left = vec![0.0f64; n];
    let mut a_right = vec![0.0f64; n];
    let mut time = vec![1.0f64; n];
    for (i, row) in rows.iter().enumerate() {
        for &(t, w) in row {
            match t {
                AbsorbTarget::Interior(j) => {
                    debug_assert!(j < n);
                    graph.add(i, j, w);
                }
                AbsorbTarget::Left => a_left[i] += w,
                AbsorbTarget::Right => a_right[i] += w,
            }
        }
    }

    let mut queue = FillQueue::new(&graph, Some(start));
    let mut alive = vec![true; n];
    let mut remaining = n;

    while remaining > 1 {
        let z = queue
            .pop(&graph, &alive)
            .expect("elimination queue exhausted with states remaining");
        debug_assert_ne!(z, start);
        let out_z = std::mem::take(&mut graph.out[z]);
        let ins_z = std::mem::take(&mut graph.ins[z]);
        let denom: f64 = out_z.values().sum::<f64>() + a_left[z] + a_right[z];
        if denom.is_nan() || denom <= 0.0 {
            return Err(SolveFailure::Reducible { state: z });
        }
        for &j in out_z.keys() {
            graph.ins[j].remove(&z);
        }
        let (al_z, ar_z, t_z) = (a_left[z] / denom, a_right[z] / denom, time[z] / denom);
        for &i in &ins_z {
            let w_iz = graph.out[i]
                .remove(&z)
                .expect("in-neighbor set out of sync with out-edges");
            a_left[i] += w_iz * al_z;
            a_right[i] += w_iz * ar_z;
            time[i] += w_iz * t_z;
            for (&j, &w_zj) in &out_z {
                graph.add(i, j, w_iz * (w_zj / denom));
            }
            queue.touch(&graph, i);
        }
        for &j in out_z.keys() {
            queue.touch(&graph, j);
        }
        alive[z] = false;
        remaining -= 1;
    }

    debug_assert!(graph.out[start].is_empty());
    let denom = a_left[start] + a_right[start];
    if denom.is_nan() || denom <= 0.0 {
        return Err(SolveFailure::Reducible { state: start });
    }
    let outcome = AbsorbingOutcome {
        exit_left: a_left[start] / denom,
        exit_right: a_right[start] / denom,
        expected_time: time[start] / denom,
    };
    if !outcome.expected_time.is_finite() {
        return Err(SolveFailure::NonFinite {
            context: "expected absorption time",
        });
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
