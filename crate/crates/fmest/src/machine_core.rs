//! Deterministic finite-state estimation machines.
//!
//! A [`Machine`] is a complete description of a deterministic `S`-state
//! estimator: two transition tables (one per input bit), a per-state estimate
//! in `[0,1]`, and an initial state.  Run on a Bernoulli(θ) input stream the
//! machine induces a Markov chain over its states; [`transition_matrix`]
//! materializes that chain as a sparse row-stochastic matrix with at most two
//! nonzeros per row.
//!
//! Conventions:
//!
//! - States are indexed `1..=S` everywhere in the public interface and in the
//!   on-disk format.  (Vectors are stored 0-based internally; the shift is
//!   confined to this module's accessors.)
//! - Input bits are `0` and `1`, passed as `u8`.
//! - θ is restricted to the open interval `(0,1)` when building transition
//!   matrices: at the endpoints the chain is not ergodic, and the analysis
//!   layer handles those separately via deterministic orbits
//!   (`chain_analysis::endpoint_orbit_risk`).
//!
//! # File format
//!
//! Machines are exchanged as versioned JSON documents (see
//! [`MachineDocument`]): fields `version` (currently `1`), `num_states`,
//! `initial`, `next0`, `next1`, `estimate`, an optional `class_map` (class
//! label per state, present for composed machines), and an optional
//! `metadata` block `{K, epsilon, mini_params}` recording the construction
//! parameters.  All arrays are written in state order and use 1-based
//! indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current version of the machine file format.
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Structural and domain errors for machine construction and execution.
#[derive(Debug, Error)]
pub enum MachineError {
    /// A machine must have at least one state.
    #[error("machine must have at least one state")]
    NoStates,
    /// A transition-table or query state index fell outside `1..=S`.
    #[error("state index {index} out of range 1..={num_states}")]
    StateOutOfRange { index: usize, num_states: usize },
    /// An input bit other than 0 or 1.
    #[error("input bit must be 0 or 1, got {bit}")]
    InvalidBit { bit: u8 },
    /// An estimate fell outside `[0,1]` (or was not finite).
    #[error("estimate[{index}] = {value} outside [0,1]")]
    EstimateOutOfRange { index: usize, value: f64 },
    /// A table length disagreed with `num_states`.
    #[error("{table} has length {found}, expected {expected}")]
    TableLength {
        table: &'static str,
        found: usize,
        expected: usize,
    },
    /// θ outside the open unit interval.
    #[error("theta must lie strictly inside (0,1), got {theta}")]
    ThetaOutOfRange { theta: f64 },
}

/// Errors raised while reading a machine document.
#[derive(Debug, Error)]
pub enum ParseError {
    /// The byte stream is not a well-formed document.
    #[error("malformed machine document: {0}")]
    Malformed(#[from] serde_json::Error),
    /// Unknown format version.
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    /// A field failed validation; the message names the offending field.
    #[error("invalid field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: String) -> ParseError {
    ParseError::Field {
        field: field.to_string(),
        message,
    }
}

// ---------------------------------------------------------------------------
// Machine
// ---------------------------------------------------------------------------

/// A deterministic `S`-state estimation machine.
///
/// Invariants (enforced by [`Machine::new`] and by deserialization):
/// every transition target is a valid state index in `1..=S`, every estimate
/// lies in `[0,1]`, and the initial state is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct Machine {
    num_states: usize,
    next0: Vec<usize>,
    next1: Vec<usize>,
    estimate: Vec<f64>,
    initial: usize,
}

impl Machine {
    /// Builds a machine from its tables, checking all structural invariants.
    ///
    /// `next0[i]` / `next1[i]` give the successor (1-based) of state `i+1` on
    /// input bit 0 / 1; `estimate[i]` is the estimate attached to state
    /// `i+1`.
    pub fn new(
        num_states: usize,
        next0: Vec<usize>,
        next1: Vec<usize>,
        estimate: Vec<f64>,
        initial: usize,
    ) -> Result<Self, MachineError> {
        if num_states == 0 {
            return Err(MachineError::NoStates);
        }
        for (table, v) in [("next0", &next0), ("next1", &next1)] {
            if v.len() != num_states {
                return Err(MachineError::TableLength {
                    table,
                    found: v.len(),
                    expected: num_states,
                });
            }
            for &t in v.iter() {
                if t < 1 || t > num_states {
                    return Err(MachineError::StateOutOfRange {
                        index: t,
                        num_states,
                    });
                }
            }
        }
        if estimate.len() != num_states {
            return Err(MachineError::TableLength {
                table: "estimate",
                found: estimate.len(),
                expected: num_states,
            });
        }
        for (i, &e) in estimate.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return Err(MachineError::EstimateOutOfRange {
                    index: i + 1,
                    value: e,
                });
            }
        }
        if initial < 1 || initial > num_states {
            return Err(MachineError::StateOutOfRange {
                index: initial,
                num_states,
            });
        }
        Ok(Machine {
            num_states,
            next0,
            next1,
            estimate,
            initial,
        })
    }

    /// Number of states `S`.
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Initial state (1-based).
    pub fn initial(&self) -> usize {
        self.initial
    }

    /// Successor of `state` on input bit 0.
    pub fn next0(&self, state: usize) -> Result<usize, MachineError> {
        self.check_state(state)?;
        Ok(self.next0[state - 1])
    }

    /// Successor of `state` on input bit 1.
    pub fn next1(&self, state: usize) -> Result<usize, MachineError> {
        self.check_state(state)?;
        Ok(self.next1[state - 1])
    }

    /// Estimate attached to `state`.
    pub fn estimate(&self, state: usize) -> Result<f64, MachineError> {
        self.check_state(state)?;
        Ok(self.estimate[state - 1])
    }

    /// Full bit-0 transition table (entry `i` is the successor of state
    /// `i+1`; values are 1-based).
    pub fn next0_table(&self) -> &[usize] {
        &self.next0
    }

    /// Full bit-1 transition table.
    pub fn next1_table(&self) -> &[usize] {
        &self.next1
    }

    /// Full estimate table (entry `i` belongs to state `i+1`).
    pub fn estimate_table(&self) -> &[f64] {
        &self.estimate
    }

    fn check_state(&self, state: usize) -> Result<(), MachineError> {
        if state < 1 || state > self.num_states {
            return Err(MachineError::StateOutOfRange {
                index: state,
                num_states: self.num_states,
            });
        }
        Ok(())
    }

    /// One step of the machine map: the successor of `state` on `bit`.
    pub fn step(&self, state: usize, bit: u8) -> Result<usize, MachineError> {
        self.check_state(state)?;
        match bit {
            0 => Ok(self.next0[state - 1]),
            1 => Ok(self.next1[state - 1]),
            other => Err(MachineError::InvalidBit { bit: other }),
        }
    }

    /// Runs the machine from its initial state over `bits`, returning the
    /// state trajectory.  `trajectory[n]` is the state after consuming
    /// `bits[n]`; an empty input yields an empty trajectory.
    pub fn run(&self, bits: &[u8]) -> Result<Vec<usize>, MachineError> {
        let mut trajectory = Vec::with_capacity(bits.len());
        let mut state = self.initial;
        for &b in bits {
            state = self.step(state, b)?;
            trajectory.push(state);
        }
        Ok(trajectory)
    }

    /// Graph diagnostics: strong connectivity and reachability.
    ///
    /// `structural_ok` re-checks the index-range invariants (always true for
    /// a machine built through [`Machine::new`], reported rather than assumed
    /// so that diagnostics remain meaningful if construction paths change).
    /// `strongly_connected` holds iff the directed graph with edges
    /// `i → next0[i]`, `i → next1[i]` is a single strongly connected
    /// component — the ergodicity precondition of the steady-state analysis.
    pub fn validate(&self) -> Diagnostics {
        let structural_ok = self
            .next0
            .iter()
            .chain(self.next1.iter())
            .all(|&t| (1..=self.num_states).contains(&t))
            && self.estimate.iter().all(|&e| (0.0..=1.0).contains(&e))
            && (1..=self.num_states).contains(&self.initial);

        let forward_from = |start: usize, reverse: bool| -> Vec<bool> {
            // Iterative BFS on either the machine graph or its transpose.
            let n = self.num_states;
            let mut seen = vec![false; n];
            let (mut queue, mut head) = (vec![start], 0usize);
            seen[start - 1] = true;
            // Transpose adjacency is materialized on demand.
            let rev_adj: Vec<Vec<usize>> = if reverse {
                let mut adj = vec![Vec::new(); n];
                for i in 1..=n {
                    adj[self.next0[i - 1] - 1].push(i);
                    adj[self.next1[i - 1] - 1].push(i);
                }
                adj
            } else {
                Vec::new()
            };
            while head < queue.len() {
                let u = queue[head];
                head += 1;
                let push = |v: usize, seen: &mut Vec<bool>, queue: &mut Vec<usize>| {
                    if !seen[v - 1] {
                        seen[v - 1] = true;
                        queue.push(v);
                    }
                };
                if reverse {
                    for &v in &rev_adj[u - 1] {
                        push(v, &mut seen, &mut queue);
                    }
                } else {
                    push(self.next0[u - 1], &mut seen, &mut queue);
                    push(self.next1[u - 1], &mut seen, &mut queue);
                }
            }
            seen
        };

        let fwd = forward_from(1, false);
        let bwd = forward_from(1, true);
        let strongly_connected =
            fwd.iter().all(|&r| r) && bwd.iter().all(|&r| r);
        let reachable_from_initial = forward_from(self.initial, false)
            .iter()
            .all(|&r| r);

        Diagnostics {
            structural_ok,
            strongly_connected,
            reachable_from_initial,
        }
    }

    /// Serializes the bare machine (no class map, no metadata) to the
    /// versioned JSON document format.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        MachineDocument {
            machine: self.clone(),
            class_map: None,
            metadata: None,
        }
        .to_json_bytes()
    }

    /// Reads a machine from a document, discarding any class map or
    /// metadata.  See [`MachineDocument::from_json_bytes`].
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        Ok(MachineDocument::from_json_bytes(bytes)?.machine)
    }
}

/// Result of [`Machine::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Diagnostics {
    /// Index ranges and estimate ranges hold.
    pub structural_ok: bool,
    /// The transition graph is one strongly connected component.
    pub strongly_connected: bool,
    /// Every state is reachable from the initial state.
    pub reachable_from_initial: bool,
}

// ---------------------------------------------------------------------------
// Transition matrix
// ---------------------------------------------------------------------------

/// Sparse row-stochastic transition matrix of the chain induced by a
/// Bernoulli(θ) input stream: row `i` has mass `1−θ` on `next0[i]` and `θ` on
/// `next1[i]`, merged into a single unit entry when the two targets agree.
#[derive(Clone, Debug)]
pub struct TransitionMatrix {
    dimension: usize,
    theta: f64,
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionMatrix {
    /// Matrix dimension `S`.
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// The input bias θ the matrix was built for.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Entries of one row: `(target_state, probability)` pairs, 1-based, at
    /// most two of them, summing to 1.
    pub fn row(&self, state: usize) -> &[(usize, f64)] {
        &self.rows[state - 1]
    }
}

/// Builds the θ-parameterized transition matrix of `m`.
///
/// θ must lie strictly inside `(0,1)`; the chain is not ergodic at the
/// endpoints, whose risk is analyzed by deterministic orbits instead.
pub fn transition_matrix(m: &Machine, theta: f64) -> Result<TransitionMatrix, MachineError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(MachineError::ThetaOutOfRange { theta });
    }
    let rows = (1..=m.num_states)
        .map(|i| {
            let (t0, t1) = (m.next0[i - 1], m.next1[i - 1]);
            if t0 == t1 {
                vec![(t0, 1.0)]
            } else {
                vec![(t0, 1.0 - theta), (t1, theta)]
            }
        })
        .collect();
    Ok(TransitionMatrix {
        dimension: m.num_states,
        theta,
        rows,
    })
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Construction parameters of one hypothesis-testing block, as recorded in a
/// composed machine's metadata: nominal state count `n`, entry state `s`
/// (both in the block's own 1..=n labeling), and the hypothesis thresholds
/// `q < p` the block discriminates between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniChainParams {
    pub n: usize,
    pub s: usize,
    pub p: f64,
    pub q: f64,
}

/// Metadata block written by the composed-estimator builder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildMetadata {
    /// Number of classes.
    #[serde(rename = "K")]
    pub k: usize,
    /// Drift parameter ε used for the per-class error probabilities.
    pub epsilon: f64,
    /// Per-class block parameters, in class order `1..=K`.
    pub mini_params: Vec<MiniChainParams>,
}

/// A machine plus the optional composition annotations carried by the file
/// format: a class label per state and the construction metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineDocument {
    pub machine: Machine,
    /// Class label (1-based) of every state, present for composed machines.
    pub class_map: Option<Vec<usize>>,
    pub metadata: Option<BuildMetadata>,
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    version: u32,
    num_states: usize,
    initial: usize,
    next0: Vec<usize>,
    next1: Vec<usize>,
    estimate: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_map: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<BuildMetadata>,
}

impl MachineDocument {
    /// Serializes to the versioned JSON document format (pretty-printed,
    /// trailing newline).  Round-trips all fields exactly: floats are written
    /// in shortest form that parses back to the identical `f64`.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let raw = RawDocument {
            version: FORMAT_VERSION,
            num_states: self.machine.num_states,
            initial: self.machine.initial,
            next0: self.machine.next0.clone(),
            next1: self.machine.next1.clone(),
            estimate: self.machine.estimate.clone(),
            class_map: self.class_map.clone(),
            metadata: self.metadata.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&raw).expect("document serialization");
        bytes.push(b'\n');
        bytes
    }

    /// Parses and validates a machine document.
    ///
    /// Validation failures name the offending field: out-of-range transition
    /// targets, estimates outside `[0,1]`, length mismatches, bad initial
    /// state, bad class labels.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        let raw: RawDocument = serde_json::from_slice(bytes)?;
        if raw.version != FORMAT_VERSION {
            return Err(ParseError::UnsupportedVersion { found: raw.version });
        }
        let s = raw.num_states;
        if s == 0 {
            return Err(field_err("num_states", "must be positive".into()));
        }
        for (name, table) in [("next0", &raw.next0), ("next1", &raw.next1)] {
            if table.len() != s {
                return Err(field_err(
                    name,
                    format!("length {} does not match num_states {s}", table.len()),
                ));
            }
            if let Some((i, &t)) = table
                .iter()
                .enumerate()
                .find(|&(_, &t)| t < 1 || t > s)
            {
                return Err(field_err(
                    name,
                    format!("entry {} (state {}) out of range 1..={s}", t, i + 1),
                ));
            }
        }
        if raw.estimate.len() != s {
            return Err(field_err(
                "estimate",
                format!("length {} does not match num_states {s}", raw.estimate.len()),
            ));
        }
        if let Some((i, &e)) = raw
            .estimate
            .iter()
            .enumerate()
            .find(|&(_, &e)| !(0.0..=1.0).contains(&e))
        {
            return Err(field_err(
                "estimate",
                format!("entry {e} (state {}) outside [0,1]", i + 1),
            ));
        }
        if raw.initial < 1 || raw.initial > s {
            return Err(field_err(
                "initial",
                format!("state {} out of range 1..={s}", raw.initial),
            ));
        }
        if let Some(cm) = &raw.class_map {
            if cm.len() != s {
                return Err(field_err(
                    "class_map",
                    format!("length {} does not match num_states {s}", cm.len()),
                ));
            }
            if let Some((i, &c)) = cm.iter().enumerate().find(|&(_, &c)| c < 1) {
                return Err(field_err(
                    "class_map",
                    format!("label {c} (state {}) must be ≥ 1", i + 1),
                ));
            }
            if let Some(meta) = &raw.metadata {
                if cm.iter().any(|&c| c > meta.k) {
                    return Err(field_err(
                        "class_map",
                        format!("labels exceed metadata.K = {}", meta.k),
                    ));
                }
            }
        }
        if let Some(meta) = &raw.metadata {
            if meta.mini_params.len() != meta.k {
                return Err(field_err(
                    "metadata.mini_params",
                    format!("length {} does not match K = {}", meta.mini_params.len(), meta.k),
                ));
            }
        }
        let machine = Machine::new(s, raw.next0, raw.next1, raw.estimate, raw.initial)
            .map_err(|e| field_err("machine", e.to_string()))?;
        Ok(MachineDocument {
            machine,
            class_map: raw.class_map,
            metadata: raw.metadata,
        })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
