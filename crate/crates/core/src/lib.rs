//! Exact subgroup calculus in free groups, free products of finite and
//! free-abelian groups, and their finite-index overgroups.
//!
//! The crate computes reduced ranks, reduced Kurosh ranks, virtual and total
//! virtual reduced Kurosh ranks, subgroup intersections with double-coset
//! witnesses, and verifies the strengthened Hanna Neumann inequality together
//! with its free-product and virtually-free analogues. All arithmetic is
//! exact: arbitrary-precision integers and rationals, no floating point.
//!
//! Module map:
//!
//! - [`algebra`] — factor groups (finite tables, integer lattices in Hermite
//!   normal form) and free-product words over a universe.
//! - [`stallings`] — classic folded core automata for subgroups of free
//!   groups; the independent oracle path for all free-group computations.
//! - [`kurosh`] — generalized core automata for subgroups of a free product,
//!   with coset-labeled edges and vertex groups.
//! - [`overgroup`] — finite-index machinery: the kernel of the projection
//!   onto the finite part, subgroup handles, virtual and total ranks,
//!   intersections and double cosets in the overgroup.
//! - [`forest`] — executable sandbox for the proof machinery: orbit counting
//!   for free actions, a computable left order on free groups, induced
//!   actions on forests, and important-edge search on Bass–Serre trees.
//! - [`harness`] — instance formats, seeded generation, verification
//!   drivers, machine-readable reports.

pub mod algebra;
pub mod forest;
pub mod harness;
pub mod kurosh;
pub mod overgroup;
pub mod stallings;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ambient dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("not a valid group table: {0}")]
    BadGroupTable(String),
    #[error("invalid letter: {0}")]
    BadLetter(String),
    #[error("factor index {0} out of range (universe has {1} factors)")]
    BadFactorIndex(usize, usize),
    #[error("element not valid in factor {0}")]
    BadElement(usize),
    #[error("sublattice is not contained in the superlattice")]
    NotASublattice,
    #[error("operation requires a finite factor")]
    NotFinite,
    #[error("operation requires a folded automaton")]
    NotFolded,
    #[error("ambient free ranks differ: {0} vs {1}")]
    RankMismatch(usize, usize),
    #[error("subgroups live over different universes")]
    UniverseMismatch,
    #[error("quotient images do not define a group action: {0}")]
    BadQuotientData(String),
    #[error("action is not free: {0}")]
    NotFree(String),
    #[error("subset is not invariant under the subgroup")]
    NotInvariant,
    #[error("subgroup has infinite index")]
    InfiniteIndex,
    #[error("instance does not match verification kind: {0}")]
    KindMismatch(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
