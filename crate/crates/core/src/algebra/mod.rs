//! Exact arithmetic for factor groups and free-product words.
//!
//! A *universe* is an ordered free product of factors, each of which is
//! either a finite group (given by its multiplication table) or a free
//! abelian group `Z^k`. Subgroups of abelian factors are integer lattices
//! kept in canonical Hermite normal form; elements of the universe are
//! alternating-syllable words in free-product normal form.
//!
//! Everything here is immutable after construction and purely functional;
//! all arithmetic is exact (big integers, big rationals).

mod factor;
mod lattice;
mod word;

pub use factor::{Factor, FactorSpec, FiniteTable, QElem, Universe};
pub use lattice::{hnf, hnf_with_transform, Lattice, LatticeIndex};
pub use word::{FactorElem, Letter, NormalForm};
