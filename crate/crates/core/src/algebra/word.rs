//! Free-product words and their normal forms.
//!
//! A word is a sequence of letters `(factor index, factor element)`. The
//! normal form has no identity letters and no two consecutive letters in
//! the same factor; it is the canonical representative of a group element,
//! so equality of elements is syntactic equality of normal forms.

use num::BigInt;

use super::factor::Universe;
use crate::{Error, Result};

/// One syllable: an element of a single factor.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorElem {
    Finite(usize),
    Abelian(Vec<BigInt>),
}

pub type Letter = (usize, FactorElem);

/// A reduced free-product word. Always in normal form after construction.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NormalForm {
    letters: Vec<Letter>,
}

impl NormalForm {
    pub fn identity() -> NormalForm {
        NormalForm { letters: vec![] }
    }

    /// Reduce an arbitrary letter sequence to normal form. Errors on
    /// malformed letters (bad factor index or element shape).
    pub fn from_letters(u: &Universe, letters: Vec<Letter>) -> Result<NormalForm> {
        for (i, e) in &letters {
            if !u.elem_is_valid(*i, e) {
                return Err(if *i >= u.num_factors() {
                    Error::BadFactorIndex(*i, u.num_factors())
                } else {
                    Error::BadElement(*i)
                });
            }
        }
        // Stack-based reduction: the tail of `out` is always in normal form,
        // so merging each incoming letter against the dynamic tail suffices.
        let mut out: Vec<Letter> = Vec::with_capacity(letters.len());
        for (i, e) in letters {
            if u.elem_is_identity(i, &e) {
                continue;
            }
            match out.last() {
                Some((j, _)) if *j == i => {
                    let (_, prev) = out.pop().expect("nonempty");
                    let merged = u.elem_mul(i, &prev, &e);
                    if !u.elem_is_identity(i, &merged) {
                        out.push((i, merged));
                    }
                }
                _ => out.push((i, e)),
            }
        }
        Ok(NormalForm { letters: out })
    }

    pub fn single(u: &Universe, i: usize, e: FactorElem) -> Result<NormalForm> {
        NormalForm::from_letters(u, vec![(i, e)])
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn is_identity(&self) -> bool {
        self.letters.is_empty()
    }

    /// Number of syllables.
    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn mul(&self, u: &Universe, other: &NormalForm) -> NormalForm {
        let mut letters = self.letters.clone();
        letters.extend(other.letters.iter().cloned());
        NormalForm::from_letters(u, letters).expect("valid inputs stay valid")
    }

    pub fn inverse(&self, u: &Universe) -> NormalForm {
        let letters = self
            .letters
            .iter()
            .rev()
            .map(|(i, e)| (*i, u.elem_inv(*i, e)))
            .collect();
        NormalForm::from_letters(u, letters).expect("valid inputs stay valid")
    }

    /// `g * self * g^{-1}`.
    pub fn conjugate_by(&self, u: &Universe, g: &NormalForm) -> NormalForm {
        g.mul(u, self).mul(u, &g.inverse(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::FactorSpec;
    use num::Zero;

    fn z2_z3_z() -> Universe {
        Universe::new(&[
            FactorSpec::FiniteCyclic { n: 2 },
            FactorSpec::FiniteCyclic { n: 3 },
            FactorSpec::FreeAbelian { k: 1 },
        ])
        .unwrap()
    }

    fn fin(i: usize, x: usize) -> Letter {
        (i, FactorElem::Finite(x))
    }

    fn ab(i: usize, v: &[i64]) -> Letter {
        (i, FactorElem::Abelian(v.iter().map(|&x| BigInt::from(x)).collect()))
    }

    #[test]
    fn order_two_squares_to_identity() {
        let u = z2_z3_z();
        let w = NormalForm::from_letters(&u, vec![fin(0, 1), fin(0, 1)]).unwrap();
        assert!(w.is_identity());
    }

    #[test]
    fn abelian_letters_add_componentwise() {
        let u = Universe::new(&[FactorSpec::FreeAbelian { k: 2 }]).unwrap();
        let w = NormalForm::from_letters(&u, vec![ab(0, &[1, 2]), ab(0, &[3, -2])]).unwrap();
        assert_eq!(w.letters(), &[ab(0, &[4, 0])]);
    }

    #[test]
    fn cancellation_across_gap() {
        // a z z^{-1} a = a a = ε with a of order 2, z in Z^2.
        let u = Universe::new(&[
            FactorSpec::FiniteCyclic { n: 2 },
            FactorSpec::FreeAbelian { k: 2 },
        ])
        .unwrap();
        let w = NormalForm::from_letters(
            &u,
            vec![fin(0, 1), ab(1, &[5, -3]), ab(1, &[-5, 3]), fin(0, 1)],
        )
        .unwrap();
        assert!(w.is_identity());
    }

    #[test]
    fn reduce_is_idempotent_and_inverse_cancels() {
        let u = z2_z3_z();
        let w = NormalForm::from_letters(&u, vec![fin(0, 1), fin(1, 2), ab(2, &[4]), fin(1, 1)])
            .unwrap();
        let again = NormalForm::from_letters(&u, w.letters().to_vec()).unwrap();
        assert_eq!(w, again);
        assert!(w.mul(&u, &w.inverse(&u)).is_identity());
    }

    #[test]
    fn projection_is_defining_map() {
        let u = z2_z3_z();
        // a · b · z · a  ↦  (0, 1) in Z2 × Z3.
        let w = NormalForm::from_letters(&u, vec![fin(0, 1), fin(1, 1), ab(2, &[7]), fin(0, 1)])
            .unwrap();
        assert_eq!(u.project_to_q(&w).0, vec![0, 1]);
        // All-Z^k words are in the kernel.
        let z = NormalForm::from_letters(&u, vec![ab(2, &[3])]).unwrap();
        assert_eq!(u.project_to_q(&z), u.q_identity());
        let a = NormalForm::from_letters(&u, vec![fin(0, 1)]).unwrap();
        assert_eq!(u.project_to_q(&a).0, vec![1, 0]);
    }

    #[test]
    fn projection_is_homomorphism_on_samples() {
        use rand::{Rng, SeedableRng};
        let u = z2_z3_z();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let random_word = |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = rng.gen_range(0..6);
            let letters: Vec<Letter> = (0..n)
                .map(|_| match rng.gen_range(0..3) {
                    0 => fin(0, rng.gen_range(0..2)),
                    1 => fin(1, rng.gen_range(0..3)),
                    _ => ab(2, &[rng.gen_range(-4..=4)]),
                })
                .collect();
            NormalForm::from_letters(&u, letters).unwrap()
        };
        for _ in 0..1000 {
            let v = random_word(&mut rng);
            let w = random_word(&mut rng);
            let lhs = u.project_to_q(&v.mul(&u, &w));
            let rhs = u.q_mul(&u.project_to_q(&v), &u.project_to_q(&w));
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn section_is_a_section() {
        let u = z2_z3_z();
        for a in 0..2 {
            for b in 0..3 {
                let q = crate::algebra::QElem(vec![a, b]);
                let t = u.section(&q);
                assert_eq!(u.project_to_q(&t), q);
            }
        }
        assert!(u.section(&u.q_identity()).is_identity());
        let _ = BigInt::zero();
    }
}
