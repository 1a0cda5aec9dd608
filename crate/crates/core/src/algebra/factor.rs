//! Factor groups of a universe: finite groups given by multiplication
//! tables, and free abelian groups `Z^k`. The universe also carries the
//! derived finite quotient `Q` (direct product of the finite factors) and
//! the retraction onto it.

use std::collections::BTreeSet;

use num::{BigInt, Zero};
use serde::{Deserialize, Serialize};

use super::word::{FactorElem, NormalForm};
use crate::{Error, Result};

/// File-facing description of one factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorSpec {
    FiniteCyclic { n: usize },
    FiniteTable { table: Vec<Vec<usize>> },
    FreeAbelian { k: usize },
}

/// A finite group as a multiplication table over element indices `0..n`,
/// with `0` the identity. Validated on construction: rows and columns are
/// permutations, the table is associative, and every element is invertible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteTable {
    mul: Vec<Vec<usize>>,
    inv: Vec<usize>,
}

impl FiniteTable {
    pub fn new(mul: Vec<Vec<usize>>) -> Result<FiniteTable> {
        let n = mul.len();
        if n == 0 {
            return Err(Error::BadGroupTable("empty table".into()));
        }
        for row in &mul {
            if row.len() != n || row.iter().any(|&x| x >= n) {
                return Err(Error::BadGroupTable("ragged row or index out of range".into()));
            }
        }
        for i in 0..n {
            if mul[0][i] != i || mul[i][0] != i {
                return Err(Error::BadGroupTable("element 0 is not the identity".into()));
            }
            let row: BTreeSet<usize> = mul[i].iter().copied().collect();
            let col: BTreeSet<usize> = (0..n).map(|j| mul[j][i]).collect();
            if row.len() != n || col.len() != n {
                return Err(Error::BadGroupTable(format!("row/column {i} is not a permutation")));
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if mul[mul[i][j]][k] != mul[i][mul[j][k]] {
                        return Err(Error::BadGroupTable(format!(
                            "associativity fails at ({i},{j},{k})"
                        )));
                    }
                }
            }
        }
        let mut inv = vec![0usize; n];
        for i in 0..n {
            match (0..n).find(|&j| mul[i][j] == 0) {
                Some(j) => inv[i] = j,
                None => return Err(Error::BadGroupTable(format!("{i} has no inverse"))),
            }
        }
        Ok(FiniteTable { mul, inv })
    }

    pub fn cyclic(n: usize) -> FiniteTable {
        let mul = (0..n).map(|i| (0..n).map(|j| (i + j) % n).collect()).collect();
        FiniteTable::new(mul).expect("cyclic table is a group")
    }

    /// Direct product, elements indexed in row-major order (`a * |B| + b`).
    pub fn direct_product(a: &FiniteTable, b: &FiniteTable) -> FiniteTable {
        let (na, nb) = (a.order(), b.order());
        let n = na * nb;
        let mul = (0..n)
            .map(|x| {
                let (xa, xb) = (x / nb, x % nb);
                (0..n)
                    .map(|y| {
                        let (ya, yb) = (y / nb, y % nb);
                        a.mul(xa, ya) * nb + b.mul(xb, yb)
                    })
                    .collect()
            })
            .collect();
        FiniteTable::new(mul).expect("product of groups is a group")
    }

    /// Build a table from permutation generators (the subgroup of the
    /// symmetric group they generate). Elements are indexed in BFS order
    /// from the identity, multiplying on the right by generators in order.
    pub fn from_permutations(degree: usize, gens: &[Vec<usize>]) -> Result<FiniteTable> {
        for g in gens {
            if g.len() != degree {
                return Err(Error::BadQuotientData("permutation degree mismatch".into()));
            }
            let s: BTreeSet<usize> = g.iter().copied().collect();
            if s.len() != degree || g.iter().any(|&x| x >= degree) {
                return Err(Error::BadQuotientData("not a permutation".into()));
            }
        }
        let id: Vec<usize> = (0..degree).collect();
        let compose = |f: &[usize], g: &[usize]| -> Vec<usize> {
            // x -> g(f(x)): apply f first.
            (0..degree).map(|x| g[f[x]]).collect()
        };
        let mut elems = vec![id.clone()];
        let mut index = std::collections::HashMap::new();
        index.insert(id, 0usize);
        let mut queue = 0usize;
        while queue < elems.len() {
            let cur = elems[queue].clone();
            for g in gens {
                let nxt = compose(&cur, g);
                if !index.contains_key(&nxt) {
                    index.insert(nxt.clone(), elems.len());
                    elems.push(nxt);
                }
            }
            queue += 1;
        }
        let n = elems.len();
        let mut mul = vec![vec![0usize; n]; n];
        for i in 0..n {
            for j in 0..n {
                let prod = compose(&elems[i], &elems[j]);
                mul[i][j] = index[&prod];
            }
        }
        FiniteTable::new(mul)
    }

    pub fn order(&self) -> usize {
        self.mul.len()
    }

    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.mul[a][b]
    }

    pub fn inv(&self, a: usize) -> usize {
        self.inv[a]
    }

    pub fn conj(&self, g: usize, x: usize) -> usize {
        self.mul(self.mul(g, x), self.inv(g))
    }

    /// Subgroup generated by `gens`: closed under products and inverses,
    /// contains the identity. Returned sorted.
    pub fn subgroup_closure(&self, gens: &[usize]) -> Vec<usize> {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        seen.insert(0);
        let mut stack: Vec<usize> = gens.to_vec();
        while let Some(g) = stack.pop() {
            if !seen.insert(g) {
                continue;
            }
            stack.push(self.inv(g));
            let snapshot: Vec<usize> = seen.iter().copied().collect();
            for h in snapshot {
                stack.push(self.mul(g, h));
                stack.push(self.mul(h, g));
            }
        }
        // One more saturation pass: closure under products of everything found.
        loop {
            let snapshot: Vec<usize> = seen.iter().copied().collect();
            let before = seen.len();
            for &a in &snapshot {
                for &b in &snapshot {
                    seen.insert(self.mul(a, b));
                }
            }
            if seen.len() == before {
                break;
            }
        }
        seen.into_iter().collect()
    }

    /// All subgroups, as sorted element lists (BFS over generated subgroups).
    pub fn all_subgroups(&self) -> Vec<Vec<usize>> {
        let n = self.order();
        let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
        found.insert(vec![0]);
        let mut frontier: Vec<Vec<usize>> = vec![vec![0]];
        while let Some(sub) = frontier.pop() {
            for g in 1..n {
                if sub.binary_search(&g).is_ok() {
                    continue;
                }
                let mut gens: Vec<usize> = sub.clone();
                gens.push(g);
                let bigger = self.subgroup_closure(&gens);
                if found.insert(bigger.clone()) {
                    frontier.push(bigger);
                }
            }
        }
        found.into_iter().collect()
    }
}

/// A compiled factor of the universe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Factor {
    Finite(FiniteTable),
    FreeAbelian(usize),
}

impl Factor {
    pub fn is_finite(&self) -> bool {
        matches!(self, Factor::Finite(_))
    }
}

/// Element of the finite quotient `Q`, one coordinate per finite factor.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QElem(pub Vec<usize>);

/// The ambient group: an ordered free product of factors, with the derived
/// finite quotient `Q` and the retraction killing the free-abelian factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Universe {
    factors: Vec<Factor>,
    /// Indices (into `factors`) of the finite factors, in order.
    finite: Vec<usize>,
    /// |Q| = product of the finite factor orders.
    q_order: usize,
}

impl Universe {
    pub fn new(specs: &[FactorSpec]) -> Result<Universe> {
        let mut factors = Vec::with_capacity(specs.len());
        for s in specs {
            factors.push(match s {
                FactorSpec::FiniteCyclic { n } => {
                    if *n == 0 {
                        return Err(Error::BadGroupTable("cyclic of order 0".into()));
                    }
                    Factor::Finite(FiniteTable::cyclic(*n))
                }
                FactorSpec::FiniteTable { table } => Factor::Finite(FiniteTable::new(table.clone())?),
                FactorSpec::FreeAbelian { k } => {
                    if *k == 0 {
                        return Err(Error::Malformed("free_abelian factor with k = 0".into()));
                    }
                    Factor::FreeAbelian(*k)
                }
            });
        }
        let finite: Vec<usize> = factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_finite())
            .map(|(i, _)| i)
            .collect();
        let q_order = finite
            .iter()
            .map(|&i| match &factors[i] {
                Factor::Finite(t) => t.order(),
                _ => unreachable!(),
            })
            .product();
        Ok(Universe { factors, finite, q_order })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, i: usize) -> Result<&Factor> {
        self.factors.get(i).ok_or(Error::BadFactorIndex(i, self.factors.len()))
    }

    pub fn finite_table(&self, i: usize) -> Result<&FiniteTable> {
        match self.factor(i)? {
            Factor::Finite(t) => Ok(t),
            Factor::FreeAbelian(_) => Err(Error::NotFinite),
        }
    }

    /// Indices of the finite factors, in factor order.
    pub fn finite_factor_indices(&self) -> &[usize] {
        &self.finite
    }

    /// `n = |Q| = |G : ker π|`; equals 1 iff all factors are free abelian.
    pub fn q_order(&self) -> usize {
        self.q_order
    }

    pub fn is_free_product_of_abelian_only(&self) -> bool {
        self.finite.is_empty()
    }

    /// True when the universe group is a free group (all factors `Z`).
    pub fn is_free(&self) -> bool {
        self.factors.iter().all(|f| matches!(f, Factor::FreeAbelian(1)))
    }

    pub fn q_identity(&self) -> QElem {
        QElem(vec![0; self.finite.len()])
    }

    pub fn q_mul(&self, a: &QElem, b: &QElem) -> QElem {
        QElem(
            self.finite
                .iter()
                .enumerate()
                .map(|(c, &fi)| match &self.factors[fi] {
                    Factor::Finite(t) => t.mul(a.0[c], b.0[c]),
                    _ => unreachable!(),
                })
                .collect(),
        )
    }

    pub fn q_inv(&self, a: &QElem) -> QElem {
        QElem(
            self.finite
                .iter()
                .enumerate()
                .map(|(c, &fi)| match &self.factors[fi] {
                    Factor::Finite(t) => t.inv(a.0[c]),
                    _ => unreachable!(),
                })
                .collect(),
        )
    }

    /// Retraction onto `Q`: multiplies the finite-factor letters in their
    /// coordinates and kills the free-abelian letters. A homomorphism.
    pub fn project_to_q(&self, w: &NormalForm) -> QElem {
        let mut q = self.q_identity();
        for (fi, e) in w.letters() {
            if let FactorElem::Finite(x) = e {
                let coord = self.finite.iter().position(|&f| f == *fi).expect("finite letter");
                let t = match &self.factors[*fi] {
                    Factor::Finite(t) => t,
                    _ => unreachable!(),
                };
                q.0[coord] = t.mul(q.0[coord], *x);
            }
        }
        q
    }

    /// Canonical section `t : Q -> G`: the product of finite-factor letters
    /// realizing `q`, in factor order; `t(1) = ε`.
    pub fn section(&self, q: &QElem) -> NormalForm {
        let letters: Vec<(usize, FactorElem)> = self
            .finite
            .iter()
            .enumerate()
            .filter(|(c, _)| q.0[*c] != 0)
            .map(|(c, &fi)| (fi, FactorElem::Finite(q.0[c])))
            .collect();
        NormalForm::from_letters(self, letters).expect("section letters are valid")
    }

    pub fn identity_elem(&self, i: usize) -> Result<FactorElem> {
        Ok(match self.factor(i)? {
            Factor::Finite(_) => FactorElem::Finite(0),
            Factor::FreeAbelian(k) => FactorElem::Abelian(vec![BigInt::zero(); *k]),
        })
    }

    pub fn elem_is_valid(&self, i: usize, e: &FactorElem) -> bool {
        match (self.factors.get(i), e) {
            (Some(Factor::Finite(t)), FactorElem::Finite(x)) => *x < t.order(),
            (Some(Factor::FreeAbelian(k)), FactorElem::Abelian(v)) => v.len() == *k,
            _ => false,
        }
    }

    pub fn elem_mul(&self, i: usize, a: &FactorElem, b: &FactorElem) -> FactorElem {
        match (&self.factors[i], a, b) {
            (Factor::Finite(t), FactorElem::Finite(x), FactorElem::Finite(y)) => {
                FactorElem::Finite(t.mul(*x, *y))
            }
            (Factor::FreeAbelian(_), FactorElem::Abelian(x), FactorElem::Abelian(y)) => {
                FactorElem::Abelian(x.iter().zip(y).map(|(p, q)| p + q).collect())
            }
            _ => panic!("factor/element mismatch"),
        }
    }

    pub fn elem_inv(&self, i: usize, a: &FactorElem) -> FactorElem {
        match (&self.factors[i], a) {
            (Factor::Finite(t), FactorElem::Finite(x)) => FactorElem::Finite(t.inv(*x)),
            (Factor::FreeAbelian(_), FactorElem::Abelian(x)) => {
                FactorElem::Abelian(x.iter().map(|p| -p).collect())
            }
            _ => panic!("factor/element mismatch"),
        }
    }

    pub fn elem_is_identity(&self, i: usize, a: &FactorElem) -> bool {
        match a {
            FactorElem::Finite(x) => *x == 0,
            FactorElem::Abelian(v) => {
                let _ = i;
                v.iter().all(|x| x.is_zero())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_validation() {
        assert!(FiniteTable::new(vec![vec![0, 1], vec![1, 0]]).is_ok());
        // Identity not at 0.
        assert!(FiniteTable::new(vec![vec![1, 0], vec![0, 1]]).is_err());
        // Not a permutation.
        assert!(FiniteTable::new(vec![vec![0, 0], vec![1, 1]]).is_err());
    }

    #[test]
    fn cyclic_subgroup_closure() {
        let z6 = FiniteTable::cyclic(6);
        assert_eq!(z6.subgroup_closure(&[2]), vec![0, 2, 4]);
        assert_eq!(z6.subgroup_closure(&[]), vec![0]);
    }

    #[test]
    fn s3_transposition_generates_order_two() {
        // S3 from the permutations (0 1) and (0 1 2).
        let s3 = FiniteTable::from_permutations(3, &[vec![1, 0, 2], vec![1, 2, 0]]).unwrap();
        assert_eq!(s3.order(), 6);
        // A transposition has order 2; its closure is an order-2 subgroup.
        let transposition = (1..6).find(|&g| s3.mul(g, g) == 0).unwrap();
        assert_eq!(s3.subgroup_closure(&[transposition]).len(), 2);
    }

    #[test]
    fn s3_has_six_subgroups() {
        let s3 = FiniteTable::from_permutations(3, &[vec![1, 0, 2], vec![1, 2, 0]]).unwrap();
        // {1}, three order-2, one order-3, S3.
        assert_eq!(s3.all_subgroups().len(), 6);
    }

    #[test]
    fn q_order_and_freeness() {
        let u = Universe::new(&[
            FactorSpec::FiniteCyclic { n: 2 },
            FactorSpec::FiniteCyclic { n: 3 },
        ])
        .unwrap();
        assert_eq!(u.q_order(), 6);
        let f2 = Universe::new(&[FactorSpec::FreeAbelian { k: 1 }, FactorSpec::FreeAbelian { k: 1 }])
            .unwrap();
        assert_eq!(f2.q_order(), 1);
        assert!(f2.is_free());
        let mixed =
            Universe::new(&[FactorSpec::FreeAbelian { k: 2 }, FactorSpec::FiniteCyclic { n: 2 }])
                .unwrap();
        assert!(!mixed.is_free());
        assert_eq!(mixed.q_order(), 2);
    }
}
