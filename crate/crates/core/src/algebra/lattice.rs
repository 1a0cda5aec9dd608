//! Integer lattices (subgroups of `Z^k`) in canonical Hermite normal form.
//!
//! Convention: row-style HNF, upper-triangular echelon with strictly
//! increasing pivot columns, positive pivots, and entries above each pivot
//! reduced into `[0, pivot)`. The form is unique for a given row span, so
//! lattice equality is plain comparison of bases.

use num::{BigInt, BigRational, Integer, One, Signed, Zero};

use crate::{Error, Result};

/// A sublattice of `Z^k`, stored as an HNF basis (each row a `Z^k` vector).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Lattice {
    dim: usize,
    basis: Vec<Vec<BigInt>>,
}

/// Result of an index computation `[sup : sub]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LatticeIndex {
    Finite(BigInt),
    Infinite,
}

/// Canonical HNF basis of the row span of `rows` inside `Z^k`.
///
/// Empty input (or all-zero rows) gives the zero lattice.
pub fn hnf(rows: &[Vec<BigInt>], dim: usize) -> Lattice {
    let (h, _) = hnf_with_transform(rows, dim);
    h
}

/// HNF together with a unimodular row transform.
///
/// Returns `(L, u)` where `u` is a `rows.len() x rows.len()` integer matrix
/// with `u * rows = [L.basis; 0]`: the first `L.rank()` rows of `u` express
/// the HNF basis in terms of the input rows, and the remaining rows of `u`
/// form a basis of the left kernel of `rows`.
pub fn hnf_with_transform(rows: &[Vec<BigInt>], dim: usize) -> (Lattice, Vec<Vec<BigInt>>) {
    let m = rows.len();
    for r in rows {
        assert_eq!(r.len(), dim, "row length must equal ambient dimension");
    }
    let mut a: Vec<Vec<BigInt>> = rows.to_vec();
    let mut u: Vec<Vec<BigInt>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { BigInt::one() } else { BigInt::zero() })
                .collect()
        })
        .collect();

    if m == 0 {
        return (Lattice { dim, basis: vec![] }, u);
    }
    let mut pivot_row = 0usize;
    for col in 0..dim {
        // Clear the column below `pivot_row` with extended-gcd row moves.
        loop {
            let mut k = None;
            for i in (pivot_row + 1)..m {
                if !a[i][col].is_zero() {
                    k = Some(i);
                    break;
                }
            }
            let Some(i) = k else { break };
            if a[pivot_row][col].is_zero() {
                a.swap(pivot_row, i);
                u.swap(pivot_row, i);
                continue;
            }
            let p = a[pivot_row][col].clone();
            let q = a[i][col].clone();
            let egcd = p.extended_gcd(&q);
            let (g, x, y) = (egcd.gcd, egcd.x, egcd.y);
            let p_over = &p / &g;
            let q_over = &q / &g;
            // rows (pivot, i) <- (x*pivot + y*i, -q/g*pivot + p/g*i)
            for (mat, cols) in [(&mut a, dim), (&mut u, m)] {
                for j in 0..cols {
                    let top = &x * &mat[pivot_row][j] + &y * &mat[i][j];
                    let bot = -&q_over * &mat[pivot_row][j] + &p_over * &mat[i][j];
                    mat[pivot_row][j] = top;
                    mat[i][j] = bot;
                }
            }
        }
        if !a[pivot_row][col].is_zero() {
            pivot_row += 1;
            if pivot_row == m {
                break;
            }
        }
    }
    let rank = pivot_row;

    // Sign-normalize pivots and reduce entries above each pivot into [0, pivot).
    // Increasing order: columns right of row i's pivot are fixed up by the
    // later rows that own them.
    for i in 0..rank {
        let pcol = (0..dim).find(|&c| !a[i][c].is_zero()).expect("pivot row");
        if a[i][pcol].is_negative() {
            for j in 0..dim {
                a[i][j] = -a[i][j].clone();
            }
            for j in 0..m {
                u[i][j] = -u[i][j].clone();
            }
        }
        let p = a[i][pcol].clone();
        for above in 0..i {
            let t = a[above][pcol].div_floor(&p);
            if t.is_zero() {
                continue;
            }
            for j in 0..dim {
                let s = &t * &a[i][j];
                a[above][j] -= s;
            }
            for j in 0..m {
                let s = &t * &u[i][j];
                u[above][j] -= s;
            }
        }
    }

    let basis = a[..rank].to_vec();
    (Lattice { dim, basis }, u)
}

impl Lattice {
    pub fn zero(dim: usize) -> Lattice {
        Lattice { dim, basis: vec![] }
    }

    /// The full lattice `Z^dim`.
    pub fn full(dim: usize) -> Lattice {
        let basis = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| if i == j { BigInt::one() } else { BigInt::zero() })
                    .collect()
            })
            .collect();
        Lattice { dim, basis }
    }

    pub fn from_rows(rows: &[Vec<BigInt>], dim: usize) -> Lattice {
        hnf(rows, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec<BigInt>] {
        &self.basis
    }

    pub fn is_trivial(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn is_full(&self) -> bool {
        *self == Lattice::full(self.dim)
    }

    fn pivot_col(row: &[BigInt]) -> usize {
        row.iter().position(|x| !x.is_zero()).expect("nonzero row")
    }

    /// Membership by echelon back-substitution.
    pub fn contains(&self, v: &[BigInt]) -> bool {
        self.solve(v).is_some()
    }

    /// Express `v` in the HNF basis; `None` if `v` is not in the lattice.
    pub fn solve(&self, v: &[BigInt]) -> Option<Vec<BigInt>> {
        assert_eq!(v.len(), self.dim);
        let mut rem = v.to_vec();
        let mut coeffs = Vec::with_capacity(self.basis.len());
        for row in &self.basis {
            let pc = Self::pivot_col(row);
            let (q, r) = rem[pc].div_rem(&row[pc]);
            if !r.is_zero() {
                return None;
            }
            for j in 0..self.dim {
                let s = &q * &row[j];
                rem[j] -= s;
            }
            coeffs.push(q);
        }
        if rem.iter().all(|x| x.is_zero()) {
            Some(coeffs)
        } else {
            None
        }
    }

    /// Canonical representative of the coset `self + v` (floor-reduction at
    /// each pivot, rows top-down). Two vectors reduce identically iff they
    /// differ by a lattice element.
    pub fn coset_rep(&self, v: &[BigInt]) -> Vec<BigInt> {
        assert_eq!(v.len(), self.dim);
        let mut rem = v.to_vec();
        for row in &self.basis {
            let pc = Self::pivot_col(row);
            let q = rem[pc].div_floor(&row[pc]);
            if q.is_zero() {
                continue;
            }
            for j in 0..self.dim {
                let s = &q * &row[j];
                rem[j] -= s;
            }
        }
        rem
    }

    /// Lattice sum `self + other` (join).
    pub fn sum(&self, other: &Lattice) -> Result<Lattice> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(self.dim, other.dim));
        }
        let mut rows = self.basis.clone();
        rows.extend(other.basis.iter().cloned());
        Ok(hnf(&rows, self.dim))
    }

    /// Split `v in self + other` into `(a, b)` with `a in self`, `b in other`,
    /// `a + b = v`. `None` if `v` is not in the sum.
    pub fn sum_split(&self, other: &Lattice, v: &[BigInt]) -> Option<(Vec<BigInt>, Vec<BigInt>)> {
        let mut rows = self.basis.clone();
        rows.extend(other.basis.iter().cloned());
        let (sum, u) = hnf_with_transform(&rows, self.dim);
        let coeffs = sum.solve(v)?;
        // v = coeffs * sum.basis = coeffs * u[..rank] * rows
        let na = self.basis.len();
        let mut a = vec![BigInt::zero(); self.dim];
        let mut b = vec![BigInt::zero(); self.dim];
        for (ci, c) in coeffs.iter().enumerate() {
            for (ri, row) in rows.iter().enumerate() {
                let w = c * &u[ci][ri];
                if w.is_zero() {
                    continue;
                }
                let target = if ri < na { &mut a } else { &mut b };
                for j in 0..self.dim {
                    target[j] += &w * &row[j];
                }
            }
        }
        Some((a, b))
    }

    /// Intersection of two lattices via the left kernel of the stacked bases.
    pub fn intersect(&self, other: &Lattice) -> Result<Lattice> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(self.dim, other.dim));
        }
        if self.is_trivial() || other.is_trivial() {
            return Ok(Lattice::zero(self.dim));
        }
        let mut stacked = self.basis.clone();
        stacked.extend(other.basis.iter().cloned());
        let (h, u) = hnf_with_transform(&stacked, self.dim);
        let rank = h.rank();
        // Kernel rows z satisfy z * stacked = 0; with z = (x, -y) this means
        // x * basis(self) = y * basis(other), an element of the intersection.
        let na = self.basis.len();
        let mut gens = Vec::new();
        for z in &u[rank..] {
            let mut v = vec![BigInt::zero(); self.dim];
            for ri in 0..na {
                for j in 0..self.dim {
                    v[j] += &z[ri] * &self.basis[ri][j];
                }
            }
            gens.push(v);
        }
        Ok(hnf(&gens, self.dim))
    }

    /// Index `[sup : sub]` with `sub = self`; errors unless `self ⊆ sup`.
    pub fn index_in(&self, sup: &Lattice) -> Result<LatticeIndex> {
        if self.dim != sup.dim {
            return Err(Error::DimensionMismatch(self.dim, sup.dim));
        }
        for row in &self.basis {
            if !sup.contains(row) {
                return Err(Error::NotASublattice);
            }
        }
        if self.rank() < sup.rank() {
            return Ok(LatticeIndex::Infinite);
        }
        // Express sub's basis in sup's basis and take |det| of the square
        // coefficient matrix (fraction-free would do; ranks are tiny, so a
        // rational determinant is fine).
        let r = sup.rank();
        let mut coeff = Vec::with_capacity(r);
        for row in &self.basis {
            coeff.push(sup.solve(row).expect("containment checked"));
        }
        let det = rational_det(&coeff, r);
        debug_assert!(det.is_integer());
        Ok(LatticeIndex::Finite(det.to_integer().abs()))
    }
}

fn rational_det(m: &[Vec<BigInt>], n: usize) -> BigRational {
    let mut a: Vec<Vec<BigRational>> = m
        .iter()
        .map(|row| row.iter().map(|x| BigRational::from(x.clone())).collect())
        .collect();
    let mut det = BigRational::one();
    for col in 0..n {
        let Some(p) = (col..n).find(|&i| !a[i][col].is_zero()) else {
            return BigRational::zero();
        };
        if p != col {
            a.swap(p, col);
            det = -det;
        }
        det *= a[col][col].clone();
        let inv = a[col][col].clone();
        for i in (col + 1)..n {
            if a[i][col].is_zero() {
                continue;
            }
            let f = &a[i][col] / &inv;
            for j in col..n {
                let s = &f * &a[col][j];
                a[i][j] -= s;
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bi(v: i64) -> BigInt {
        BigInt::from(v)
    }

    fn rows(data: &[&[i64]]) -> Vec<Vec<BigInt>> {
        data.iter().map(|r| r.iter().map(|&x| bi(x)).collect()).collect()
    }

    /// Brute-force membership in the integer row span, by coefficient
    /// enumeration over a box. Independent of the HNF code path.
    fn brute_member(basis: &[Vec<BigInt>], v: &[i64], coeff_bound: i64) -> bool {
        let m = basis.len();
        if m == 0 {
            return v.iter().all(|&x| x == 0);
        }
        let mut idx = vec![-coeff_bound; m];
        loop {
            let mut acc = vec![BigInt::zero(); v.len()];
            for (i, c) in idx.iter().enumerate() {
                for j in 0..v.len() {
                    acc[j] += bi(*c) * &basis[i][j];
                }
            }
            if acc.iter().zip(v).all(|(a, &b)| *a == bi(b)) {
                return true;
            }
            let mut k = 0;
            loop {
                if k == m {
                    return false;
                }
                idx[k] += 1;
                if idx[k] <= coeff_bound {
                    break;
                }
                idx[k] = -coeff_bound;
                k += 1;
            }
        }
    }

    #[test]
    fn hnf_of_2_4_6_8() {
        let l = hnf(&rows(&[&[2, 4], &[6, 8]]), 2);
        assert_eq!(l.basis(), rows(&[&[2, 0], &[0, 4]]).as_slice());
        // Membership agreement over the box [-8,8]^2 against brute force.
        for x in -8..=8i64 {
            for y in -8..=8i64 {
                let v = vec![bi(x), bi(y)];
                let input = rows(&[&[2, 4], &[6, 8]]);
                assert_eq!(
                    l.contains(&v),
                    brute_member(&input, &[x, y], 30),
                    "disagree at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn hnf_empty_and_identity() {
        assert!(hnf(&[], 3).is_trivial());
        let id = rows(&[&[1, 0], &[0, 1]]);
        assert_eq!(hnf(&id, 2).basis(), id.as_slice());
    }

    #[test]
    fn hnf_idempotent() {
        let l = hnf(&rows(&[&[3, 1, 4], &[1, 5, 9], &[2, 6, 5]]), 3);
        let again = hnf(l.basis(), 3);
        assert_eq!(l, again);
    }

    #[test]
    fn intersect_even_sum_condition() {
        // (2Z+Z) ∩ {(x,y): x+y even} = 2Z+2Z, checked against brute force
        // over the box [-6,6]^2.
        let l1 = hnf(&rows(&[&[2, 0], &[0, 1]]), 2);
        let l2 = hnf(&rows(&[&[1, 1], &[0, 2]]), 2);
        let li = l1.intersect(&l2).unwrap();
        assert_eq!(li.basis(), rows(&[&[2, 0], &[0, 2]]).as_slice());
        for x in -6..=6i64 {
            for y in -6..=6i64 {
                let v = vec![bi(x), bi(y)];
                assert_eq!(li.contains(&v), l1.contains(&v) && l2.contains(&v));
            }
        }
    }

    #[test]
    fn intersect_idempotent_and_independent_lines() {
        let l = hnf(&rows(&[&[2, 3], &[0, 5]]), 2);
        assert_eq!(l.intersect(&l).unwrap(), l);
        let a = hnf(&rows(&[&[1, 1]]), 2);
        let b = hnf(&rows(&[&[1, -1]]), 2);
        assert!(a.intersect(&b).unwrap().is_trivial());
    }

    #[test]
    fn index_examples() {
        let full = Lattice::full(2);
        let sub = hnf(&rows(&[&[2, 0], &[0, 2]]), 2);
        // Coset enumeration oracle in the quotient box.
        let mut cosets = std::collections::HashSet::new();
        for x in 0..4i64 {
            for y in 0..4i64 {
                cosets.insert(sub.coset_rep(&[bi(x), bi(y)]));
            }
        }
        assert_eq!(cosets.len(), 4);
        assert_eq!(sub.index_in(&full).unwrap(), LatticeIndex::Finite(bi(4)));
        assert_eq!(sub.index_in(&sub).unwrap(), LatticeIndex::Finite(bi(1)));
        let line = hnf(&rows(&[&[1, 0]]), 2);
        assert_eq!(line.index_in(&full).unwrap(), LatticeIndex::Infinite);
        assert!(full.index_in(&sub).is_err());
    }

    #[test]
    fn coset_rep_is_canonical() {
        let l = hnf(&rows(&[&[2, 1], &[0, 3]]), 2);
        for x in -5..=5i64 {
            for y in -5..=5i64 {
                let v = vec![bi(x), bi(y)];
                let r = l.coset_rep(&v);
                let diff: Vec<BigInt> = v.iter().zip(&r).map(|(a, b)| a - b).collect();
                assert!(l.contains(&diff));
                assert_eq!(l.coset_rep(&r), r);
            }
        }
    }

    #[test]
    fn sum_split_recovers_components() {
        let a = hnf(&rows(&[&[2, 0]]), 2);
        let b = hnf(&rows(&[&[0, 3]]), 2);
        let v = vec![bi(4), bi(-9)];
        let (x, y) = a.sum_split(&b, &v).unwrap();
        assert!(a.contains(&x));
        assert!(b.contains(&y));
        assert_eq!(x[0].clone() + &y[0], v[0]);
        assert_eq!(x[1].clone() + &y[1], v[1]);
        assert!(a.sum_split(&b, &[bi(1), bi(1)]).is_none());
    }
}
