//! Core automata for finitely generated subgroups of a free product.
//!
//! A subgroup of the universe group `G = G_1 * … * G_m` is represented by a
//! bipartite "Kurosh automaton": plain *junction* vertices (one marked as
//! basepoint) and *factor vertices*, each carrying a factor index `i` and a
//! vertex group `S ≤ G_i` (a lattice for free-abelian factors, a subgroup
//! element set for finite factors). An edge `(junction, fvertex, c)` is
//! labeled by the canonical representative of the right coset `S·c` in
//! `G_i`. Traversing `junction → (c_in) → fvertex(S) → (c_out) → junction`
//! reads the syllable set `c_in^{-1}·S·c_out`; the subgroup recognized is
//! the set of basepoint-loop labels.
//!
//! Folded means: (i) at each fvertex the incident edge labels lie in
//! pairwise distinct right cosets of its vertex group, and (ii) each
//! junction has at most one incident edge per factor index. Together these
//! make reading a normal form deterministic. The folding moves below are
//! validated against membership oracles and the Stallings path in the test
//! suites rather than assumed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use num::BigInt;

use crate::algebra::{Factor, FactorElem, Lattice, NormalForm, Universe};
use crate::{Error, Result};

/// Vertex group of a factor vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VertexGroup {
    /// Sublattice of a free-abelian factor `Z^k`.
    Lattice(Lattice),
    /// Subgroup of a finite factor, as a sorted element list.
    Finite(Vec<usize>),
}

impl VertexGroup {
    pub fn is_trivial(&self) -> bool {
        match self {
            VertexGroup::Lattice(l) => l.is_trivial(),
            VertexGroup::Finite(s) => s.len() == 1,
        }
    }

    fn trivial_for(u: &Universe, factor: usize) -> VertexGroup {
        match &u.factors()[factor] {
            Factor::Finite(_) => VertexGroup::Finite(vec![0]),
            Factor::FreeAbelian(k) => VertexGroup::Lattice(Lattice::zero(*k)),
        }
    }

    pub fn contains(&self, e: &FactorElem) -> bool {
        match (self, e) {
            (VertexGroup::Lattice(l), FactorElem::Abelian(v)) => l.contains(v),
            (VertexGroup::Finite(s), FactorElem::Finite(x)) => s.binary_search(x).is_ok(),
            _ => false,
        }
    }

    /// Generators as factor elements (lattice basis rows; all nonidentity
    /// elements for finite groups).
    fn generators(&self) -> Vec<FactorElem> {
        match self {
            VertexGroup::Lattice(l) => {
                l.basis().iter().map(|row| FactorElem::Abelian(row.clone())).collect()
            }
            VertexGroup::Finite(s) => {
                s.iter().filter(|&&x| x != 0).map(|&x| FactorElem::Finite(x)).collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
struct FVertex {
    factor: usize,
    group: VertexGroup,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Edge {
    junction: usize,
    fvertex: usize,
    label: FactorElem,
}

/// Folded core automaton of a finitely generated subgroup of the universe.
#[derive(Clone, Debug)]
pub struct KuroshAutomaton {
    universe: Arc<Universe>,
    num_junctions: usize,
    basepoint: usize,
    fvertices: Vec<FVertex>,
    edges: Vec<Edge>,
}

impl KuroshAutomaton {
    /// Fold the flower of the given generators into the core automaton.
    /// Deterministic for a fixed input order.
    pub fn build(universe: &Arc<Universe>, generators: &[NormalForm]) -> Result<KuroshAutomaton> {
        for g in generators {
            for (i, e) in g.letters() {
                if !universe.elem_is_valid(*i, e) {
                    return Err(Error::BadElement(*i));
                }
            }
        }
        let mut b = FoldState::new(universe.clone());
        for g in generators {
            b.add_loop(g);
        }
        b.fold();
        let mut a = b.finish();
        a.trim();
        debug_assert!(
            generators.iter().all(|g| a.member(g)),
            "folding lost a generator"
        );
        Ok(a)
    }

    pub fn trivial(universe: &Arc<Universe>) -> KuroshAutomaton {
        KuroshAutomaton {
            universe: universe.clone(),
            num_junctions: 1,
            basepoint: 0,
            fvertices: vec![],
            edges: vec![],
        }
    }

    pub fn universe(&self) -> &Arc<Universe> {
        &self.universe
    }

    pub fn num_junctions(&self) -> usize {
        self.num_junctions
    }

    pub fn num_fvertices(&self) -> usize {
        self.fvertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn basepoint(&self) -> usize {
        self.basepoint
    }

    pub fn fvertex_group(&self, v: usize) -> &VertexGroup {
        &self.fvertices[v].group
    }

    pub fn fvertex_factor(&self, v: usize) -> usize {
        self.fvertices[v].factor
    }

    /// True when the recognized subgroup is trivial.
    pub fn is_trivial_subgroup(&self) -> bool {
        self.kurosh_rank() == 0
    }

    /// Kurosh rank: cycle rank of the bipartite graph plus the number of
    /// fvertices with a nontrivial vertex group.
    pub fn kurosh_rank(&self) -> usize {
        let v = self.num_junctions + self.fvertices.len();
        let e = self.edges.len();
        let cycle_rank = (e + 1).saturating_sub(v);
        cycle_rank + self.fvertices.iter().filter(|f| !f.group.is_trivial()).count()
    }

    /// Reduced Kurosh rank `max(0, kurosh_rank - 1)`.
    pub fn reduced_rank(&self) -> usize {
        self.kurosh_rank().saturating_sub(1)
    }

    fn canonical_label(&self, v: usize, c: &FactorElem) -> FactorElem {
        canonical_rep(&self.universe, self.fvertices[v].factor, &self.fvertices[v].group, c)
    }

    fn edge_at_junction(&self, j: usize, factor: usize) -> Option<usize> {
        self.edges
            .iter()
            .position(|e| e.junction == j && self.fvertices[e.fvertex].factor == factor)
    }

    fn edge_at_fvertex(&self, v: usize, label: &FactorElem) -> Option<usize> {
        self.edges.iter().position(|e| e.fvertex == v && &e.label == label)
    }

    /// Deterministic reading of a normal form from a junction: folded
    /// conditions (i)–(ii) make every step forced.
    fn trace(&self, from: usize, w: &NormalForm) -> Option<usize> {
        let u = &self.universe;
        let mut j = from;
        for (i, g) in w.letters() {
            let eid = self.edge_at_junction(j, *i)?;
            let e = &self.edges[eid];
            let v = e.fvertex;
            // Look for c_out with S·(c_in·g) = S·c_out; then the syllable
            // reads with s = c_in·g·c_out^{-1} ∈ S.
            let cin_g = u.elem_mul(*i, &e.label, g);
            let want = self.canonical_label(v, &cin_g);
            let out_id = self.edge_at_fvertex(v, &want)?;
            j = self.edges[out_id].junction;
        }
        Some(j)
    }

    /// True iff `w` reads as a basepoint loop.
    pub fn member(&self, w: &NormalForm) -> bool {
        self.trace(self.basepoint, w) == Some(self.basepoint)
    }

    /// BFS path words from the basepoint to every junction (identity chosen
    /// inside each vertex group). In a folded automaton the factors along a
    /// simple path alternate, so these are normal forms as written.
    fn junction_paths(&self) -> Vec<Option<NormalForm>> {
        let u = &self.universe;
        let mut path: Vec<Option<NormalForm>> = vec![None; self.num_junctions];
        path[self.basepoint] = Some(NormalForm::identity());
        let mut queue = VecDeque::new();
        queue.push_back(self.basepoint);
        while let Some(j) = queue.pop_front() {
            for (eid, e) in self.edges.iter().enumerate() {
                if e.junction != j {
                    continue;
                }
                let v = e.fvertex;
                let i = self.fvertices[v].factor;
                for (eid2, e2) in self.edges.iter().enumerate() {
                    if eid2 == eid || e2.fvertex != v {
                        continue;
                    }
                    let j2 = e2.junction;
                    if path[j2].is_some() {
                        continue;
                    }
                    let syl = u.elem_mul(i, &u.elem_inv(i, &e.label), &e2.label);
                    let w = path[j]
                        .clone()
                        .expect("visited")
                        .mul(u, &NormalForm::single(u, i, syl).expect("valid"));
                    path[j2] = Some(w);
                    queue.push_back(j2);
                }
            }
        }
        path
    }

    /// A generating set read off a BFS spanning tree: vertex-group
    /// generators conjugated to the basepoint plus one generator per
    /// non-tree edge.
    pub fn generators(&self) -> Vec<NormalForm> {
        let u = &self.universe;
        let mut jpath: Vec<Option<NormalForm>> = vec![None; self.num_junctions];
        let mut ventry: Vec<Option<usize>> = vec![None; self.fvertices.len()];
        let mut tree_edges: BTreeSet<usize> = BTreeSet::new();
        jpath[self.basepoint] = Some(NormalForm::identity());
        let mut queue = VecDeque::new();
        queue.push_back(self.basepoint);
        while let Some(j) = queue.pop_front() {
            for (eid, e) in self.edges.iter().enumerate() {
                if e.junction != j || jpath[e.junction].is_none() {
                    continue;
                }
                let v = e.fvertex;
                if ventry[v].is_none() {
                    ventry[v] = Some(eid);
                    tree_edges.insert(eid);
                }
                let entry = ventry[v].expect("just set");
                if entry != eid {
                    continue;
                }
                let i = self.fvertices[v].factor;
                for (eid2, e2) in self.edges.iter().enumerate() {
                    if e2.fvertex != v || eid2 == entry {
                        continue;
                    }
                    let j2 = e2.junction;
                    if jpath[j2].is_none() {
                        let syl = u.elem_mul(i, &u.elem_inv(i, &e.label), &e2.label);
                        jpath[j2] = Some(jpath[j].clone().expect("visited").mul(
                            u,
                            &NormalForm::single(u, i, syl).expect("valid"),
                        ));
                        tree_edges.insert(eid2);
                        queue.push_back(j2);
                    }
                }
            }
        }

        let mut gens = Vec::new();
        for (v, f) in self.fvertices.iter().enumerate() {
            if f.group.is_trivial() {
                continue;
            }
            let entry = ventry[v].expect("fvertex reachable");
            let e = &self.edges[entry];
            let p = jpath[e.junction].clone().expect("reachable");
            for s in f.group.generators() {
                let syl = u.elem_mul(
                    f.factor,
                    &u.elem_mul(f.factor, &u.elem_inv(f.factor, &e.label), &s),
                    &e.label,
                );
                let w = p
                    .mul(u, &NormalForm::single(u, f.factor, syl).expect("valid"))
                    .mul(u, &p.inverse(u));
                if !w.is_identity() {
                    gens.push(w);
                }
            }
        }
        for (eid, e) in self.edges.iter().enumerate() {
            if tree_edges.contains(&eid) {
                continue;
            }
            let v = e.fvertex;
            let entry = ventry[v].expect("fvertex reachable");
            let e_t = &self.edges[entry];
            let i = self.fvertices[v].factor;
            let p_in = jpath[e.junction].clone().expect("reachable");
            let p_out = jpath[e_t.junction].clone().expect("reachable");
            let syl = u.elem_mul(i, &u.elem_inv(i, &e.label), &e_t.label);
            let w = p_in
                .mul(u, &NormalForm::single(u, i, syl).expect("valid"))
                .mul(u, &p_out.inverse(u));
            if !w.is_identity() {
                gens.push(w);
            }
        }
        gens
    }

    /// The automaton of `g H g^{-1}`, rebuilt from conjugated generators.
    pub fn conjugate(&self, g: &NormalForm) -> Result<KuroshAutomaton> {
        let gens: Vec<NormalForm> =
            self.generators().iter().map(|h| h.conjugate_by(&self.universe, g)).collect();
        KuroshAutomaton::build(&self.universe, &gens)
    }

    /// Structural fingerprint: canonical BFS relabel plus sorted edge and
    /// vertex-group descriptions. Equal strings iff isomorphic as based
    /// labeled automata.
    pub fn canonical_form(&self) -> String {
        let mut jorder = vec![usize::MAX; self.num_junctions];
        let mut vorder = vec![usize::MAX; self.fvertices.len()];
        let mut jnext = 1usize;
        let mut vnext = 0usize;
        jorder[self.basepoint] = 0;
        let mut queue = VecDeque::new();
        queue.push_back(self.basepoint);
        let mut sorted_edge_ids: Vec<usize> = (0..self.edges.len()).collect();
        sorted_edge_ids.sort_by_key(|&eid| {
            let e = &self.edges[eid];
            (self.fvertices[e.fvertex].factor, format!("{:?}", e.label), eid)
        });
        while let Some(j) = queue.pop_front() {
            for &eid in &sorted_edge_ids {
                let e = &self.edges[eid];
                if e.junction != j {
                    continue;
                }
                let v = e.fvertex;
                if vorder[v] == usize::MAX {
                    vorder[v] = vnext;
                    vnext += 1;
                }
                for &eid2 in &sorted_edge_ids {
                    let e2 = &self.edges[eid2];
                    if e2.fvertex != v {
                        continue;
                    }
                    if jorder[e2.junction] == usize::MAX {
                        jorder[e2.junction] = jnext;
                        jnext += 1;
                        queue.push_back(e2.junction);
                    }
                }
            }
        }
        let mut triples: Vec<String> = self
            .edges
            .iter()
            .map(|e| format!("({},{},{:?})", jorder[e.junction], vorder[e.fvertex], e.label))
            .collect();
        triples.sort();
        let mut groups: Vec<String> = self
            .fvertices
            .iter()
            .enumerate()
            .map(|(v, f)| format!("[{} f{} {:?}]", vorder[v], f.factor, f.group))
            .collect();
        groups.sort();
        format!(
            "{} {} | {} | {}",
            self.num_junctions,
            self.fvertices.len(),
            triples.join(" "),
            groups.join(" ")
        )
    }

    fn junction_degree(&self, j: usize) -> usize {
        self.edges.iter().filter(|e| e.junction == j).count()
    }

    fn fvertex_degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|e| e.fvertex == v).count()
    }

    /// Trim to the core: drop non-basepoint junctions of degree ≤ 1 and
    /// trivial-group fvertices of degree ≤ 1 (dead ends contribute nothing
    /// to the loop language); keep only the basepoint component.
    fn trim(&mut self) {
        loop {
            let mut dead_j: Option<usize> = None;
            for j in 0..self.num_junctions {
                if j != self.basepoint && self.junction_degree(j) <= 1 {
                    dead_j = Some(j);
                    break;
                }
            }
            if let Some(j) = dead_j {
                self.remove_junction(j);
                continue;
            }
            let mut dead_v: Option<usize> = None;
            for v in 0..self.fvertices.len() {
                let deg = self.fvertex_degree(v);
                if deg == 0 || (self.fvertices[v].group.is_trivial() && deg <= 1) {
                    dead_v = Some(v);
                    break;
                }
            }
            if let Some(v) = dead_v {
                self.remove_fvertex(v);
                continue;
            }
            break;
        }
        self.keep_basepoint_component();
    }

    fn remove_junction(&mut self, j: usize) {
        self.edges.retain(|e| e.junction != j);
        for e in &mut self.edges {
            if e.junction > j {
                e.junction -= 1;
            }
        }
        if self.basepoint > j {
            self.basepoint -= 1;
        }
        self.num_junctions -= 1;
    }

    fn remove_fvertex(&mut self, v: usize) {
        self.edges.retain(|e| e.fvertex != v);
        for e in &mut self.edges {
            if e.fvertex > v {
                e.fvertex -= 1;
            }
        }
        self.fvertices.remove(v);
    }

    fn keep_basepoint_component(&mut self) {
        let mut jkeep = vec![false; self.num_junctions];
        let mut vkeep = vec![false; self.fvertices.len()];
        jkeep[self.basepoint] = true;
        let mut stack = vec![(true, self.basepoint)];
        while let Some((is_j, x)) = stack.pop() {
            for e in &self.edges {
                if is_j && e.junction == x && !vkeep[e.fvertex] {
                    vkeep[e.fvertex] = true;
                    stack.push((false, e.fvertex));
                }
                if !is_j && e.fvertex == x && !jkeep[e.junction] {
                    jkeep[e.junction] = true;
                    stack.push((true, e.junction));
                }
            }
        }
        if jkeep.iter().all(|&k| k) && vkeep.iter().all(|&k| k) {
            return;
        }
        let jmap: Vec<usize> = {
            let mut m = vec![usize::MAX; self.num_junctions];
            let mut n = 0;
            for (j, &k) in jkeep.iter().enumerate() {
                if k {
                    m[j] = n;
                    n += 1;
                }
            }
            m
        };
        let vmap: Vec<usize> = {
            let mut m = vec![usize::MAX; self.fvertices.len()];
            let mut n = 0;
            for (v, &k) in vkeep.iter().enumerate() {
                if k {
                    m[v] = n;
                    n += 1;
                }
            }
            m
        };
        self.edges.retain(|e| jkeep[e.junction] && vkeep[e.fvertex]);
        for e in &mut self.edges {
            e.junction = jmap[e.junction];
            e.fvertex = vmap[e.fvertex];
        }
        let mut new_f = Vec::new();
        for (v, f) in self.fvertices.iter().enumerate() {
            if vkeep[v] {
                new_f.push(f.clone());
            }
        }
        self.fvertices = new_f;
        self.num_junctions = jkeep.iter().filter(|&&k| k).count();
        self.basepoint = jmap[self.basepoint];
    }
}

/// Canonical representative of the right coset `S·c` in factor `i`:
/// HNF residue for lattices, least element index for finite factors.
fn canonical_rep(u: &Universe, factor: usize, group: &VertexGroup, c: &FactorElem) -> FactorElem {
    match (group, c) {
        (VertexGroup::Lattice(l), FactorElem::Abelian(v)) => FactorElem::Abelian(l.coset_rep(v)),
        (VertexGroup::Finite(s), FactorElem::Finite(x)) => {
            let t = u.finite_table(factor).expect("finite factor");
            FactorElem::Finite(s.iter().map(|&g| t.mul(g, *x)).min().expect("nonempty subgroup"))
        }
        _ => panic!("vertex group/element mismatch"),
    }
}

// ---------------------------------------------------------------------------
// Folding.

struct FoldState {
    universe: Arc<Universe>,
    num_junctions: usize,
    basepoint: usize,
    fvertices: Vec<FVertex>,
    edges: Vec<Edge>,
}

impl FoldState {
    fn new(universe: Arc<Universe>) -> FoldState {
        FoldState { universe, num_junctions: 1, basepoint: 0, fvertices: vec![], edges: vec![] }
    }

    fn fresh_junction(&mut self) -> usize {
        self.num_junctions += 1;
        self.num_junctions - 1
    }

    /// One subdivided loop per generator: syllable `(i, g)` becomes
    /// `junction —(1)— fvertex(trivial, i) —(g)— junction`.
    fn add_loop(&mut self, w: &NormalForm) {
        let u = self.universe.clone();
        let n = w.len();
        if n == 0 {
            return;
        }
        let mut cur = self.basepoint;
        for (k, (i, g)) in w.letters().iter().enumerate() {
            let next = if k + 1 == n { self.basepoint } else { self.fresh_junction() };
            let v = self.fvertices.len();
            self.fvertices.push(FVertex { factor: *i, group: VertexGroup::trivial_for(&u, *i) });
            let ident = u.identity_elem(*i).expect("valid factor");
            self.edges.push(Edge { junction: cur, fvertex: v, label: ident });
            self.edges.push(Edge { junction: next, fvertex: v, label: g.clone() });
            cur = next;
        }
    }

    fn canonicalize_labels(&mut self) {
        for e in &mut self.edges {
            let f = &self.fvertices[e.fvertex];
            e.label = canonical_rep(&self.universe, f.factor, &f.group, &e.label);
        }
    }

    /// Fold to a fixpoint; F1 before F2 before F3, each restart preceded by
    /// label recanonicalization.
    fn fold(&mut self) {
        loop {
            self.canonicalize_labels();
            if self.apply_f1() {
                continue;
            }
            if self.apply_f2() {
                continue;
            }
            if self.apply_f3() {
                continue;
            }
            break;
        }
    }

    /// F1: two edges at one fvertex with equal coset labels merge their
    /// junctions (or dedupe when the junctions already coincide).
    fn apply_f1(&mut self) -> bool {
        for a in 0..self.edges.len() {
            for b in (a + 1)..self.edges.len() {
                let (ea, eb) = (&self.edges[a], &self.edges[b]);
                if ea.fvertex != eb.fvertex || ea.label != eb.label {
                    continue;
                }
                if ea.junction == eb.junction {
                    self.edges.remove(b);
                } else {
                    let (j1, j2) = (ea.junction, eb.junction);
                    self.merge_junctions(j1.min(j2), j1.max(j2));
                }
                return true;
            }
        }
        false
    }

    /// F2: two same-factor edges `(u,v1,c1)`, `(u,v2,c2)` at one junction
    /// with `v1 ≠ v2` merge the fvertices: with `d = c1·c2^{-1}` the merged
    /// vertex group is `⟨S1, d·S2·d^{-1}⟩` and every label `c` on v2's side
    /// becomes `d·c`.
    fn apply_f2(&mut self) -> bool {
        let u = self.universe.clone();
        for a in 0..self.edges.len() {
            for b in (a + 1)..self.edges.len() {
                let (ea, eb) = (&self.edges[a], &self.edges[b]);
                if ea.junction != eb.junction || ea.fvertex == eb.fvertex {
                    continue;
                }
                let (v1, v2) = (ea.fvertex, eb.fvertex);
                let i = self.fvertices[v1].factor;
                if self.fvertices[v2].factor != i {
                    continue;
                }
                let c1 = ea.label.clone();
                let c2 = eb.label.clone();
                let d = u.elem_mul(i, &c1, &u.elem_inv(i, &c2));
                for e in &mut self.edges {
                    if e.fvertex == v2 {
                        e.label = u.elem_mul(i, &d, &e.label);
                        e.fvertex = v1;
                    }
                }
                let g2 = self.fvertices[v2].group.clone();
                let merged = merge_groups(&u, i, &self.fvertices[v1].group, &g2, &d);
                self.fvertices[v1].group = merged;
                self.remove_fvertex_raw(v2);
                return true;
            }
        }
        false
    }

    /// F3: parallel edges `(u,v,c1)`, `(u,v,c2)` with distinct labels
    /// enlarge `S_v` by `c2·c1^{-1}`; the next canonicalization pass then
    /// equalizes and dedupes the labels.
    fn apply_f3(&mut self) -> bool {
        let u = self.universe.clone();
        for a in 0..self.edges.len() {
            for b in (a + 1)..self.edges.len() {
                let (ea, eb) = (&self.edges[a], &self.edges[b]);
                if ea.junction != eb.junction || ea.fvertex != eb.fvertex || ea.label == eb.label {
                    continue;
                }
                let v = ea.fvertex;
                let i = self.fvertices[v].factor;
                let d = u.elem_mul(i, &eb.label, &u.elem_inv(i, &ea.label));
                let old = self.fvertices[v].group.clone();
                self.fvertices[v].group = enlarge_group(&u, i, &old, &d);
                return true;
            }
        }
        false
    }

    fn merge_junctions(&mut self, keep: usize, gone: usize) {
        for e in &mut self.edges {
            if e.junction == gone {
                e.junction = keep;
            }
            if e.junction > gone {
                e.junction -= 1;
            }
        }
        if self.basepoint == gone {
            self.basepoint = keep;
        } else if self.basepoint > gone {
            self.basepoint -= 1;
        }
        self.num_junctions -= 1;
    }

    fn remove_fvertex_raw(&mut self, v: usize) {
        debug_assert!(self.edges.iter().all(|e| e.fvertex != v));
        for e in &mut self.edges {
            if e.fvertex > v {
                e.fvertex -= 1;
            }
        }
        self.fvertices.remove(v);
    }

    fn finish(self) -> KuroshAutomaton {
        KuroshAutomaton {
            universe: self.universe,
            num_junctions: self.num_junctions,
            basepoint: self.basepoint,
            fvertices: self.fvertices,
            edges: self.edges,
        }
    }
}

fn merge_groups(
    u: &Universe,
    factor: usize,
    g1: &VertexGroup,
    g2: &VertexGroup,
    d: &FactorElem,
) -> VertexGroup {
    match (g1, g2, d) {
        (VertexGroup::Lattice(l1), VertexGroup::Lattice(l2), FactorElem::Abelian(_)) => {
            // Conjugation is trivial in an abelian factor.
            VertexGroup::Lattice(l1.sum(l2).expect("same ambient dimension"))
        }
        (VertexGroup::Finite(s1), VertexGroup::Finite(s2), FactorElem::Finite(d)) => {
            let t = u.finite_table(factor).expect("finite factor");
            let mut gens: Vec<usize> = s1.clone();
            gens.extend(s2.iter().map(|&x| t.conj(*d, x)));
            VertexGroup::Finite(t.subgroup_closure(&gens))
        }
        _ => panic!("vertex group mismatch"),
    }
}

fn enlarge_group(u: &Universe, factor: usize, g: &VertexGroup, d: &FactorElem) -> VertexGroup {
    match (g, d) {
        (VertexGroup::Lattice(l), FactorElem::Abelian(v)) => {
            let mut rows = l.basis().to_vec();
            rows.push(v.clone());
            VertexGroup::Lattice(Lattice::from_rows(&rows, l.dim()))
        }
        (VertexGroup::Finite(s), FactorElem::Finite(d)) => {
            let t = u.finite_table(factor).expect("finite factor");
            let mut gens = s.clone();
            gens.push(*d);
            VertexGroup::Finite(t.subgroup_closure(&gens))
        }
        _ => panic!("vertex group mismatch"),
    }
}

// ---------------------------------------------------------------------------
// Pullback and coset intersection.

/// One entry of the pullback decomposition over the universe.
#[derive(Clone, Debug)]
pub struct KaPullbackEntry {
    pub witness: NormalForm,
    pub automaton: KuroshAutomaton,
}

/// A family of infinitely many double cosets whose intersections are all
/// conjugates of one fixed sublattice (Kurosh rank 1, reduced rank 0).
///
/// These arise only over free-abelian factors: when two fvertices carry
/// lattices with `S_A ∩ S_B ≠ 0` and `S_A + S_B` of infinite index, every
/// coset of `S_A + S_B` that no edge pair realizes is a distinct double
/// coset `AsB` with `A ∩ sBs^{-1}` conjugate to `S_A ∩ S_B`. The family is
/// reported in aggregate; each member contributes 0 to every rank sum.
#[derive(Clone, Debug)]
pub struct UnboundedFamily {
    pub factor: usize,
    pub example_witness: NormalForm,
    pub intersection_rank: usize,
}

/// Result of a pullback: the finitely many listed double cosets plus any
/// unbounded rank-0 families.
#[derive(Clone, Debug)]
pub struct KaPullback {
    pub entries: Vec<KaPullbackEntry>,
    pub unbounded_families: Vec<UnboundedFamily>,
}

impl KaPullback {
    /// Σ of reduced ranks over all double cosets (family members are 0).
    pub fn total_reduced_rank(&self) -> usize {
        self.entries.iter().map(|e| e.automaton.reduced_rank()).sum()
    }
}

/// Fiber product decomposition: one entry per double coset `AsB` with
/// nontrivial `A ∩ sBs^{-1}`, each with a deterministic witness and the
/// automaton of the intersection based at that witness. Double cosets whose
/// intersection is a single aligned vertex subgroup come from isolated
/// alignments of fvertex pairs; when infinitely many such alignments exist
/// they are summarized as `unbounded_families` (all reduced rank 0).
pub fn pullback(aa: &KuroshAutomaton, ab: &KuroshAutomaton) -> Result<KaPullback> {
    if aa.universe != ab.universe {
        return Err(Error::UniverseMismatch);
    }
    let product = ProductGraph::build(aa, ab)?;
    let comps = product.components();
    let mut entries = Vec::new();
    for comp in comps {
        let Some(entry) = product.component_entry(aa, ab, &comp)? else { continue };
        entries.push(entry);
    }
    // Isolated alignments: double cosets S_A·δ·S_B of fvertex pairs not
    // realized by any edge pair but with nontrivial aligned intersection.
    let (isolated, unbounded_families) = product.isolated_alignments(aa, ab)?;
    for entry in isolated {
        // Guard against duplicating a component's double coset.
        let mut duplicate = false;
        for e in &entries {
            if same_double_coset(aa, &e.witness, &entry.witness, ab)? {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            entries.push(entry);
        }
    }
    entries.sort_by_key(|e| (e.witness.len(), format!("{:?}", e.witness)));
    Ok(KaPullback { entries, unbounded_families })
}

/// Decide `AgB = Ag'B`: holds iff `g^{-1}Ag ∩ (g^{-1}g')·B` is nonempty.
pub fn same_double_coset(
    aa: &KuroshAutomaton,
    g: &NormalForm,
    g2: &NormalForm,
    ab: &KuroshAutomaton,
) -> Result<bool> {
    if g == g2 {
        return Ok(true);
    }
    let u = aa.universe.clone();
    let a_conj = aa.conjugate(&g.inverse(&u))?;
    let z = g.inverse(&u).mul(&u, g2);
    Ok(coset_intersect(&a_conj, &z, ab)?.is_some())
}

/// Some element of `K1 ∩ z·K2`, or `None`. A returned `f` satisfies
/// `member(a1, f)` and `member(a2, z^{-1}·f)`.
pub fn coset_intersect(
    a1: &KuroshAutomaton,
    z: &NormalForm,
    a2: &KuroshAutomaton,
) -> Result<Option<NormalForm>> {
    if a1.universe != a2.universe {
        return Err(Error::UniverseMismatch);
    }
    let u = a1.universe.clone();
    if a2.member(z) {
        // ε ∈ K1 and z^{-1}·ε ∈ K2.
        return Ok(Some(NormalForm::identity()));
    }
    // Two-pointed automaton for z·K2: graft a tail at K2's basepoint whose
    // free end, walking toward the basepoint, reads z.
    let mut st = FoldState {
        universe: u.clone(),
        num_junctions: a2.num_junctions,
        basepoint: a2.basepoint,
        fvertices: a2.fvertices.clone(),
        edges: a2.edges.clone(),
    };
    let zi = z.inverse(&u);
    let mut cur = a2.basepoint;
    for (i, g) in zi.letters() {
        let next = st.fresh_junction();
        let v = st.fvertices.len();
        st.fvertices.push(FVertex { factor: *i, group: VertexGroup::trivial_for(&u, *i) });
        let ident = u.identity_elem(*i).expect("valid factor");
        st.edges.push(Edge { junction: cur, fvertex: v, label: ident });
        st.edges.push(Edge { junction: next, fvertex: v, label: g.clone() });
        cur = next;
    }
    st.basepoint = cur;
    st.fold();
    let coset = st.finish();
    let start = coset.basepoint;
    let Some(end) = coset.trace(start, z) else {
        return Err(Error::Malformed("coset automaton cannot read its own offset".into()));
    };

    let product = ProductGraph::build(a1, &coset)?;
    let from = product.junction_id(a1.basepoint, start);
    let to = product.junction_id(a1.basepoint, end);
    Ok(product.path_word(from, to))
}

// ---------------------------------------------------------------------------
// Fiber product of two Kurosh automata.
//
// Product junctions are pairs. A product fvertex is a pair of same-factor
// fvertices together with the double coset `S_A·δ·S_B` of the connecting
// datum `δ = c1·c3^{-1}`; its vertex group is `S_A ∩ δ0·S_B·δ0^{-1}` for
// the canonical representative δ0, and a pair of edges (c1, c3) produces a
// product edge labeled by the `S_w`-coset of `α^{-1}·c1`, where
// `δ = α·δ0·β` splits through the double coset. With that labeling the
// product traversal `c^{-1}·S_w·c'` is exactly the set of syllables
// readable in both automata simultaneously, so the product is folded and
// recognizes intersections componentwise.

struct ProductGraph {
    universe: Arc<Universe>,
    junctions: Vec<(usize, usize)>,
    jindex: BTreeMap<(usize, usize), usize>,
    fvertices: Vec<FVertex>,
    edges: Vec<Edge>,
    /// (A-fvertex, B-fvertex, canonical δ0) realized by some edge pair.
    realized: BTreeMap<(usize, usize, String), usize>,
}

impl ProductGraph {
    fn build(aa: &KuroshAutomaton, ab: &KuroshAutomaton) -> Result<ProductGraph> {
        let u = aa.universe.clone();
        let mut junctions: Vec<(usize, usize)> = Vec::new();
        let mut jindex: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for ja in 0..aa.num_junctions {
            for jb in 0..ab.num_junctions {
                jindex.insert((ja, jb), junctions.len());
                junctions.push((ja, jb));
            }
        }
        let mut fvertices: Vec<FVertex> = Vec::new();
        let mut findex: BTreeMap<(usize, usize, String), usize> = BTreeMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut edge_seen: BTreeSet<(usize, usize, String)> = BTreeSet::new();

        for ea in &aa.edges {
            let va = ea.fvertex;
            let ia = aa.fvertices[va].factor;
            for eb in &ab.edges {
                let vb = eb.fvertex;
                if ab.fvertices[vb].factor != ia {
                    continue;
                }
                let sa = &aa.fvertices[va].group;
                let sb = &ab.fvertices[vb].group;
                let delta = u.elem_mul(ia, &ea.label, &u.elem_inv(ia, &eb.label));
                let (delta0, alpha) = double_coset_rep(&u, ia, sa, sb, &delta)?;
                let fkey = (va, vb, format!("{delta0:?}"));
                let fv = match findex.get(&fkey) {
                    Some(&fv) => fv,
                    None => {
                        let group = intersect_conjugate(&u, ia, sa, sb, &delta0)?;
                        let fv = fvertices.len();
                        findex.insert(fkey, fv);
                        fvertices.push(FVertex { factor: ia, group });
                        fv
                    }
                };
                let raw = u.elem_mul(ia, &u.elem_inv(ia, &alpha), &ea.label);
                let label = canonical_rep(&u, ia, &fvertices[fv].group, &raw);
                let j = jindex[&(ea.junction, eb.junction)];
                let ekey = (j, fv, format!("{label:?}"));
                if edge_seen.insert(ekey) {
                    edges.push(Edge { junction: j, fvertex: fv, label });
                }
            }
        }
        Ok(ProductGraph { universe: u, junctions, jindex, fvertices, edges, realized: findex })
    }

    fn junction_id(&self, ja: usize, jb: usize) -> usize {
        self.jindex[&(ja, jb)]
    }

    fn components(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let nj = self.junctions.len();
        let nv = self.fvertices.len();
        let mut jcomp = vec![usize::MAX; nj];
        let mut vcomp = vec![usize::MAX; nv];
        let mut comps = Vec::new();
        for seed in 0..nj {
            if jcomp[seed] != usize::MAX {
                continue;
            }
            let c = comps.len();
            let mut js = vec![seed];
            let mut vs = Vec::new();
            jcomp[seed] = c;
            let mut stack = vec![(true, seed)];
            while let Some((is_j, x)) = stack.pop() {
                for e in &self.edges {
                    if is_j && e.junction == x && vcomp[e.fvertex] == usize::MAX {
                        vcomp[e.fvertex] = c;
                        vs.push(e.fvertex);
                        stack.push((false, e.fvertex));
                    }
                    if !is_j && e.fvertex == x && jcomp[e.junction] == usize::MAX {
                        jcomp[e.junction] = c;
                        js.push(e.junction);
                        stack.push((true, e.junction));
                    }
                }
            }
            comps.push((js, vs));
        }
        comps
    }

    /// Extract a pullback entry for one component; `None` when the
    /// component recognizes the trivial group.
    fn component_entry(
        &self,
        aa: &KuroshAutomaton,
        ab: &KuroshAutomaton,
        comp: &(Vec<usize>, Vec<usize>),
    ) -> Result<Option<KaPullbackEntry>> {
        let u = &self.universe;
        let (js, vs) = comp;
        let base_pair = (aa.basepoint, ab.basepoint);
        let anchor = if js.iter().any(|&j| self.junctions[j] == base_pair) {
            base_pair
        } else {
            let mut pairs: Vec<(usize, usize)> = js.iter().map(|&j| self.junctions[j]).collect();
            pairs.sort_unstable();
            pairs[0]
        };

        let mut jmap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut sorted_js = js.clone();
        sorted_js.sort_unstable();
        for (n, &j) in sorted_js.iter().enumerate() {
            jmap.insert(j, n);
        }
        let mut vmap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut sorted_vs = vs.clone();
        sorted_vs.sort_unstable();
        let mut fverts = Vec::new();
        for (n, &v) in sorted_vs.iter().enumerate() {
            vmap.insert(v, n);
            fverts.push(self.fvertices[v].clone());
        }
        let edges: Vec<Edge> = self
            .edges
            .iter()
            .filter(|e| jmap.contains_key(&e.junction))
            .map(|e| Edge {
                junction: jmap[&e.junction],
                fvertex: vmap[&e.fvertex],
                label: e.label.clone(),
            })
            .collect();
        let mut component = KuroshAutomaton {
            universe: u.clone(),
            num_junctions: sorted_js.len(),
            basepoint: jmap[&self.jindex[&anchor]],
            fvertices: fverts,
            edges,
        };
        component.trim();
        if component.kurosh_rank() == 0 {
            return Ok(None);
        }

        let pa = aa.junction_paths()[anchor.0].clone().expect("anchor reachable in A");
        let qb = ab.junction_paths()[anchor.1].clone().expect("anchor reachable in B");
        let witness = pa.mul(u, &qb.inverse(u));
        let gens: Vec<NormalForm> =
            component.generators().iter().map(|g| g.conjugate_by(u, &pa)).collect();
        let automaton = KuroshAutomaton::build(u, &gens)?;
        Ok(Some(KaPullbackEntry { witness, automaton }))
    }

    /// Alignments of fvertex pairs through double cosets `S_A·δ·S_B` that
    /// no edge pair realizes, with nontrivial aligned intersection. Each
    /// finite one is a pullback entry in its own right (intersection = one
    /// conjugated vertex subgroup); abelian pairs with an infinite coset
    /// space are summarized as families.
    fn isolated_alignments(
        &self,
        aa: &KuroshAutomaton,
        ab: &KuroshAutomaton,
    ) -> Result<(Vec<KaPullbackEntry>, Vec<UnboundedFamily>)> {
        let u = &self.universe;
        let apaths = aa.junction_paths();
        let bpaths = ab.junction_paths();
        let mut entries = Vec::new();
        let mut families = Vec::new();
        for (va, fa) in aa.fvertices.iter().enumerate() {
            for (vb, fb) in ab.fvertices.iter().enumerate() {
                if fa.factor != fb.factor {
                    continue;
                }
                let i = fa.factor;
                // Entry edges and access paths on both sides.
                let ea = aa.edges.iter().find(|e| e.fvertex == va).expect("core fvertex");
                let eb = ab.edges.iter().find(|e| e.fvertex == vb).expect("core fvertex");
                let pa = apaths[ea.junction].clone().expect("connected");
                let pb = bpaths[eb.junction].clone().expect("connected");
                let realized: BTreeSet<String> = self
                    .realized
                    .iter()
                    .filter(|((a, b, _), _)| *a == va && *b == vb)
                    .map(|((_, _, s), _)| s.clone())
                    .collect();
                let mut push_entry = |delta0: &FactorElem| -> Result<()> {
                    let group = intersect_conjugate(u, i, &fa.group, &fb.group, delta0)?;
                    if group.is_trivial() {
                        return Ok(());
                    }
                    let mid = u.elem_mul(
                        i,
                        &u.elem_mul(i, &u.elem_inv(i, &ea.label), delta0),
                        &eb.label,
                    );
                    let witness = pa
                        .mul(u, &NormalForm::single(u, i, mid).expect("valid"))
                        .mul(u, &pb.inverse(u));
                    let mut gens = Vec::new();
                    for x in group.generators() {
                        let syl = u.elem_mul(
                            i,
                            &u.elem_mul(i, &u.elem_inv(i, &ea.label), &x),
                            &ea.label,
                        );
                        gens.push(
                            pa.mul(u, &NormalForm::single(u, i, syl).expect("valid"))
                                .mul(u, &pa.inverse(u)),
                        );
                    }
                    let automaton = KuroshAutomaton::build(u, &gens)?;
                    entries.push(KaPullbackEntry { witness, automaton });
                    Ok(())
                };
                match (&fa.group, &fb.group) {
                    (VertexGroup::Finite(_), VertexGroup::Finite(_)) => {
                        let t = u.finite_table(i)?;
                        let mut seen: BTreeSet<String> = BTreeSet::new();
                        for g in 0..t.order() {
                            let (rep, _) = double_coset_rep(
                                u,
                                i,
                                &fa.group,
                                &fb.group,
                                &FactorElem::Finite(g),
                            )?;
                            let key = format!("{rep:?}");
                            if realized.contains(&key) || !seen.insert(key) {
                                continue;
                            }
                            push_entry(&rep)?;
                        }
                    }
                    (VertexGroup::Lattice(la), VertexGroup::Lattice(lb)) => {
                        if la.intersect(lb)?.is_trivial() {
                            continue;
                        }
                        let sum = la.sum(lb)?;
                        let k = sum.dim();
                        if sum.rank() == k {
                            // Finite coset space: enumerate the pivot box.
                            let pivots: Vec<BigInt> = sum
                                .basis()
                                .iter()
                                .enumerate()
                                .map(|(r, row)| row[r].clone())
                                .collect();
                            let mut cursor = vec![BigInt::from(0); k];
                            loop {
                                let rep_vec = sum.coset_rep(&cursor);
                                let rep = FactorElem::Abelian(rep_vec);
                                let key = format!("{rep:?}");
                                if !realized.contains(&key) {
                                    push_entry(&rep)?;
                                }
                                // Advance the mixed-radix cursor.
                                let mut c = 0usize;
                                loop {
                                    if c == k {
                                        break;
                                    }
                                    cursor[c] += 1;
                                    if cursor[c] < pivots[c] {
                                        break;
                                    }
                                    cursor[c] = BigInt::from(0);
                                    c += 1;
                                }
                                if c == k {
                                    break;
                                }
                            }
                        } else {
                            // Infinitely many cosets: find one small example
                            // off the realized finite set and summarize.
                            let mut example = None;
                            'search: for radius in 1..=(self.realized.len() as i64 + 2) {
                                for j in 0..k {
                                    for sign in [1i64, -1] {
                                        let mut v = vec![BigInt::from(0); k];
                                        v[j] = BigInt::from(sign * radius);
                                        let rep_vec = sum.coset_rep(&v);
                                        if rep_vec.iter().all(|x| num::Zero::is_zero(x)) {
                                            continue;
                                        }
                                        let rep = FactorElem::Abelian(rep_vec);
                                        let key = format!("{rep:?}");
                                        if !realized.contains(&key) {
                                            example = Some(rep);
                                            break 'search;
                                        }
                                    }
                                }
                            }
                            if let Some(rep) = example {
                                let mid = u.elem_mul(
                                    i,
                                    &u.elem_mul(i, &u.elem_inv(i, &ea.label), &rep),
                                    &eb.label,
                                );
                                let witness = pa
                                    .mul(u, &NormalForm::single(u, i, mid).expect("valid"))
                                    .mul(u, &pb.inverse(u));
                                families.push(UnboundedFamily {
                                    factor: i,
                                    example_witness: witness,
                                    intersection_rank: la.intersect(lb)?.rank(),
                                });
                            }
                        }
                    }
                    _ => return Err(Error::Malformed("mismatched vertex group kinds".into())),
                }
            }
        }
        Ok((entries, families))
    }

    /// Shortest junction-to-junction reading (identity chosen in each
    /// vertex group); `None` if disconnected.
    fn path_word(&self, from: usize, to: usize) -> Option<NormalForm> {
        let u = &self.universe;
        if from == to {
            return Some(NormalForm::identity());
        }
        let nj = self.junctions.len();
        let mut prev: Vec<Option<(usize, usize, usize)>> = vec![None; nj];
        let mut seen = vec![false; nj];
        seen[from] = true;
        let mut queue = VecDeque::new();
        queue.push_back(from);
        while let Some(j) = queue.pop_front() {
            for (eid, e) in self.edges.iter().enumerate() {
                if e.junction != j {
                    continue;
                }
                for (eid2, e2) in self.edges.iter().enumerate() {
                    if eid2 == eid || e2.fvertex != e.fvertex {
                        continue;
                    }
                    let j2 = e2.junction;
                    if seen[j2] {
                        continue;
                    }
                    seen[j2] = true;
                    prev[j2] = Some((j, eid, eid2));
                    if j2 == to {
                        let mut hops = Vec::new();
                        let mut cur = j2;
                        while cur != from {
                            let (p, ein, eout) = prev[cur].expect("bfs parent");
                            hops.push((ein, eout));
                            cur = p;
                        }
                        hops.reverse();
                        let mut w = NormalForm::identity();
                        for (ein, eout) in hops {
                            let e = &self.edges[ein];
                            let e2 = &self.edges[eout];
                            let i = self.fvertices[e.fvertex].factor;
                            let syl = u.elem_mul(i, &u.elem_inv(i, &e.label), &e2.label);
                            w = w.mul(u, &NormalForm::single(u, i, syl).expect("valid"));
                        }
                        return Some(w);
                    }
                    queue.push_back(j2);
                }
            }
        }
        None
    }
}

/// Canonical representative δ0 of the double coset `S_A·δ·S_B` in a factor,
/// together with α such that `δ = α·δ0·β` for some `β ∈ S_B`.
fn double_coset_rep(
    u: &Universe,
    factor: usize,
    sa: &VertexGroup,
    sb: &VertexGroup,
    delta: &FactorElem,
) -> Result<(FactorElem, FactorElem)> {
    match (sa, sb, delta) {
        (VertexGroup::Lattice(la), VertexGroup::Lattice(lb), FactorElem::Abelian(d)) => {
            // Abelian factor: S_A·δ·S_B = δ + (S_A + S_B).
            let sum = la.sum(lb)?;
            let rep = sum.coset_rep(d);
            let diff: Vec<BigInt> = d.iter().zip(&rep).map(|(x, y)| x - y).collect();
            let (a, _b) = la
                .sum_split(lb, &diff)
                .ok_or_else(|| Error::Malformed("coset difference outside lattice sum".into()))?;
            Ok((FactorElem::Abelian(rep), FactorElem::Abelian(a)))
        }
        (VertexGroup::Finite(sa), VertexGroup::Finite(sb), FactorElem::Finite(d)) => {
            let t = u.finite_table(factor)?;
            let mut best: Option<(usize, usize)> = None;
            for &x in sa {
                for &y in sb {
                    let rep = t.mul(t.mul(x, *d), y);
                    if best.map_or(true, |(r, _)| rep < r) {
                        // δ0 = x·δ·y, so δ = x^{-1}·δ0·y^{-1} and α = x^{-1}.
                        best = Some((rep, t.inv(x)));
                    }
                }
            }
            let (rep, alpha) = best.expect("subgroups contain the identity");
            Ok((FactorElem::Finite(rep), FactorElem::Finite(alpha)))
        }
        _ => Err(Error::Malformed("mismatched vertex group kinds".into())),
    }
}

/// `S_A ∩ δ0·S_B·δ0^{-1}` inside one factor.
fn intersect_conjugate(
    u: &Universe,
    factor: usize,
    sa: &VertexGroup,
    sb: &VertexGroup,
    delta0: &FactorElem,
) -> Result<VertexGroup> {
    match (sa, sb, delta0) {
        (VertexGroup::Lattice(la), VertexGroup::Lattice(lb), FactorElem::Abelian(_)) => {
            Ok(VertexGroup::Lattice(la.intersect(lb)?))
        }
        (VertexGroup::Finite(sa), VertexGroup::Finite(sb), FactorElem::Finite(d)) => {
            let t = u.finite_table(factor)?;
            let conj: BTreeSet<usize> = sb.iter().map(|&x| t.conj(*d, x)).collect();
            Ok(VertexGroup::Finite(sa.iter().copied().filter(|x| conj.contains(x)).collect()))
        }
        _ => Err(Error::Malformed("mismatched vertex group kinds".into())),
    }
}

/// `H ∩ ker φ` for a homomorphism `φ` from the universe group to `Z_m`,
/// given by a letter evaluation; returns the subgroup automaton and the
/// index `|H : H ∩ ker φ| = |φ(H)|`. Generators of the subgroup come from
/// the standard transversal rewriting.
pub fn finite_index_kernel_part(
    a: &KuroshAutomaton,
    m: usize,
    phi: &dyn Fn(&Universe, usize, &FactorElem) -> usize,
) -> Result<(KuroshAutomaton, usize)> {
    let u = a.universe.clone();
    let eval = |w: &NormalForm| -> usize {
        w.letters().iter().fold(0usize, |acc, (i, e)| (acc + phi(&u, *i, e)) % m)
    };
    let gens = a.generators();
    let mut reps: BTreeMap<usize, NormalForm> = BTreeMap::new();
    reps.insert(0, NormalForm::identity());
    let mut queue = VecDeque::new();
    queue.push_back(0usize);
    while let Some(q) = queue.pop_front() {
        let base = reps[&q].clone();
        for g in &gens {
            for h in [g.clone(), g.inverse(&u)] {
                let q2 = (q + eval(&h)) % m;
                if let std::collections::btree_map::Entry::Vacant(e) = reps.entry(q2) {
                    e.insert(base.mul(&u, &h));
                    queue.push_back(q2);
                }
            }
        }
    }
    let index = reps.len();
    let mut kgens = Vec::new();
    let rep_list: Vec<(usize, NormalForm)> = reps.iter().map(|(q, w)| (*q, w.clone())).collect();
    for (q, rep) in &rep_list {
        for g in &gens {
            let q2 = (q + eval(g)) % m;
            let rep2 = reps.get(&q2).expect("image closed");
            let w = rep.mul(&u, g).mul(&u, &rep2.inverse(&u));
            if !w.is_identity() {
                kgens.push(w);
            }
        }
    }
    let k = KuroshAutomaton::build(&u, &kgens)?;
    Ok((k, index))
}
