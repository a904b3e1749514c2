// SPDX-License-Identifier: MIT
//! Graph types and the purely graphical algorithms: skeletons, v-structures,
//! Meek closure, consistent extension, (I-)CPDAG construction, the class
//! completion used by the search, equivalence tests, and exhaustive
//! enumeration oracles.
//!
//! Graphs are stored as dense per-node `u64` adjacency masks, which caps the
//! node count at [`MAX_NODES`]. All types are immutable values after
//! construction; every operation here is a pure function.

mod enumerate;

pub use enumerate::{enumerate_all_dags, enumerate_class, enumerate_class_capped, MAX_ENUM_NODES};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeSet;

/// Hard cap on node count imposed by the mask-based encoding.
pub const MAX_NODES: usize = 64;

/// Default cap on the number of members materialized by class enumeration.
pub const DEFAULT_CLASS_CAP: usize = 1_000_000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node count {0} exceeds the supported maximum of {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("node index {0} out of range for p = {1}")]
    NodeOutOfRange(usize, usize),
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("conflicting or duplicate edge between {0} and {1}")]
    ConflictingEdge(usize, usize),
    #[error("directed part contains a cycle")]
    Cyclic,
    #[error("node counts differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no consistent extension exists")]
    NoConsistentExtension,
    #[error("undirected edge {0}-{1} is incident to an intervention target")]
    UndirectedAtTarget(usize, usize),
    #[error("target family is not conservative")]
    NonConservativeFamily,
    #[error("target family does not contain the empty (observational) set")]
    MissingObservationalSet,
    #[error("input does not represent a valid class: no consistent member maps back to it")]
    InvalidClassRepresentation,
    #[error("class enumeration exceeded the cap of {0} members")]
    ClassTooLarge(usize),
    #[error("exhaustive enumeration supports at most {MAX_ENUM_NODES} nodes, got {0}")]
    EnumerationTooLarge(usize),
    #[error("graph class must be non-empty")]
    EmptyClass,
}

#[inline]
pub(crate) fn bits(mask: u64) -> BitIter {
    BitIter(mask)
}

pub(crate) struct BitIter(u64);

impl Iterator for BitIter {
    type Item = usize;
    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            None
        } else {
            let i = self.0.trailing_zeros() as usize;
            self.0 &= self.0 - 1;
            Some(i)
        }
    }
}

#[inline]
fn bit(i: usize) -> u64 {
    1u64 << i
}

fn check_p(p: usize) -> Result<(), GraphError> {
    if p > MAX_NODES {
        Err(GraphError::TooManyNodes(p))
    } else {
        Ok(())
    }
}

fn check_node(i: usize, p: usize) -> Result<(), GraphError> {
    if i >= p {
        Err(GraphError::NodeOutOfRange(i, p))
    } else {
        Ok(())
    }
}

/// Kahn's algorithm on parent masks. Returns a topological order, or `None`
/// if the directed part is cyclic.
fn topological_order_of(p: usize, pa: &[u64]) -> Option<Vec<usize>> {
    let mut remaining = pa.to_vec();
    let mut alive: u64 = if p == 64 { !0 } else { bit(p) - 1 };
    let mut order = Vec::with_capacity(p);
    while alive != 0 {
        let mut found = None;
        for i in bits(alive) {
            if remaining[i] & alive == 0 {
                found = Some(i);
                break;
            }
        }
        let i = found?;
        order.push(i);
        alive &= !bit(i);
        for m in remaining.iter_mut() {
            *m &= !bit(i);
        }
    }
    Some(order)
}

// ---------------------------------------------------------------------------
// TargetSet / TargetFamily
// ---------------------------------------------------------------------------

/// A set of intervention targets, a subset of `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TargetSet {
    mask: u64,
}

impl TargetSet {
    pub fn empty() -> Self {
        TargetSet { mask: 0 }
    }

    /// Builds a target set, validating every index against `p`.
    pub fn new(targets: impl IntoIterator<Item = usize>, p: usize) -> Result<Self, GraphError> {
        check_p(p)?;
        let mut mask = 0u64;
        for t in targets {
            check_node(t, p)?;
            mask |= bit(t);
        }
        Ok(TargetSet { mask })
    }

    /// Full target set `{0, ..., p-1}`.
    pub fn full(p: usize) -> Result<Self, GraphError> {
        check_p(p)?;
        Ok(TargetSet {
            mask: if p == 64 { !0 } else { bit(p) - 1 },
        })
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        self.mask
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        i < 64 && self.mask & bit(i) != 0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        BitIter(self.mask)
    }

    pub fn with(&self, i: usize) -> Self {
        TargetSet {
            mask: self.mask | bit(i),
        }
    }

    pub fn without(&self, i: usize) -> Self {
        TargetSet {
            mask: self.mask & !bit(i),
        }
    }

    pub fn union(&self, other: &TargetSet) -> Self {
        TargetSet {
            mask: self.mask | other.mask,
        }
    }

    pub fn is_subset_of(&self, other: &TargetSet) -> bool {
        self.mask & !other.mask == 0
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

impl Serialize for TargetSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_vec().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TargetSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(deserializer)?;
        TargetSet::new(v, MAX_NODES).map_err(D::Error::custom)
    }
}

/// A family of target sets, as used by the hard- and general-intervention
/// equivalence tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetFamily {
    sets: Vec<TargetSet>,
}

impl TargetFamily {
    /// Builds a family; members are deduplicated and kept in canonical order.
    pub fn new(sets: impl IntoIterator<Item = TargetSet>) -> Self {
        let mut sets: Vec<TargetSet> = sets.into_iter().collect();
        sets.sort();
        sets.dedup();
        TargetFamily { sets }
    }

    pub fn sets(&self) -> &[TargetSet] {
        &self.sets
    }

    pub fn contains_empty(&self) -> bool {
        self.sets.iter().any(|s| s.is_empty())
    }

    /// A family is conservative if every node is absent from at least one set.
    pub fn is_conservative(&self, p: usize) -> bool {
        if self.sets.is_empty() {
            return false;
        }
        let inter = self.sets.iter().fold(!0u64, |acc, s| acc & s.mask);
        let all = if p == 64 { !0 } else { bit(p) - 1 };
        inter & all == 0
    }

    /// Union of all member sets.
    pub fn union_of(&self) -> TargetSet {
        TargetSet {
            mask: self.sets.iter().fold(0, |acc, s| acc | s.mask),
        }
    }
}

// ---------------------------------------------------------------------------
// Dag
// ---------------------------------------------------------------------------

/// A directed acyclic graph over `p` labeled nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dag {
    p: usize,
    /// `pa[i]` is the bitmask of parents of node `i`.
    pa: Vec<u64>,
}

impl Dag {
    pub fn empty(p: usize) -> Result<Self, GraphError> {
        check_p(p)?;
        Ok(Dag { p, pa: vec![0; p] })
    }

    /// Builds a DAG from a list of directed edges `(i, j)` meaning `i -> j`.
    pub fn new(p: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        check_p(p)?;
        let mut pa = vec![0u64; p];
        for &(i, j) in edges {
            check_node(i, p)?;
            check_node(j, p)?;
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if pa[j] & bit(i) != 0 || pa[i] & bit(j) != 0 {
                return Err(GraphError::ConflictingEdge(i, j));
            }
            pa[j] |= bit(i);
        }
        if topological_order_of(p, &pa).is_none() {
            return Err(GraphError::Cyclic);
        }
        Ok(Dag { p, pa })
    }

    pub(crate) fn from_parent_masks(p: usize, pa: Vec<u64>) -> Result<Self, GraphError> {
        if topological_order_of(p, &pa).is_none() {
            return Err(GraphError::Cyclic);
        }
        Ok(Dag { p, pa })
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        j < self.p && self.pa[j] & bit(i) != 0
    }

    #[inline]
    pub fn parents_mask(&self, i: usize) -> u64 {
        self.pa[i]
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        BitIter(self.pa[i]).collect()
    }

    pub fn children_mask(&self, i: usize) -> u64 {
        let mut m = 0;
        for j in 0..self.p {
            if self.pa[j] & bit(i) != 0 {
                m |= bit(j);
            }
        }
        m
    }

    /// Directed edges, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.p {
            for i in BitIter(self.pa[j]) {
                out.push((i, j));
            }
        }
        out.sort_unstable();
        out
    }

    pub fn edge_count(&self) -> usize {
        self.pa.iter().map(|m| m.count_ones() as usize).sum()
    }

    /// Per-node adjacency masks of the skeleton.
    pub fn skeleton_masks(&self) -> Vec<u64> {
        let mut adj = self.pa.clone();
        for j in 0..self.p {
            for i in BitIter(self.pa[j]) {
                adj[i] |= bit(j);
            }
        }
        adj
    }

    /// The skeleton as a set of unordered pairs `{i, j}` with `i < j`.
    pub fn skeleton(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for (i, j) in self.edges() {
            out.insert((i.min(j), i.max(j)));
        }
        out
    }

    /// V-structures `(i, k, j)` with `i < j`: `i -> k <- j` and `i, j`
    /// non-adjacent.
    pub fn v_structures(&self) -> BTreeSet<(usize, usize, usize)> {
        let adj = self.skeleton_masks();
        let mut out = BTreeSet::new();
        for k in 0..self.p {
            let parents: Vec<usize> = BitIter(self.pa[k]).collect();
            for (a, &i) in parents.iter().enumerate() {
                for &j in parents.iter().skip(a + 1) {
                    if adj[i] & bit(j) == 0 {
                        out.insert((i, k, j));
                    }
                }
            }
        }
        out
    }

    pub fn topological_order(&self) -> Vec<usize> {
        topological_order_of(self.p, &self.pa).expect("Dag invariant: acyclic")
    }

    /// Mask of all nodes reachable from `i` by a directed path.
    pub fn descendants_mask(&self, i: usize) -> u64 {
        let ch: Vec<u64> = (0..self.p).map(|k| self.children_mask(k)).collect();
        let mut seen = 0u64;
        let mut frontier = ch[i];
        while frontier != 0 {
            seen |= frontier;
            let mut next = 0;
            for v in BitIter(frontier) {
                next |= ch[v] & !seen;
            }
            frontier = next;
        }
        seen
    }
}

impl Serialize for Dag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphJson {
            p: self.p,
            directed: self.edges(),
            undirected: Vec::new(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Dag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let g = GraphJson::deserialize(deserializer)?;
        if !g.undirected.is_empty() {
            return Err(D::Error::custom("a DAG must have no undirected edges"));
        }
        Dag::new(g.p, &g.directed).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Pdag
// ---------------------------------------------------------------------------

/// A partially directed graph whose directed part is acyclic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pdag {
    p: usize,
    /// `dout[i]`: mask of `j` with `i -> j`.
    dout: Vec<u64>,
    /// `din[i]`: mask of `j` with `j -> i`.
    din: Vec<u64>,
    /// `und[i]`: mask of `j` with `i - j` (symmetric).
    und: Vec<u64>,
}

/// Interchange JSON shape for graphs: `{"p":..,"directed":[[i,j],..],"undirected":[[i,j],..]}`.
#[derive(Serialize, Deserialize)]
struct GraphJson {
    p: usize,
    directed: Vec<(usize, usize)>,
    undirected: Vec<(usize, usize)>,
}

impl Pdag {
    pub fn empty(p: usize) -> Result<Self, GraphError> {
        check_p(p)?;
        Ok(Pdag {
            p,
            dout: vec![0; p],
            din: vec![0; p],
            und: vec![0; p],
        })
    }

    pub fn new(
        p: usize,
        directed: &[(usize, usize)],
        undirected: &[(usize, usize)],
    ) -> Result<Self, GraphError> {
        let mut g = Pdag::empty(p)?;
        for &(i, j) in directed {
            check_node(i, p)?;
            check_node(j, p)?;
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if g.adjacent(i, j) {
                return Err(GraphError::ConflictingEdge(i, j));
            }
            g.dout[i] |= bit(j);
            g.din[j] |= bit(i);
        }
        for &(i, j) in undirected {
            check_node(i, p)?;
            check_node(j, p)?;
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if g.adjacent(i, j) {
                return Err(GraphError::ConflictingEdge(i, j));
            }
            g.und[i] |= bit(j);
            g.und[j] |= bit(i);
        }
        if topological_order_of(p, &g.din).is_none() {
            return Err(GraphError::Cyclic);
        }
        Ok(g)
    }

    pub fn from_dag(d: &Dag) -> Self {
        let p = d.p();
        let mut g = Pdag {
            p,
            dout: vec![0; p],
            din: d.pa.clone(),
            und: vec![0; p],
        };
        for j in 0..p {
            for i in BitIter(d.pa[j]) {
                g.dout[i] |= bit(j);
            }
        }
        g
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn has_directed(&self, i: usize, j: usize) -> bool {
        self.dout[i] & bit(j) != 0
    }

    #[inline]
    pub fn has_undirected(&self, i: usize, j: usize) -> bool {
        self.und[i] & bit(j) != 0
    }

    #[inline]
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        (self.dout[i] | self.din[i] | self.und[i]) & bit(j) != 0
    }

    #[inline]
    pub fn parents_mask(&self, i: usize) -> u64 {
        self.din[i]
    }

    #[inline]
    pub fn children_mask(&self, i: usize) -> u64 {
        self.dout[i]
    }

    #[inline]
    pub fn undirected_mask(&self, i: usize) -> u64 {
        self.und[i]
    }

    #[inline]
    pub fn adjacency_mask(&self, i: usize) -> u64 {
        self.dout[i] | self.din[i] | self.und[i]
    }

    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.p {
            for j in BitIter(self.dout[i]) {
                out.push((i, j));
            }
        }
        out.sort_unstable();
        out
    }

    /// Undirected edges as pairs `(i, j)` with `i < j`, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.p {
            for j in BitIter(self.und[i]) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        let d: usize = self.dout.iter().map(|m| m.count_ones() as usize).sum();
        let u: usize = self.und.iter().map(|m| m.count_ones() as usize).sum();
        d + u / 2
    }

    pub fn skeleton_masks(&self) -> Vec<u64> {
        (0..self.p).map(|i| self.adjacency_mask(i)).collect()
    }

    pub fn skeleton(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for (i, j) in self.directed_edges() {
            out.insert((i.min(j), i.max(j)));
        }
        for e in self.undirected_edges() {
            out.insert(e);
        }
        out
    }

    /// Orients the undirected edge `i - j` as `i -> j`.
    pub(crate) fn orient(&mut self, i: usize, j: usize) {
        debug_assert!(self.has_undirected(i, j));
        self.und[i] &= !bit(j);
        self.und[j] &= !bit(i);
        self.dout[i] |= bit(j);
        self.din[j] |= bit(i);
    }

    pub(crate) fn add_directed(&mut self, i: usize, j: usize) {
        debug_assert!(!self.adjacent(i, j));
        self.dout[i] |= bit(j);
        self.din[j] |= bit(i);
    }

    pub(crate) fn remove_between(&mut self, i: usize, j: usize) {
        self.dout[i] &= !bit(j);
        self.dout[j] &= !bit(i);
        self.din[i] &= !bit(j);
        self.din[j] &= !bit(i);
        self.und[i] &= !bit(j);
        self.und[j] &= !bit(i);
    }

    pub fn has_undirected_edges(&self) -> bool {
        self.und.iter().any(|&m| m != 0)
    }

    /// Converts a fully directed PDAG into a `Dag`.
    pub fn to_dag(&self) -> Result<Dag, GraphError> {
        if self.has_undirected_edges() {
            return Err(GraphError::NoConsistentExtension);
        }
        Dag::from_parent_masks(self.p, self.din.clone())
    }
}

impl Serialize for Pdag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphJson {
            p: self.p,
            directed: self.directed_edges(),
            undirected: self.undirected_edges(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pdag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let g = GraphJson::deserialize(deserializer)?;
        Pdag::new(g.p, &g.directed, &g.undirected).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// GraphClass
// ---------------------------------------------------------------------------

/// A finite, non-empty set of DAGs over the same node set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphClass {
    p: usize,
    members: BTreeSet<Dag>,
}

impl GraphClass {
    /// Builds a class from explicit members. No structural relation between
    /// members is required; equivalence-class constructors check more.
    pub fn from_members(members: impl IntoIterator<Item = Dag>) -> Result<Self, GraphError> {
        let members: BTreeSet<Dag> = members.into_iter().collect();
        let mut it = members.iter();
        let first = it.next().ok_or(GraphError::EmptyClass)?;
        let p = first.p();
        for d in it {
            if d.p() != p {
                return Err(GraphError::DimensionMismatch(p, d.p()));
            }
        }
        Ok(GraphClass { p, members })
    }

    /// As [`from_members`](Self::from_members), additionally checking that all
    /// members share skeleton and v-structures (the invariant of classes built
    /// from a CPDAG or I-CPDAG).
    pub fn from_equivalence_members(
        members: impl IntoIterator<Item = Dag>,
    ) -> Result<Self, GraphError> {
        let class = Self::from_members(members)?;
        let mut it = class.members.iter();
        let first = it.next().expect("non-empty");
        let skel = first.skeleton_masks();
        let vs = first.v_structures();
        for d in it {
            if d.skeleton_masks() != skel || d.v_structures() != vs {
                return Err(GraphError::InvalidClassRepresentation);
            }
        }
        Ok(class)
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.members.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = &Dag> {
        self.members.iter()
    }

    pub fn contains(&self, d: &Dag) -> bool {
        self.members.contains(d)
    }
}

// ---------------------------------------------------------------------------
// Equivalence tests
// ---------------------------------------------------------------------------

fn check_same_p(d1: &Dag, d2: &Dag) -> Result<usize, GraphError> {
    if d1.p() != d2.p() {
        return Err(GraphError::DimensionMismatch(d1.p(), d2.p()));
    }
    Ok(d1.p())
}

/// Two DAGs are Markov equivalent iff they have the same skeleton and the
/// same v-structures.
pub fn markov_equivalent(d1: &Dag, d2: &Dag) -> Result<bool, GraphError> {
    check_same_p(d1, d2)?;
    Ok(d1.skeleton_masks() == d2.skeleton_masks() && d1.v_structures() == d2.v_structures())
}

/// Markov equivalence plus equal parent sets for every intervened node.
pub fn i_equivalent(d1: &Dag, d2: &Dag, targets: &TargetSet) -> Result<bool, GraphError> {
    let p = check_same_p(d1, d2)?;
    for t in targets.iter() {
        check_node(t, p)?;
        if d1.parents_mask(t) != d2.parents_mask(t) {
            return Ok(false);
        }
    }
    markov_equivalent(d1, d2)
}

/// Adds one node per intervention target, each with a single edge into its
/// target. Target `k` (in sorted order) becomes node `p + k`.
pub fn augment(d: &Dag, targets: &TargetSet) -> Result<Dag, GraphError> {
    let p = d.p();
    let q = p + targets.len();
    check_p(q)?;
    let mut pa = d.pa.clone();
    pa.resize(q, 0);
    for (k, t) in targets.iter().enumerate() {
        check_node(t, p)?;
        pa[t] |= bit(p + k);
    }
    Dag::from_parent_masks(q, pa)
}

/// Equivalence under hard interventions on a conservative family of targets:
/// Markov equivalence plus, for every set in the family, equal skeletons after
/// removing all edges into that set's nodes.
pub fn h_equivalent(d1: &Dag, d2: &Dag, family: &TargetFamily) -> Result<bool, GraphError> {
    let p = check_same_p(d1, d2)?;
    if !family.is_conservative(p) {
        return Err(GraphError::NonConservativeFamily);
    }
    if !markov_equivalent(d1, d2)? {
        return Ok(false);
    }
    for h in family.sets() {
        if cut_skeleton(d1, h) != cut_skeleton(d2, h) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Skeleton masks of `d` after removing all edges into nodes of `h`.
fn cut_skeleton(d: &Dag, h: &TargetSet) -> Vec<u64> {
    let p = d.p();
    let mut adj = vec![0u64; p];
    for j in 0..p {
        if h.contains(j) {
            continue;
        }
        for i in BitIter(d.parents_mask(j)) {
            adj[j] |= bit(i);
            adj[i] |= bit(j);
        }
    }
    adj
}

/// Equivalence under general interventions: one source node is added per
/// non-empty set in the family (with edges into all its nodes), and the
/// resulting interventional DAGs must be Markov equivalent.
pub fn y_equivalent(d1: &Dag, d2: &Dag, family: &TargetFamily) -> Result<bool, GraphError> {
    check_same_p(d1, d2)?;
    if !family.contains_empty() {
        return Err(GraphError::MissingObservationalSet);
    }
    let a1 = interventional_dag(d1, family)?;
    let a2 = interventional_dag(d2, family)?;
    markov_equivalent(&a1, &a2)
}

fn interventional_dag(d: &Dag, family: &TargetFamily) -> Result<Dag, GraphError> {
    let p = d.p();
    let nonempty: Vec<&TargetSet> = family.sets().iter().filter(|s| !s.is_empty()).collect();
    let q = p + nonempty.len();
    check_p(q)?;
    let mut pa = d.pa.clone();
    pa.resize(q, 0);
    for (k, s) in nonempty.iter().enumerate() {
        for t in s.iter() {
            check_node(t, p)?;
            pa[t] |= bit(p + k);
        }
    }
    Dag::from_parent_masks(q, pa)
}

// ---------------------------------------------------------------------------
// Meek closure, consistent extension, (I-)CPDAG construction, completion
// ---------------------------------------------------------------------------

/// Applies the four Meek orientation rules until fixpoint. The output orients
/// a superset of the input's directed edges; the adjacency set is unchanged.
pub fn meek_closure(g: &Pdag) -> Pdag {
    let mut g = g.clone();
    let p = g.p();
    'outer: loop {
        // R1: a -> b, b - c, a and c non-adjacent  =>  b -> c
        for b in 0..p {
            for c in BitIter(g.und[b]) {
                for a in BitIter(g.din[b]) {
                    if a != c && !g.adjacent(a, c) {
                        g.orient(b, c);
                        continue 'outer;
                    }
                }
            }
        }
        // R2: a -> b -> c, a - c  =>  a -> c
        for a in 0..p {
            for c in BitIter(g.und[a]) {
                if g.dout[a] & g.din[c] != 0 {
                    g.orient(a, c);
                    continue 'outer;
                }
            }
        }
        // R3: a - b, a - c, a - d, c -> b, d -> b, c and d non-adjacent  =>  a -> b
        for a in 0..p {
            for b in BitIter(g.und[a]) {
                let cands: Vec<usize> = BitIter(g.und[a] & g.din[b]).collect();
                for (x, &c) in cands.iter().enumerate() {
                    for &d in cands.iter().skip(x + 1) {
                        if !g.adjacent(c, d) {
                            g.orient(a, b);
                            continue 'outer;
                        }
                    }
                }
            }
        }
        // R4: a - b, a - c, c -> d, d -> b, a and d adjacent, c and b
        // non-adjacent  =>  a -> b
        for a in 0..p {
            for b in BitIter(g.und[a]) {
                'r4: for c in BitIter(g.und[a]) {
                    if c == b || g.adjacent(c, b) {
                        continue;
                    }
                    for d in BitIter(g.dout[c] & g.din[b]) {
                        if g.adjacent(a, d) {
                            g.orient(a, b);
                            continue 'outer;
                        }
                    }
                    continue 'r4;
                }
            }
        }
        break;
    }
    g
}

/// Consistent extension via sink elimination: orients every undirected edge
/// so that the result is acyclic, contains all input directed edges, and has
/// no v-structure absent from the input.
///
/// Eligible nodes are taken lowest-index first; undirected edges are oriented
/// toward the eliminated node.
pub fn pdag_to_dag(g: &Pdag) -> Result<Dag, GraphError> {
    let p = g.p();
    let mut pa: Vec<u64> = (0..p).map(|i| g.parents_mask(i)).collect();
    let mut alive: u64 = if p == 64 { !0 } else { bit(p) - 1 };

    while alive != 0 {
        let mut picked = None;
        'scan: for x in BitIter(alive) {
            // outgoing directed edges disqualify a sink
            if g.children_mask(x) & alive != 0 {
                continue;
            }
            let und = g.undirected_mask(x) & alive;
            let adj = g.adjacency_mask(x) & alive;
            for y in BitIter(und) {
                let others = adj & !bit(y);
                let y_adj = g.adjacency_mask(y);
                if others & !y_adj != 0 {
                    continue 'scan;
                }
            }
            picked = Some(x);
            break;
        }
        let x = picked.ok_or(GraphError::NoConsistentExtension)?;
        for y in BitIter(g.undirected_mask(x) & alive) {
            pa[x] |= bit(y);
        }
        alive &= !bit(x);
    }
    Dag::from_parent_masks(p, pa)
}

/// The CPDAG of `d`'s Markov equivalence class: the pattern (skeleton plus
/// v-structure arrows) closed under the Meek rules.
pub fn dag_to_cpdag(d: &Dag) -> Pdag {
    dag_to_icpdag(d, &TargetSet::empty())
}

/// The I-CPDAG of `d`'s I-equivalence class: as the CPDAG pattern, but every
/// edge incident to an intervention target keeps its orientation from `d`.
pub fn dag_to_icpdag(d: &Dag, targets: &TargetSet) -> Pdag {
    let p = d.p();
    let mut g = Pdag::empty(p).expect("p validated by Dag");
    for (i, j) in d.edges() {
        g.und[i] |= bit(j);
        g.und[j] |= bit(i);
    }
    for (i, k, j) in d.v_structures() {
        if g.has_undirected(i, k) {
            g.orient(i, k);
        }
        if g.has_undirected(j, k) {
            g.orient(j, k);
        }
    }
    for (i, j) in d.edges() {
        if (targets.contains(i) || targets.contains(j)) && g.has_undirected(i, j) {
            g.orient(i, j);
        }
    }
    meek_closure(&g)
}

/// Completion step used by the inner search: completes `g` to the
/// observational CPDAG, re-orients every edge incident to a target to its
/// orientation in `g`, and closes under the Meek rules.
///
/// Requires that no undirected edge of `g` touches a target.
pub fn gnies_completion(g: &Pdag, targets: &TargetSet) -> Result<Pdag, GraphError> {
    let p = g.p();
    for t in targets.iter() {
        check_node(t, p)?;
        if let Some(j) = BitIter(g.undirected_mask(t)).next() {
            return Err(GraphError::UndirectedAtTarget(t, j));
        }
    }
    let d = pdag_to_dag(g)?;
    let mut c = dag_to_cpdag(&d);
    for t in targets.iter() {
        for j in BitIter(g.children_mask(t)) {
            if c.has_undirected(t, j) {
                c.orient(t, j);
            } else if c.has_directed(j, t) {
                c.remove_between(t, j);
                c.add_directed(t, j);
            }
        }
        for j in BitIter(g.parents_mask(t)) {
            if c.has_undirected(j, t) {
                c.orient(j, t);
            } else if c.has_directed(t, j) {
                c.remove_between(t, j);
                c.add_directed(j, t);
            }
        }
    }
    Ok(meek_closure(&c))
}
