// SPDX-License-Identifier: MIT
//! Exhaustive enumeration: all labeled DAGs on small node sets, and all
//! members of the class represented by an (I-)CPDAG.

use super::{
    bits, dag_to_icpdag, meek_closure, Dag, GraphClass, GraphError, Pdag, TargetSet,
    DEFAULT_CLASS_CAP,
};

/// Upper bound on `p` for [`enumerate_all_dags`]; there are 29281 labeled
/// DAGs at `p = 5` and over a million at `p = 6`.
pub const MAX_ENUM_NODES: usize = 5;

/// Yields every labeled DAG on `p` nodes exactly once.
///
/// Iterates over all assignments of `{absent, i->j, j->i}` to the node pairs
/// and keeps the acyclic ones.
pub fn enumerate_all_dags(p: usize) -> Result<impl Iterator<Item = Dag>, GraphError> {
    if p > MAX_ENUM_NODES {
        return Err(GraphError::EnumerationTooLarge(p));
    }
    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    Ok(DagEnumerator {
        p,
        pairs,
        state: None,
        done: false,
    })
}

struct DagEnumerator {
    p: usize,
    pairs: Vec<(usize, usize)>,
    /// base-3 counter over the pairs: 0 = absent, 1 = i->j, 2 = j->i
    state: Option<Vec<u8>>,
    done: bool,
}

impl DagEnumerator {
    fn build(&self) -> Option<Dag> {
        let state = self.state.as_ref().unwrap();
        let mut edges = Vec::new();
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            match state[k] {
                0 => {}
                1 => edges.push((i, j)),
                _ => edges.push((j, i)),
            }
        }
        Dag::new(self.p, &edges).ok()
    }

    fn advance(&mut self) {
        let state = self.state.as_mut().unwrap();
        for digit in state.iter_mut() {
            if *digit < 2 {
                *digit += 1;
                return;
            }
            *digit = 0;
        }
        self.done = true;
    }
}

impl Iterator for DagEnumerator {
    type Item = Dag;

    fn next(&mut self) -> Option<Dag> {
        loop {
            if self.done {
                return None;
            }
            if self.state.is_none() {
                self.state = Some(vec![0; self.pairs.len()]);
            } else {
                self.advance();
                if self.done {
                    return None;
                }
            }
            if let Some(d) = self.build() {
                return Some(d);
            }
        }
    }
}

/// All DAGs `d` with `dag_to_icpdag(d, targets) == c`.
///
/// Errors with [`GraphError::ClassTooLarge`] when more than
/// [`DEFAULT_CLASS_CAP`] members are found, and with
/// [`GraphError::InvalidClassRepresentation`] when no consistent member maps
/// back to `c`.
pub fn enumerate_class(c: &Pdag, targets: &TargetSet) -> Result<GraphClass, GraphError> {
    let (class, truncated) = enumerate_class_capped(c, targets, DEFAULT_CLASS_CAP)?;
    if truncated {
        return Err(GraphError::ClassTooLarge(DEFAULT_CLASS_CAP));
    }
    Ok(class)
}

/// As [`enumerate_class`], but stops after `cap` members and reports
/// truncation instead of erroring.
pub fn enumerate_class_capped(
    c: &Pdag,
    targets: &TargetSet,
    cap: usize,
) -> Result<(GraphClass, bool), GraphError> {
    let mut members = Vec::new();
    let mut truncated = false;
    extend_recursive(c.clone(), c, targets, cap, &mut members, &mut truncated);
    if members.is_empty() {
        return Err(GraphError::InvalidClassRepresentation);
    }
    let class = GraphClass::from_equivalence_members(members)?;
    Ok((class, truncated))
}

/// Recursively orients undirected edges (propagating with the Meek rules
/// after each choice) and keeps the leaves that round-trip back to `c`.
fn extend_recursive(
    g: Pdag,
    c: &Pdag,
    targets: &TargetSet,
    cap: usize,
    members: &mut Vec<Dag>,
    truncated: &mut bool,
) {
    if *truncated {
        return;
    }
    // first undirected edge, lowest (i, j)
    let mut edge = None;
    'find: for i in 0..g.p() {
        for j in bits(g.undirected_mask(i)) {
            if i < j {
                edge = Some((i, j));
                break 'find;
            }
        }
    }
    match edge {
        None => {
            if let Ok(d) = g.to_dag() {
                if dag_to_icpdag(&d, targets) == *c {
                    if members.len() >= cap {
                        *truncated = true;
                        return;
                    }
                    members.push(d);
                }
            }
        }
        Some((i, j)) => {
            for (a, b) in [(i, j), (j, i)] {
                let mut h = g.clone();
                h.orient(a, b);
                extend_recursive(meek_closure(&h), c, targets, cap, members, truncated);
            }
        }
    }
}
