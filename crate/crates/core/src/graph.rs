//! Causal DAG over named features, plus enumeration and sampling of its
//! topological orderings.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

/// Largest number of features a graph may carry; contexts are `u64` bitmasks.
pub const MAX_NODES: usize = 64;

/// Default cap on exhaustive enumeration of topological orderings.
pub const DEFAULT_ORDERING_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph contains a directed cycle through {0}")]
    CycleDetected(String),
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("edge refers to unknown node {0:?}")]
    DanglingEdge(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("graph has {0} nodes; at most {MAX_NODES} are supported")]
    TooManyNodes(usize),
    #[error("more than {cap} topological orderings")]
    TooManyOrderings { cap: usize },
}

/// A set of feature indices, stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureSet(u64);

impl FeatureSet {
    pub const fn empty() -> Self {
        FeatureSet(0)
    }

    /// `{0, .., p-1}`.
    pub fn full(p: usize) -> Self {
        assert!(p <= MAX_NODES);
        if p == 64 {
            FeatureSet(u64::MAX)
        } else {
            FeatureSet((1u64 << p) - 1)
        }
    }

    pub const fn from_bits(bits: u64) -> Self {
        FeatureSet(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 >> i & 1 == 1
    }

    #[must_use]
    pub fn with(self, i: usize) -> Self {
        FeatureSet(self.0 | 1 << i)
    }

    #[must_use]
    pub fn without(self, i: usize) -> Self {
        FeatureSet(self.0 & !(1 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: FeatureSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(i)
            }
        })
    }
}

impl FromIterator<usize> for FeatureSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        iter.into_iter().fold(FeatureSet::empty(), FeatureSet::with)
    }
}

impl fmt::Debug for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Node sequence over `0..p`. Only orderings produced by [`CausalGraph`] are
/// guaranteed topological; use [`CausalGraph::is_topological`] otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ordering(Vec<usize>);

impl Ordering {
    pub fn new(permutation: Vec<usize>) -> Option<Self> {
        let p = permutation.len();
        let mut seen = vec![false; p];
        for &i in &permutation {
            if i >= p || seen[i] {
                return None;
            }
            seen[i] = true;
        }
        Some(Ordering(permutation))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Nodes strictly preceding `j`.
    pub fn prefix_set(&self, j: usize) -> FeatureSet {
        self.0.iter().take_while(|&&k| k != j).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalGraph {
    names: Vec<String>,
    edges: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl CausalGraph {
    /// Builds a graph from node names and `(parent, child)` name pairs.
    pub fn new<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)]) -> Result<Self, GraphError> {
        let names: Vec<String> = nodes.iter().map(|s| s.as_ref().to_owned()).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.as_str(), i).is_some() {
                return Err(GraphError::DuplicateNode(name.clone()));
            }
        }
        let lookup = |s: &S| {
            index
                .get(s.as_ref())
                .copied()
                .ok_or_else(|| GraphError::DanglingEdge(s.as_ref().to_owned()))
        };
        let idx_edges = edges
            .iter()
            .map(|(a, b)| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>, GraphError>>()?;
        Self::from_indices(names, &idx_edges)
    }

    pub fn from_indices(names: Vec<String>, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let p = names.len();
        if p > MAX_NODES {
            return Err(GraphError::TooManyNodes(p));
        }
        {
            let mut seen = BTreeSet::new();
            for name in &names {
                if !seen.insert(name.as_str()) {
                    return Err(GraphError::DuplicateNode(name.clone()));
                }
            }
        }
        let mut parents = vec![Vec::new(); p];
        let mut children = vec![Vec::new(); p];
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= p {
                return Err(GraphError::DanglingEdge(format!("#{a}")));
            }
            if b >= p {
                return Err(GraphError::DanglingEdge(format!("#{b}")));
            }
            if a == b {
                return Err(GraphError::CycleDetected(names[a].clone()));
            }
            if !set.insert((a, b)) {
                return Err(GraphError::DuplicateEdge(names[a].clone(), names[b].clone()));
            }
            parents[b].push(a);
            children[a].push(b);
        }
        for v in parents.iter_mut().chain(children.iter_mut()) {
            v.sort_unstable();
        }
        let g = CausalGraph {
            names,
            edges: set.into_iter().collect(),
            parents,
            children,
        };
        g.kahn_order()?;
        Ok(g)
    }

    /// Graph with no edges.
    pub fn empty(names: Vec<String>) -> Result<Self, GraphError> {
        Self::from_indices(names, &[])
    }

    fn kahn_order(&self) -> Result<Vec<usize>, GraphError> {
        let p = self.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..p).filter(|&i| indeg[i] == 0).collect();
        let mut out = Vec::with_capacity(p);
        while let Some(i) = ready.pop_first() {
            out.push(i);
            for &c in &self.children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if out.len() < p {
            let stuck = (0..p).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(GraphError::CycleDetected(self.names[stuck].clone()));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Parents of `j`, ascending.
    pub fn parents(&self, j: usize) -> &[usize] {
        &self.parents[j]
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    /// The lexicographically smallest topological ordering.
    pub fn topological_order(&self) -> Ordering {
        Ordering(self.kahn_order().expect("validated at construction"))
    }

    /// Strict ancestors of `j`.
    pub fn ancestors(&self, j: usize) -> FeatureSet {
        let mut set = FeatureSet::empty();
        let mut stack: Vec<usize> = self.parents[j].clone();
        while let Some(k) = stack.pop() {
            if !set.contains(k) {
                set = set.with(k);
                stack.extend_from_slice(&self.parents[k]);
            }
        }
        set
    }

    pub fn descendants(&self, j: usize) -> FeatureSet {
        let mut set = FeatureSet::empty();
        let mut stack: Vec<usize> = self.children[j].clone();
        while let Some(k) = stack.pop() {
            if !set.contains(k) {
                set = set.with(k);
                stack.extend_from_slice(&self.children[k]);
            }
        }
        set
    }

    /// True when every member's parents are also members.
    pub fn is_ancestor_closed(&self, set: FeatureSet) -> bool {
        set.iter().all(|j| self.parents[j].iter().all(|&k| set.contains(k)))
    }

    pub fn is_topological(&self, order: &Ordering) -> bool {
        if order.len() != self.len() {
            return false;
        }
        let mut pos = vec![0; self.len()];
        for (at, &i) in order.as_slice().iter().enumerate() {
            pos[i] = at;
        }
        self.edges.iter().all(|&(a, b)| pos[a] < pos[b])
    }

    /// Copy of the graph with every edge into a node of `targets` removed.
    pub fn mutilate(&self, targets: FeatureSet) -> CausalGraph {
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .copied()
            .filter(|&(_, b)| !targets.contains(b))
            .collect();
        CausalGraph::from_indices(self.names.clone(), &edges).expect("subgraph of a DAG is a DAG")
    }

    /// Every topological ordering, sorted lexicographically by node index.
    ///
    /// Backtracks over the currently sourceable nodes in ascending order, so
    /// the output is produced already sorted. Fails as soon as more than
    /// `cap` orderings have been found.
    pub fn enumerate_topological_orderings(&self, cap: usize) -> Result<Vec<Ordering>, GraphError> {
        let cap = cap.max(1);
        let p = self.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut placed = vec![false; p];
        let mut current = Vec::with_capacity(p);
        let mut out = Vec::new();
        self.extend_orderings(&mut indeg, &mut placed, &mut current, &mut out, cap)?;
        Ok(out)
    }

    fn extend_orderings(
        &self,
        indeg: &mut [usize],
        placed: &mut [bool],
        current: &mut Vec<usize>,
        out: &mut Vec<Ordering>,
        cap: usize,
    ) -> Result<(), GraphError> {
        if current.len() == self.len() {
            if out.len() == cap {
                return Err(GraphError::TooManyOrderings { cap });
            }
            out.push(Ordering(current.clone()));
            return Ok(());
        }
        for i in 0..self.len() {
            if placed[i] || indeg[i] != 0 {
                continue;
            }
            placed[i] = true;
            current.push(i);
            for &c in &self.children[i] {
                indeg[c] -= 1;
            }
            let res = self.extend_orderings(indeg, placed, current, out, cap);
            for &c in &self.children[i] {
                indeg[c] += 1;
            }
            current.pop();
            placed[i] = false;
            res?;
        }
        Ok(())
    }

    /// `n` topological orderings built by repeatedly picking a uniformly random
    /// source among the unplaced nodes. Uniform over C(G) only when the graph
    /// has no edges.
    pub fn sample_topological_orderings(&self, n: usize, seed: u64) -> Vec<Ordering> {
        let mut rng = rng_from_seed(seed);
        let p = self.len();
        let base: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        (0..n)
            .map(|_| {
                let mut indeg = base.clone();
                let mut ready: Vec<usize> = (0..p).filter(|&i| indeg[i] == 0).collect();
                let mut order = Vec::with_capacity(p);
                while !ready.is_empty() {
                    let pick = rng.gen_range(0..ready.len());
                    let i = ready.swap_remove(pick);
                    order.push(i);
                    for &c in &self.children[i] {
                        indeg[c] -= 1;
                        if indeg[c] == 0 {
                            ready.push(c);
                        }
                    }
                    // index order, so draws do not depend on swap_remove history
                    ready.sort_unstable();
                }
                Ordering(order)
            })
            .collect()
    }
}

/// JSON graph file: `{"nodes": [...], "edges": [[parent, child], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl From<&CausalGraph> for GraphFile {
    fn from(g: &CausalGraph) -> Self {
        GraphFile {
            nodes: g.names.clone(),
            edges: g
                .edges
                .iter()
                .map(|&(a, b)| (g.names[a].clone(), g.names[b].clone()))
                .collect(),
        }
    }
}

impl TryFrom<&GraphFile> for CausalGraph {
    type Error = GraphError;

    fn try_from(f: &GraphFile) -> Result<Self, GraphError> {
        CausalGraph::new(&f.nodes, &f.edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ns: &[&str]) -> Vec<String> {
        ns.iter().map(|s| s.to_string()).collect()
    }

    fn brute_force(g: &CausalGraph) -> Vec<Ordering> {
        fn permute(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if rest.is_empty() {
                out.push(prefix.clone());
                return;
            }
            for k in 0..rest.len() {
                let x = rest.remove(k);
                prefix.push(x);
                permute(prefix, rest, out);
                prefix.pop();
                rest.insert(k, x);
            }
        }
        let mut all = Vec::new();
        permute(&mut Vec::new(), &mut (0..g.len()).collect(), &mut all);
        let mut out: Vec<Ordering> = all
            .into_iter()
            .map(Ordering)
            .filter(|o| g.is_topological(o))
            .collect();
        out.sort();
        out
    }

    fn has_cycle_brute(p: usize, edges: &[(usize, usize)]) -> bool {
        // a cycle exists iff some node reaches itself within p steps
        let mut reach = vec![vec![false; p]; p];
        for &(a, b) in edges {
            reach[a][b] = true;
        }
        for k in 0..p {
            for i in 0..p {
                for j in 0..p {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        (0..p).any(|i| reach[i][i])
    }

    #[test]
    fn minimal_chain() {
        let g = CausalGraph::new(&["A", "B"], &[("A", "B")]).unwrap();
        assert_eq!(g.edges().len(), 1);
    }

    #[test]
    fn two_cycle_rejected() {
        let err = CausalGraph::new(&["A", "B"], &[("A", "B"), ("B", "A")]).unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(_)));
    }

    #[test]
    fn self_loop_duplicate_and_dangling() {
        assert!(matches!(
            CausalGraph::new(&["A"], &[("A", "A")]),
            Err(GraphError::CycleDetected(_))
        ));
        assert!(matches!(
            CausalGraph::new(&["A", "A"], &[]),
            Err(GraphError::DuplicateNode(_))
        ));
        assert!(matches!(
            CausalGraph::new(&["A"], &[("A", "B")]),
            Err(GraphError::DanglingEdge(_))
        ));
        assert!(matches!(
            CausalGraph::new(&["A", "B"], &[("A", "B"), ("A", "B")]),
            Err(GraphError::DuplicateEdge(..))
        ));
    }

    #[test]
    fn wzx_triangle_valid() {
        let edges = [(0, 1), (0, 2), (1, 2)];
        assert!(!has_cycle_brute(3, &edges));
        let g = CausalGraph::new(&["W", "Z", "X"], &[("W", "Z"), ("W", "X"), ("Z", "X")]).unwrap();
        assert_eq!(g.edges(), &edges);
    }

    #[test]
    fn enumeration_examples() {
        let empty = CausalGraph::empty(names(&["a", "b", "c"])).unwrap();
        let all = empty.enumerate_topological_orderings(100).unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(all, brute_force(&empty));

        let tri = CausalGraph::new(&["W", "Z", "X"], &[("W", "Z"), ("W", "X"), ("Z", "X")]).unwrap();
        let o = tri.enumerate_topological_orderings(100).unwrap();
        assert_eq!(o, vec![Ordering(vec![0, 1, 2])]);
        assert_eq!(o, brute_force(&tri));

        let diamond = CausalGraph::new(
            &["a", "b", "c", "d"],
            &[("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
        )
        .unwrap();
        let o = diamond.enumerate_topological_orderings(100).unwrap();
        assert_eq!(o.len(), 2);
        assert_eq!(o, brute_force(&diamond));
    }

    #[test]
    fn enumeration_overflow() {
        let g = CausalGraph::empty(names(&["a", "b", "c", "d"])).unwrap();
        assert_eq!(
            g.enumerate_topological_orderings(23),
            Err(GraphError::TooManyOrderings { cap: 23 })
        );
        assert_eq!(g.enumerate_topological_orderings(24).unwrap().len(), 24);
    }

    #[test]
    fn sampling_chain_and_determinism() {
        let chain = CausalGraph::new(&["a", "b", "c"], &[("a", "b"), ("b", "c")]).unwrap();
        for o in chain.sample_topological_orderings(50, 3) {
            assert_eq!(o.as_slice(), &[0, 1, 2]);
        }
        let g = CausalGraph::empty(names(&["a", "b", "c", "d"])).unwrap();
        assert_eq!(
            g.sample_topological_orderings(20, 11),
            g.sample_topological_orderings(20, 11)
        );
    }

    #[test]
    fn sampling_uniform_on_empty_graph() {
        let g = CausalGraph::empty(names(&["a", "b", "c"])).unwrap();
        let n = 6000;
        let samples = g.sample_topological_orderings(n, 42);
        let all = g.enumerate_topological_orderings(10).unwrap();
        for o in &all {
            let freq = samples.iter().filter(|s| *s == o).count() as f64 / n as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.03, "{o:?} {freq}");
        }
    }

    #[test]
    fn prefix_set_examples() {
        let o = Ordering::new(vec![0, 1, 2]).unwrap();
        assert_eq!(o.prefix_set(2), [0, 1].into_iter().collect());
        assert_eq!(o.prefix_set(0), FeatureSet::empty());
        let o = Ordering::new(vec![0, 1, 2, 3]).unwrap();
        assert_eq!(o.prefix_set(2), [0, 1].into_iter().collect());
        assert!(Ordering::new(vec![0, 0]).is_none());
    }

    #[test]
    fn ancestors_and_closure() {
        let g = CausalGraph::new(
            &["a", "b", "c", "d"],
            &[("a", "b"), ("b", "c"), ("a", "c")],
        )
        .unwrap();
        assert_eq!(g.ancestors(2), [0, 1].into_iter().collect());
        assert!(g.is_ancestor_closed([0, 1].into_iter().collect()));
        assert!(!g.is_ancestor_closed([1].into_iter().collect()));
        assert_eq!(g.descendants(0), [1, 2].into_iter().collect());
        let m = g.mutilate([2].into_iter().collect());
        assert!(m.parents(2).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_dag() -> impl Strategy<Value = CausalGraph> {
            (1usize..=6).prop_flat_map(|p| {
                proptest::collection::vec(any::<bool>(), p * (p - 1) / 2).prop_map(move |mask| {
                    let mut edges = Vec::new();
                    let mut k = 0;
                    for a in 0..p {
                        for b in a + 1..p {
                            if mask[k] {
                                edges.push((a, b));
                            }
                            k += 1;
                        }
                    }
                    let names = (0..p).map(|i| format!("n{i}")).collect();
                    CausalGraph::from_indices(names, &edges).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn enumeration_matches_brute_force(g in arb_dag()) {
                let fast = g.enumerate_topological_orderings(DEFAULT_ORDERING_CAP).unwrap();
                prop_assert_eq!(&fast, &brute_force(&g));
                for o in &fast {
                    for j in 0..g.len() {
                        prop_assert!(g.ancestors(j).is_subset(o.prefix_set(j)));
                    }
                }
            }

            #[test]
            fn sampled_orderings_are_topological(g in arb_dag(), seed in any::<u64>()) {
                for o in g.sample_topological_orderings(10, seed) {
                    prop_assert!(g.is_topological(&o));
                }
            }
        }
    }
}
