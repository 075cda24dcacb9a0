use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type Node = [usize; 3];

/// Nearest-neighbour transfer order over a tile grid.
///
/// The first column (along z) is a chain from the root, every first-plane column
/// hangs off its neighbour along y, and every later plane hangs off the previous one along x.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferDag {
    pub counts: [usize; 3],
    parents: BTreeMap<Node, Option<Node>>,
}

pub fn parent_of([x, y, z]: Node) -> Option<Node> {
    if x > 0 {
        Some([x - 1, y, z])
    } else if y > 0 {
        Some([0, y - 1, z])
    } else if z > 0 {
        Some([0, 0, z - 1])
    } else {
        None
    }
}

pub fn build_transfer_dag(counts: [usize; 3]) -> TransferDag {
    let mut parents = BTreeMap::new();
    for x in 0..counts[0] {
        for y in 0..counts[1] {
            for z in 0..counts[2] {
                parents.insert([x, y, z], parent_of([x, y, z]));
            }
        }
    }
    TransferDag { counts, parents }
}

impl TransferDag {
    /// A graph with the same nodes and no edges: every member is independent.
    pub fn independent(counts: [usize; 3]) -> TransferDag {
        let mut dag = build_transfer_dag(counts);
        dag.parents.values_mut().for_each(|p| *p = None);
        dag
    }

    pub fn nodes(&self) -> impl Iterator<Item = Node> + '_ {
        self.parents.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, node: Node) -> Option<Node> {
        self.parents.get(&node).copied().flatten()
    }

    pub fn contains(&self, node: Node) -> bool {
        self.parents.contains_key(&node)
    }

    /// `(parent, child)` pairs in child order.
    pub fn edges(&self) -> Vec<(Node, Node)> {
        self.parents.iter().filter_map(|(&c, &p)| p.map(|p| (p, c))).collect()
    }

    pub fn children(&self, node: Node) -> Vec<Node> {
        self.parents
            .iter()
            .filter(|(_, &p)| p == Some(node))
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn roots(&self) -> Vec<Node> {
        self.parents
            .iter()
            .filter(|(_, p)| p.is_none())
            .map(|(&c, _)| c)
            .collect()
    }

    /// Number of edges from the node's root.
    pub fn depth(&self, mut node: Node) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent(node) {
            node = p;
            d += 1;
        }
        d
    }

    pub fn longest_path(&self) -> usize {
        self.nodes().map(|n| self.depth(n)).max().unwrap_or(0)
    }

    /// Unit-cost list scheduling on a simulated clock; returns the number of time steps.
    /// `workers = None` means unlimited.
    pub fn simulate_makespan(&self, workers: Option<usize>) -> usize {
        let mut done: BTreeMap<Node, usize> = BTreeMap::new();
        let mut t = 0;
        while done.len() < self.len() {
            let ready: Vec<Node> = self
                .nodes()
                .filter(|n| !done.contains_key(n))
                .filter(|&n| self.parent(n).is_none_or(|p| done.get(&p).is_some_and(|&f| f <= t)))
                .collect();
            let take = workers.map_or(ready.len(), |w| w.min(ready.len()));
            for n in ready.into_iter().take(take) {
                done.insert(n, t + 1);
            }
            t += 1;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_has_no_edges() {
        let d = build_transfer_dag([1, 1, 1]);
        assert_eq!(d.len(), 1);
        assert!(d.edges().is_empty());
        assert_eq!(d.roots(), vec![[0, 0, 0]]);
    }

    #[test]
    fn two_cubed_parents() {
        let d = build_transfer_dag([2, 2, 2]);
        assert_eq!(d.len(), 8);
        assert_eq!(d.edges().len(), 7);
        assert_eq!(d.parent([0, 0, 1]), Some([0, 0, 0]));
        assert_eq!(d.parent([0, 1, 0]), Some([0, 0, 0]));
        assert_eq!(d.parent([0, 1, 1]), Some([0, 0, 1]));
        for y in 0..2 {
            for z in 0..2 {
                assert_eq!(d.parent([1, y, z]), Some([0, y, z]));
            }
        }
    }

    #[test]
    fn five_cubed_depths_and_makespan() {
        let d = build_transfer_dag([5, 5, 5]);
        assert_eq!(d.len(), 125);
        assert_eq!(d.edges().len(), 124);
        assert_eq!(d.roots().len(), 1);
        assert_eq!(d.longest_path(), 12);
        for n in d.nodes() {
            assert_eq!(d.depth(n), n[0] + n[1] + n[2]);
        }
        assert_eq!(d.simulate_makespan(None), 13);
        assert_eq!(d.simulate_makespan(Some(1)), 125);
    }

    #[test]
    fn independent_graph_runs_in_one_step() {
        let d = TransferDag::independent([2, 3, 2]);
        assert!(d.edges().is_empty());
        assert_eq!(d.simulate_makespan(None), 1);
        assert_eq!(d.simulate_makespan(Some(5)), 3);
    }
}
