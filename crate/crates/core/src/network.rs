//! Directed communication graph, its column-stochastic out-degree weights and
//! a lockstep message fabric that every protocol in the crate runs on.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("self-loop on node {0}; self weights are implicit")]
    SelfLoop(usize),
    #[error("edge ({from}, {to}) references a node outside 0..{n}")]
    NodeOutOfRange { from: usize, to: usize, n: usize },
    #[error("weight matrix must be square, got {0}x{1}")]
    NonSquareWeights(usize, usize),
    #[error("protocol violation: node {from} sent to {to}, which is not an out-neighbour")]
    NotANeighbour { from: usize, to: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
}

impl Digraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, NetworkError> {
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        let mut set = BTreeSet::new();
        for &(from, to) in edges {
            if from >= n || to >= n {
                return Err(NetworkError::NodeOutOfRange { from, to, n });
            }
            if from == to {
                return Err(NetworkError::SelfLoop(from));
            }
            set.insert((from, to));
        }
        let mut out = vec![Vec::new(); n];
        let mut inn = vec![Vec::new(); n];
        for &(from, to) in &set {
            out[from].push(to);
            inn[to].push(from);
        }
        for list in inn.iter_mut() {
            list.sort_unstable();
        }
        Ok(Self { n, edges: set, out, inn })
    }

    /// Edges from the off-diagonal support of a weight matrix in the
    /// `p[to][from]` convention (column `j` holds what node `j` sends).
    pub fn from_weight_support(p: &Matrix) -> Result<Self, NetworkError> {
        if !p.is_square() {
            return Err(NetworkError::NonSquareWeights(p.nrows(), p.ncols()));
        }
        let n = p.nrows();
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|from| (0..n).map(move |to| (from, to)))
            .filter(|&(from, to)| from != to && p[(to, from)] != 0.0)
            .collect();
        Self::from_edges(n, &edges)
    }

    pub fn directed_cycle(n: usize) -> Result<Self, NetworkError> {
        let edges: Vec<_> = if n > 1 { (0..n).map(|i| (i, (i + 1) % n)).collect() } else { Vec::new() };
        Self::from_edges(n, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn out_neighbors(&self, j: usize) -> &[usize] {
        &self.out[j]
    }

    pub fn in_neighbors(&self, j: usize) -> &[usize] {
        &self.inn[j]
    }

    pub fn out_degree(&self, j: usize) -> usize {
        self.out[j].len()
    }

    /// `p_lj = 1/(1 + d_out_j)` for `l` in the out-neighbourhood of `j` and `l = j`.
    pub fn out_weight_matrix(&self) -> Matrix {
        let mut p = Matrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let w = 1.0 / (1.0 + self.out_degree(j) as f64);
            p[(j, j)] = w;
            for &l in &self.out[j] {
                p[(l, j)] = w;
            }
        }
        p
    }

    /// Hop distances from `source` along directed edges; `None` if unreachable.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for &v in &self.out[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// `dist[i][j]`: hops from `i` to `j`.
    pub fn all_pairs_distances(&self) -> Vec<Vec<Option<usize>>> {
        (0..self.n).map(|i| self.distances_from(i)).collect()
    }

    pub fn is_strongly_connected(&self) -> bool {
        let forward = self.distances_from(0).iter().all(Option::is_some);
        if !forward {
            return false;
        }
        // reachability of node 0 in the reversed graph
        let mut seen = vec![false; self.n];
        seen[0] = true;
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            for &v in &self.inn[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Longest shortest path, or `None` if the graph is not strongly connected.
    pub fn diameter(&self) -> Option<usize> {
        let mut worst = 0;
        for row in self.all_pairs_distances() {
            for d in row {
                worst = worst.max(d?);
            }
        }
        Some(worst)
    }
}

/// Messages queued by one node during one round.
pub struct Outbox<'a, M> {
    from: usize,
    graph: &'a Digraph,
    queue: &'a mut Vec<(usize, usize, M)>,
}

impl<M: Clone> Outbox<'_, M> {
    pub fn node(&self) -> usize {
        self.from
    }

    pub fn send(&mut self, to: usize, msg: M) -> Result<(), NetworkError> {
        if !self.graph.has_edge(self.from, to) {
            return Err(NetworkError::NotANeighbour { from: self.from, to });
        }
        self.queue.push((self.from, to, msg));
        Ok(())
    }

    /// One copy per out-neighbour.
    pub fn broadcast(&mut self, msg: M) {
        for &to in self.graph.out_neighbors(self.from) {
            self.queue.push((self.from, to, msg.clone()));
        }
    }
}

/// Per-round delivery: `(sender, message)` pairs sorted by sender.
pub type Inbox<M> = Vec<(usize, M)>;

/// Lockstep network simulation. Everything sent during a round is delivered,
/// exactly once and ordered by sender id, before the next round begins.
#[derive(Debug, Clone)]
pub struct SyncFabric {
    graph: Digraph,
    round: usize,
    sent_total: usize,
    last_round_sent: usize,
}

impl SyncFabric {
    pub fn new(graph: Digraph) -> Self {
        Self { graph, round: 0, sent_total: 0, last_round_sent: 0 }
    }

    pub fn graph(&self) -> &Digraph {
        &self.graph
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn messages_sent(&self) -> usize {
        self.sent_total
    }

    pub fn last_round_messages(&self) -> usize {
        self.last_round_sent
    }

    /// Runs `send` for every node in id order, then hands each node its inbox.
    /// Nodes with nothing addressed to them get an empty inbox.
    pub fn round_exchange<M, S, R>(&mut self, mut send: S, mut recv: R) -> Result<(), NetworkError>
    where
        M: Clone,
        S: FnMut(&mut Outbox<'_, M>) -> Result<(), NetworkError>,
        R: FnMut(usize, Inbox<M>),
    {
        let n = self.graph.node_count();
        let mut queue = Vec::new();
        for from in 0..n {
            let mut outbox = Outbox { from, graph: &self.graph, queue: &mut queue };
            send(&mut outbox)?;
        }
        let count = queue.len();
        let mut inboxes: Vec<Inbox<M>> = (0..n).map(|_| Vec::new()).collect();
        for (from, to, msg) in queue {
            inboxes[to].push((from, msg));
        }
        for inbox in inboxes.iter_mut() {
            inbox.sort_by_key(|(from, _)| *from);
        }
        self.round += 1;
        self.sent_total += count;
        self.last_round_sent = count;
        for (j, inbox) in inboxes.into_iter().enumerate() {
            recv(j, inbox);
        }
        Ok(())
    }
}

/// A Hamiltonian cycle through a shuffled node order plus every other
/// ordered pair with probability `extra`. Strongly connected by construction.
pub fn random_strongly_connected<R: Rng + ?Sized>(rng: &mut R, n: usize, extra: f64) -> Digraph {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges: Vec<(usize, usize)> = if n > 1 { (0..n).map(|i| (order[i], order[(i + 1) % n])).collect() } else { Vec::new() };
    for from in 0..n {
        for to in 0..n {
            if from != to && rng.random_bool(extra) {
                edges.push((from, to));
            }
        }
    }
    Digraph::from_edges(n, &edges).expect("generated edges are in range")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Support of the four-node weight matrix used across the test suites.
    pub(crate) fn four_node() -> Digraph {
        Digraph::from_edges(4, &[(0, 1), (0, 3), (1, 2), (2, 0), (2, 1), (2, 3), (3, 0), (3, 2)]).unwrap()
    }

    #[test]
    fn single_node_weight() {
        let g = Digraph::from_edges(1, &[]).unwrap();
        assert_eq!(g.out_weight_matrix(), Matrix::from_element(1, 1, 1.0));
        assert!(g.is_strongly_connected());
    }

    #[test]
    fn cycle_weights() {
        let p = Digraph::directed_cycle(3).unwrap().out_weight_matrix();
        for j in 0..3 {
            assert_eq!(p[(j, j)], 0.5);
            assert_eq!(p[((j + 1) % 3, j)], 0.5);
            assert_eq!(p[((j + 2) % 3, j)], 0.0);
        }
    }

    #[test]
    fn four_node_weights_match_printed() {
        let p = four_node().out_weight_matrix();
        let expected = [
            [1.0 / 3.0, 0.0, 0.25, 1.0 / 3.0],
            [1.0 / 3.0, 0.5, 0.25, 0.0],
            [0.0, 0.5, 0.25, 1.0 / 3.0],
            [1.0 / 3.0, 0.0, 0.25, 1.0 / 3.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p[(i, j)], expected[i][j], "entry ({i},{j})");
            }
        }
        assert_eq!(Digraph::from_weight_support(&p).unwrap(), four_node());
    }

    #[test]
    fn connectivity() {
        assert!(!Digraph::from_edges(2, &[(0, 1)]).unwrap().is_strongly_connected());
        assert!(Digraph::directed_cycle(3).unwrap().is_strongly_connected());
        assert!(four_node().is_strongly_connected());
        assert_eq!(four_node().diameter(), Some(2));
        assert_eq!(Digraph::from_edges(2, &[(0, 1)]).unwrap().diameter(), None);
    }

    #[test]
    fn rejects_bad_edges() {
        assert_eq!(Digraph::from_edges(2, &[(1, 1)]), Err(NetworkError::SelfLoop(1)));
        assert!(matches!(Digraph::from_edges(2, &[(0, 2)]), Err(NetworkError::NodeOutOfRange { .. })));
        assert_eq!(Digraph::from_edges(0, &[]), Err(NetworkError::Empty));
    }

    #[test]
    fn fabric_no_sends() {
        let mut fabric = SyncFabric::new(four_node());
        let mut received = 0;
        fabric
            .round_exchange::<u8, _, _>(|_| Ok(()), |_, inbox| received += inbox.len())
            .unwrap();
        assert_eq!(received, 0);
        assert_eq!(fabric.round(), 1);
    }

    #[test]
    fn fabric_broadcast_counts() {
        let g = four_node();
        let mut fabric = SyncFabric::new(g.clone());
        let mut got = vec![Vec::new(); 4];
        fabric
            .round_exchange(
                |out| {
                    if out.node() == 2 {
                        out.broadcast(7u32);
                    }
                    Ok(())
                },
                |j, inbox| got[j] = inbox,
            )
            .unwrap();
        let delivered: usize = got.iter().map(Vec::len).sum();
        assert_eq!(delivered, g.out_degree(2));
        assert_eq!(fabric.last_round_messages(), 3);
    }

    #[test]
    fn fabric_rejects_non_neighbour() {
        let mut fabric = SyncFabric::new(four_node());
        let err = fabric.round_exchange(|out| if out.node() == 1 { out.send(0, ()) } else { Ok(()) }, |_, _| {});
        assert_eq!(err, Err(NetworkError::NotANeighbour { from: 1, to: 0 }));
    }

    #[test]
    fn fabric_ratio_round_matches_matrix_product() {
        let g = four_node();
        let p = g.out_weight_matrix();
        let x = crate::numerics::Vector::from_vec(vec![1.0, -2.0, 0.5, 4.0]);
        let mut fabric = SyncFabric::new(g.clone());
        let mut next = [0.0; 4];
        fabric
            .round_exchange(
                |out| {
                    let j = out.node();
                    out.broadcast(x[j] / (1.0 + g.out_degree(j) as f64));
                    Ok(())
                },
                |j, inbox| {
                    next[j] = x[j] / (1.0 + g.out_degree(j) as f64) + inbox.iter().map(|(_, v)| v).sum::<f64>();
                },
            )
            .unwrap();
        let direct = &p * &x;
        for j in 0..4 {
            assert!((next[j] - direct[j]).abs() < 1e-15);
        }
    }

    pub(crate) fn strongly_connected_graph() -> impl Strategy<Value = Digraph> {
        (1usize..=10)
            .prop_flat_map(|n| (Just(n), proptest::collection::vec((0..n, 0..n), 0..3 * n), proptest::collection::vec(0..n.max(1), n)))
            .prop_map(|(n, extra, perm_seed)| {
                // a Hamiltonian cycle through a shuffled order guarantees strong connectivity
                let mut order: Vec<usize> = (0..n).collect();
                for (i, &s) in perm_seed.iter().enumerate() {
                    order.swap(i, s % n);
                }
                let mut edges: Vec<(usize, usize)> =
                    if n > 1 { (0..n).map(|i| (order[i], order[(i + 1) % n])).collect() } else { Vec::new() };
                edges.extend(extra.into_iter().filter(|(a, b)| a != b));
                Digraph::from_edges(n, &edges).unwrap()
            })
    }

    #[test]
    fn random_graphs_are_strongly_connected() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 1..=10 {
            for extra in [0.0, 0.2, 0.7] {
                let g = random_strongly_connected(&mut rng, n, extra);
                assert_eq!(g.node_count(), n);
                assert!(g.is_strongly_connected());
            }
        }
    }

    proptest! {
        #[test]
        fn weights_column_stochastic(g in strongly_connected_graph()) {
            let p = g.out_weight_matrix();
            for j in 0..g.node_count() {
                prop_assert!((p.column(j).sum() - 1.0).abs() <= 1e-15);
            }
        }

        #[test]
        fn fabric_conserves_messages(g in strongly_connected_graph(), mask in proptest::collection::vec(any::<bool>(), 10)) {
            let mut fabric = SyncFabric::new(g.clone());
            let mut delivered = Vec::new();
            fabric.round_exchange(|out| {
                if mask[out.node()] {
                    out.broadcast(out.node());
                }
                Ok(())
            }, |j, inbox| delivered.extend(inbox.into_iter().map(|(from, m)| (from, j, m)))).unwrap();
            let expected: usize = (0..g.node_count()).filter(|&j| mask[j]).map(|j| g.out_degree(j)).sum();
            prop_assert_eq!(delivered.len(), expected);
            prop_assert_eq!(fabric.messages_sent(), expected);
            for (from, to, m) in delivered {
                prop_assert_eq!(from, m);
                prop_assert!(g.has_edge(from, to));
            }
        }
    }
}
