//! Road-element networks: the directed graph, its inlet/outlet/interior
//! partition, reachability checks, and a parametric topology generator.
//!
//! Node ids are 1-based. For a graph with `n_in` inlets, outlet block end
//! `n_out_end` and `n_total` elements:
//!
//! ```text
//! inlets    1 ..= n_in
//! outlets   n_in + 1 ..= n_out_end
//! interior  n_out_end + 1 ..= n_total
//! ```
//!
//! Interior element `id` occupies row/column `id - n_out_end - 1` of every
//! state-space matrix.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Inlet,
    Outlet,
    Interior,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("node {node} outside 1..={n_total}")]
    IndexOutOfRange { node: usize, n_total: usize },
    #[error("invalid partition: n_in={n_in}, n_out_end={n_out_end}, n_total={n_total}")]
    InvalidPartition {
        n_in: usize,
        n_out_end: usize,
        n_total: usize,
    },
    #[error("self-loop at node {0}")]
    SelfLoop(NodeId),
    #[error("edge {from}->{to} leaves outlet {from}")]
    EdgeFromOutlet { from: NodeId, to: NodeId },
    #[error("edge {from}->{to} enters inlet {to}")]
    EdgeToInlet { from: NodeId, to: NodeId },
    #[error("duplicate edge {from}->{to}")]
    DuplicateEdge { from: NodeId, to: NodeId },
    #[error("infeasible topology parameters: {0}")]
    InfeasibleParams(String),
}

/// Directed network of road elements. Immutable once built; the neighbor
/// maps are derived from the edge set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphDocument", into = "GraphDocument")]
pub struct NoirGraph {
    n_in: usize,
    n_out_end: usize,
    n_total: usize,
    edges: BTreeSet<(NodeId, NodeId)>,
    in_neighbors: Vec<Vec<NodeId>>,
    out_neighbors: Vec<Vec<NodeId>>,
}

/// Serialized form of a [`NoirGraph`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n_in: usize,
    pub n_out_end: usize,
    pub n_total: usize,
    pub edges: Vec<[usize; 2]>,
}

impl TryFrom<GraphDocument> for NoirGraph {
    type Error = NetworkError;

    fn try_from(doc: GraphDocument) -> Result<Self, Self::Error> {
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        NoirGraph::build(&edges, doc.n_in, doc.n_out_end, doc.n_total)
    }
}

impl From<NoirGraph> for GraphDocument {
    fn from(g: NoirGraph) -> Self {
        GraphDocument {
            n_in: g.n_in,
            n_out_end: g.n_out_end,
            n_total: g.n_total,
            edges: g.edges.iter().map(|(a, b)| [a.0, b.0]).collect(),
        }
    }
}

impl NoirGraph {
    /// Validates the partition and edge list and derives the neighbor maps.
    pub fn build(
        edges: &[(usize, usize)],
        n_in: usize,
        n_out_end: usize,
        n_total: usize,
    ) -> Result<Self, NetworkError> {
        if n_in > n_out_end || n_out_end > n_total {
            return Err(NetworkError::InvalidPartition {
                n_in,
                n_out_end,
                n_total,
            });
        }
        let mut set = BTreeSet::new();
        let mut in_neighbors = vec![Vec::new(); n_total];
        let mut out_neighbors = vec![Vec::new(); n_total];
        for &(from, to) in edges {
            for node in [from, to] {
                if node == 0 || node > n_total {
                    return Err(NetworkError::IndexOutOfRange { node, n_total });
                }
            }
            let (a, b) = (NodeId(from), NodeId(to));
            if from == to {
                return Err(NetworkError::SelfLoop(a));
            }
            if from > n_in && from <= n_out_end {
                return Err(NetworkError::EdgeFromOutlet { from: a, to: b });
            }
            if to <= n_in {
                return Err(NetworkError::EdgeToInlet { from: a, to: b });
            }
            if !set.insert((a, b)) {
                return Err(NetworkError::DuplicateEdge { from: a, to: b });
            }
        }
        for &(a, b) in &set {
            out_neighbors[a.0 - 1].push(b);
            in_neighbors[b.0 - 1].push(a);
        }
        Ok(NoirGraph {
            n_in,
            n_out_end,
            n_total,
            edges: set,
            in_neighbors,
            out_neighbors,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out_end(&self) -> usize {
        self.n_out_end
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_outlets(&self) -> usize {
        self.n_out_end - self.n_in
    }

    /// Dimension of the interior state vector, `N - N_out`.
    pub fn n_interior(&self) -> usize {
        self.n_total - self.n_out_end
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        if id.0 <= self.n_in {
            NodeKind::Inlet
        } else if id.0 <= self.n_out_end {
            NodeKind::Outlet
        } else {
            NodeKind::Interior
        }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 >= 1 && id.0 <= self.n_total
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn in_neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.in_neighbors[id.0 - 1]
    }

    pub fn out_neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.out_neighbors[id.0 - 1]
    }

    pub fn inlets(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.n_in).map(NodeId)
    }

    pub fn outlets(&self) -> impl Iterator<Item = NodeId> {
        (self.n_in + 1..=self.n_out_end).map(NodeId)
    }

    pub fn interior(&self) -> impl Iterator<Item = NodeId> {
        (self.n_out_end + 1..=self.n_total).map(NodeId)
    }

    /// Row/column of an interior element in state-space matrices.
    pub fn interior_index(&self, id: NodeId) -> Option<usize> {
        (id.0 > self.n_out_end && id.0 <= self.n_total).then(|| id.0 - self.n_out_end - 1)
    }

    pub fn interior_node(&self, index: usize) -> NodeId {
        NodeId(index + self.n_out_end + 1)
    }

    pub fn to_document(&self) -> GraphDocument {
        self.clone().into()
    }
}

/// Outcome of the two reachability conditions for bounded dynamics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathReport {
    pub inlet_reachability: bool,
    pub outlet_reachability: bool,
    /// Interior nodes not reachable from any inlet.
    pub unreachable_from_inlets: Vec<NodeId>,
    /// Interior nodes from which no outlet can be reached.
    pub cannot_reach_outlet: Vec<NodeId>,
    /// Union of the two lists above, sorted.
    pub failing_nodes: Vec<NodeId>,
}

impl PathReport {
    pub fn passed(&self) -> bool {
        self.inlet_reachability && self.outlet_reachability
    }
}

fn bfs<'a, F>(g: &'a NoirGraph, sources: impl Iterator<Item = NodeId>, next: F) -> Vec<bool>
where
    F: Fn(NodeId) -> &'a [NodeId],
{
    let mut seen = vec![false; g.n_total()];
    let mut queue: VecDeque<NodeId> = VecDeque::new();
    for s in sources {
        seen[s.0 - 1] = true;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        for &w in next(v) {
            if !seen[w.0 - 1] {
                seen[w.0 - 1] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

/// Checks that every interior element is reachable from some inlet and can
/// reach some outlet.
pub fn check_theorem1_paths(g: &NoirGraph) -> PathReport {
    let forward = bfs(g, g.inlets(), |v| g.out_neighbors(v));
    let backward = bfs(g, g.outlets(), |v| g.in_neighbors(v));
    let unreachable_from_inlets: Vec<NodeId> =
        g.interior().filter(|v| !forward[v.0 - 1]).collect();
    let cannot_reach_outlet: Vec<NodeId> = g.interior().filter(|v| !backward[v.0 - 1]).collect();
    let failing_nodes: Vec<NodeId> = unreachable_from_inlets
        .iter()
        .chain(&cannot_reach_outlet)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    PathReport {
        inlet_reachability: unreachable_from_inlets.is_empty(),
        outlet_reachability: cannot_reach_outlet.is_empty(),
        unreachable_from_inlets,
        cannot_reach_outlet,
        failing_nodes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionPattern {
    /// Junctions on a directed cycle with seeded chord roads.
    Grid,
    /// One interior road between consecutive junctions of a directed cycle.
    Ring,
    /// Edges supplied explicitly; not generated.
    Custom,
}

/// Road-level description of a network. Each road is a directed chain of
/// elements. The first element of an inlet road is the inlet and the last
/// element of an outlet road is the outlet; any further boundary-road
/// elements are interior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyParams {
    pub interior_road_count: usize,
    pub elements_per_interior_road: usize,
    pub inlet_road_count: usize,
    pub outlet_road_count: usize,
    pub elements_per_boundary_road: usize,
    pub connection_pattern: ConnectionPattern,
}

impl TopologyParams {
    /// 24 roads: 8 interior roads of 4 elements, 8 inlet and 8 outlet roads
    /// of 2 elements. Gives N = 64, inlets 1..=8, outlets 9..=16.
    pub fn reference_preset() -> Self {
        TopologyParams {
            interior_road_count: 8,
            elements_per_interior_road: 4,
            inlet_road_count: 8,
            outlet_road_count: 8,
            elements_per_boundary_road: 2,
            connection_pattern: ConnectionPattern::Grid,
        }
    }

    pub fn total_elements(&self) -> usize {
        self.interior_road_count * self.elements_per_interior_road
            + (self.inlet_road_count + self.outlet_road_count) * self.elements_per_boundary_road
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let counts = [
            ("interior_road_count", self.interior_road_count),
            ("elements_per_interior_road", self.elements_per_interior_road),
            ("inlet_road_count", self.inlet_road_count),
            ("outlet_road_count", self.outlet_road_count),
            ("elements_per_boundary_road", self.elements_per_boundary_road),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(NetworkError::InfeasibleParams(format!("{name} must be >= 1")));
            }
        }
        if self.connection_pattern == ConnectionPattern::Custom {
            return Err(NetworkError::InfeasibleParams(
                "custom pattern needs an explicit edge list".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a network from road-level parameters.
///
/// Roads meet at junctions. Every interior road ending at a junction feeds
/// the first element of every interior and outlet road leaving it. An inlet
/// road feeds exactly one interior road at its junction so that each inlet
/// delivers its inflow to a single element. Deterministic in `(params, seed)`.
pub fn generate_topology(p: &TopologyParams, seed: u64) -> Result<NoirGraph, NetworkError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let r = p.interior_road_count;
    // (from junction, to junction) per interior road
    let mut roads: Vec<(usize, usize)> = Vec::with_capacity(r);
    let junctions = if r == 1 {
        roads.push((0, 1));
        2
    } else {
        let j = match p.connection_pattern {
            ConnectionPattern::Ring => r,
            _ => r.div_ceil(2).max(2),
        };
        for v in 0..j {
            roads.push((v, (v + 1) % j));
        }
        while roads.len() < r {
            let fresh: Vec<(usize, usize)> = (0..j)
                .flat_map(|a| (0..j).map(move |b| (a, b)))
                .filter(|&(a, b)| a != b && !roads.contains(&(a, b)))
                .collect();
            let pick = if fresh.is_empty() {
                let a = rng.random_range(0..j);
                (a, (a + 1 + rng.random_range(0..j - 1)) % j)
            } else {
                fresh[rng.random_range(0..fresh.len())]
            };
            roads.push(pick);
        }
        j
    };

    let (inlet_junctions, outlet_junctions) = if r == 1 {
        (vec![0], vec![1])
    } else {
        let mut a: Vec<usize> = (0..junctions).collect();
        let mut b = a.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        (a, b)
    };

    // Node numbering: inlets, outlets, then interior elements road by road.
    let n_in = p.inlet_road_count;
    let n_out_end = n_in + p.outlet_road_count;
    let mut next_interior = n_out_end + 1;
    let mut alloc = |count: usize| -> Vec<usize> {
        let ids: Vec<usize> = (next_interior..next_interior + count).collect();
        next_interior += count;
        ids
    };
    let interior_chains: Vec<Vec<usize>> =
        (0..r).map(|_| alloc(p.elements_per_interior_road)).collect();
    let extra = p.elements_per_boundary_road - 1;
    let inlet_chains: Vec<Vec<usize>> = (0..p.inlet_road_count)
        .map(|l| {
            let mut chain = vec![l + 1];
            chain.extend(alloc(extra));
            chain
        })
        .collect();
    let outlet_chains: Vec<Vec<usize>> = (0..p.outlet_road_count)
        .map(|l| {
            let mut chain = alloc(extra);
            chain.push(n_in + l + 1);
            chain
        })
        .collect();
    let n_total = next_interior - 1;
    debug_assert_eq!(n_total, p.total_elements());

    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for chain in interior_chains
        .iter()
        .chain(&inlet_chains)
        .chain(&outlet_chains)
    {
        for w in chain.windows(2) {
            edges.insert((w[0], w[1]));
        }
    }

    let outlet_at: Vec<usize> = (0..p.outlet_road_count)
        .map(|l| outlet_junctions[l % outlet_junctions.len()])
        .collect();
    for (ri, &(_, end)) in roads.iter().enumerate() {
        let last = *interior_chains[ri].last().unwrap();
        for (rj, &(start, _)) in roads.iter().enumerate() {
            if start == end {
                edges.insert((last, interior_chains[rj][0]));
            }
        }
        for (l, &j) in outlet_at.iter().enumerate() {
            if j == end {
                edges.insert((last, outlet_chains[l][0]));
            }
        }
    }
    for (l, chain) in inlet_chains.iter().enumerate() {
        let j = inlet_junctions[l % inlet_junctions.len()];
        let leaving: Vec<usize> = (0..r).filter(|&ri| roads[ri].0 == j).collect();
        let ri = leaving[rng.random_range(0..leaving.len())];
        edges.insert((*chain.last().unwrap(), interior_chains[ri][0]));
    }

    let edge_list: Vec<(usize, usize)> = edges.into_iter().collect();
    let g = NoirGraph::build(&edge_list, n_in, n_out_end, n_total)?;
    let report = check_theorem1_paths(&g);
    if !report.passed() {
        return Err(NetworkError::InfeasibleParams(format!(
            "generated graph fails path conditions at {:?}",
            report.failing_nodes
        )));
    }
    Ok(g)
}
