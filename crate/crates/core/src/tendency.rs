//! Tendency actions and the interior transition matrix `A = I - P + Q P`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NodeId, NodeKind, NoirGraph};

/// Allowed deviation of a node's routing probabilities from 1.
pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TendencyError {
    #[error("action {action}: missing {what}")]
    MissingProbability { action: ActionId, what: String },
    #[error("action {action}: routing probabilities of node {node} sum to {sum}")]
    NormalizationViolated {
        action: ActionId,
        node: NodeId,
        sum: f64,
    },
    #[error("action {action}: {what} = {value} outside [0, 1]")]
    OutOfRange {
        action: ActionId,
        what: String,
        value: f64,
    },
    #[error("action {action}: tendency probability given for non-edge {from}->{to}")]
    UnknownEdge {
        action: ActionId,
        from: NodeId,
        to: NodeId,
    },
    #[error("action {action}: outflow probability given for outlet {node}")]
    OutletProbability { action: ActionId, node: NodeId },
    #[error("bad edge key {0:?}, expected \"j←i\"")]
    BadEdgeKey(String),
    #[error("bad node key {0:?}")]
    BadNodeKey(String),
    #[error("action set is empty")]
    EmptyActionSet,
    #[error("duplicate action id {0}")]
    DuplicateAction(ActionId),
    #[error("unknown action id {0}")]
    UnknownAction(ActionId),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix has a negative entry {0}")]
    NotNonnegative(f64),
    #[error("power iteration did not converge in {0} iterations")]
    NoConvergence(usize),
}

/// One hypothesis about driver behaviour: per-element outflow probabilities
/// and per-edge routing (tendency) probabilities.
///
/// `tendency_prob[(j, i)]` is the fraction of element `i`'s outflow sent to
/// its out-neighbor `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActionDocument", into = "ActionDocument")]
pub struct TendencyAction {
    pub id: ActionId,
    pub outflow_prob: BTreeMap<NodeId, f64>,
    pub tendency_prob: BTreeMap<(NodeId, NodeId), f64>,
}

/// Serialized form: node keys as decimal strings, edge keys as `"j←i"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionDocument {
    pub id: u32,
    pub outflow_prob: BTreeMap<String, f64>,
    pub tendency_prob: BTreeMap<String, f64>,
}

fn parse_node(s: &str) -> Result<NodeId, TendencyError> {
    s.trim()
        .parse::<usize>()
        .map(NodeId)
        .map_err(|_| TendencyError::BadNodeKey(s.to_string()))
}

/// Parses `"j←i"` (or the ASCII spelling `"j<-i"`) into `(j, i)`.
pub fn parse_edge_key(key: &str) -> Result<(NodeId, NodeId), TendencyError> {
    let (to, from) = key
        .split_once('←')
        .or_else(|| key.split_once("<-"))
        .ok_or_else(|| TendencyError::BadEdgeKey(key.to_string()))?;
    let bad = |_| TendencyError::BadEdgeKey(key.to_string());
    Ok((
        parse_node(to).map_err(bad)?,
        parse_node(from).map_err(bad)?,
    ))
}

pub fn edge_key(to: NodeId, from: NodeId) -> String {
    format!("{to}←{from}")
}

impl TryFrom<ActionDocument> for TendencyAction {
    type Error = TendencyError;

    fn try_from(doc: ActionDocument) -> Result<Self, Self::Error> {
        let outflow_prob = doc
            .outflow_prob
            .iter()
            .map(|(k, &v)| Ok((parse_node(k)?, v)))
            .collect::<Result<_, TendencyError>>()?;
        let tendency_prob = doc
            .tendency_prob
            .iter()
            .map(|(k, &v)| Ok((parse_edge_key(k)?, v)))
            .collect::<Result<_, TendencyError>>()?;
        Ok(TendencyAction {
            id: ActionId(doc.id),
            outflow_prob,
            tendency_prob,
        })
    }
}

impl From<TendencyAction> for ActionDocument {
    fn from(a: TendencyAction) -> Self {
        ActionDocument {
            id: a.id.0,
            outflow_prob: a
                .outflow_prob
                .iter()
                .map(|(k, &v)| (k.to_string(), v))
                .collect(),
            tendency_prob: a
                .tendency_prob
                .iter()
                .map(|(&(j, i), &v)| (edge_key(j, i), v))
                .collect(),
        }
    }
}

impl TendencyAction {
    pub fn p(&self, node: NodeId) -> Option<f64> {
        self.outflow_prob.get(&node).copied()
    }

    /// Routing probability from `from` to `to`.
    pub fn q(&self, to: NodeId, from: NodeId) -> Option<f64> {
        self.tendency_prob.get(&(to, from)).copied()
    }

    /// Flow fraction `p̄_i q̄_{j,i}` carried by edge `i -> j` per vehicle at `i`.
    pub fn edge_rate(&self, to: NodeId, from: NodeId) -> Option<f64> {
        Some(self.p(from)? * self.q(to, from)?)
    }

    /// Checks probabilities are present for every interior element and its
    /// outgoing edges, lie in `[0, 1]`, and that routing sums to 1.
    pub fn validate(&self, g: &NoirGraph) -> Result<(), TendencyError> {
        let id = self.id;
        let in_unit = |what: String, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TendencyError::OutOfRange {
                    action: id,
                    what,
                    value: v,
                })
            }
        };
        for (&node, &v) in &self.outflow_prob {
            if !g.contains(node) {
                return Err(TendencyError::BadNodeKey(node.to_string()));
            }
            if g.kind(node) == NodeKind::Outlet {
                return Err(TendencyError::OutletProbability { action: id, node });
            }
            in_unit(format!("p̄_{node}"), v)?;
        }
        for (&(to, from), &v) in &self.tendency_prob {
            if !g.contains(to) || !g.contains(from) || !g.has_edge(from, to) {
                return Err(TendencyError::UnknownEdge {
                    action: id,
                    from,
                    to,
                });
            }
            in_unit(format!("q̄_{}", edge_key(to, from)), v)?;
        }
        for node in g.interior() {
            if self.p(node).is_none() {
                return Err(TendencyError::MissingProbability {
                    action: id,
                    what: format!("outflow probability of node {node}"),
                });
            }
            let outs = g.out_neighbors(node);
            if outs.is_empty() {
                continue;
            }
            let mut sum = 0.0;
            for &to in outs {
                sum += self
                    .q(to, node)
                    .ok_or_else(|| TendencyError::MissingProbability {
                        action: id,
                        what: format!("tendency probability {}", edge_key(to, node)),
                    })?;
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(TendencyError::NormalizationViolated {
                    action: id,
                    node,
                    sum,
                });
            }
        }
        Ok(())
    }

    /// Same outflow probability everywhere and an even routing split.
    pub fn uniform(g: &NoirGraph, id: ActionId, p: f64) -> Self {
        let mut outflow_prob = BTreeMap::new();
        let mut tendency_prob = BTreeMap::new();
        for node in g.interior() {
            outflow_prob.insert(node, p);
            let outs = g.out_neighbors(node);
            for (&to, w) in outs.iter().zip(split_evenly(outs.len())) {
                tendency_prob.insert((to, node), w);
            }
        }
        TendencyAction {
            id,
            outflow_prob,
            tendency_prob,
        }
    }

    /// Random action: `p̄_i ~ U[p_lo, p_hi]` per interior element and random
    /// normalized routing weights.
    pub fn random<R: Rng + ?Sized>(
        g: &NoirGraph,
        id: ActionId,
        p_range: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let mut outflow_prob = BTreeMap::new();
        let mut tendency_prob = BTreeMap::new();
        for node in g.interior() {
            let p = if p_range.1 > p_range.0 {
                rng.random_range(p_range.0..=p_range.1)
            } else {
                p_range.0
            };
            outflow_prob.insert(node, p);
            let outs = g.out_neighbors(node);
            let weights: Vec<f64> = outs.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            for (&to, w) in outs.iter().zip(normalize(&weights)) {
                tendency_prob.insert((to, node), w);
            }
        }
        TendencyAction {
            id,
            outflow_prob,
            tendency_prob,
        }
    }
}

fn split_evenly(n: usize) -> Vec<f64> {
    normalize(&vec![1.0; n])
}

/// Normalizes positive weights to sum to one; the last entry absorbs rounding.
pub(crate) fn normalize(weights: &[f64]) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let total: f64 = weights.iter().sum();
    let mut out: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let head: f64 = out[..out.len() - 1].iter().sum();
    *out.last_mut().unwrap() = (1.0 - head).max(0.0);
    out
}

/// Ordered, non-empty list of candidate actions with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TendencyAction>", into = "Vec<TendencyAction>")]
pub struct ActionSet {
    actions: Vec<TendencyAction>,
}

impl TryFrom<Vec<TendencyAction>> for ActionSet {
    type Error = TendencyError;

    fn try_from(actions: Vec<TendencyAction>) -> Result<Self, Self::Error> {
        ActionSet::new(actions)
    }
}

impl From<ActionSet> for Vec<TendencyAction> {
    fn from(s: ActionSet) -> Self {
        s.actions
    }
}

impl ActionSet {
    pub fn new(actions: Vec<TendencyAction>) -> Result<Self, TendencyError> {
        if actions.is_empty() {
            return Err(TendencyError::EmptyActionSet);
        }
        let mut seen = BTreeSet::new();
        for a in &actions {
            if !seen.insert(a.id) {
                return Err(TendencyError::DuplicateAction(a.id));
            }
        }
        Ok(ActionSet { actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TendencyAction> {
        self.actions.iter()
    }

    pub fn first(&self) -> &TendencyAction {
        &self.actions[0]
    }

    pub fn get(&self, id: ActionId) -> Result<&TendencyAction, TendencyError> {
        self.actions
            .iter()
            .find(|a| a.id == id)
            .ok_or(TendencyError::UnknownAction(id))
    }

    pub fn validate(&self, g: &NoirGraph) -> Result<(), TendencyError> {
        self.actions.iter().try_for_each(|a| a.validate(g))
    }
}

/// Assembled interior transition matrix for one action plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TendencyMatrix {
    pub action_id: ActionId,
    pub a_matrix: DMatrix<f64>,
    /// Diagonal of `P`.
    pub p_diag: DVector<f64>,
    pub q_matrix: DMatrix<f64>,
    pub spectral_radius: f64,
    pub column_sums: DVector<f64>,
}

impl TendencyMatrix {
    pub fn dim(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.p_diag)
    }
}

/// Builds `A = I - P + Q P` over interior elements. `Q[(r, c)]` is the
/// routing probability from interior column `c` to interior row `r`; mass
/// routed to outlets leaves the state.
pub fn assemble_tendency_matrix(
    g: &NoirGraph,
    a: &TendencyAction,
) -> Result<TendencyMatrix, TendencyError> {
    a.validate(g)?;
    let n = g.n_interior();
    let mut p_diag = DVector::zeros(n);
    let mut q_matrix = DMatrix::zeros(n, n);
    for (c, node) in g.interior().enumerate() {
        p_diag[c] = a.p(node).expect("validated");
        for &to in g.out_neighbors(node) {
            if let Some(r) = g.interior_index(to) {
                q_matrix[(r, c)] = a.q(to, node).expect("validated");
            }
        }
    }
    let p_matrix = DMatrix::from_diagonal(&p_diag);
    let a_matrix = DMatrix::identity(n, n) - &p_matrix + &q_matrix * &p_matrix;
    let column_sums = DVector::from_iterator(n, a_matrix.column_iter().map(|c| c.sum()));
    let spectral_radius = if n == 0 {
        0.0
    } else {
        spectral_radius(&a_matrix, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?
    };
    Ok(TendencyMatrix {
        action_id: a.id,
        a_matrix,
        p_diag,
        q_matrix,
        spectral_radius,
        column_sums,
    })
}

/// `B[(r, j)] = 1` when inlet `j + 1` is an in-neighbor of interior row `r`.
pub fn assemble_b_matrix(g: &NoirGraph) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(g.n_interior(), g.n_in());
    for (r, node) in g.interior().enumerate() {
        for &from in g.in_neighbors(node) {
            if g.kind(from) == NodeKind::Inlet {
                b[(r, from.0 - 1)] = 1.0;
            }
        }
    }
    b
}

/// Perron root estimate with its eigenvector.
#[derive(Debug, Clone)]
pub struct PerronEstimate {
    pub radius: f64,
    /// Nonnegative eigenvector of the dominant strongly connected block,
    /// zero elsewhere.
    pub vector: DVector<f64>,
    /// Total power iterations over all blocks.
    pub iterations: usize,
}

/// Strongly connected components of the nonzero pattern (edge `c → r` when
/// `m[(r, c)] != 0`).
fn strong_components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let edges = (0..n)
        .flat_map(|c| (0..n).map(move |r| (r, c)))
        .filter(|&(r, c)| r != c && m[(r, c)] != 0.0)
        .map(|(r, c)| (c as u32, r as u32));
    let mut graph = DiGraph::<(), ()>::from_edges(edges);
    while graph.node_count() < n {
        graph.add_node(());
    }
    tarjan_scc(&graph)
        .into_iter()
        .map(|comp| {
            let mut members: Vec<usize> = comp.into_iter().map(|v| v.index()).collect();
            members.sort_unstable();
            members
        })
        .collect()
}

/// Power iteration on `(B + I) / 2` for an irreducible block `B`, until the
/// Collatz–Wielandt bracket `[min (Sx)_i/x_i, max (Sx)_i/x_i]` is narrower
/// than `tol`. Returns `(radius, vector, iterations)`.
fn irreducible_root(
    b: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, DVector<f64>, usize), TendencyError> {
    let n = b.nrows();
    let shifted = (b + DMatrix::identity(n, n)) * 0.5;
    let mut x = DVector::from_element(n, 1.0);
    for it in 1..=max_iter {
        let y = &shifted * &x;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let ratio = y[i] / x[i];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        x = &y / y.amax();
        if 2.0 * (hi - lo) < tol {
            return Ok(((lo + hi - 1.0).max(0.0), x, it));
        }
    }
    Err(TendencyError::NoConvergence(max_iter))
}

/// Perron root of a nonnegative square matrix.
///
/// The matrix is split into strongly connected blocks; the root is the
/// largest block root. Singleton blocks contribute their diagonal entry.
/// Larger blocks are irreducible, and the shift by `I` makes them primitive,
/// so power iteration converges even for periodic blocks.
pub fn perron(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<PerronEstimate, TendencyError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(TendencyError::NotSquare(n, m.ncols()));
    }
    if let Some(&neg) = m.iter().find(|&&v| v < 0.0) {
        return Err(TendencyError::NotNonnegative(neg));
    }
    let mut best = PerronEstimate {
        radius: 0.0,
        vector: DVector::zeros(n),
        iterations: 0,
    };
    let mut iterations = 0;
    for block in strong_components(m) {
        let (radius, local) = if block.len() == 1 {
            (m[(block[0], block[0])], DVector::from_element(1, 1.0))
        } else {
            let sub = m.select_rows(&block).select_columns(&block);
            let (r, v, it) = irreducible_root(&sub, tol, max_iter)?;
            iterations += it;
            (r, v)
        };
        if radius > best.radius || best.vector.iter().all(|&v| v == 0.0) {
            best.radius = radius;
            best.vector = DVector::zeros(n);
            for (k, &i) in block.iter().enumerate() {
                best.vector[i] = local[k];
            }
        }
    }
    best.iterations = iterations;
    Ok(best)
}

/// Spectral radius of a nonnegative square matrix.
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64, TendencyError> {
    perron(m, tol, max_iter).map(|p| p.radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NoirGraph;

    fn chain() -> NoirGraph {
        NoirGraph::build(&[(1, 3), (3, 2)], 1, 2, 3).unwrap()
    }

    fn chain_action(p: f64) -> TendencyAction {
        TendencyAction::uniform(&chain(), ActionId(1), p)
    }

    #[test]
    fn chain_matrix_is_one_half() {
        let tm = assemble_tendency_matrix(&chain(), &chain_action(0.5)).unwrap();
        assert_eq!(tm.a_matrix, DMatrix::from_element(1, 1, 0.5));
        assert!((tm.spectral_radius - 0.5).abs() < 1e-10);
        assert_eq!(tm.column_sums[0], 0.5);
    }

    #[test]
    fn zero_outflow_is_identity() {
        let g = NoirGraph::build(&[(1, 3), (3, 4), (4, 2)], 1, 2, 4).unwrap();
        let tm = assemble_tendency_matrix(&g, &TendencyAction::uniform(&g, ActionId(1), 0.0))
            .unwrap();
        assert_eq!(tm.a_matrix, DMatrix::identity(2, 2));
        assert!((tm.spectral_radius - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_node_cycle_with_outlet_tap() {
        // 3 <-> 4, both tap outlet 2
        let g = NoirGraph::build(&[(1, 3), (3, 4), (4, 3), (3, 2), (4, 2)], 1, 2, 4).unwrap();
        let tm = assemble_tendency_matrix(&g, &TendencyAction::uniform(&g, ActionId(1), 1.0))
            .unwrap();
        // A = [[0, .5], [.5, 0]], eigenvalues ±0.5
        assert_eq!(tm.a_matrix, DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));
        assert_eq!(tm.column_sums.as_slice(), &[0.5, 0.5]);
        assert!((tm.spectral_radius - 0.5).abs() < 1e-10);
    }

    #[test]
    fn b_matrix_entries() {
        assert_eq!(assemble_b_matrix(&chain()), DMatrix::from_element(1, 1, 1.0));
        let g = NoirGraph::build(&[(1, 3), (1, 4), (3, 2), (4, 2)], 1, 2, 4).unwrap();
        let b = assemble_b_matrix(&g);
        assert_eq!(b.column(0).sum(), 2.0);
    }

    #[test]
    fn missing_and_unnormalized_probabilities() {
        let mut a = chain_action(0.5);
        a.outflow_prob.clear();
        assert!(matches!(
            assemble_tendency_matrix(&chain(), &a),
            Err(TendencyError::MissingProbability { .. })
        ));
        let mut a = chain_action(0.5);
        a.tendency_prob.insert((NodeId(2), NodeId(3)), 0.9);
        assert!(matches!(
            assemble_tendency_matrix(&chain(), &a),
            Err(TendencyError::NormalizationViolated { .. })
        ));
        let mut a = chain_action(0.5);
        a.outflow_prob.insert(NodeId(3), 1.5);
        assert!(matches!(a.validate(&chain()), Err(TendencyError::OutOfRange { .. })));
        let mut a = chain_action(0.5);
        a.tendency_prob.insert((NodeId(3), NodeId(2)), 0.0);
        assert!(matches!(a.validate(&chain()), Err(TendencyError::UnknownEdge { .. })));
    }

    #[test]
    fn spectral_radius_basics() {
        let r = spectral_radius(&DMatrix::identity(3, 3), 1e-10, 100).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = spectral_radius(&DMatrix::from_element(1, 1, 0.5), 1e-10, 100).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert!(matches!(
            spectral_radius(&DMatrix::zeros(2, 3), 1e-10, 100),
            Err(TendencyError::NotSquare(2, 3))
        ));
        assert!(matches!(
            spectral_radius(&DMatrix::from_element(1, 1, -1.0), 1e-10, 100),
            Err(TendencyError::NotNonnegative(_))
        ));
    }

    #[test]
    fn periodic_matrix_converges() {
        // permutation matrix, eigenvalues on the unit circle
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let r = spectral_radius(&m, 1e-10, 10_000).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn edge_key_round_trip() {
        assert_eq!(parse_edge_key("18←17").unwrap(), (NodeId(18), NodeId(17)));
        assert_eq!(parse_edge_key("18<-17").unwrap(), (NodeId(18), NodeId(17)));
        assert!(parse_edge_key("18-17").is_err());
        let a = chain_action(0.25);
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"2←3\""));
        let back: TendencyAction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn action_set_rules() {
        assert!(matches!(ActionSet::new(vec![]), Err(TendencyError::EmptyActionSet)));
        let a = chain_action(0.5);
        assert!(matches!(
            ActionSet::new(vec![a.clone(), a.clone()]),
            Err(TendencyError::DuplicateAction(_))
        ));
        let set = ActionSet::new(vec![a]).unwrap();
        assert!(set.get(ActionId(2)).is_err());
    }

    #[test]
    fn normalize_sums_to_one() {
        let w = normalize(&[0.3, 0.7, 0.11]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn triangular_with_close_diagonal() {
        // reducible: the root is the larger diagonal entry, found exactly
        let m = DMatrix::from_row_slice(3, 3, &[0.75, 0.0, 0.0, 0.2, 0.7501, 0.0, 0.0, 0.1, 0.3]);
        let est = perron(&m, SPECTRAL_TOL, SPECTRAL_MAX_ITER).unwrap();
        assert_eq!(est.radius, 0.7501);
        assert_eq!(est.iterations, 0);
        assert_eq!(est.vector[1], 1.0);
    }
}
