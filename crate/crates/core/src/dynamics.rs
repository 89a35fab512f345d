//! Network dynamics `x[k+1] = A_a x[k] + B u[k]` and per-element flow
//! bookkeeping.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::network::{NodeId, NodeKind, NoirGraph};
use crate::tendency::{
    assemble_b_matrix, assemble_tendency_matrix, ActionId, ActionSet, TendencyAction,
    TendencyError, TendencyMatrix,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{what} must be finite and nonnegative")]
    InvalidValue { what: &'static str },
    #[error("inputs ({inputs}) and actions ({actions}) differ in length")]
    LengthMismatch { inputs: usize, actions: usize },
    #[error(transparent)]
    Tendency(#[from] TendencyError),
}

/// Interior densities at step `k`; entry `c` is element `c + N_out + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficState {
    pub densities: DVector<f64>,
    pub step: usize,
}

impl TrafficState {
    pub fn new(densities: DVector<f64>, step: usize) -> Result<Self, DynamicsError> {
        if densities.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DynamicsError::InvalidValue { what: "density" });
        }
        Ok(TrafficState { densities, step })
    }

    pub fn zeros(n: usize) -> Self {
        TrafficState {
            densities: DVector::zeros(n),
            step: 0,
        }
    }

    pub fn total(&self) -> f64 {
        self.densities.sum()
    }
}

/// Inflow at each inlet during one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryInflow {
    pub inflows: DVector<f64>,
}

impl BoundaryInflow {
    pub fn new(inflows: DVector<f64>) -> Result<Self, DynamicsError> {
        if inflows.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DynamicsError::InvalidValue { what: "inflow" });
        }
        Ok(BoundaryInflow { inflows })
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, DynamicsError> {
        Self::new(DVector::from_column_slice(v))
    }

    pub fn zeros(n: usize) -> Self {
        BoundaryInflow {
            inflows: DVector::zeros(n),
        }
    }

    pub fn total(&self) -> f64 {
        self.inflows.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeFlow {
    pub from: NodeId,
    pub to: NodeId,
    pub flow: f64,
}

/// Flows during step `k`. Vectors are indexed by interior row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    pub step: usize,
    /// `z_i = p̄_i ρ_i`.
    pub outflow: Vec<f64>,
    /// `q̄_{j,i} p̄_i ρ_i` for every edge leaving an interior element.
    pub edge_flows: Vec<EdgeFlow>,
    /// `y_i`: interior-to-interior inflow plus boundary inflow.
    pub inflow: Vec<f64>,
    /// `(B u)_i`.
    pub boundary_inflow: Vec<f64>,
}

impl FlowRecord {
    /// Total flow leaving the network through outlets.
    pub fn exit_flow(&self, g: &NoirGraph) -> f64 {
        self.edge_flows
            .iter()
            .filter(|e| g.kind(e.to) == NodeKind::Outlet)
            .map(|e| e.flow)
            .sum()
    }
}

/// One action's matrices with the edge rates needed for flow accounting.
#[derive(Debug, Clone)]
pub struct ActionModel {
    pub action: TendencyAction,
    pub tm: TendencyMatrix,
    /// (from, to, interior row of `from`, `p̄_from q̄_{to,from}`)
    edge_rates: Vec<(NodeId, NodeId, usize, f64)>,
}

impl ActionModel {
    pub fn new(g: &NoirGraph, action: &TendencyAction) -> Result<Self, TendencyError> {
        let tm = assemble_tendency_matrix(g, action)?;
        let edge_rates = g
            .edges()
            .filter_map(|(from, to)| {
                let c = g.interior_index(from)?;
                Some((from, to, c, action.edge_rate(to, from).expect("validated")))
            })
            .collect();
        Ok(ActionModel {
            action: action.clone(),
            tm,
            edge_rates,
        })
    }

    pub fn id(&self) -> ActionId {
        self.action.id
    }
}

/// A graph with its input matrix and every candidate action assembled.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    graph: NoirGraph,
    b: DMatrix<f64>,
    models: Vec<ActionModel>,
}

impl NetworkModel {
    pub fn new(graph: NoirGraph, actions: &ActionSet) -> Result<Self, TendencyError> {
        let b = assemble_b_matrix(&graph);
        let models = actions
            .iter()
            .map(|a| ActionModel::new(&graph, a))
            .collect::<Result<_, _>>()?;
        Ok(NetworkModel { graph, b, models })
    }

    pub fn graph(&self) -> &NoirGraph {
        &self.graph
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn models(&self) -> &[ActionModel] {
        &self.models
    }

    pub fn model(&self, id: ActionId) -> Result<&ActionModel, TendencyError> {
        self.models
            .iter()
            .find(|m| m.id() == id)
            .ok_or(TendencyError::UnknownAction(id))
    }

    pub fn step(
        &self,
        state: &TrafficState,
        u: &BoundaryInflow,
        action: ActionId,
    ) -> Result<(TrafficState, FlowRecord), DynamicsError> {
        step(&self.graph, self.model(action)?, &self.b, state, u)
    }

    pub fn rollout(
        &self,
        state: &TrafficState,
        inputs: &[BoundaryInflow],
        actions: &[ActionId],
    ) -> Result<Vec<TrafficState>, DynamicsError> {
        if inputs.len() != actions.len() {
            return Err(DynamicsError::LengthMismatch {
                inputs: inputs.len(),
                actions: actions.len(),
            });
        }
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(state.clone());
        for (u, &a) in inputs.iter().zip(actions) {
            let (next, _) = self.step(out.last().unwrap(), u, a)?;
            out.push(next);
        }
        Ok(out)
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), DynamicsError> {
    if got != expected {
        return Err(DynamicsError::DimensionMismatch {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

/// Advances one step and records the flows that produced it.
pub fn step(
    g: &NoirGraph,
    model: &ActionModel,
    b: &DMatrix<f64>,
    state: &TrafficState,
    u: &BoundaryInflow,
) -> Result<(TrafficState, FlowRecord), DynamicsError> {
    let n = g.n_interior();
    check_len("state", state.densities.len(), n)?;
    check_len("inflow", u.inflows.len(), g.n_in())?;
    check_len("B rows", b.nrows(), n)?;
    check_len("B columns", b.ncols(), g.n_in())?;
    check_len("A", model.tm.dim(), n)?;

    let x = &state.densities;
    let bu = b * &u.inflows;
    let next = &model.tm.a_matrix * x + &bu;

    let outflow: Vec<f64> = (0..n).map(|c| model.tm.p_diag[c] * x[c]).collect();
    let mut inflow: Vec<f64> = bu.iter().copied().collect();
    let edge_flows: Vec<EdgeFlow> = model
        .edge_rates
        .iter()
        .map(|&(from, to, c, rate)| {
            let flow = rate * x[c];
            if let Some(r) = g.interior_index(to) {
                inflow[r] += flow;
            }
            EdgeFlow { from, to, flow }
        })
        .collect();

    let record = FlowRecord {
        step: state.step,
        outflow,
        edge_flows,
        inflow,
        boundary_inflow: bu.iter().copied().collect(),
    };
    Ok((
        TrafficState {
            densities: next,
            step: state.step + 1,
        },
        record,
    ))
}

/// Global conservation defect of one step: change in total interior density
/// against boundary inflow minus flow leaving through outlets.
pub fn mass_balance(g: &NoirGraph, prev: &TrafficState, next: &TrafficState, rec: &FlowRecord) -> f64 {
    let change = next.total() - prev.total();
    let entering: f64 = rec.boundary_inflow.iter().sum();
    (change - (entering - rec.exit_flow(g))).abs()
}

/// Per-element defect `max_i |ρ_i[k+1] - ρ_i[k] - y_i + z_i|`.
pub fn element_balance(prev: &TrafficState, next: &TrafficState, rec: &FlowRecord) -> f64 {
    (0..prev.densities.len())
        .map(|c| {
            (next.densities[c] - prev.densities[c] - rec.inflow[c] + rec.outflow[c]).abs()
        })
        .fold(0.0, f64::max)
}

/// Stacked form of a rollout: `x[k+1] = Γ x[1] + Σ_h Ω_h B u[h]`, with
/// `Γ = A_k ⋯ A_1` and `Ω_h = A_k ⋯ A_{h+1}`.
pub fn stacked_response(
    matrices: &[&DMatrix<f64>],
    b: &DMatrix<f64>,
    x1: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> DVector<f64> {
    let n = x1.len();
    let k = matrices.len();
    let mut gamma = DMatrix::identity(n, n);
    for a in matrices {
        gamma = *a * gamma;
    }
    let mut out = gamma * x1;
    for (h, u) in inputs.iter().enumerate() {
        let mut omega = DMatrix::identity(n, n);
        for a in &matrices[h + 1..k] {
            omega = *a * omega;
        }
        out += omega * (b * u);
    }
    out
}
