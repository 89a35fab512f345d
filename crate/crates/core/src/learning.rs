//! Sliding-window estimation of the active tendency action.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{EdgeFlow, FlowRecord, TrafficState};
use crate::network::NoirGraph;
use crate::tendency::{ActionId, ActionSet, TendencyAction};

pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("observation step {got} does not follow step {last}")]
    NonContiguousStep { last: usize, got: usize },
    #[error("history window is empty")]
    EmptyWindow,
    #[error("action {action} lacks a probability for {what}")]
    MissingProbability { action: ActionId, what: String },
    #[error("window capacity must be at least 1")]
    ZeroCapacity,
}

/// Densities and observed flows at one past step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub step: usize,
    /// Interior densities, indexed by interior row.
    pub densities: Vec<f64>,
    pub edge_flows: Vec<EdgeFlow>,
    pub outflow: Vec<f64>,
}

impl Observation {
    /// `state` must be the state the record's flows were computed from.
    pub fn from_record(state: &TrafficState, rec: &FlowRecord) -> Self {
        Observation {
            step: rec.step,
            densities: state.densities.iter().copied().collect(),
            edge_flows: rec.edge_flows.clone(),
            outflow: rec.outflow.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    capacity: usize,
    entries: VecDeque<Observation>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Result<Self, LearningError> {
        if capacity == 0 {
            return Err(LearningError::ZeroCapacity);
        }
        Ok(HistoryWindow {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter()
    }

    /// Appends the newest observation, evicting the oldest when full.
    pub fn push_observation(&mut self, obs: Observation) -> Result<(), LearningError> {
        if let Some(last) = self.entries.back() {
            if obs.step != last.step + 1 {
                return Err(LearningError::NonContiguousStep {
                    last: last.step,
                    got: obs.step,
                });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(obs);
        Ok(())
    }
}

/// Per-edge fit cost `Σ_h Σ_{(j←i)} (f_{j,i} - p̄_i q̄_{j,i} ρ_i)²` over the
/// window.
pub fn tendency_cost(
    g: &NoirGraph,
    w: &HistoryWindow,
    a: &TendencyAction,
) -> Result<f64, LearningError> {
    if w.is_empty() {
        return Err(LearningError::EmptyWindow);
    }
    let mut cost = 0.0;
    for obs in w.entries() {
        for e in &obs.edge_flows {
            let rate = a
                .edge_rate(e.to, e.from)
                .ok_or_else(|| LearningError::MissingProbability {
                    action: a.id,
                    what: format!("edge {}->{}", e.from, e.to),
                })?;
            let row = g.interior_index(e.from).expect("edge flows leave interior elements");
            let r = e.flow - rate * obs.densities[row];
            cost += r * r;
        }
    }
    Ok(cost)
}

/// Per-element diagnostic `Σ_h Σ_i (z_i - p̄_i ρ_i)²`. Blind to routing.
pub fn outflow_cost(
    g: &NoirGraph,
    w: &HistoryWindow,
    a: &TendencyAction,
) -> Result<f64, LearningError> {
    if w.is_empty() {
        return Err(LearningError::EmptyWindow);
    }
    let mut cost = 0.0;
    for obs in w.entries() {
        for (row, (&z, &rho)) in obs.outflow.iter().zip(&obs.densities).enumerate() {
            let node = g.interior_node(row);
            let p = a.p(node).ok_or_else(|| LearningError::MissingProbability {
                action: a.id,
                what: format!("node {node}"),
            })?;
            let r = z - p * rho;
            cost += r * r;
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionEstimate {
    pub chosen_action: ActionId,
    pub costs: BTreeMap<ActionId, f64>,
    /// Second-best cost minus best cost; 0 for a single candidate.
    pub margin: f64,
}

/// Picks the candidate with the smallest fit cost. Ties go to the lowest id.
pub fn estimate_action(
    g: &NoirGraph,
    w: &HistoryWindow,
    actions: &ActionSet,
) -> Result<ActionEstimate, LearningError> {
    let mut costs = BTreeMap::new();
    for a in actions.iter() {
        costs.insert(a.id, tendency_cost(g, w, a)?);
    }
    // BTreeMap iterates in id order, so strict < keeps the lowest id on ties
    let mut best: Option<(ActionId, f64)> = None;
    for (&id, &c) in &costs {
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((id, c));
        }
    }
    let (chosen_action, best_cost) = best.expect("action set is non-empty");
    let runner_up = costs
        .iter()
        .filter(|(&id, _)| id != chosen_action)
        .map(|(_, &c)| c)
        .fold(f64::INFINITY, f64::min);
    let margin = if runner_up.is_finite() {
        runner_up - best_cost
    } else {
        0.0
    };
    Ok(ActionEstimate {
        chosen_action,
        costs,
        margin,
    })
}
