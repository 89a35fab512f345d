//! Scenario documents (JSON) and their resolution into runnable scenarios.
//!
//! A document has five sections:
//!
//! ```json
//! {
//!   "graph":   { "generated": { "params": { ... }, "seed": 7 } }   // or { "explicit": { "n_in": .., "n_out_end": .., "n_total": .., "edges": [[i, j], ..] } }
//!   "actions": { "generated": { "count": 3, "p_range": [0.3, 0.9], "seed": 11 } }   // or { "explicit": [ { "id": 1, "outflow_prob": {..}, "tendency_prob": {"j←i": ..} } ] }
//!   "spec":    { "rho_max": 45, "u0": 20, "u_min": 0, "u_max": 20, "enforce_phi5": true },
//!   "mpc":     { "horizon": 5, "beta": 1, "fallback": "relax_phi5" },
//!   "run":     { "steps": 30, "window": 10, "noise": 0.0, "seed": 1,
//!                "initial_density": { "uniform": [5, 15] },
//!                "schedule": [ { "from_step": 1, "action": 1 } ],
//!                "controller": "mpc" }
//! }
//! ```

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::FeasibilitySpec;
use crate::dynamics::{NetworkModel, TrafficState};
use crate::learning::DEFAULT_WINDOW;
use crate::mpc::{FallbackPolicy, MpcConfig, DEFAULT_BETA, DEFAULT_HORIZON};
use crate::network::{
    check_theorem1_paths, generate_topology, GraphDocument, NetworkError, NoirGraph, PathReport,
    TopologyParams,
};
use crate::tendency::{ActionDocument, ActionId, ActionSet, TendencyAction, TendencyError};

/// The bundled 64-element reference scenario.
pub const REFERENCE_SCENARIO: &str = include_str!("../scenarios/reference.json");

/// Seconds represented by one discrete step, used only for reporting.
pub const STEP_SECONDS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("graph: {0}")]
    Network(#[from] NetworkError),
    #[error("actions: {0}")]
    Tendency(#[from] TendencyError),
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSection {
    Generated { params: TopologyParams, seed: u64 },
    Explicit(GraphDocument),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedActions {
    pub count: u32,
    pub p_range: (f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionsSection {
    Generated(GeneratedActions),
    Explicit(Vec<ActionDocument>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub rho_max: f64,
    pub u0: f64,
    #[serde(default)]
    pub u_min: f64,
    /// Defaults to `u0`.
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(default = "yes")]
    pub enforce_phi5: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_fallback")]
    pub fallback: FallbackPolicy,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_fallback() -> FallbackPolicy {
    FallbackPolicy::RelaxPhi5
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            horizon: DEFAULT_HORIZON,
            beta: DEFAULT_BETA,
            fallback: default_fallback(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    Uniform([f64; 2]),
    Constant(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub from_step: usize,
    pub action: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Mpc,
    /// Open loop: the same inflow vector every step.
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Observation noise amplitude relative to the mean edge flow.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    pub initial_density: InitialDensity,
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
    #[serde(default = "default_controller")]
    pub controller: ControllerSpec,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_controller() -> ControllerSpec {
    ControllerSpec::Mpc
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub graph: GraphSection,
    pub actions: ActionsSection,
    pub spec: SpecSection,
    #[serde(default)]
    pub mpc: MpcSection,
    pub run: RunSection,
}

impl ScenarioDocument {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn reference() -> Self {
        Self::from_json(REFERENCE_SCENARIO).expect("bundled scenario parses")
    }
}

/// A fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: NoirGraph,
    pub actions: ActionSet,
    /// True action for steps `1..=K`, index `k - 1`. Hidden from the controller.
    pub schedule: Vec<ActionId>,
    pub initial: TrafficState,
    pub mpc: MpcConfig,
    pub steps: usize,
    pub window: usize,
    pub noise: f64,
    pub seed: u64,
    pub controller: ControllerSpec,
}

impl Scenario {
    pub fn from_document(doc: &ScenarioDocument) -> Result<Self, ScenarioError> {
        let graph = match &doc.graph {
            GraphSection::Generated { params, seed } => generate_topology(params, *seed)?,
            GraphSection::Explicit(g) => NoirGraph::try_from(g.clone())?,
        };
        let actions = match &doc.actions {
            ActionsSection::Generated(spec) => {
                if spec.count == 0 {
                    return Err(invalid("actions.generated.count", "must be at least 1"));
                }
                let (lo, hi) = spec.p_range;
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                    return Err(invalid("actions.generated.p_range", "need 0 <= lo <= hi <= 1"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                ActionSet::new(
                    (1..=spec.count)
                        .map(|id| TendencyAction::random(&graph, ActionId(id), (lo, hi), &mut rng))
                        .collect(),
                )?
            }
            ActionsSection::Explicit(list) => ActionSet::new(
                list.iter()
                    .cloned()
                    .map(TendencyAction::try_from)
                    .collect::<Result<_, _>>()?,
            )?,
        };
        actions.validate(&graph)?;

        let s = &doc.spec;
        let spec = FeasibilitySpec {
            rho_max: s.rho_max,
            u_min: s.u_min,
            u_max: s.u_max.unwrap_or(s.u0),
            u0: s.u0,
            horizon: doc.mpc.horizon,
            enforce_phi5: s.enforce_phi5,
        };
        let mpc = MpcConfig {
            beta: doc.mpc.beta,
            spec,
            fallback: doc.mpc.fallback,
        };
        mpc.validate().map_err(|e| invalid("spec/mpc", e.to_string()))?;

        let run = &doc.run;
        if run.steps == 0 {
            return Err(invalid("run.steps", "must be at least 1"));
        }
        if run.window == 0 {
            return Err(invalid("run.window", "must be at least 1"));
        }
        if !(run.noise >= 0.0 && run.noise.is_finite()) {
            return Err(invalid("run.noise", "must be finite and nonnegative"));
        }
        let schedule = resolve_schedule(&run.schedule, run.steps, &actions)?;
        if let ControllerSpec::Constant(u) = &run.controller {
            if u.len() != graph.n_in() || u.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(invalid(
                    "run.controller.constant",
                    format!("need {} finite nonnegative inflows", graph.n_in()),
                ));
            }
        }
        let n = graph.n_interior();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let densities: Vec<f64> = match &run.initial_density {
            InitialDensity::Uniform([lo, hi]) => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(invalid("run.initial_density.uniform", "need finite lo <= hi"));
                }
                (0..n)
                    .map(|_| if lo < hi { rng.random_range(*lo..*hi) } else { *lo })
                    .collect()
            }
            InitialDensity::Constant(v) => vec![*v; n],
            InitialDensity::Values(v) => {
                if v.len() != n {
                    return Err(invalid(
                        "run.initial_density.values",
                        format!("expected {n} values, got {}", v.len()),
                    ));
                }
                v.clone()
            }
        };
        if densities
            .iter()
            .any(|&d| !(d >= 0.0 && d <= mpc.spec.rho_max))
        {
            return Err(invalid("run.initial_density", "densities must lie in [0, rho_max]"));
        }
        let initial = TrafficState::new(DVector::from_vec(densities), 0)
            .map_err(|e| invalid("run.initial_density", e.to_string()))?;

        Ok(Scenario {
            graph,
            actions,
            schedule,
            initial,
            mpc,
            steps: run.steps,
            window: run.window,
            noise: run.noise,
            seed: run.seed,
            controller: run.controller.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Self::from_document(&ScenarioDocument::from_json(text)?)
    }

    pub fn reference() -> Self {
        Self::from_document(&ScenarioDocument::reference()).expect("bundled scenario is valid")
    }

    pub fn model(&self) -> Result<NetworkModel, TendencyError> {
        NetworkModel::new(self.graph.clone(), &self.actions)
    }

    /// Path conditions and per-action spectral diagnostics.
    pub fn diagnostics(&self) -> Result<Diagnostics, TendencyError> {
        let model = self.model()?;
        let paths = check_theorem1_paths(&self.graph);
        let actions = model
            .models()
            .iter()
            .map(|m| {
                let sums = &m.tm.column_sums;
                ActionDiagnostics {
                    action: m.id(),
                    spectral_radius: m.tm.spectral_radius,
                    min_column_sum: sums.min(),
                    max_column_sum: sums.max(),
                    contracting: m.tm.spectral_radius < 1.0,
                }
            })
            .collect();
        Ok(Diagnostics { paths, actions })
    }
}

fn resolve_schedule(
    entries: &[ScheduleEntry],
    steps: usize,
    actions: &ActionSet,
) -> Result<Vec<ActionId>, ScenarioError> {
    if entries.is_empty() {
        return Ok(vec![actions.first().id; steps]);
    }
    if entries[0].from_step != 1 {
        return Err(invalid("run.schedule", "first entry must start at step 1"));
    }
    for w in entries.windows(2) {
        if w[1].from_step <= w[0].from_step {
            return Err(invalid("run.schedule", "from_step must strictly increase"));
        }
    }
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        let e = entries.iter().rev().find(|e| e.from_step <= k).unwrap();
        let id = ActionId(e.action);
        actions
            .get(id)
            .map_err(|_| invalid("run.schedule", format!("unknown action {id}")))?;
        out.push(id);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ActionDiagnostics {
    pub action: ActionId,
    pub spectral_radius: f64,
    pub min_column_sum: f64,
    pub max_column_sum: f64,
    pub contracting: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub paths: PathReport,
    pub actions: Vec<ActionDiagnostics>,
}

impl Diagnostics {
    pub fn passed(&self) -> bool {
        self.paths.passed() && self.actions.iter().all(|a| a.contracting)
    }
}
