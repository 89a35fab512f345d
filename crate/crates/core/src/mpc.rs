//! Receding-horizon boundary controller.
//!
//! The horizon cost `Σ_τ ‖x[k+τ]‖² + β ‖u[k+τ-1]‖²` is condensed through the
//! affine prediction into a QP over the stacked inputs; the first block of
//! the minimizer is applied.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    compile, predict_affine, AffineConstraintSet, Condition, ConstraintError, Conditions,
    FeasibilitySpec, Location, Prediction, RowProvenance,
};
use crate::dynamics::{BoundaryInflow, NetworkModel, TrafficState};
use crate::qp::{QpError, QpProblem, QpSolver, QpStatus, DEFAULT_MAX_ITER, INTERNAL_TOL};
use crate::tendency::{ActionId, TendencyError};

pub const DEFAULT_HORIZON: usize = 5;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("QP ended with status {0:?} and no fallback is configured")]
    QpInfeasibleNoFallback(QpStatus),
    #[error("prediction has {got} columns, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Tendency(#[from] TendencyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Fail the decision.
    None,
    /// Replace `Σu = u0` by `Σu ≤ u0` and re-solve; zero inflow if that
    /// is still infeasible.
    RelaxPhi5,
    ZeroInflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub beta: f64,
    pub spec: FeasibilitySpec,
    pub fallback: FallbackPolicy,
}

impl MpcConfig {
    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MpcError::InvalidBeta(self.beta));
        }
        self.spec.validate()?;
        Ok(())
    }
}

/// `C(U) = ½ Uᵀ H U + gᵀ U + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub constant: f64,
}

impl QuadraticCost {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.g.dot(u) + self.constant
    }
}

/// Expands the horizon cost: `H = 2(Σ M_τᵀ M_τ + β I)`, `g = 2 Σ M_τᵀ c_τ`,
/// `constant = Σ ‖c_τ‖²`.
pub fn build_cost(prediction: &Prediction, beta: f64) -> Result<QuadraticCost, MpcError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(MpcError::InvalidBeta(beta));
    }
    let nv = prediction.n_vars();
    let mut h = DMatrix::identity(nv, nv) * beta;
    let mut g = DVector::zeros(nv);
    let mut constant = 0.0;
    for (c, m) in &prediction.steps {
        if m.ncols() != nv {
            return Err(MpcError::DimensionMismatch {
                got: m.ncols(),
                expected: nv,
            });
        }
        h += m.tr_mul(m);
        g += m.tr_mul(c);
        constant += c.norm_squared();
    }
    h *= 2.0;
    g *= 2.0;
    // symmetrize away rounding in the Gram products
    let h = (&h + h.transpose()) * 0.5;
    Ok(QuadraticCost { h, g, constant })
}

/// The horizon cost evaluated by simulating the prediction.
pub fn horizon_cost(prediction: &Prediction, beta: f64, u: &DVector<f64>) -> f64 {
    let states: f64 = (1..=prediction.horizon())
        .map(|tau| prediction.state(tau, u).norm_squared())
        .sum();
    states + beta * u.norm_squared()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlDecision {
    pub u_star: BoundaryInflow,
    pub planned_inputs: DVector<f64>,
    pub predicted_cost: f64,
    pub qp_status: QpStatus,
    pub active_constraints: Vec<RowProvenance>,
    pub fallback_used: Option<FallbackPolicy>,
    pub qp_iterations: usize,
    pub solve_seconds: f64,
}

/// Everything `decide` builds for one step, exposed for inspection and
/// constraint dumps.
#[derive(Debug, Clone)]
pub struct StepProgram {
    pub prediction: Prediction,
    pub constraints: AffineConstraintSet,
    pub cost: QuadraticCost,
    pub problem: QpProblem,
}

pub fn build_program(
    model: &NetworkModel,
    x0: &TrafficState,
    action: ActionId,
    cfg: &MpcConfig,
) -> Result<StepProgram, MpcError> {
    cfg.validate()?;
    let am = model.model(action)?;
    let prediction = predict_affine(x0, &am.tm, model.b(), cfg.horizon())?;
    let constraints = compile(
        &cfg.spec,
        Conditions::from_spec(&cfg.spec),
        model.graph(),
        &am.action,
        &prediction,
    )?;
    let cost = build_cost(&prediction, cfg.beta)?;
    let problem = QpProblem::new(
        cost.h.clone(),
        cost.g.clone(),
        constraints.ineq_mat.clone(),
        constraints.ineq_rhs.clone(),
        constraints.eq_mat.clone(),
        constraints.eq_rhs.clone(),
    )?;
    Ok(StepProgram {
        prediction,
        constraints,
        cost,
        problem,
    })
}

/// Adaptive boundary controller. Keeps the QP solver so consecutive steps
/// warm start from the previous active set.
#[derive(Debug)]
pub struct MpcController {
    cfg: MpcConfig,
    solver: QpSolver,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Result<Self, MpcError> {
        cfg.validate()?;
        Ok(MpcController {
            cfg,
            solver: QpSolver::new(),
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    /// Plans inputs from `x0` under the learned `action` and returns the
    /// first block.
    pub fn decide(
        &mut self,
        model: &NetworkModel,
        x0: &TrafficState,
        action: ActionId,
    ) -> Result<ControlDecision, MpcError> {
        let started = Instant::now();
        let program = build_program(model, x0, action, &self.cfg)?;
        let sol = self
            .solver
            .solve(&program.problem, INTERNAL_TOL, DEFAULT_MAX_ITER);
        if sol.status == QpStatus::Optimal {
            return Ok(self.decision(
                &program,
                &program.constraints,
                sol.z,
                &sol.active_set,
                sol.status,
                None,
                sol.iterations,
                started,
            ));
        }
        match self.cfg.fallback {
            FallbackPolicy::None => Err(MpcError::QpInfeasibleNoFallback(sol.status)),
            FallbackPolicy::ZeroInflow => Ok(self.zero_decision(&program, sol.status, started)),
            FallbackPolicy::RelaxPhi5 => {
                let relaxed = relax_phi5(&program.constraints);
                let problem = QpProblem::new(
                    program.cost.h.clone(),
                    program.cost.g.clone(),
                    relaxed.ineq_mat.clone(),
                    relaxed.ineq_rhs.clone(),
                    relaxed.eq_mat.clone(),
                    relaxed.eq_rhs.clone(),
                )?;
                let retry = crate::qp::solve(&problem, INTERNAL_TOL, DEFAULT_MAX_ITER);
                if retry.status == QpStatus::Optimal {
                    Ok(self.decision(
                        &program,
                        &relaxed,
                        retry.z,
                        &retry.active_set,
                        sol.status,
                        Some(FallbackPolicy::RelaxPhi5),
                        sol.iterations + retry.iterations,
                        started,
                    ))
                } else {
                    Ok(self.zero_decision(&program, retry.status, started))
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decision(
        &self,
        program: &StepProgram,
        constraints: &AffineConstraintSet,
        z: DVector<f64>,
        active: &[usize],
        status: QpStatus,
        fallback_used: Option<FallbackPolicy>,
        iterations: usize,
        started: Instant,
    ) -> ControlDecision {
        let n_in = program.prediction.n_in;
        // clip roundoff so the applied input is a valid BoundaryInflow
        let first: Vec<f64> = z.rows(0, n_in).iter().map(|v| v.max(0.0)).collect();
        let mut active_constraints: Vec<RowProvenance> =
            active.iter().map(|&i| constraints.ineq_prov[i]).collect();
        active_constraints.extend(constraints.eq_prov.iter().copied());
        ControlDecision {
            u_star: BoundaryInflow::from_slice(&first).expect("finite nonnegative"),
            predicted_cost: program.cost.eval(&z),
            planned_inputs: z,
            qp_status: status,
            active_constraints,
            fallback_used,
            qp_iterations: iterations,
            solve_seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn zero_decision(&self, program: &StepProgram, status: QpStatus, started: Instant) -> ControlDecision {
        let z = DVector::zeros(program.prediction.n_vars());
        ControlDecision {
            u_star: BoundaryInflow::zeros(program.prediction.n_in),
            predicted_cost: program.cost.eval(&z),
            planned_inputs: z,
            qp_status: status,
            active_constraints: Vec::new(),
            fallback_used: Some(FallbackPolicy::ZeroInflow),
            qp_iterations: 0,
            solve_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// Turns each `Σu = u0` row into `Σu ≤ u0`.
fn relax_phi5(set: &AffineConstraintSet) -> AffineConstraintSet {
    let n_ineq = set.ineq_mat.nrows();
    let n_eq = set.eq_mat.nrows();
    let nv = set.ineq_mat.ncols();
    let mut ineq_mat = DMatrix::zeros(n_ineq + n_eq, nv);
    ineq_mat.rows_mut(0, n_ineq).copy_from(&set.ineq_mat);
    ineq_mat.rows_mut(n_ineq, n_eq).copy_from(&set.eq_mat);
    let mut ineq_rhs = DVector::zeros(n_ineq + n_eq);
    ineq_rhs.rows_mut(0, n_ineq).copy_from(&set.ineq_rhs);
    ineq_rhs.rows_mut(n_ineq, n_eq).copy_from(&set.eq_rhs);
    let mut ineq_prov = set.ineq_prov.clone();
    ineq_prov.extend(set.eq_prov.iter().map(|p| RowProvenance {
        condition: Condition::Phi5,
        location: Location::Network,
        offset: p.offset,
    }));
    AffineConstraintSet {
        ineq_mat,
        ineq_rhs,
        ineq_prov,
        eq_mat: DMatrix::zeros(0, nv),
        eq_rhs: DVector::zeros(0),
        eq_prov: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NoirGraph;
    use crate::tendency::{ActionSet, TendencyAction};

    fn chain_model() -> NetworkModel {
        let g = NoirGraph::build(&[(1, 3), (3, 2)], 1, 2, 3).unwrap();
        let a = TendencyAction::uniform(&g, ActionId(1), 0.5);
        NetworkModel::new(g, &ActionSet::new(vec![a]).unwrap()).unwrap()
    }

    fn cfg(horizon: usize, rho_max: f64, u_max: f64, u0: f64, phi5: bool) -> MpcConfig {
        MpcConfig {
            beta: 1.0,
            spec: FeasibilitySpec {
                rho_max,
                u_min: 0.0,
                u_max,
                u0,
                horizon,
                enforce_phi5: phi5,
            },
            fallback: FallbackPolicy::None,
        }
    }

    fn state(v: &[f64]) -> TrafficState {
        TrafficState::new(DVector::from_column_slice(v), 0).unwrap()
    }

    #[test]
    fn chain_cost_from_zero_state() {
        let m = chain_model();
        let p = predict_affine(&state(&[0.0]), &m.models()[0].tm, m.b(), 1).unwrap();
        let c = build_cost(&p, 1.0).unwrap();
        assert_eq!(c.h, DMatrix::from_element(1, 1, 4.0));
        assert_eq!(c.g[0], 0.0);
        assert_eq!(c.constant, 0.0);
    }

    #[test]
    fn cost_rejects_nonpositive_beta() {
        let m = chain_model();
        let p = predict_affine(&state(&[0.0]), &m.models()[0].tm, m.b(), 1).unwrap();
        assert!(matches!(build_cost(&p, 0.0), Err(MpcError::InvalidBeta(_))));
    }

    #[test]
    fn zero_demand_gives_zero_input() {
        let m = chain_model();
        let mut ctl = MpcController::new(cfg(3, 45.0, 10.0, 0.0, true)).unwrap();
        let d = ctl.decide(&m, &state(&[5.0]), ActionId(1)).unwrap();
        assert_eq!(d.qp_status, QpStatus::Optimal);
        assert!(d.u_star.inflows[0].abs() < 1e-9);
    }

    #[test]
    fn phi5_sets_the_input_on_a_single_inlet() {
        let m = chain_model();
        let mut ctl = MpcController::new(cfg(2, 45.0, 10.0, 3.0, true)).unwrap();
        let d = ctl.decide(&m, &state(&[5.0]), ActionId(1)).unwrap();
        assert!((d.u_star.inflows[0] - 3.0).abs() < 1e-9);
        assert!(d
            .active_constraints
            .iter()
            .any(|p| p.condition == Condition::Phi5));
    }

    #[test]
    fn infeasible_without_fallback_errors() {
        let m = chain_model();
        // demand 5 cannot fit under a box of 1
        let mut ctl = MpcController::new(cfg(1, 45.0, 1.0, 5.0, true)).unwrap();
        assert!(matches!(
            ctl.decide(&m, &state(&[0.0]), ActionId(1)),
            Err(MpcError::QpInfeasibleNoFallback(QpStatus::Infeasible))
        ));
    }

    #[test]
    fn relax_phi5_under_saturation() {
        let m = chain_model();
        // ρ = 40, capacity 45: Φ3 allows at most 5 vehicles in, demand is 8
        let mut c = cfg(1, 45.0, 10.0, 8.0, true);
        c.fallback = FallbackPolicy::RelaxPhi5;
        let mut ctl = MpcController::new(c).unwrap();
        let d = ctl.decide(&m, &state(&[40.0]), ActionId(1)).unwrap();
        assert_eq!(d.qp_status, QpStatus::Infeasible);
        assert_eq!(d.fallback_used, Some(FallbackPolicy::RelaxPhi5));
        assert!(d.u_star.total() < 8.0);
    }

    #[test]
    fn zero_inflow_fallback() {
        let m = chain_model();
        let mut c = cfg(1, 45.0, 10.0, 8.0, true);
        c.fallback = FallbackPolicy::ZeroInflow;
        let mut ctl = MpcController::new(c).unwrap();
        let d = ctl.decide(&m, &state(&[40.0]), ActionId(1)).unwrap();
        assert_eq!(d.fallback_used, Some(FallbackPolicy::ZeroInflow));
        assert_eq!(d.u_star.total(), 0.0);
    }

    #[test]
    fn feasible_program_never_uses_fallback() {
        let m = chain_model();
        let mut c = cfg(2, 45.0, 10.0, 2.0, true);
        c.fallback = FallbackPolicy::ZeroInflow;
        let mut ctl = MpcController::new(c).unwrap();
        let d = ctl.decide(&m, &state(&[3.0]), ActionId(1)).unwrap();
        assert_eq!(d.fallback_used, None);
        assert_eq!(d.u_star.inflows.len(), 1);
        assert_eq!(d.u_star.inflows[0], d.planned_inputs[0].max(0.0));
    }
}
