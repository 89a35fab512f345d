//! Feasibility conditions compiled to affine constraints on the stacked
//! horizon input, and checked on realized trajectories.
//!
//! Every condition is a finite conjunction over the prediction horizon, so
//! each conjunct becomes one linear row in `U = [u[k]; …; u[k+N_τ-1]]`
//! through the affine prediction `x[k+τ] = c_τ + M_τ U`:
//!
//! | condition    | quantity                                  | offsets       |
//! |--------------|-------------------------------------------|---------------|
//! | `phi1_*`     | `0 ≤ ρ_i ≤ ρ_max`                         | `1..=N_τ`     |
//! | `phi2`       | `p̄_i q̄_{j,i} ρ_i ≤ ρ_max - ρ_j`, `i → j`  | `1..=N_τ`     |
//! | `phi3`       | `y_i ≤ ρ_max - ρ_i`                        | `0..N_τ`      |
//! | `phi4_*`     | `u_min ≤ u_j ≤ u_max`                      | `0..N_τ`      |
//! | `phi5`       | `Σ_j u_j = u0`                             | `0..N_τ`      |
//!
//! Edge and inflow conditions only involve interior elements since outlets
//! and inlets carry no state.

use std::fmt;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BoundaryInflow, FlowRecord, TrafficState};
use crate::network::{NodeId, NodeKind, NoirGraph};
use crate::tendency::{TendencyAction, TendencyMatrix};

/// Tolerance used when checking realized trajectories.
pub const MONITOR_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("input box is empty: u_min {u_min} > u_max {u_max}")]
    InfeasibleBox { u_min: f64, u_max: f64 },
    #[error("invalid feasibility spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySpec {
    /// Per-element capacity, vehicles.
    pub rho_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Vehicles entering the network per step.
    pub u0: f64,
    pub horizon: usize,
    pub enforce_phi5: bool,
}

impl FeasibilitySpec {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if !(self.rho_max > 0.0 && self.rho_max.is_finite()) {
            return Err(ConstraintError::InvalidSpec("rho_max must be positive".into()));
        }
        if !(self.u0 >= 0.0 && self.u0.is_finite()) {
            return Err(ConstraintError::InvalidSpec("u0 must be nonnegative".into()));
        }
        if self.horizon == 0 {
            return Err(ConstraintError::InvalidSpec("horizon must be at least 1".into()));
        }
        if !(self.u_min >= 0.0 && self.u_min.is_finite() && self.u_max.is_finite()) {
            return Err(ConstraintError::InvalidSpec(
                "input bounds must be finite with u_min >= 0".into(),
            ));
        }
        if self.u_min > self.u_max {
            return Err(ConstraintError::InfeasibleBox {
                u_min: self.u_min,
                u_max: self.u_max,
            });
        }
        Ok(())
    }
}

/// Which conditions to compile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conditions {
    pub phi1: bool,
    pub phi2: bool,
    pub phi3: bool,
    pub phi4: bool,
    pub phi5: bool,
}

impl Conditions {
    pub fn from_spec(spec: &FeasibilitySpec) -> Self {
        Conditions {
            phi1: true,
            phi2: true,
            phi3: true,
            phi4: true,
            phi5: spec.enforce_phi5,
        }
    }

    pub fn only_phi1() -> Self {
        Conditions {
            phi1: true,
            phi2: false,
            phi3: false,
            phi4: false,
            phi5: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Phi1Lower,
    Phi1Upper,
    Phi2,
    Phi3,
    Phi4Lower,
    Phi4Upper,
    Phi5,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::Phi1Lower => "phi1_lower",
            Condition::Phi1Upper => "phi1_upper",
            Condition::Phi2 => "phi2",
            Condition::Phi3 => "phi3",
            Condition::Phi4Lower => "phi4_lower",
            Condition::Phi4Upper => "phi4_upper",
            Condition::Phi5 => "phi5",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Element(NodeId),
    Edge { from: NodeId, to: NodeId },
    Inlet(NodeId),
    Network,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Element(n) => write!(f, "element {n}"),
            Location::Edge { from, to } => write!(f, "edge {from}->{to}"),
            Location::Inlet(n) => write!(f, "inlet {n}"),
            Location::Network => f.write_str("network"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowProvenance {
    pub condition: Condition,
    pub location: Location,
    /// Horizon offset `h` relative to the current step.
    pub offset: usize,
}

impl fmt::Display for RowProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} +{}", self.condition, self.location, self.offset)
    }
}

/// Affine prediction over the horizon: `steps[τ-1] = (c_τ, M_τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x0: DVector<f64>,
    pub n_in: usize,
    pub steps: Vec<(DVector<f64>, DMatrix<f64>)>,
}

impl Prediction {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_in * self.horizon()
    }

    /// Predicted state at offset `tau` (0 gives `x0`).
    pub fn state(&self, tau: usize, u: &DVector<f64>) -> DVector<f64> {
        if tau == 0 {
            return self.x0.clone();
        }
        let (c, m) = &self.steps[tau - 1];
        c + m * u
    }
}

/// Unrolls the dynamics with the action held over `n_tau` steps.
/// `M_τ` block `s` (columns `s·N_in..(s+1)·N_in`) is `A^{τ-1-s} B` for
/// `s < τ` and zero otherwise.
pub fn predict_affine(
    x0: &TrafficState,
    tm: &TendencyMatrix,
    b: &DMatrix<f64>,
    n_tau: usize,
) -> Result<Prediction, ConstraintError> {
    let n = tm.dim();
    if x0.densities.len() != n || b.nrows() != n {
        return Err(ConstraintError::DimensionMismatch(format!(
            "state {} / B rows {} vs A {n}",
            x0.densities.len(),
            b.nrows()
        )));
    }
    let n_in = b.ncols();
    let a = &tm.a_matrix;
    // powers[p] = A^p B
    let mut powers: Vec<DMatrix<f64>> = Vec::with_capacity(n_tau);
    let mut cur = b.clone();
    for _ in 0..n_tau {
        let next = a * &cur;
        powers.push(cur);
        cur = next;
    }
    let mut steps = Vec::with_capacity(n_tau);
    let mut c = x0.densities.clone();
    for tau in 1..=n_tau {
        c = a * c;
        let mut m = DMatrix::zeros(n, n_in * n_tau);
        for s in 0..tau {
            m.view_mut((0, s * n_in), (n, n_in))
                .copy_from(&powers[tau - 1 - s]);
        }
        steps.push((c.clone(), m));
    }
    Ok(Prediction {
        x0: x0.densities.clone(),
        n_in,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraintSet {
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub ineq_prov: Vec<RowProvenance>,
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub eq_prov: Vec<RowProvenance>,
}

impl AffineConstraintSet {
    pub fn n_vars(&self) -> usize {
        self.ineq_mat.ncols()
    }

    /// Largest violation of any row at `u`.
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        let ineq = (&self.ineq_mat * u - &self.ineq_rhs)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        let eq = (&self.eq_mat * u - &self.eq_rhs)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        ineq.max(eq)
    }

    /// Matrix-market-style dump: one coordinate block for the inequality
    /// rows and one for the equality rows, each row's right-hand side and
    /// provenance listed in comments.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        let blocks = [
            ("inequality G U <= h", &self.ineq_mat, &self.ineq_rhs, &self.ineq_prov),
            ("equality E U = f", &self.eq_mat, &self.eq_rhs, &self.eq_prov),
        ];
        for (title, m, rhs, prov) in blocks {
            writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
            writeln!(w, "% {title}")?;
            for (r, p) in prov.iter().enumerate() {
                writeln!(w, "% row {} rhs {:e} {}", r + 1, rhs[r], p)?;
            }
            let nnz: Vec<(usize, usize, f64)> = (0..m.nrows())
                .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
                .filter_map(|(r, c)| {
                    let v = m[(r, c)];
                    (v != 0.0).then_some((r, c, v))
                })
                .collect();
            writeln!(w, "{} {} {}", m.nrows(), m.ncols(), nnz.len())?;
            for (r, c, v) in nnz {
                writeln!(w, "{} {} {:e}", r + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct RowBuilder {
    rows: Vec<DVector<f64>>,
    rhs: Vec<f64>,
    prov: Vec<RowProvenance>,
}

impl RowBuilder {
    fn push(&mut self, row: DVector<f64>, rhs: f64, prov: RowProvenance) {
        self.rows.push(row);
        self.rhs.push(rhs);
        self.prov.push(prov);
    }

    fn finish(self, n_vars: usize) -> (DMatrix<f64>, DVector<f64>, Vec<RowProvenance>) {
        let mut m = DMatrix::zeros(self.rows.len(), n_vars);
        for (r, row) in self.rows.iter().enumerate() {
            m.set_row(r, &row.transpose());
        }
        (m, DVector::from_vec(self.rhs), self.prov)
    }
}

/// Compiles the selected conditions for action `a` against `prediction`.
pub fn compile(
    spec: &FeasibilitySpec,
    conditions: Conditions,
    g: &NoirGraph,
    a: &TendencyAction,
    prediction: &Prediction,
) -> Result<AffineConstraintSet, ConstraintError> {
    spec.validate()?;
    let n = g.n_interior();
    let n_in = g.n_in();
    let n_tau = prediction.horizon();
    let n_vars = prediction.n_vars();
    if prediction.x0.len() != n || prediction.n_in != n_in {
        return Err(ConstraintError::DimensionMismatch(
            "prediction does not match graph".into(),
        ));
    }
    let mut ineq = RowBuilder::default();
    let mut eq = RowBuilder::default();

    // wᵀ x[k+h] as (coefficient row in U, constant)
    let project = |w: &DVector<f64>, h: usize| -> (DVector<f64>, f64) {
        if h == 0 {
            (DVector::zeros(n_vars), w.dot(&prediction.x0))
        } else {
            let (c, m) = &prediction.steps[h - 1];
            (m.transpose() * w, w.dot(c))
        }
    };
    let unit = |c: usize| {
        let mut e = DVector::zeros(n);
        e[c] = 1.0;
        e
    };
    let rate = |to: NodeId, from: NodeId| a.edge_rate(to, from).unwrap_or(0.0);

    if conditions.phi1 {
        for tau in 1..=n_tau {
            let (c, m) = &prediction.steps[tau - 1];
            for row in 0..n {
                let loc = Location::Element(g.interior_node(row));
                let coeffs = m.row(row).transpose();
                ineq.push(
                    -&coeffs,
                    c[row],
                    RowProvenance {
                        condition: Condition::Phi1Lower,
                        location: loc,
                        offset: tau,
                    },
                );
                ineq.push(
                    coeffs,
                    spec.rho_max - c[row],
                    RowProvenance {
                        condition: Condition::Phi1Upper,
                        location: loc,
                        offset: tau,
                    },
                );
            }
        }
    }

    if conditions.phi2 {
        for tau in 1..=n_tau {
            for (from, to) in g.edges() {
                let (Some(ci), Some(cj)) = (g.interior_index(from), g.interior_index(to)) else {
                    continue;
                };
                let w = unit(ci) * rate(to, from) + unit(cj);
                let (coeffs, konst) = project(&w, tau);
                ineq.push(
                    coeffs,
                    spec.rho_max - konst,
                    RowProvenance {
                        condition: Condition::Phi2,
                        location: Location::Edge { from, to },
                        offset: tau,
                    },
                );
            }
        }
    }

    if conditions.phi3 {
        for h in 0..n_tau {
            for (ci, node) in g.interior().enumerate() {
                let mut w = unit(ci);
                let mut coeffs_u = DVector::zeros(n_vars);
                for &from in g.in_neighbors(node) {
                    match g.kind(from) {
                        NodeKind::Interior => {
                            let cl = g.interior_index(from).unwrap();
                            w[cl] += rate(node, from);
                        }
                        NodeKind::Inlet => coeffs_u[h * n_in + from.0 - 1] += 1.0,
                        NodeKind::Outlet => {}
                    }
                }
                let (coeffs, konst) = project(&w, h);
                ineq.push(
                    coeffs + coeffs_u,
                    spec.rho_max - konst,
                    RowProvenance {
                        condition: Condition::Phi3,
                        location: Location::Element(node),
                        offset: h,
                    },
                );
            }
        }
    }

    if conditions.phi4 {
        for h in 0..n_tau {
            for j in 0..n_in {
                let mut e = DVector::zeros(n_vars);
                e[h * n_in + j] = 1.0;
                let loc = Location::Inlet(NodeId(j + 1));
                ineq.push(
                    e.clone(),
                    spec.u_max,
                    RowProvenance {
                        condition: Condition::Phi4Upper,
                        location: loc,
                        offset: h,
                    },
                );
                ineq.push(
                    -e,
                    -spec.u_min,
                    RowProvenance {
                        condition: Condition::Phi4Lower,
                        location: loc,
                        offset: h,
                    },
                );
            }
        }
    }

    if conditions.phi5 {
        for h in 0..n_tau {
            let mut e = DVector::zeros(n_vars);
            e.rows_mut(h * n_in, n_in).fill(1.0);
            eq.push(
                e,
                spec.u0,
                RowProvenance {
                    condition: Condition::Phi5,
                    location: Location::Network,
                    offset: h,
                },
            );
        }
    }

    let (ineq_mat, ineq_rhs, ineq_prov) = ineq.finish(n_vars);
    let (eq_mat, eq_rhs, eq_prov) = eq.finish(n_vars);
    Ok(AffineConstraintSet {
        ineq_mat,
        ineq_rhs,
        ineq_prov,
        eq_mat,
        eq_rhs,
        eq_prov,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationReport {
    pub step: usize,
    pub condition: Condition,
    pub location: Location,
    pub lhs: f64,
    pub bound: f64,
    /// Margin to the bound; negative when violated.
    pub slack: f64,
}

/// Realized trajectory: `states[k]` for `k = 0..=K`, `inputs[k]` and
/// `records[k]` for the transition `k → k+1`.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<TrafficState>,
    pub inputs: Vec<BoundaryInflow>,
    pub records: Vec<FlowRecord>,
}

/// Checks Φ1 on every state, Φ2 and Φ3 on every transition, and Φ5 on
/// every input when enabled. Reports are ordered by step.
pub fn monitor(
    g: &NoirGraph,
    traj: &Trajectory,
    spec: &FeasibilitySpec,
    tol: f64,
) -> Vec<ViolationReport> {
    let mut out = Vec::new();
    let mut report = |step, condition, location, lhs: f64, bound: f64, slack: f64| {
        if slack < -tol {
            out.push(ViolationReport {
                step,
                condition,
                location,
                lhs,
                bound,
                slack,
            });
        }
    };
    for (k, state) in traj.states.iter().enumerate() {
        for (c, &rho) in state.densities.iter().enumerate() {
            let loc = Location::Element(g.interior_node(c));
            report(k, Condition::Phi1Lower, loc, rho, 0.0, rho);
            report(k, Condition::Phi1Upper, loc, rho, spec.rho_max, spec.rho_max - rho);
        }
        let Some(rec) = traj.records.get(k) else {
            continue;
        };
        for e in &rec.edge_flows {
            let Some(cj) = g.interior_index(e.to) else {
                continue;
            };
            let cap = spec.rho_max - state.densities[cj];
            report(
                k,
                Condition::Phi2,
                Location::Edge {
                    from: e.from,
                    to: e.to,
                },
                e.flow,
                cap,
                cap - e.flow,
            );
        }
        for (c, &y) in rec.inflow.iter().enumerate() {
            let cap = spec.rho_max - state.densities[c];
            report(
                k,
                Condition::Phi3,
                Location::Element(g.interior_node(c)),
                y,
                cap,
                cap - y,
            );
        }
    }
    if spec.enforce_phi5 {
        for (k, u) in traj.inputs.iter().enumerate() {
            let total = u.total();
            report(
                k,
                Condition::Phi5,
                Location::Network,
                total,
                spec.u0,
                -(total - spec.u0).abs(),
            );
        }
    }
    out
}
