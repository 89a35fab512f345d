//! Dense strictly convex quadratic programs
//!
//! ```text
//!     minimize     ½ zᵀ H z + gᵀ z
//!     subject to   G z ≤ h
//!                  E z = f
//! ```
//!
//! solved with a dual active-set method (Goldfarb–Idnani). The iteration
//! starts from the unconstrained minimizer and adds violated constraints one
//! at a time while keeping the working-set multipliers dual feasible, so no
//! feasible starting point is needed and an infeasible program ends with a
//! Farkas combination of constraints.
//!
//! Each step solves the working-set KKT system in range-space form: with
//! `H = L Lᵀ` and `V = L⁻¹ N_W`, the multiplier step is a least-squares
//! solve against `V` (QR) and the primal step is `-L⁻ᵀ` times its residual.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Internal feasibility/optimality tolerance.
pub const INTERNAL_TOL: f64 = 1e-8;
/// Bound on KKT residuals reported for an `Optimal` solution.
pub const EXPOSED_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Squared relative residual below which a new constraint normal counts as
/// linearly dependent on the working set.
const DEPENDENCE_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {0}")]
    DimensionMismatch(&'static str),
    #[error("H is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("H is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("H is ill-conditioned (eigenvalues {min:e} .. {max:e})")]
    IllConditioned { min: f64, max: f64 },
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    h: DMatrix<f64>,
    g: DVector<f64>,
    ineq_mat: DMatrix<f64>,
    ineq_rhs: DVector<f64>,
    eq_mat: DMatrix<f64>,
    eq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions, symmetry and conditioning of `H`.
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        ineq_mat: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
        eq_mat: DMatrix<f64>,
        eq_rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::DimensionMismatch("H"));
        }
        if ineq_mat.ncols() != n || ineq_mat.nrows() != ineq_rhs.len() {
            return Err(QpError::DimensionMismatch("G, h"));
        }
        if eq_mat.ncols() != n || eq_mat.nrows() != eq_rhs.len() {
            return Err(QpError::DimensionMismatch("E, f"));
        }
        let all_finite = [h.as_slice(), g.as_slice(), ineq_mat.as_slice(), ineq_rhs.as_slice(), eq_mat.as_slice(), eq_rhs.as_slice()]
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()));
        if !all_finite
        {
            return Err(QpError::NonFinite);
        }
        let asym = (&h - h.transpose()).amax();
        if asym > 1e-12 * h.amax().max(1.0) {
            return Err(QpError::NotSymmetric(asym));
        }
        if n > 0 {
            let eig = h.clone().symmetric_eigenvalues();
            let min = eig.min();
            let max = eig.max();
            if min <= 0.0 {
                return Err(QpError::NotPositiveDefinite(min));
            }
            if min < 1e-10 * max {
                return Err(QpError::IllConditioned { min, max });
            }
        }
        Ok(QpProblem {
            h,
            g,
            ineq_mat,
            ineq_rhs,
            eq_mat,
            eq_rhs,
        })
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn ineq(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.ineq_mat, &self.ineq_rhs)
    }

    pub fn eq(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.eq_mat, &self.eq_rhs)
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    /// Largest constraint excess at `z`: `max((Gz - h)⁺, |Ez - f|)`.
    pub fn primal_violation(&self, z: &DVector<f64>) -> f64 {
        let ineq = (&self.ineq_mat * z - &self.ineq_rhs)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        let eq = (&self.eq_mat * z - &self.eq_rhs)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        ineq.max(eq)
    }

    /// Plain-text dump of `(H, g, G, h, E, f)`, one block per matrix:
    /// a `name rows cols` header followed by rows of space-separated values.
    pub fn write_dense<W: Write>(&self, mut w: W) -> io::Result<()> {
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let blocks: [(&str, DMatrix<f64>); 6] = [
            ("H", self.h.clone()),
            ("g", col(&self.g)),
            ("G", self.ineq_mat.clone()),
            ("h", col(&self.ineq_rhs)),
            ("E", self.eq_mat.clone()),
            ("f", col(&self.eq_rhs)),
        ];
        for (name, m) in &blocks {
            writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    /// Converged but KKT residuals exceed the exposed tolerance.
    Inaccurate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ConstraintRef {
    Ineq(usize),
    Eq(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `‖Hz + g + Gᵀλ + Eᵀν‖∞`
    pub stationarity: f64,
    pub primal: f64,
    /// `max |λ_i (Gz - h)_i|`
    pub complementarity: f64,
    /// `max(-λ_i, 0)`
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }
}

/// Farkas witness: weights `y` (nonnegative on inequality rows) with
/// `Σ y_i n_i = 0` and `Σ y_i b_i < 0` over rows written as `n_iᵀ z ≤ b_i`
/// (equalities may take either sign).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfeasibilityCertificate {
    pub weights: Vec<(ConstraintRef, f64)>,
}

impl InfeasibilityCertificate {
    /// Returns `(‖Σ y_i n_i‖∞, Σ y_i b_i)`; a valid witness has the first
    /// near zero and the second negative.
    pub fn evaluate(&self, p: &QpProblem) -> (f64, f64) {
        let mut combo = DVector::zeros(p.n());
        let mut rhs = 0.0;
        for &(c, y) in &self.weights {
            let (row, b) = match c {
                ConstraintRef::Ineq(i) => (p.ineq_mat.row(i).transpose(), p.ineq_rhs[i]),
                ConstraintRef::Eq(i) => (p.eq_mat.row(i).transpose(), p.eq_rhs[i]),
            };
            combo += row * y;
            rhs += y * b;
        }
        (combo.amax(), rhs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    /// Inequality rows in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub ineq_duals: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub iterations: usize,
    pub certificate: Option<InfeasibilityCertificate>,
}

/// KKT residuals of `(z, λ, ν)`.
pub fn check_kkt(
    p: &QpProblem,
    z: &DVector<f64>,
    ineq_duals: &DVector<f64>,
    eq_duals: &DVector<f64>,
) -> KktResiduals {
    let grad = &p.h * z + &p.g + p.ineq_mat.transpose() * ineq_duals + p.eq_mat.transpose() * eq_duals;
    let slack = &p.ineq_mat * z - &p.ineq_rhs;
    let complementarity = ineq_duals
        .iter()
        .zip(slack.iter())
        .fold(0.0f64, |m, (l, s)| m.max((l * s).abs()));
    let dual = ineq_duals.iter().fold(0.0f64, |m, &l| m.max(-l));
    KktResiduals {
        stationarity: grad.amax(),
        primal: p.primal_violation(z),
        complementarity,
        dual,
    }
}

/// One working-set member: constraint, orientation, multiplier.
#[derive(Debug, Clone, Copy)]
struct Member {
    c: ConstraintRef,
    sign: f64,
    mu: f64,
}

/// Reusable solver holding the factorization of the last problem and the
/// previous active set for warm starts.
#[derive(Debug, Default)]
pub struct QpSolver {
    last_active: Vec<usize>,
}

impl QpSolver {
    pub fn new() -> Self {
        QpSolver::default()
    }

    /// Solves `p`, first trying the previous call's active set.
    pub fn solve(&mut self, p: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
        let hint = std::mem::take(&mut self.last_active);
        let sol = solve_warm(p, tol, max_iter, &hint);
        if sol.status == QpStatus::Optimal {
            self.last_active = sol.active_set.clone();
        }
        sol
    }
}

/// Cold solve.
pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    solve_warm(p, tol, max_iter, &[])
}

struct Workspace<'a> {
    p: &'a QpProblem,
    chol_l: DMatrix<f64>,
    /// `L⁻¹ Gᵀ`, one column per inequality row.
    vg: DMatrix<f64>,
    /// `L⁻¹ Eᵀ`
    ve: DMatrix<f64>,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a QpProblem) -> Self {
        let chol = p
            .h
            .clone()
            .cholesky()
            .expect("H was checked positive definite");
        let chol_l = chol.l();
        let solve_l = |m: DMatrix<f64>| {
            chol_l
                .solve_lower_triangular(&m)
                .expect("Cholesky factor is nonsingular")
        };
        let vg = solve_l(p.ineq_mat.transpose());
        let ve = solve_l(p.eq_mat.transpose());
        Workspace {
            p,
            chol_l,
            vg,
            ve,
        }
    }

    fn v(&self, c: ConstraintRef) -> DVector<f64> {
        match c {
            ConstraintRef::Ineq(i) => self.vg.column(i).into_owned(),
            ConstraintRef::Eq(i) => self.ve.column(i).into_owned(),
        }
    }

    fn normal(&self, c: ConstraintRef) -> (DVector<f64>, f64) {
        match c {
            ConstraintRef::Ineq(i) => (self.p.ineq_mat.row(i).transpose(), self.p.ineq_rhs[i]),
            ConstraintRef::Eq(i) => (self.p.eq_mat.row(i).transpose(), self.p.eq_rhs[i]),
        }
    }

    fn v_matrix(&self, w: &[Member]) -> DMatrix<f64> {
        let n = self.p.n();
        let mut m = DMatrix::zeros(n, w.len());
        for (k, mem) in w.iter().enumerate() {
            m.set_column(k, &(self.v(mem.c) * mem.sign));
        }
        m
    }

    fn unconstrained(&self) -> DVector<f64> {
        let y = self
            .chol_l
            .solve_lower_triangular(&(-&self.p.g))
            .expect("nonsingular");
        self.chol_l
            .tr_solve_lower_triangular(&y)
            .expect("nonsingular")
    }

    /// For a new normal with `L⁻¹ n = w`, returns the multiplier step `δ`
    /// minimizing `‖w + V δ‖` and the residual `r = w + V δ`.
    fn project(&self, v: &DMatrix<f64>, w: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        if v.ncols() == 0 {
            return Some((DVector::zeros(0), w.clone()));
        }
        let qr = v.clone().qr();
        let rhs = -(qr.q().transpose() * w);
        let delta = qr.r().solve_upper_triangular(&rhs)?;
        let r = w + v * &delta;
        Some((delta, r))
    }

    fn primal_direction(&self, r: &DVector<f64>) -> DVector<f64> {
        -self
            .chol_l
            .tr_solve_lower_triangular(r)
            .expect("nonsingular")
    }
}

/// Solve with a warm-start hint: the hint's inequality rows plus all
/// equalities are tried as the active set first, and the result is accepted
/// only if it certifies optimality. Otherwise a cold dual active-set solve
/// runs.
pub fn solve_warm(p: &QpProblem, tol: f64, max_iter: usize, hint: &[usize]) -> QpSolution {
    let ws = Workspace::new(p);
    if !hint.is_empty() {
        if let Some(sol) = try_active_set(&ws, tol, hint) {
            return sol;
        }
    }
    dual_active_set(&ws, tol, max_iter)
}

fn try_active_set(ws: &Workspace<'_>, tol: f64, hint: &[usize]) -> Option<QpSolution> {
    let p = ws.p;
    let mut members: Vec<Member> = (0..p.n_eq())
        .map(|i| Member {
            c: ConstraintRef::Eq(i),
            sign: 1.0,
            mu: 0.0,
        })
        .collect();
    for &i in hint {
        if i < p.n_ineq() {
            members.push(Member {
                c: ConstraintRef::Ineq(i),
                sign: 1.0,
                mu: 0.0,
            });
        }
    }
    if members.len() > p.n() {
        return None;
    }
    // Equality-constrained subproblem: z = -H⁻¹(g + N μ), Nᵀz = b
    // ⇒ (VᵀV) μ = -b - Vᵀ L⁻¹ g.
    let v = ws.v_matrix(&members);
    let lg = ws.chol_l.solve_lower_triangular(&p.g)?;
    let b = DVector::from_iterator(members.len(), members.iter().map(|m| ws.normal(m.c).1));
    let s = v.transpose() * &v;
    let rhs = -(b + v.transpose() * &lg);
    let mu = s.cholesky()?.solve(&rhs);
    let y = -(lg + &v * &mu);
    let z = ws.primal_direction(&(-y));
    for (k, m) in members.iter_mut().enumerate() {
        m.mu = mu[k];
    }
    let sol = finish(ws, z, &members, 0, QpStatus::Optimal, None);
    (sol.status == QpStatus::Optimal && sol.kkt.max() <= tol).then_some(sol)
}

fn dual_active_set(ws: &Workspace<'_>, tol: f64, max_iter: usize) -> QpSolution {
    let p = ws.p;
    let mut z = ws.unconstrained();
    let mut working: Vec<Member> = Vec::new();
    let mut iterations = 0;
    let mut next_eq = 0;

    loop {
        // Choose the constraint to add: equalities first, in order; then the
        // most violated inequality, lowest row on ties.
        let (c, sign, mut violation) = if next_eq < p.n_eq() {
            let (n, b) = ws.normal(ConstraintRef::Eq(next_eq));
            let r = n.dot(&z) - b;
            let sign = if r >= 0.0 { 1.0 } else { -1.0 };
            next_eq += 1;
            (ConstraintRef::Eq(next_eq - 1), sign, r.abs())
        } else {
            let slack = &p.ineq_mat * &z - &p.ineq_rhs;
            let mut pick: Option<(usize, f64)> = None;
            for (i, &s) in slack.iter().enumerate() {
                if s > tol && pick.is_none_or(|(_, best)| s > best) {
                    pick = Some((i, s));
                }
            }
            match pick {
                Some((i, s)) => (ConstraintRef::Ineq(i), 1.0, s),
                None => return finish(ws, z, &working, iterations, QpStatus::Optimal, None),
            }
        };

        let w_new = ws.v(c) * sign;
        let scale = w_new.norm_squared().max(f64::MIN_POSITIVE);
        let mut mu_new = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return finish(ws, z, &working, iterations, QpStatus::IterationLimit, None);
            }
            let v = ws.v_matrix(&working);
            let Some((delta, r)) = ws.project(&v, &w_new) else {
                return finish(ws, z, &working, iterations, QpStatus::Inaccurate, None);
            };
            let curvature = r.norm_squared();
            let dependent = curvature <= DEPENDENCE_TOL * scale;

            // Largest dual step keeping inequality multipliers nonnegative.
            let mut block: Option<(usize, f64)> = None;
            for (k, m) in working.iter().enumerate() {
                if matches!(m.c, ConstraintRef::Ineq(_)) && delta[k] < 0.0 {
                    let t = -m.mu / delta[k];
                    if block.is_none_or(|(_, tb)| t < tb) {
                        block = Some((k, t));
                    }
                }
            }

            if dependent {
                if matches!(c, ConstraintRef::Eq(_)) && violation <= tol {
                    // redundant, consistent equality
                    break;
                }
                match block {
                    None => {
                        let mut weights = vec![(c, sign)];
                        for (k, m) in working.iter().enumerate() {
                            weights.push((m.c, m.sign * delta[k]));
                        }
                        let cert = InfeasibilityCertificate { weights };
                        return finish(ws, z, &working, iterations, QpStatus::Infeasible, Some(cert));
                    }
                    Some((k, t)) => {
                        for (j, m) in working.iter_mut().enumerate() {
                            m.mu += t * delta[j];
                        }
                        mu_new += t;
                        working.remove(k);
                        continue;
                    }
                }
            }

            let d = ws.primal_direction(&r);
            let t_full = violation / curvature;
            match block {
                Some((k, t)) if t < t_full => {
                    z += &d * t;
                    for (j, m) in working.iter_mut().enumerate() {
                        m.mu += t * delta[j];
                    }
                    mu_new += t;
                    violation -= t * curvature;
                    working.remove(k);
                }
                _ => {
                    z += &d * t_full;
                    for (j, m) in working.iter_mut().enumerate() {
                        m.mu += t_full * delta[j];
                    }
                    mu_new += t_full;
                    working.push(Member {
                        c,
                        sign,
                        mu: mu_new,
                    });
                    break;
                }
            }
        }
    }
}

fn finish(
    ws: &Workspace<'_>,
    z: DVector<f64>,
    working: &[Member],
    iterations: usize,
    status: QpStatus,
    certificate: Option<InfeasibilityCertificate>,
) -> QpSolution {
    let p = ws.p;
    let mut ineq_duals = DVector::zeros(p.n_ineq());
    let mut eq_duals = DVector::zeros(p.n_eq());
    let mut active_set = Vec::new();
    for m in working {
        match m.c {
            ConstraintRef::Ineq(i) => {
                ineq_duals[i] = m.mu * m.sign;
                active_set.push(i);
            }
            ConstraintRef::Eq(i) => eq_duals[i] = m.mu * m.sign,
        }
    }
    active_set.sort_unstable();
    let kkt = check_kkt(p, &z, &ineq_duals, &eq_duals);
    let status = if status == QpStatus::Optimal && kkt.max() > EXPOSED_TOL {
        QpStatus::Inaccurate
    } else {
        status
    };
    QpSolution {
        objective: p.objective(&z),
        z,
        status,
        kkt,
        active_set,
        ineq_duals,
        eq_duals,
        iterations,
        certificate,
    }
}
