//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use noir_core::network::{NodeId, NoirGraph};
use noir_core::qp::QpProblem;
use noir_core::tendency::{ActionId, ActionSet, TendencyAction};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Random graph satisfying both path conditions. Every interior element
/// gets an in-edge from an inlet or an earlier interior element and an
/// out-edge to an outlet or a later one; extra edges add cycles.
pub fn random_graph<R: Rng>(rng: &mut R, max_interior: usize) -> NoirGraph {
    let n_in = rng.random_range(1..=3);
    let n_out = rng.random_range(1..=3);
    let n_int = rng.random_range(1..=max_interior);
    let n_out_end = n_in + n_out;
    let n_total = n_out_end + n_int;
    let interior: Vec<usize> = (n_out_end + 1..=n_total).collect();
    let mut edges = std::collections::BTreeSet::new();
    for (k, &v) in interior.iter().enumerate() {
        let src = if k == 0 || rng.random_bool(0.3) {
            rng.random_range(1..=n_in)
        } else {
            interior[rng.random_range(0..k)]
        };
        edges.insert((src, v));
        let dst = if k + 1 == interior.len() || rng.random_bool(0.3) {
            rng.random_range(n_in + 1..=n_out_end)
        } else {
            interior[rng.random_range(k + 1..interior.len())]
        };
        edges.insert((v, dst));
    }
    for _ in 0..rng.random_range(0..=n_int) {
        let a = *interior.choose(rng).unwrap();
        let b = *interior.choose(rng).unwrap();
        if a != b {
            edges.insert((a, b));
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    NoirGraph::build(&edges, n_in, n_out_end, n_total).expect("generated graph is valid")
}

pub fn random_actions<R: Rng>(g: &NoirGraph, count: u32, p_range: (f64, f64), rng: &mut R) -> ActionSet {
    ActionSet::new(
        (1..=count)
            .map(|id| TendencyAction::random(g, ActionId(id), p_range, rng))
            .collect(),
    )
    .unwrap()
}

/// Largest eigenvalue modulus from a full eigendecomposition.
pub fn eig_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Longest shortest-path hop count from an interior element to an outlet.
pub fn max_exit_distance(g: &NoirGraph) -> usize {
    let mut dist = vec![usize::MAX; g.n_total() + 1];
    let mut queue = std::collections::VecDeque::new();
    for o in g.outlets() {
        dist[o.0] = 0;
        queue.push_back(o);
    }
    while let Some(v) = queue.pop_front() {
        for &w in g.in_neighbors(v) {
            if dist[w.0] == usize::MAX {
                dist[w.0] = dist[v.0] + 1;
                queue.push_back(w);
            }
        }
    }
    g.interior().map(|v| dist[v.0]).max().unwrap_or(0)
}

/// `‖x_k‖₁ ≤ ‖x_0‖₁ + d · U / (1 - γ)` with `γ = 1 - r^d`, where `r` is the
/// smallest edge rate over all actions, `d` the exit distance and `U` the
/// largest boundary inflow mass per step. Holds under arbitrary switching
/// because every column sum of every `A` is at most one and within `d`
/// steps at least `r^d` of any unit of mass has left.
pub fn switching_bound(g: &NoirGraph, actions: &ActionSet, x0_mass: f64, u_mass: f64) -> f64 {
    let mut r = f64::INFINITY;
    for a in actions.iter() {
        for (from, to) in g.edges() {
            if let Some(rate) = a.edge_rate(to, from) {
                r = r.min(rate);
            }
        }
    }
    let d = max_exit_distance(g) as i32;
    let gamma = 1.0 - r.powi(d);
    x0_mass + d as f64 * u_mass / (1.0 - gamma)
}

/// Strictly convex QP by brute force: solve the equality-constrained KKT
/// system for every subset of inequalities and keep the best primal-feasible
/// point. `None` when no subset yields a feasible point.
pub fn enumerate_qp(p: &QpProblem, feas_tol: f64) -> Option<(DVector<f64>, f64)> {
    let n = p.n();
    let (gm, hv) = p.ineq();
    let (em, fv) = p.eq();
    let m = gm.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = em.nrows() + rows.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(p.h());
        rhs.rows_mut(0, n).copy_from(&(-p.g()));
        let mut put = |r: usize, row: Vec<f64>, b: f64| {
            for c in 0..n {
                kkt[(n + r, c)] = row[c];
                kkt[(c, n + r)] = row[c];
            }
            rhs[n + r] = b;
        };
        for r in 0..em.nrows() {
            put(r, em.row(r).iter().copied().collect(), fv[r]);
        }
        for (j, &r) in rows.iter().enumerate() {
            put(em.nrows() + j, gm.row(r).iter().copied().collect(), hv[r]);
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        if (&kkt * &sol - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        if p.primal_violation(&z) > feas_tol {
            continue;
        }
        let obj = p.objective(&z);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((z, obj));
        }
    }
    best
}

/// Random strictly convex QP with `n ≤ 8` variables and at most 8
/// inequalities. Feasible instances are built around a known interior point;
/// infeasible ones contain the pair `aᵀz ≤ -1`, `-aᵀz ≤ -1`.
pub fn random_qp<R: Rng>(rng: &mut R, infeasible: bool) -> QpProblem {
    let n = rng.random_range(1..=8);
    let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = r.transpose() * &r + DMatrix::identity(n, n) * rng.random_range(0.1..2.0);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let n_eq = rng.random_range(0..=n.min(2));
    let em = DMatrix::from_fn(n_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let fv = &em * &z0;
    let m = rng.random_range(if infeasible { 2 } else { 0 }..=8);
    let mut gm = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let mut hv = &gm * &z0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    if infeasible {
        let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)).normalize();
        gm.set_row(0, &a.transpose());
        gm.set_row(1, &(-a.transpose()));
        hv[0] = -1.0;
        hv[1] = -1.0;
    }
    QpProblem::new(h, g, gm, hv, em, fv).expect("well-posed QP")
}

pub fn node(id: usize) -> NodeId {
    NodeId(id)
}

pub mod physical {
    use nalgebra::DVector;
    use noir_core::constraints::{
        compile, predict_affine, Condition, Conditions, FeasibilitySpec, Location, RowProvenance,
        Trajectory,
    };
    use noir_core::dynamics::{BoundaryInflow, NetworkModel, TrafficState};
    use noir_core::qp::{solve, QpProblem, QpStatus, DEFAULT_MAX_ITER, INTERNAL_TOL};
    use noir_core::tendency::ActionId;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::{random_actions, random_graph};

    /// A random compiled program with its plant.
    pub struct Case {
        pub model: NetworkModel,
        pub spec: FeasibilitySpec,
        pub x0: TrafficState,
        pub set: noir_core::constraints::AffineConstraintSet,
    }

    pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
        let g = random_graph(rng, 6);
        let actions = random_actions(&g, 1, (0.2, 0.9), rng);
        let model = NetworkModel::new(g.clone(), &actions).unwrap();
        let n_in = g.n_in() as f64;
        let u0 = rng.random_range(1.0..10.0);
        let spec = FeasibilitySpec {
            rho_max: 45.0,
            u_min: 0.0,
            u_max: u0,
            u0,
            horizon: rng.random_range(1..=4),
            enforce_phi5: rng.random_bool(0.5) && n_in > 0.0,
        };
        let x0 = TrafficState::new(
            DVector::from_fn(g.n_interior(), |_, _| rng.random_range(0.0..10.0)),
            0,
        )
        .unwrap();
        let am = model.model(ActionId(1)).unwrap();
        let pred = predict_affine(&x0, &am.tm, model.b(), spec.horizon).unwrap();
        let set = compile(&spec, Conditions::from_spec(&spec), &g, &am.action, &pred).unwrap();
        Case { model, spec, x0, set }
    }

    /// Feasible point nearest to `target`, or `None` if the set is empty.
    pub fn project(case: &Case, target: &DVector<f64>, extra_eq: Option<usize>) -> Option<DVector<f64>> {
        let n = target.len();
        let (mut em, mut fv) = (case.set.eq_mat.clone(), case.set.eq_rhs.clone());
        if let Some(r) = extra_eq {
            let at = em.nrows();
            em = em.insert_row(at, 0.0);
            let last = em.nrows() - 1;
            em.set_row(last, &case.set.ineq_mat.row(r));
            fv = fv.push(case.set.ineq_rhs[r]);
        }
        let p = QpProblem::new(
            nalgebra::DMatrix::identity(n, n) * 2.0,
            -target * 2.0,
            case.set.ineq_mat.clone(),
            case.set.ineq_rhs.clone(),
            em,
            fv,
        )
        .ok()?;
        let s = solve(&p, INTERNAL_TOL, DEFAULT_MAX_ITER);
        (s.status == QpStatus::Optimal).then_some(s.z)
    }

    /// Applies `U` block by block to the plant under action 1.
    pub fn simulate(case: &Case, u: &DVector<f64>) -> Trajectory {
        let n_in = case.model.graph().n_in();
        let mut t = Trajectory {
            states: vec![case.x0.clone()],
            ..Trajectory::default()
        };
        for h in 0..case.spec.horizon {
            let block: Vec<f64> = u.rows(h * n_in, n_in).iter().map(|v| v.max(0.0)).collect();
            let ui = BoundaryInflow::from_slice(&block).unwrap();
            let (next, rec) = case.model.step(t.states.last().unwrap(), &ui, ActionId(1)).unwrap();
            t.inputs.push(ui);
            t.records.push(rec);
            t.states.push(next);
        }
        t
    }

    /// The quantity a compiled row constrains, measured on the simulated
    /// trajectory, with the orientation of the row (`lhs ≤ bound`).
    pub fn measure(case: &Case, t: &Trajectory, u: &DVector<f64>, prov: &RowProvenance) -> (f64, f64) {
        let g = case.model.graph();
        let n_in = g.n_in();
        let s = &case.spec;
        let k = prov.offset;
        let elem = |loc: Location| match loc {
            Location::Element(v) => g.interior_index(v).unwrap(),
            other => panic!("expected element, got {other}"),
        };
        match prov.condition {
            Condition::Phi1Lower => (-t.states[k].densities[elem(prov.location)], 0.0),
            Condition::Phi1Upper => (t.states[k].densities[elem(prov.location)], s.rho_max),
            Condition::Phi2 => {
                let Location::Edge { from, to } = prov.location else { panic!() };
                let ci = g.interior_index(from).unwrap();
                let cj = g.interior_index(to).unwrap();
                let a = &case.model.model(ActionId(1)).unwrap().action;
                let x = &t.states[k].densities;
                (a.edge_rate(to, from).unwrap() * x[ci] + x[cj], s.rho_max)
            }
            Condition::Phi3 => {
                let c = elem(prov.location);
                (t.records[k].inflow[c] + t.states[k].densities[c], s.rho_max)
            }
            Condition::Phi4Upper | Condition::Phi4Lower => {
                let Location::Inlet(j) = prov.location else { panic!() };
                let v = u[k * n_in + j.0 - 1];
                if prov.condition == Condition::Phi4Upper {
                    (v, s.u_max)
                } else {
                    (-v, -s.u_min)
                }
            }
            Condition::Phi5 => (u.rows(k * n_in, n_in).sum(), s.u0),
        }
    }
}

pub mod grid {
    /// Exhaustive search over `[lo, hi]^dims` with spacing `step`; `eval`
    /// returns `None` for infeasible points.
    pub fn search<F: Fn(&[f64]) -> Option<f64>>(
        dims: usize,
        lo: f64,
        hi: f64,
        step: f64,
        eval: F,
    ) -> Option<(Vec<f64>, f64)> {
        let count = ((hi - lo) / step).round() as usize + 1;
        let mut idx = vec![0usize; dims];
        let mut point = vec![lo; dims];
        let mut best: Option<(Vec<f64>, f64)> = None;
        loop {
            for d in 0..dims {
                point[d] = (lo + idx[d] as f64 * step).min(hi);
            }
            if let Some(c) = eval(&point) {
                if best.as_ref().is_none_or(|(_, b)| c < *b) {
                    best = Some((point.clone(), c));
                }
            }
            let mut d = 0;
            loop {
                if d == dims {
                    return best;
                }
                idx[d] += 1;
                if idx[d] < count {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    /// Chain `1 → 3 → 2` with outflow probability `p`: cost and
    /// feasibility of holding inputs `u` from density `x0`.
    pub fn chain_eval(p: f64, x0: f64, beta: f64, rho_max: f64, u: &[f64]) -> Option<f64> {
        let mut x = x0;
        let mut cost = 0.0;
        for &uh in u {
            if uh + x > rho_max + 1e-12 {
                return None;
            }
            x = (1.0 - p) * x + uh;
            if !(0.0..=rho_max + 1e-12).contains(&x) {
                return None;
            }
            cost += x * x + beta * uh * uh;
        }
        Some(cost)
    }

    /// Inlets 1, 2 feed elements 4, 5; `4 → 5`, `4 → 3`, `5 → 3`.
    /// `p4 = 0.3`, `p5 = 0.6`, 70 % of element 4's outflow goes to 5.
    pub const MERGE_EDGES: [(usize, usize); 5] = [(1, 4), (2, 5), (4, 5), (4, 3), (5, 3)];
    pub const MERGE_RATE_45: f64 = 0.3 * 0.7;

    /// `u` holds `(u1, u2)` pairs per step.
    pub fn merge_eval(x0: [f64; 2], beta: f64, rho_max: f64, u: &[f64]) -> Option<f64> {
        let (mut x4, mut x5) = (x0[0], x0[1]);
        let mut cost = 0.0;
        for pair in u.chunks(2) {
            let (u1, u2) = (pair[0], pair[1]);
            if u1 + x4 > rho_max + 1e-12 || MERGE_RATE_45 * x4 + u2 + x5 > rho_max + 1e-12 {
                return None;
            }
            let n4 = 0.7 * x4 + u1;
            let n5 = 0.4 * x5 + MERGE_RATE_45 * x4 + u2;
            x4 = n4;
            x5 = n5;
            if x4 > rho_max + 1e-12 || x5 > rho_max + 1e-12 || MERGE_RATE_45 * x4 + x5 > rho_max + 1e-12 {
                return None;
            }
            cost += x4 * x4 + x5 * x5 + beta * (u1 * u1 + u2 * u2);
        }
        Some(cost)
    }
}
