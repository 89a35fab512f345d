mod common;

use std::collections::BTreeMap;

use nalgebra::DVector;
use noir_core::constraints::FeasibilitySpec;
use noir_core::dynamics::{NetworkModel, TrafficState};
use noir_core::mpc::{FallbackPolicy, MpcConfig, MpcController};
use noir_core::network::{NodeId, NoirGraph};
use noir_core::tendency::{ActionId, ActionSet, TendencyAction};

use common::grid;

fn chain(p: f64) -> NetworkModel {
    let g = NoirGraph::build(&[(1, 3), (3, 2)], 1, 2, 3).unwrap();
    let a = TendencyAction::uniform(&g, ActionId(1), p);
    NetworkModel::new(g, &ActionSet::new(vec![a]).unwrap()).unwrap()
}

fn merge() -> NetworkModel {
    let g = NoirGraph::build(&grid::MERGE_EDGES, 2, 3, 5).unwrap();
    let a = TendencyAction {
        id: ActionId(1),
        outflow_prob: BTreeMap::from([(NodeId(4), 0.3), (NodeId(5), 0.6)]),
        tendency_prob: BTreeMap::from([
            ((NodeId(5), NodeId(4)), 0.7),
            ((NodeId(3), NodeId(4)), 0.3),
            ((NodeId(3), NodeId(5)), 1.0),
        ]),
    };
    NetworkModel::new(g, &ActionSet::new(vec![a]).unwrap()).unwrap()
}

fn config(rho_max: f64, box_: (f64, f64), u0: f64, horizon: usize, beta: f64, phi5: bool) -> MpcConfig {
    MpcConfig {
        beta,
        spec: FeasibilitySpec {
            rho_max,
            u_min: box_.0,
            u_max: box_.1,
            u0,
            horizon,
            enforce_phi5: phi5,
        },
        fallback: FallbackPolicy::None,
    }
}

#[test]
fn chain_matches_grid() {
    let cases = [
        (0.5, 6.0, 1.0, 45.0, (0.0, 2.0)),
        (0.5, 9.5, 1.0, 10.0, (0.2, 1.0)),
        (0.2, 8.0, 0.1, 10.0, (0.5, 1.5)),
        (0.8, 1.0, 5.0, 3.0, (1.0, 2.0)),
    ];
    for n_tau in [1, 2] {
        for &(p, x0, beta, rho_max, bx) in &cases {
            let m = chain(p);
            let cfg = config(rho_max, bx, bx.1, n_tau, beta, false);
            let x = TrafficState::new(DVector::from_vec(vec![x0]), 0).unwrap();
            let got = MpcController::new(cfg).unwrap().decide(&m, &x, ActionId(1));
            let oracle = grid::search(n_tau, bx.0, bx.1, 1e-3, |u| grid::chain_eval(p, x0, beta, rho_max, u));
            match (got, oracle) {
                (Ok(d), Some((u, _))) => assert!(
                    (d.u_star.inflows[0] - u[0]).abs() <= 2e-3,
                    "N={n_tau} {:?}: {} vs {}",
                    (p, x0, beta, rho_max, bx),
                    d.u_star.inflows[0],
                    u[0]
                ),
                (Err(_), None) => {}
                (g, o) => panic!("N={n_tau}: solver {g:?} oracle {o:?}"),
            }
        }
    }
}

#[test]
fn merge_with_demand_matches_grid() {
    let m = merge();
    for (x0, u0, rho_max, beta) in [([5.0, 5.0], 2.0, 45.0, 1.0), ([20.0, 10.0], 2.5, 25.0, 0.2), ([2.0, 30.0], 2.0, 32.5, 1.0)] {
        for n_tau in [1, 2] {
            let cfg = config(rho_max, (0.0, u0), u0, n_tau, beta, true);
            let x = TrafficState::new(DVector::from_vec(x0.to_vec()), 0).unwrap();
            let got = MpcController::new(cfg).unwrap().decide(&m, &x, ActionId(1));
            // free variable per step is u1; u2 = u0 - u1
            let oracle = grid::search(n_tau, 0.0, u0, 1e-3, |free| {
                let u: Vec<f64> = free.iter().flat_map(|&a| [a, u0 - a]).collect();
                grid::merge_eval(x0, beta, rho_max, &u)
            });
            match (got, oracle) {
                (Ok(d), Some((u, _))) => {
                    assert!((d.u_star.inflows[0] - u[0]).abs() <= 2e-3, "{x0:?} N={n_tau}: {} vs {}", d.u_star.inflows[0], u[0]);
                    assert!((d.u_star.inflows.sum() - u0).abs() < 1e-7);
                }
                (Err(_), None) => {}
                (g, o) => panic!("{x0:?} N={n_tau}: solver {g:?} oracle {o:?}"),
            }
        }
    }
}

#[test]
fn predicted_cost_equals_direct_simulation() {
    let m = chain(0.4);
    let cfg = config(45.0, (0.0, 3.0), 3.0, 3, 0.5, false);
    let x0 = TrafficState::new(DVector::from_vec(vec![7.0]), 0).unwrap();
    let d = MpcController::new(cfg).unwrap().decide(&m, &x0, ActionId(1)).unwrap();
    let cost = grid::chain_eval(0.4, 7.0, 0.5, 45.0, d.planned_inputs.as_slice()).unwrap();
    assert!((cost - d.predicted_cost).abs() < 1e-9);
}
