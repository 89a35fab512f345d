mod common;

use nalgebra::{DMatrix, DVector};
use noir_core::dynamics::{mass_balance, stacked_response, BoundaryInflow, NetworkModel, TrafficState};
use noir_core::network::{check_theorem1_paths, NodeKind};
use noir_core::tendency::{assemble_tendency_matrix, perron, ActionId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{eig_radius, random_actions, random_graph, switching_bound};

fn setup(seed: u64, max_interior: usize, count: u32) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, max_interior);
    let actions = random_actions(&g, count, (0.05, 1.0), &mut rng);
    NetworkModel::new(g, &actions).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matrix_rebuilt_entrywise(seed in any::<u64>()) {
        let m = setup(seed, 10, 1);
        let g = m.graph();
        let am = &m.models()[0];
        let n = g.n_interior();
        let mut a = DMatrix::<f64>::identity(n, n);
        for (c, from) in g.interior().enumerate() {
            let p = am.action.p(from).unwrap();
            a[(c, c)] -= p;
            for &to in g.out_neighbors(from) {
                if let Some(r) = g.interior_index(to) {
                    a[(r, c)] += p * am.action.q(to, from).unwrap();
                }
            }
        }
        prop_assert!((&a - &am.tm.a_matrix).amax() < 1e-14);
        let direct = DMatrix::identity(n, n) - am.tm.p_matrix() + &am.tm.q_matrix * am.tm.p_matrix();
        prop_assert!((&direct - &am.tm.a_matrix).amax() < 1e-14);
    }

    #[test]
    fn column_sums_lose_exactly_outlet_share(seed in any::<u64>()) {
        let m = setup(seed, 10, 1);
        let g = m.graph();
        let am = &m.models()[0];
        for (c, from) in g.interior().enumerate() {
            let to_outlets: f64 = g
                .out_neighbors(from)
                .iter()
                .filter(|&&to| g.kind(to) == NodeKind::Outlet)
                .map(|&to| am.action.edge_rate(to, from).unwrap())
                .sum();
            let sum = am.tm.a_matrix.column(c).sum();
            prop_assert!((sum - (1.0 - to_outlets)).abs() < 1e-12);
            prop_assert!((sum - am.tm.column_sums[c]).abs() < 1e-12);
            prop_assert!(sum <= 1.0 + 1e-12);
            prop_assert!(am.tm.a_matrix.column(c).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn power_iteration_matches_eigendecomposition(seed in any::<u64>()) {
        let m = setup(seed, 12, 1);
        prop_assert!(check_theorem1_paths(m.graph()).passed());
        let tm = &m.models()[0].tm;
        let oracle = eig_radius(&tm.a_matrix);
        prop_assert!(tm.spectral_radius < 1.0);
        prop_assert!((tm.spectral_radius - oracle).abs() < 1e-6,
            "power {} eig {}", tm.spectral_radius, oracle);
    }

    #[test]
    fn stacked_form_equals_rollout(seed in any::<u64>(), k in 1usize..8) {
        let m = setup(seed, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = m.graph().n_interior();
        let n_in = m.graph().n_in();
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(0.0..20.0));
        let inputs: Vec<DVector<f64>> =
            (0..k).map(|_| DVector::from_fn(n_in, |_, _| rng.random_range(0.0..5.0))).collect();
        let ids: Vec<ActionId> = (0..k).map(|_| ActionId(rng.random_range(1..=3))).collect();
        let bis: Vec<BoundaryInflow> =
            inputs.iter().map(|u| BoundaryInflow::new(u.clone()).unwrap()).collect();
        let states = m.rollout(&TrafficState::new(x0.clone(), 0).unwrap(), &bis, &ids).unwrap();
        let mats: Vec<&DMatrix<f64>> = ids.iter().map(|&id| &m.model(id).unwrap().tm.a_matrix).collect();
        let stacked = stacked_response(&mats, m.b(), &x0, &inputs);
        prop_assert!((&stacked - &states[k].densities).amax() < 1e-9 * (1.0 + stacked.amax()));
    }

    #[test]
    fn every_step_conserves_mass(seed in any::<u64>()) {
        let m = setup(seed, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let n = m.graph().n_interior();
        let mut x = TrafficState::new(DVector::from_fn(n, |_, _| rng.random_range(0.0..45.0)), 0).unwrap();
        for _ in 0..50 {
            let u = BoundaryInflow::new(DVector::from_fn(m.graph().n_in(), |_, _| rng.random_range(0.0..20.0))).unwrap();
            let (next, rec) = m.step(&x, &u, ActionId(rng.random_range(1..=2))).unwrap();
            prop_assert!(mass_balance(m.graph(), &x, &next, &rec) <= 1e-9);
            x = next;
        }
    }

    #[test]
    fn zero_outflow_action_is_not_contracting(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 6);
        let mut a = noir_core::TendencyAction::uniform(&g, ActionId(1), 0.0);
        a.outflow_prob.values_mut().for_each(|p| *p = 0.0);
        let tm = assemble_tendency_matrix(&g, &a).unwrap();
        prop_assert!((tm.spectral_radius - 1.0).abs() < 1e-9);
    }
}

#[test]
fn switching_rollouts_stay_within_geometric_bound() {
    for seed in 0..20u64 {
        let m = setup(seed, 6, 3);
        let g = m.graph();
        let actions: Vec<_> = m.models().iter().map(|am| am.action.clone()).collect();
        let set = noir_core::ActionSet::new(actions).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = DVector::from_fn(g.n_interior(), |_, _| rng.random_range(0.0..45.0));
        let u_max = 20.0;
        let bu_max = m.b().column_sum().amax() * u_max * g.n_in() as f64;
        let bound = switching_bound(g, &set, x0.sum(), bu_max);
        let mut x = TrafficState::new(x0, 0).unwrap();
        let mut peak: f64 = 0.0;
        for _ in 0..10_000 {
            let u = BoundaryInflow::new(DVector::from_fn(g.n_in(), |_, _| rng.random_range(0.0..u_max))).unwrap();
            let (next, rec) = m.step(&x, &u, ActionId(rng.random_range(1..=3))).unwrap();
            assert!(mass_balance(g, &x, &next, &rec) <= 1e-9);
            assert!(next.densities.iter().all(|&v| v >= 0.0));
            peak = peak.max(next.total());
            x = next;
        }
        assert!(peak <= bound, "seed {seed}: peak {peak} bound {bound}");
    }
}

#[test]
fn perron_handles_periodic_and_reducible() {
    // permutation cycle: all eigenvalues on the unit circle
    let p = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    assert!((perron(&p, 1e-10, 10_000).unwrap().radius - 1.0).abs() < 1e-9);
    // block diagonal with an isolated smaller block
    let r = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.7]);
    assert!((perron(&r, 1e-10, 10_000).unwrap().radius - 0.7).abs() < 1e-8);
}
