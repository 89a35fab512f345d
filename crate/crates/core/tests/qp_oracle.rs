mod common;

use noir_core::qp::{solve, QpSolver, QpStatus, EXPOSED_TOL, INTERNAL_TOL, DEFAULT_MAX_ITER};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{enumerate_qp, random_qp};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_enumeration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, false);
        let (z_ref, obj_ref) = enumerate_qp(&p, 1e-9).expect("feasible by construction");
        let s = solve(&p, INTERNAL_TOL, DEFAULT_MAX_ITER);
        prop_assert_eq!(s.status, QpStatus::Optimal);
        prop_assert!((s.objective - obj_ref).abs() <= 1e-6 * (1.0 + obj_ref.abs()),
            "solver {} oracle {}", s.objective, obj_ref);
        prop_assert!((&s.z - &z_ref).amax() < 1e-5);
        prop_assert!(s.kkt.max() <= EXPOSED_TOL);
    }

    #[test]
    fn infeasible_never_optimal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, true);
        let s = solve(&p, INTERNAL_TOL, DEFAULT_MAX_ITER);
        prop_assert_eq!(s.status, QpStatus::Infeasible);
        let cert = s.certificate.expect("certificate");
        let (combo, rhs) = cert.evaluate(&p);
        prop_assert!(combo < 1e-7 && rhs < 0.0, "combo {} rhs {}", combo, rhs);
    }

    #[test]
    fn warm_start_agrees_with_cold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, false);
        let mut solver = QpSolver::new();
        let first = solver.solve(&p, INTERNAL_TOL, DEFAULT_MAX_ITER);
        let again = solver.solve(&p, INTERNAL_TOL, DEFAULT_MAX_ITER);
        prop_assert_eq!(again.status, QpStatus::Optimal);
        prop_assert!((&first.z - &again.z).amax() < 1e-9);
    }
}
