use nested_lqg::baselines::{compare, finite_horizon_oracle, FiniteHorizonProblem};
use nested_lqg::evaluation::{cost_decomposition, realization_cost};
use nested_lqg::problem::{problem_from_json, problem_to_json, random_instance, validate, BlockDims, ProblemInstance};
use nested_lqg::riccati::DEFAULT_LYAPUNOV_TOL;
use nested_lqg::synthesis::{
    check_information_pattern, controller_from_json, controller_to_json, synthesize, ControllerDocument, Synthesis,
    SynthesisOptions,
};
use nested_lqg::Error;
use proptest::prelude::*;

/// `None` when the assembled controller has an unstable `F`, which synthesis
/// rejects by design.
fn try_synthesize(inst: &ProblemInstance) -> Option<Synthesis> {
    match synthesize(inst, &SynthesisOptions::default()) {
        Ok(s) => Some(s),
        Err(e) if matches!(e.root(), Error::Unstable { .. }) && e.stage() == Some("realization") => None,
        Err(e) => panic!("{e}"),
    }
}

fn dims() -> impl Strategy<Value = BlockDims> {
    (1..=2usize, 1..=2usize, 1..=2usize, 1..=2usize, 1..=2usize, 1..=2usize)
        .prop_map(|(n1, n2, m1, m2, p1, p2)| BlockDims::new(n1, n2, m1, m2, p1, p2))
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn random_instances_validate_and_roundtrip(seed in 0u64..10_000, d in dims(), target in 0.3f64..1.2) {
        let inst = random_instance(seed, d, target).unwrap();
        prop_assert!(validate(&inst).unwrap().is_empty());
        let text = problem_to_json(&inst).unwrap();
        let back = problem_from_json(&text).unwrap();
        prop_assert_eq!(problem_to_json(&back).unwrap(), text);
    }

    #[test]
    fn synthesized_controller_is_nested_and_consistent(seed in 0u64..10_000, d in dims()) {
        let inst = random_instance(seed, d, 0.8).unwrap();
        let syn = try_synthesize(&inst);
        prop_assume!(syn.is_some());
        let syn = syn.unwrap();
        prop_assert!(syn.radii.all_stable());
        prop_assert!(syn.residuals.max() <= 1e-8);
        prop_assert!(check_information_pattern(&syn.realization, 30));

        let dec = cost_decomposition(&inst, &syn.gains, DEFAULT_LYAPUNOV_TOL).unwrap();
        prop_assert!(dec.sum_defect() <= 1e-8 * dec.j_total.max(1.0));
        prop_assert!(dec.j_hat_z >= -1e-12 && dec.j_tilde_z >= -1e-12 && dec.j_tilde_x >= -1e-12);
        let j_real = realization_cost(&inst, &syn.realization).unwrap();
        prop_assert!((j_real - dec.j_total).abs() <= 1e-8 * j_real.max(1.0));

        let doc = ControllerDocument { dims: d, realization: syn.realization.clone(), gains: Some(syn.gains.clone()) };
        let text = controller_to_json(&doc).unwrap();
        let back = controller_from_json(&text).unwrap();
        prop_assert_eq!(controller_to_json(&back).unwrap(), text);
    }

    #[test]
    fn distributed_cost_is_above_centralized(seed in 0u64..10_000, d in dims()) {
        let inst = random_instance(seed, d, 0.8).unwrap();
        prop_assume!(try_synthesize(&inst).is_some());
        let report = compare(&inst, None, &SynthesisOptions::default()).unwrap();
        prop_assert!(report.j_central <= report.j_distributed * (1.0 + 1e-9), "{} {}", report.j_central, report.j_distributed);
    }

    #[test]
    fn oracle_is_a_minimum_of_its_cost(seed in 0u64..10_000, i in 0usize..64, delta in -0.5f64..0.5) {
        let inst = random_instance(seed, BlockDims::scalar(), 0.8).unwrap();
        let fh = FiniteHorizonProblem::new(&inst, 8).unwrap();
        let sol = fh.solve().unwrap();
        let free: Vec<(usize, usize)> = (0..fh.mask().nrows())
            .flat_map(|r| (0..fh.mask().ncols()).map(move |c| (r, c)))
            .filter(|&(r, c)| fh.mask()[(r, c)] != 0.0)
            .collect();
        let (r, c) = free[i % free.len()];
        let change = fh.cost_change(&sol.theta, r, c, delta);
        prop_assert!(change >= -1e-9 * sol.summary.j_oracle.max(1.0), "moving ({r},{c}) by {delta} lowers cost by {change}");
    }
}

#[test]
fn oracle_cost_grows_with_horizon() {
    let inst = random_instance(5, BlockDims::scalar(), 0.8).unwrap();
    let costs: Vec<f64> = [4, 16, 64]
        .iter()
        .map(|&m| finite_horizon_oracle(&inst, m).unwrap().summary.j_oracle)
        .collect();
    assert!(costs.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{costs:?}");
}

#[test]
fn distributed_cost_can_exceed_common_information() {
    let inst = random_instance(7171, BlockDims::new(2, 2, 1, 1, 1, 2), 0.8).unwrap();
    let report = compare(&inst, None, &SynthesisOptions::default()).unwrap();
    assert!(report.j_central < report.j_common_info);
    assert!(report.j_distributed > report.j_common_info * (1.0 + 1e-3), "{report:?}");
    assert!(!report.sandwich_ok);
}
