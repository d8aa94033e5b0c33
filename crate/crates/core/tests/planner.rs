use lira::planner::{rollout, Planner, PlannerConfig};
use lira::tensor::Array;
use lira::LiraRng;
use rand::{Rng, SeedableRng};

fn integrator(s: &Array, a: &Array) -> lira::Result<(Array, Array)> {
    let next = s.zip_map(a, |x, u| x + 0.5 * u);
    let r = next.map(|x| -(x - 1.0).powi(2));
    Ok((next, r))
}

fn mean_plan_return(policy_mean: &[f64], s0: f64) -> f64 {
    let actions: Vec<Vec<f64>> = policy_mean.iter().map(|&a| vec![a]).collect();
    rollout(&integrator, &[s0], &actions).unwrap().ret
}

#[test]
fn refined_policy_beats_its_initialization() {
    let config = PlannerConfig { horizon: 5, candidates: 64, iterations: 3, ..Default::default() };
    let planner = Planner::new(config, 1, 1.0).unwrap();
    let mut improved = 0;
    for seed in 0..100 {
        let mut rng = LiraRng::seed_from_u64(seed);
        let s0 = rng.random_range(-3.0..3.0);
        let mut policy = planner.initial_policy();
        let before = mean_plan_return(&policy.mean, s0);
        planner.plan(&[s0], &integrator, &mut policy, false, &mut rng).unwrap();
        if mean_plan_return(&policy.mean, s0) >= before {
            improved += 1;
        }
    }
    assert!(improved >= 95, "improved in {improved} of 100 trials");
}

#[test]
fn same_seed_same_plan() {
    let planner = Planner::new(PlannerConfig { horizon: 4, ..Default::default() }, 1, 1.0).unwrap();
    let plan = |seed| {
        let mut policy = planner.initial_policy();
        let a = planner.plan(&[0.3], &integrator, &mut policy, true, &mut LiraRng::seed_from_u64(seed)).unwrap();
        (a, policy)
    };
    assert_eq!(plan(7), plan(7));
    assert_ne!(plan(7).0, plan(8).0);
}
