mod common;

use common::{two_period_model, BruteForce};
use dynport::dp::{solve_horizon, StageContext};

#[test]
fn two_period_dp_matches_exhaustive_search() {
    let model = two_period_model(40);
    let (surfaces, _) = solve_horizon(&model).unwrap();
    let ctx = StageContext::new(&model, &surfaces[1]).unwrap();
    let problem = ctx.problem(0);
    let brute = BruteForce::new(&model, 1000);
    for i in 0..=10 {
        let x = i as f64 / 10.0;
        let (v, u) = brute.value(x, 2);
        let fitted = surfaces[0].surfaces[0].evaluate(&[x]).unwrap().value;
        let d = problem.solve(&[x], None).unwrap();
        assert!((fitted - v).abs() < 5e-4, "x = {x}: dp {fitted} vs exhaustive {v}");
        assert!((d.objective - v).abs() < 5e-4);
        // the exhaustive optimum sits on a grid of spacing 1e-3
        assert!((d.post_trade(&[x])[0] - u).abs() < 2e-3, "x = {x}: dp {:?} vs exhaustive {u}", d.post_trade(&[x]));
    }
}
