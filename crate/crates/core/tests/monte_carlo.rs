use bridgelab_core::lab::{self, ToyWorld};

fn world() -> ToyWorld {
    ToyWorld::from_tables(vec![0.5, 0.3, 0.2], vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap()
}

#[test]
fn standard_error_shrinks_as_inverse_root_n() {
    let w = world();
    let small = lab::monte_carlo_objective(&w, 0, 10_000, 1).unwrap();
    let large = lab::monte_carlo_objective(&w, 0, 160_000, 1).unwrap();
    let ratio = large.std_error / small.std_error;
    assert!((ratio - 0.25).abs() < 0.02, "ratio {ratio}");
}

#[test]
fn estimate_tracks_exact_value() {
    let w = world();
    let exact = lab::check_importance_identity(&w, 1).unwrap().rhs;
    let est = lab::monte_carlo_objective(&w, 1, 200_000, 9).unwrap();
    assert!((est.mean - exact).abs() <= 4.0 * est.std_error, "{} vs {exact}", est.mean);
}

#[test]
fn same_seed_same_estimate() {
    let w = world();
    assert_eq!(
        lab::monte_carlo_objective(&w, 0, 5_000, 3).unwrap(),
        lab::monte_carlo_objective(&w, 0, 5_000, 3).unwrap()
    );
}
