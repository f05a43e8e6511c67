mod support;

use patchalign::patchmodes::{assign_cluster, kmeans_fit, kmeans_fit_detailed, lloyd};
use support::{exhaustive_two_means, kmeans_optimum_gap, multistart_two_means, random_points};

#[test]
fn multistart_lloyd_reaches_exhaustive_optimum() {
    let gap = kmeans_optimum_gap(50);
    assert!(gap < 1e-9, "worst relative inertia gap {gap:e}");
}

#[test]
fn exhaustive_oracle_on_two_clear_groups() {
    let pts = vec![vec![0.0], vec![0.1], vec![0.2], vec![5.0], vec![5.2]];
    let exact = exhaustive_two_means(&pts);
    assert!((exact - (0.02 + 0.02)).abs() < 1e-12);
    assert!((multistart_two_means(&pts) - exact).abs() < 1e-12);
}

#[test]
fn inertia_never_increases() {
    let d = 4 * 4;
    for run in 0..100 {
        let pts = random_points(run, 0x6d6f, 200, d);
        let fit = kmeans_fit_detailed(&pts, 10, run, 200, 0.0).unwrap();
        for w in fit.inertia_history.windows(2) {
            assert!(w[1] <= w[0], "run {run}: inertia rose from {} to {}", w[0], w[1]);
        }
    }
}

#[test]
fn converged_assignment_is_a_fixed_point() {
    for run in 0..20 {
        let pts = random_points(run, 0x6670, 120, 6);
        let fit = kmeans_fit_detailed(&pts, 7, run, 500, 0.0).unwrap();
        let again = lloyd(&pts, fit.model.centroids.clone(), 1, 0.0).unwrap();
        assert_eq!(again.assignments, fit.assignments, "run {run}");
        assert_eq!(again.model.centroids, fit.model.centroids, "run {run}");
        for (p, &a) in pts.iter().zip(&fit.assignments) {
            assert_eq!(assign_cluster(p, &fit.model), a);
        }
    }
}

#[test]
fn same_seed_same_model() {
    let pts = random_points(9, 1, 150, 8);
    assert_eq!(kmeans_fit(&pts, 5, 3, 100, 1e-9).unwrap(), kmeans_fit(&pts, 5, 3, 100, 1e-9).unwrap());
}
