mod invariants;

fn run(name: &str) {
    let (_, suite) = invariants::SUITES.iter().find(|(n, _)| *n == name).expect("known suite");
    suite();
}

#[test]
fn latent_and_prediction_ignore_context_order() {
    run("latent path ignores context order");
}

#[test]
fn expert_steering_is_odd_under_reflection() {
    run("expert steering is odd under reflection");
}

#[test]
fn gap_prior_is_odd_under_reflection() {
    run("gap prior is odd under reflection");
}

#[test]
fn kl_is_non_negative_and_zero_only_on_identity() {
    run("KL is non-negative, zero only on identity");
}

#[test]
fn raycast_matches_direct_solution() {
    run("raycast matches direct solution");
}

#[test]
fn filter_matches_brute_force_projection() {
    run("filter matches brute-force projection");
}

#[test]
fn filter_is_idempotent() {
    run("filter is a projection");
}
