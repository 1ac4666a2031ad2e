mod common;

#[test]
fn divergences_and_covariances_over_a_thousand_instances() {
    common::sweep::divergences_and_covariances_over_a_thousand_instances();
}
