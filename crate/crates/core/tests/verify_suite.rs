use idnp::verify::*;

fn assert_pass(c: CheckResult) {
    assert!(c.passed, "{}", c.line());
}

#[test]
fn gradients() {
    assert_pass(op_gradients(3));
    assert_pass(model_gradients(2));
}

#[test]
fn oracles() {
    assert_pass(conv_oracle(200, 1));
    assert_pass(multiscale_oracle(200, 2));
    assert_pass(metric_oracle(2000, 3));
}

#[test]
fn structure() {
    assert_pass(context_permutation(3));
    assert_pass(context_sizes());
    assert_pass(sigma_bounds());
    assert_pass(determinism_replay());
}

#[test]
fn sampled_divergence() {
    assert_pass(divergence_agreement(3, 2000, 4));
}
