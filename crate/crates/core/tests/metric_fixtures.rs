mod common;

#[test]
fn metrics_match_hand_counts() {
    let failures = common::metric_fixture_failures();
    assert!(failures.is_empty(), "{failures:?}");
}
