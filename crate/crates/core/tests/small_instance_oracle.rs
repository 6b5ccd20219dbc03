mod support;

use support::small_instance::{close, run};

#[test]
fn two_phase_matches_exhaustive_optimum_on_small_units() {
    let trials = 50;
    let mut matched = 0;
    for seed in 0..trials {
        let o = run(1000 + seed);
        assert!(o.optimum <= o.naive * (1.0 + 1e-9) + 1e-12, "enumeration misses the naive point");
        assert!(close(o.method, o.naive), "trial {seed}: {} worse than naive {}", o.method, o.naive);
        if close(o.method, o.optimum) {
            matched += 1;
        }
    }
    assert!(matched * 100 >= 95 * trials, "{matched}/{trials} trials reached the optimum");
}
