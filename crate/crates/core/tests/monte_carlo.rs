use dcr_core::gradcheck::{self, GradCheckConfig};
use dcr_core::lcm;
use dcr_core::seed::{self, Stream};

type Fixture = (dcr_core::ClassStats, Vec<Vec<f64>>, Vec<(Vec<f64>, usize)>);

/// Stats, linear weights and one feature of each of the three rarest tail
/// classes.
fn fixture(alpha0: f64, beta0: f64, seed: u64) -> Fixture {
    let cfg = GradCheckConfig {
        proxies: 1,
        alpha0,
        beta0,
        seed,
        ..GradCheckConfig::default()
    };
    let mut rng = seed::rng_for_indexed(seed, Stream::GradCheck, 0);
    let inst = gradcheck::random_instance(&cfg, &mut rng).unwrap();
    let k = inst.model.uniform.num_classes();
    let weights = (0..k).map(|c| inst.model.uniform.proxy(c, 0).to_vec()).collect();
    let b = &inst.batch_balanced;
    let features = (0..3).map(|i| (b.row(i).to_vec(), b.labels[i])).collect();
    (inst.model.stats, weights, features)
}

#[test]
fn single_draw_is_reproducible() {
    let (stats, w, feats) = fixture(0.5, 6.0, 1);
    let (f, t) = &feats[0];
    let a = lcm::mc_expected_loss(f, *t, &w, &stats, 1, 42);
    let b = lcm::mc_expected_loss(f, *t, &w, &stats, 1, 42);
    assert_eq!(a, b);
    // Two neighbors plus the original, each sampled the minimum number of times.
    assert_eq!(a.samples, 3 * lcm::MIN_DRAWS_PER_MODE);
}

#[test]
fn estimate_does_not_depend_on_thread_count() {
    let (stats, w, feats) = fixture(0.5, 6.0, 2);
    let (f, t) = &feats[1];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| lcm::mc_expected_loss(f, *t, &w, &stats, 5000, 7))
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn zero_beta_collapses_to_mode_mixture() {
    let (stats, w, feats) = fixture(0.5, 0.0, 3);
    for (f, t) in &feats {
        let exact = lcm::lcm_loss(&lcm::linear_bundle(f, *t, &w, &stats));
        let mc = lcm::mc_expected_loss(f, *t, &w, &stats, 20_000, 11);
        assert!((mc.mean - exact).abs() <= 3.0 * mc.std_error, "{mc:?} vs {exact}");
    }
}

#[test]
fn closed_form_bounds_sampled_loss() {
    let (stats, w, feats) = fixture(0.5, 6.0, 4);
    for (f, t) in &feats {
        assert!(stats.tail_drift(*t).unwrap().beta > 0.0);
        let bound = lcm::lcm_loss(&lcm::linear_bundle(f, *t, &w, &stats));
        let mc = lcm::mc_expected_loss(f, *t, &w, &stats, 20_000, 13);
        assert!(mc.mean <= bound + 3.0 * mc.std_error, "{mc:?} vs {bound}");
    }
}
