//! Independent reference computations checked against the library.

use dcr_core::baseline::linear_ce_loss_grad;
use dcr_core::classifier::MultiProxyClassifier;
use dcr_core::data::{self, FeatureDataset, LongTailSpec};
use dcr_core::eval::{self, SplitThresholds};
use dcr_core::lcm::{self, BundleMode, LogitBundle};
use dcr_core::stats::{self, Partition, StatsConfig};
use dcr_core::training::{self, TrainConfig};
use dcr_core::DcrModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracle shares no sampling code.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> FeatureDataset {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        // First k rows cover every class.
        labels.push(if i < k { i } else { rng.random_range(0..k) });
        rows.push((0..d).map(|_| 3.0 * gaussian(rng) + 1.0).collect::<Vec<f64>>());
    }
    FeatureDataset::from_rows(&rows, &labels, k).unwrap()
}

#[test]
fn prototypes_match_brute_force_mean() {
    let mut r = rng(1);
    let ds = random_dataset(&mut r, 50, 8, 4);
    let protos = stats::compute_prototypes(&ds).unwrap();
    for (c, proto) in protos.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == c).collect();
        for (dd, &value) in proto.iter().enumerate() {
            let mut s = 0.0;
            for &i in &members {
                s += ds.row(i)[dd] as f64;
            }
            assert!((value - s / members.len() as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn std_matches_two_pass_oracle() {
    let mut r = rng(2);
    let ds = random_dataset(&mut r, 60, 8, 5);
    let sigma = stats::compute_std(&ds);
    for (c, s) in sigma.iter().enumerate() {
        let members: Vec<Vec<f64>> = (0..ds.len())
            .filter(|&i| ds.label(i) == c)
            .map(|i| ds.row_f64(i))
            .collect();
        let n = members.len() as f64;
        for dd in 0..8 {
            let mean = members.iter().map(|m| m[dd]).sum::<f64>() / n;
            let var = members.iter().map(|m| (m[dd] - mean).powi(2)).sum::<f64>() / n;
            let expected = if members.len() < 2 { 0.0 } else { var.sqrt() };
            assert!((s[dd] - expected).abs() < 1e-6, "class {c} dim {dd}");
        }
    }
}

#[test]
fn neighbors_match_exhaustive_sort() {
    let mut r = rng(3);
    for _ in 0..50 {
        let k = 12;
        let protos: Vec<Vec<f64>> = (0..k).map(|_| (0..6).map(|_| gaussian(&mut r)).collect()).collect();
        let head: Vec<usize> = (0..7).collect();
        for t in 7..k {
            let got = stats::select_neighbors(&protos, &head, t, 2).unwrap();
            let mut all: Vec<(usize, f64)> = head
                .iter()
                .map(|&j| {
                    let a = &protos[t];
                    let b = &protos[j];
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (j, dot / (na * nb))
                })
                .collect();
            all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), vec![all[0].0, all[1].0]);
            for (g, a) in got.iter().zip(&all) {
                assert!((g.1 - a.1).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn duplicated_head_prototype_ranks_first() {
    let protos = vec![vec![1.0, 0.0], vec![0.3, 0.7], vec![0.6, 1.4], vec![2.0, 2.0]];
    let got = stats::select_neighbors(&protos, &[0, 1, 3], 2, 2).unwrap();
    assert_eq!(got[0].0, 1);
    assert!((got[0].1 - 1.0).abs() < 1e-12);
    let one = stats::select_neighbors(&protos, &[3], 2, 5).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn drift_probabilities_match_direct_exponentials() {
    let s = stats::drift_probabilities(&[0.8, 0.6], 2.0);
    let e = [1.6f64.exp(), 1.2f64.exp(), 2.0f64.exp()];
    let z: f64 = e.iter().sum();
    for (got, want) in s.iter().zip(e.iter().map(|v| v / z)) {
        assert!((got - want).abs() < 1e-12);
    }
}

/// Cross-entropy via sorted Kahan summation, written independently of the
/// library's log-sum-exp.
fn reference_ce(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let y = t - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    -(logits[target] - max - sum.ln())
}

#[test]
fn lcm_loss_matches_high_precision_oracle() {
    let mut r = rng(4);
    for _ in 0..200 {
        let k = r.random_range(2..9);
        let modes = r.random_range(1..5);
        let t = r.random_range(0..k);
        let mut probs: Vec<f64> = (0..modes).map(|_| r.random_range(0.01..1.0)).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let bundle = LogitBundle {
            label: t,
            modes: probs
                .iter()
                .map(|&p| {
                    let z: Vec<f64> = (0..k).map(|_| 20.0 * gaussian(&mut r)).collect();
                    BundleMode {
                        raw: z.clone(),
                        compensated: z,
                        probability: p,
                    }
                })
                .collect(),
        };
        let want: f64 = bundle
            .modes
            .iter()
            .map(|m| m.probability * reference_ce(&m.compensated, t))
            .sum();
        let got = lcm::lcm_loss(&bundle);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn logit_adjustment_direct_formula() {
    let w = vec![vec![1.0], vec![3.0]];
    let adj = lcm::logit_adjustment(&w, 0, 2.0, &[0.5]);
    assert_eq!(adj, vec![0.0, 1.0]);
}

fn random_classifier(r: &mut ChaCha8Rng, d: usize, mask: &[bool], proxies: usize) -> MultiProxyClassifier {
    let n: usize = mask.iter().map(|&t| if t { proxies } else { 1 }).sum::<usize>() * d;
    let w: Vec<f64> = (0..n).map(|_| gaussian(r)).collect();
    MultiProxyClassifier::from_parts(d, mask, proxies, w).unwrap()
}

/// Reads proxy `l` of class `k` straight from the flat layout.
fn raw_proxy(clf: &MultiProxyClassifier, mask: &[bool], proxies: usize, k: usize, l: usize) -> Vec<f64> {
    let d = clf.dim();
    let before: usize = mask[..k].iter().map(|&t| if t { proxies } else { 1 }).sum();
    clf.weights()[(before + l) * d..(before + l + 1) * d].to_vec()
}

#[test]
fn multi_proxy_logits_match_independent_evaluator() {
    let mut r = rng(5);
    for proxies in [1, 2, 4] {
        for _ in 0..20 {
            let d = 7;
            let mask = [false, false, true, true, false, true];
            let clf = random_classifier(&mut r, d, &mask, proxies);
            let f: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
            let (logits, pi) = clf.mp_logits(&f);
            let effective = clf.effective_weights(&f);
            for k in 0..mask.len() {
                let count = if mask[k] { proxies } else { 1 };
                let scores: Vec<f64> = (0..count)
                    .map(|l| {
                        raw_proxy(&clf, &mask, proxies, k, l)
                            .iter()
                            .zip(&f)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let want: f64 = scores.iter().zip(&e).map(|(s, w)| s * w / z).sum();
                assert!((logits[k] - want).abs() < 1e-10);
                for (p, w) in pi[k].iter().zip(&e) {
                    assert!((p - w / z).abs() < 1e-12);
                }

                let mut w_hat = vec![0.0; d];
                for (l, weight) in e.iter().enumerate() {
                    let p = raw_proxy(&clf, &mask, proxies, k, l);
                    for dd in 0..d {
                        w_hat[dd] += weight / z * p[dd];
                    }
                }
                for dd in 0..d {
                    assert!((effective[k][dd] - w_hat[dd]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn effective_weights_reproduce_logits_for_any_proxies() {
    let mut r = rng(6);
    let mask = [false, true, true];
    let clf = random_classifier(&mut r, 5, &mask, 3);
    for _ in 0..20 {
        let f: Vec<f64> = (0..5).map(|_| gaussian(&mut r)).collect();
        let logits = clf.mp_logits(&f).0;
        let effective = clf.effective_weights(&f);
        for (z, w) in logits.iter().zip(&effective) {
            let direct: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
            assert!((z - direct).abs() < 1e-10);
        }
    }
}

#[test]
fn rbmc_logits_both_evaluation_orders() {
    let mut r = rng(7);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, n) in [(0, 30), (1, 5), (2, 3)] {
        for _ in 0..n {
            rows.push((0..4).map(|_| gaussian(&mut r) + c as f64).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let ds = FeatureDataset::from_rows(&rows, &labels, 3).unwrap();
    let cfg = StatsConfig {
        head_threshold: 10,
        ..StatsConfig::default()
    };
    let st = stats::build_class_stats(&ds, &cfg).unwrap();
    let mask = st.partition.is_tail_mask(3);
    let u = random_classifier(&mut r, 4, &mask, 2);
    let res = random_classifier(&mut r, 4, &mask, 2);
    let model = DcrModel::new(u.clone(), res.clone(), st).unwrap();
    let f: Vec<f64> = (0..4).map(|_| gaussian(&mut r)).collect();
    // Sum proxy weights first, then score.
    let summed: Vec<f64> = u.weights().iter().zip(res.weights()).map(|(a, b)| a + b).collect();
    let manual = MultiProxyClassifier::from_parts(4, &mask, 2, summed).unwrap();
    let want = manual.mp_logits(&f).0;
    let got = model.rbmc_logits(&f);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_proxy_gradient_is_textbook_cross_entropy() {
    let mut r = rng(8);
    let spec = LongTailSpec {
        num_classes: 6,
        samples_max: 120,
        imbalance_factor: 10.0,
        dim: 5,
        seed: 8,
        ..LongTailSpec::default()
    };
    let (train, _) = data::generate_longtail(&spec).unwrap();
    let cfg = TrainConfig {
        alpha0: 0.0,
        beta0: 0.0,
        proxies: 1,
        phi: 1.0,
        head_threshold: 50,
        ..TrainConfig::default()
    };
    let mut model = training::init_model(&train, &cfg).unwrap();
    model
        .uniform
        .weights_mut()
        .iter_mut()
        .for_each(|w| *w = gaussian(&mut r));
    let idx: Vec<usize> = (0..16).map(|_| r.random_range(0..train.len())).collect();
    let batch = train.batch(idx);
    let lg = training::loss_and_grad(&model, &batch, &batch, 1.0).unwrap();

    let k = 6;
    let d = 5;
    let w = model.uniform.weights();
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let f = batch.row(i);
        let z: Vec<f64> = (0..k).map(|c| (0..d).map(|j| w[c * d + j] * f[j]).sum()).collect();
        let p = {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        loss -= p[batch.labels[i]].ln();
        for c in 0..k {
            let coef = p[c] - if c == batch.labels[i] { 1.0 } else { 0.0 };
            for j in 0..d {
                grad[c * d + j] += coef * f[j] / batch.len() as f64;
            }
        }
    }
    loss /= batch.len() as f64;
    assert!((lg.loss - loss).abs() < 1e-10);
    for (a, b) in lg.grad_uniform.iter().zip(&grad) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!(lg.grad_residual.iter().all(|&g| g == 0.0));
    // The baseline's helper agrees as well.
    let (bl, bg) = linear_ce_loss_grad(w, k, &batch);
    assert!((bl - loss).abs() < 1e-10);
    for (a, b) in bg.iter().zip(&grad) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn random_predictions_hit_chance_level() {
    let mut r = rng(9);
    let k = 10;
    let per_class = 500;
    let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let preds: Vec<usize> = labels.iter().map(|_| r.random_range(0..k)).collect();
    let counts = vec![200; k];
    let report = eval::evaluate_predictions(&preds, &labels, k, &counts, SplitThresholds::default()).unwrap();
    let n = labels.len() as f64;
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((report.overall - p).abs() <= 3.0 * sigma, "{}", report.overall);
}

#[test]
fn generated_tail_test_prototypes_drift_toward_head() {
    let spec = LongTailSpec {
        num_classes: 20,
        samples_max: 500,
        imbalance_factor: 100.0,
        drift_strength: 0.5,
        seed: 7,
        ..LongTailSpec::default()
    };
    let (train, test) = data::generate_longtail(&spec).unwrap();
    let train_p = stats::compute_prototypes(&train).unwrap();
    let test_p = stats::compute_prototypes(&test).unwrap();
    let counts = train.class_counts();
    let head: Vec<usize> = (0..20).filter(|&c| counts[c] > spec.head_threshold).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut tails = 0;
    for t in (0..20).filter(|c| !head.contains(c)) {
        let nearest = *head
            .iter()
            .min_by(|&&a, &&b| dist(&train_p[t], &train_p[a]).total_cmp(&dist(&train_p[t], &train_p[b])))
            .unwrap();
        let before = dist(&train_p[t], &train_p[nearest]);
        let after = dist(&test_p[t], &train_p[nearest]);
        assert!(after < 0.8 * before, "class {t}: {after} vs {before}");
        tails += 1;
    }
    assert!(tails > 0);
}

#[test]
fn generator_counts_follow_exponential_profile() {
    let spec = LongTailSpec {
        num_classes: 3,
        samples_max: 100,
        imbalance_factor: 100.0,
        ..LongTailSpec::default()
    };
    assert_eq!(spec.class_counts(), vec![100, 10, 1]);
    let flat = LongTailSpec {
        num_classes: 2,
        samples_max: 10,
        imbalance_factor: 1.0001,
        drift_strength: 0.0,
        head_threshold: 5,
        ..LongTailSpec::default()
    };
    assert_eq!(flat.class_counts(), vec![10, 10]);
}

#[test]
fn synthetic_stats_pass_invariant_suite() {
    let spec = LongTailSpec {
        num_classes: 20,
        seed: 11,
        ..LongTailSpec::default()
    };
    let (train, _) = data::generate_longtail(&spec).unwrap();
    let st = stats::build_class_stats(&train, &StatsConfig::default()).unwrap();
    st.check_invariants().unwrap();
    assert!(!st.partition.tail.is_empty());
    let toy_rows: Vec<Vec<f64>> = (0..112).map(|i| vec![1.0 + (i % 3) as f64, (i % 5) as f64]).collect();
    let mut toy_labels = vec![0; 100];
    toy_labels.extend(std::iter::repeat_n(1, 10));
    toy_labels.extend([2, 2]);
    let toy = FeatureDataset::from_rows(&toy_rows, &toy_labels, 3).unwrap();
    let st = stats::build_class_stats(
        &toy,
        &StatsConfig {
            neighbors: 1,
            head_threshold: 50,
            ..StatsConfig::default()
        },
    )
    .unwrap();
    assert_eq!(
        st.partition,
        Partition {
            head: vec![0],
            tail: vec![1, 2]
        }
    );
    assert_eq!(st.tail_drift(1).unwrap().neighbors, vec![0]);
    assert_eq!(st.tail_drift(2).unwrap().neighbors, vec![0]);
}

#[test]
fn init_norm_and_symmetry_breaking() {
    let partition = Partition {
        head: vec![0],
        tail: vec![1],
    };
    let mut sq = 0.0;
    let trials = 100;
    for s in 0..trials {
        let mut r = rng(1000 + s);
        let clf = MultiProxyClassifier::init(16, &partition, 2, &mut r).unwrap();
        assert_ne!(clf.proxy(1, 0), clf.proxy(1, 1));
        sq += clf.proxy(0, 0).iter().map(|w| w * w).sum::<f64>();
    }
    let mean = sq / trials as f64;
    assert!((mean - 1.0).abs() < 0.2, "{mean}");
}
