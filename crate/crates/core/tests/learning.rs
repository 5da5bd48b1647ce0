//! Drift normalization, ANOVA, forest and pooling checks against direct
//! computations.

use emwatch::detector::{classify_states, pool_posteriors, PoolingRule};
use emwatch::drift::{anova_f, apply_cycle_normalize, fit_cycle_stats, DriftConfig};
use emwatch::forest::{bootstrap_indices, encode_labels, train_forest, ForestParams};
use emwatch::linalg::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| g.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn cycle_normalized_columns_have_unit_std() {
    let mut x = gaussian(120, 6, 1);
    let cycles: Vec<u32> = (0..120).map(|i| (i % 4) as u32).collect();
    for i in 0..120 {
        let c = cycles[i] as f64;
        for v in x.row_mut(i) {
            *v = *v * (1.0 + c) + 10.0 * c;
        }
    }
    let eps = DriftConfig::default().epsilon;
    let stats = fit_cycle_stats(&x, &cycles).unwrap();
    let z = apply_cycle_normalize(&x, &cycles, &stats, eps).unwrap();
    for c in 0..4 {
        let rows: Vec<usize> = (0..120).filter(|&i| cycles[i] == c).collect();
        for j in 0..6 {
            let v: Vec<f64> = rows.iter().map(|&i| z.get(i, j)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!(m.abs() < 1e-12);
            assert!((1.0 - 1e-3..=1.0).contains(&sd), "cycle {c} column {j}: {sd}");
        }
    }
}

#[test]
fn anova_matches_textbook_sums_of_squares() {
    let mut x = gaussian(45, 5, 2);
    let labels: Vec<usize> = (0..45).map(|i| i % 3).collect();
    for i in 0..45 {
        x.row_mut(i)[1] += labels[i] as f64;
        x.row_mut(i)[3] += 0.3 * labels[i] as f64;
    }
    let f = anova_f(&x, &labels).unwrap();
    for j in 0..5 {
        let col = x.column(j);
        let grand = col.iter().sum::<f64>() / 45.0;
        let (mut ssb, mut ssw) = (0.0, 0.0);
        for g in 0..3 {
            let v: Vec<f64> = (0..45).filter(|&i| labels[i] == g).map(|i| col[i]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            ssb += v.len() as f64 * (m - grand).powi(2);
            ssw += v.iter().map(|a| (a - m).powi(2)).sum::<f64>();
        }
        let expected = (ssb / 2.0) / (ssw / 42.0);
        assert!((f[j] - expected).abs() <= 1e-9 * expected, "column {j}: {} vs {expected}", f[j]);
    }
    assert!(f[1] > f[3] && f[3] > f[0]);
}

fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

#[test]
fn stump_takes_the_exhaustive_best_gini_split() {
    let x = gaussian(60, 4, 3);
    let y: Vec<&str> = (0..60).map(|i| if x.get(i, 2) + 0.5 * x.get(i, 0) > 0.2 { "b" } else { "a" }).collect();
    let params = ForestParams { n_trees: 1, max_depth: 1, min_leaf: 1, seed: 5, max_features: Some(4) };
    let model = train_forest(&x, &y, &params).unwrap();
    let root = model.trees[0].nodes[0];

    let (_, yi) = encode_labels(&y);
    let idx = bootstrap_indices(&yi, 2, params.seed, 0);
    let (mut best, mut best_partition) = (f64::INFINITY, (0, Vec::new()));
    for j in 0..4 {
        let mut values: Vec<f64> = idx.iter().map(|&i| x.get(i, j)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for t in values.windows(2).map(|w| (w[0] + w[1]) / 2.0) {
            let (mut l, mut r) = ([0usize; 2], [0usize; 2]);
            for &i in &idx {
                if x.get(i, j) <= t { l[yi[i]] += 1 } else { r[yi[i]] += 1 }
            }
            let (nl, nr) = ((l[0] + l[1]) as f64, (r[0] + r[1]) as f64);
            let w = (nl * gini(&l) + nr * gini(&r)) / (nl + nr);
            if w < best - 1e-12 {
                best = w;
                best_partition = (j, idx.iter().map(|&i| x.get(i, j) <= t).collect::<Vec<bool>>());
            }
        }
    }
    assert_eq!(root.feature as usize, best_partition.0);
    let got: Vec<bool> = idx.iter().map(|&i| x.get(i, root.feature as usize) <= root.threshold).collect();
    assert_eq!(got, best_partition.1);
}

#[test]
fn point_between_symmetric_classes_is_a_coin_flip() {
    let mut total = 0.0;
    let runs = 6;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let (mu, label) = if i % 2 == 0 { (-1.5, "a") } else { (1.5, "b") };
            data.push(mu + g.sample(&mut rng));
            data.push(g.sample(&mut rng));
            y.push(label);
        }
        let x = Matrix::from_vec(300, 2, data).unwrap();
        let params = ForestParams { n_trees: 200, max_depth: 6, seed: run, ..ForestParams::default() };
        let model = train_forest(&x, &y, &params).unwrap();
        total += model.predict_proba(&[0.0, 0.0]).unwrap()[0];
    }
    let mean = total / runs as f64;
    assert!((mean - 0.5).abs() < 0.1, "mean posterior {mean}");
}

#[test]
fn importance_follows_the_informative_feature() {
    let mut x = gaussian(200, 4, 4);
    for i in 0..200 {
        x.row_mut(i)[3] = 1.0;
    }
    let y: Vec<&str> = (0..200).map(|i| if x.get(i, 1) > 0.0 { "hi" } else { "lo" }).collect();
    let model = train_forest(&x, &y, &ForestParams { n_trees: 100, seed: 1, ..ForestParams::default() }).unwrap();
    let imp = model.feature_importance();
    assert!(imp[1] >= 0.9, "{imp:?}");
    assert_eq!(imp[3], 0.0);
    assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_deep_tree_gives_one_hot_posteriors() {
    let x = gaussian(80, 3, 6);
    let y: Vec<String> = (0..80).map(|i| format!("c{}", i % 3)).collect();
    let params = ForestParams { n_trees: 1, max_depth: 64, min_leaf: 1, seed: 2, max_features: None };
    let model = train_forest(&x, &y, &params).unwrap();
    let probe = gaussian(50, 3, 7);
    for row in probe.rows() {
        let p = model.predict_proba(row).unwrap();
        assert_eq!(p.iter().filter(|&&v| v == 1.0).count(), 1, "{p:?}");
        assert_eq!(p.iter().filter(|&&v| v == 0.0).count(), 2);
    }
}

#[test]
fn state_scores_are_the_attack_column() {
    let x = gaussian(90, 3, 8);
    let y: Vec<&str> = (0..90).map(|i| ["attack", "background", "normal"][i % 3]).collect();
    let model = train_forest(&x, &y, &ForestParams { n_trees: 30, seed: 3, ..ForestParams::default() }).unwrap();
    let probe = gaussian(20, 3, 9);
    let ids: Vec<(String, usize)> = (0..20).map(|i| ("r".to_string(), i)).collect();
    let ev = classify_states(&probe, &ids, &model).unwrap();
    let post = model.predict_proba_batch(&probe).unwrap();
    for (i, e) in ev.iter().enumerate() {
        assert_eq!(e.score, post.get(i, 0));
        assert_eq!(e.posterior, post.row(i));
    }
}

fn posteriors(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn mean_pooling_of_79_windows_is_the_plain_average() {
    let w = posteriors(79, 4, 10);
    let pooled = pool_posteriors(&w, PoolingRule::Mean).unwrap();
    for c in 0..4 {
        let direct = w.iter().map(|p| p[c]).sum::<f64>() / 79.0;
        assert!((pooled.posterior[c] - direct).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn pooled_posteriors_are_distributions(n in 1usize..60, k in 2usize..6, seed in any::<u64>()) {
        let w = posteriors(n, k, seed);
        for rule in [PoolingRule::Mean, PoolingRule::LogMean] {
            let p = pool_posteriors(&w, rule).unwrap();
            prop_assert!((p.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.posterior.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = p.posterior.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(p.posterior[p.predicted], max);
        }
    }
}
