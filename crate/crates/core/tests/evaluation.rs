//! Metrics, diagnostics, folds and the band survey checked against direct
//! computations.

use emwatch::evalharness::{
    bootstrap_ci, calibration_metrics, effect_size_drift, loco_folds, mi_cycle_leakage, separability_ratio,
};
use emwatch::emcorpus::RecordLabel;
use emwatch::features::{FeatureTable, RowMeta};
use emwatch::linalg::Matrix;
use emwatch::survey::{
    band_deltas, governor_diagnosis, run_sweep, HostEmissionMap, SweepConfig, DEFAULT_FLAG_RATIO,
    DEFAULT_VARIANCE_FLOOR_DB2,
};
use emwatch::presets::SURVEY_CARRIERS_MHZ;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn normal_matrix(rows: usize, cols: usize, mean: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(mean, 1.0).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| g.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn ece_matches_a_direct_ten_bin_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
    let y: Vec<bool> = p.iter().map(|&q| rng.random::<f64>() < q * q).collect();
    let report = calibration_metrics(&p, &y, 10).unwrap();

    let mut ece = 0.0;
    for b in 0..10 {
        let members: Vec<usize> = (0..100).filter(|&i| ((p[i] * 10.0).floor() as usize).min(9) == b).collect();
        if members.is_empty() {
            continue;
        }
        let conf = members.iter().map(|&i| p[i]).sum::<f64>() / members.len() as f64;
        let acc = members.iter().filter(|&&i| y[i]).count() as f64 / members.len() as f64;
        ece += members.len() as f64 / 100.0 * (acc - conf).abs();
    }
    assert!((report.ece - ece).abs() < 1e-12, "{} vs {ece}", report.ece);
    let brier = p.iter().zip(&y).map(|(q, &l)| (q - if l { 1.0 } else { 0.0 }).powi(2)).sum::<f64>() / 100.0;
    assert!((report.brier - brier).abs() < 1e-12);
}

#[test]
fn independent_feature_carries_no_cycle_information() {
    let n = 2000;
    let x = normal_matrix(n, 3, 0.0, 2);
    let cycles: Vec<u32> = (0..n).map(|i| (i % 5) as u32).collect();
    let skills: Vec<usize> = (0..n).map(|i| (i / 7) % 3).collect();
    let r = mi_cycle_leakage(&x, &cycles, &skills, 10).unwrap();
    assert!(r.mi_cycle.iter().all(|&m| (0.0..0.05).contains(&m)), "{:?}", r.mi_cycle);
    assert!(r.mi_skill.iter().all(|&m| m < 0.05));
}

#[test]
fn one_sigma_shift_is_a_unit_effect() {
    let a = normal_matrix(4000, 2, 0.0, 3);
    let b = normal_matrix(4000, 2, 1.0, 4);
    let r = effect_size_drift(&a, &b).unwrap();
    for d in &r.d {
        assert!((d.abs() - 1.0).abs() < 0.1, "{d}");
    }
    assert_eq!(r.n_large, 2);
    let same = effect_size_drift(&a, &a).unwrap();
    assert_eq!(same.max_abs_d, 0.0);
}

#[test]
fn separability_matches_hand_computation_and_ignores_translation() {
    // Class 0 means per cycle (0,0) and (2,0); class 1 means (10,0) and (10,4).
    let rows = [
        ([0.0, 0.0], 0, 0),
        ([2.0, 0.0], 0, 1),
        ([10.0, 0.0], 1, 0),
        ([10.0, 4.0], 1, 1),
    ];
    let x = Matrix::from_rows(&rows.iter().map(|r| r.0).collect::<Vec<_>>()).unwrap();
    let skills: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let cycles: Vec<u32> = rows.iter().map(|r| r.2).collect();
    let r = separability_ratio(&x, &skills, &cycles).unwrap();
    // Class means (1,0) and (10,2); dispersions 1 and 2.
    assert!((r.nuisance_scale - 1.5).abs() < 1e-12);
    let dist = (81.0f64 + 4.0).sqrt();
    assert!((r.pairs[0].distance - dist).abs() < 1e-12);
    assert!((r.pairs[0].ratio - dist / 1.5).abs() < 1e-12);

    let mut shifted = x.clone();
    for i in 0..4 {
        shifted.row_mut(i)[0] += 37.0;
        shifted.row_mut(i)[1] -= 5.0;
    }
    let s = separability_ratio(&shifted, &skills, &cycles).unwrap();
    assert!((s.pairs[0].ratio - r.pairs[0].ratio).abs() < 1e-9);
    let scaled = separability_ratio(&x.scale(3.0), &skills, &cycles).unwrap();
    assert!((scaled.pairs[0].ratio - r.pairs[0].ratio).abs() < 1e-9);
}

#[test]
fn bootstrap_interval_covers_the_mean() {
    let g = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 200;
    let mut covered = 0;
    for t in 0..trials {
        let sample: Vec<f64> = (0..60).map(|_| g.sample(&mut rng)).collect();
        let mean = |v: &[&f64]| v.iter().copied().sum::<f64>() / v.len() as f64;
        let ci = bootstrap_ci(&sample, mean, 400, 0.95, t).unwrap();
        assert!(ci.lo <= ci.point && ci.point <= ci.hi);
        covered += (ci.lo <= 0.0 && 0.0 <= ci.hi) as usize;
    }
    let rate = covered as f64 / trials as f64;
    assert!(rate >= 0.90, "coverage {rate}");
}

fn table(cycles: u32, records_per_cycle: u32) -> FeatureTable {
    let mut t = FeatureTable::new(1);
    for c in 0..cycles {
        for r in 0..records_per_cycle {
            for w in 0..3 {
                let meta = RowMeta {
                    record_id: format!("c{c}-r{r}"),
                    window_index: w,
                    cycle_index: c,
                    start_s: w as f64,
                    temperature_c: 40.0,
                    skill: format!("s{r}"),
                    record_label: RecordLabel::Normal,
                    attack: false,
                };
                t.push(&[c as f64], meta).unwrap();
            }
        }
    }
    t
}

#[test]
fn loco_folds_partition_the_cycles() {
    let t = table(2, 3);
    let folds = loco_folds(&t).unwrap();
    assert_eq!(folds.len(), 2);
    let mut tested: Vec<u32> = folds.iter().flat_map(|f| f.test_cycles.clone()).collect();
    tested.sort();
    assert_eq!(tested, [0, 1]);
    for f in &folds {
        assert_eq!(f.test_cycles.len(), 1);
        assert!(f.train_cycles.iter().all(|c| !f.test_cycles.contains(c)));
        let mut all: Vec<usize> = f.train_rows.iter().chain(&f.test_rows).copied().collect();
        all.sort();
        assert_eq!(all, (0..t.len()).collect::<Vec<_>>());
        assert!(f.test_rows.iter().all(|&i| f.test_cycles.contains(&t.rows[i].cycle_index)));
    }
}

#[test]
fn survey_finds_the_memory_band_and_only_the_modulated_tone() {
    let map = HostEmissionMap::desk_default();
    let cfg = SweepConfig::new(SURVEY_CARRIERS_MHZ.to_vec(), 1e6, 7);
    let pinned = run_sweep(&map, &cfg).unwrap();
    let deltas = band_deltas(&pinned).unwrap();
    let best = deltas.iter().max_by(|a, b| a.delta_ram_db.total_cmp(&b.delta_ram_db)).unwrap();
    assert_eq!(best.carrier_mhz, 800.0);

    let unpinned = run_sweep(&map, &SweepConfig { pinned: false, ..cfg.clone() }).unwrap();
    let report = governor_diagnosis(&pinned, &unpinned, DEFAULT_FLAG_RATIO, DEFAULT_VARIANCE_FLOOR_DB2).unwrap();
    assert_eq!(report.flagged(), [1800.0]);

    let mut no_fm = map.clone();
    no_fm.emitters.iter_mut().for_each(|e| e.governor_fm = false);
    let pinned = run_sweep(&no_fm, &cfg).unwrap();
    let unpinned = run_sweep(&no_fm, &SweepConfig { pinned: false, ..cfg }).unwrap();
    let report = governor_diagnosis(&pinned, &unpinned, DEFAULT_FLAG_RATIO, DEFAULT_VARIANCE_FLOOR_DB2).unwrap();
    assert!(report.flagged().is_empty());
}
