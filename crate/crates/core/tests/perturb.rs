use proptest::prelude::*;
use tsdiff_core::bases::generate_base_signals;
use tsdiff_core::perturb::*;
use tsdiff_core::rng::substream;
use tsdiff_core::series::Series;

fn series(v: Vec<f64>) -> Series {
    Series::new("p", v).unwrap()
}

fn values(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #[test]
    fn trend_output_is_unit_scaled(v in values(2..80), alpha in 0.0f64..1.0, up in any::<bool>()) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-6));
        let dir = if up { TrendDirection::Up } else { TrendDirection::Down };
        let out = apply_trend(&series(v), alpha, dir);
        for &x in out.values() {
            prop_assert!((0.0..=1.0).contains(&x), "{x}");
        }
    }

    #[test]
    fn spike_changes_exactly_one_sample(v in values(2..80), beta in 0.001f64..0.5, at in any::<prop::sample::Index>(), spike in any::<bool>()) {
        let t_s = at.index(v.len());
        let sign = if spike { SpikeSign::Spike } else { SpikeSign::Dropout };
        let x = series(v.clone());
        let out = apply_spike(&x, beta, t_s, sign).unwrap();
        let changed: Vec<usize> = (0..v.len()).filter(|&i| out.values()[i] != v[i]).collect();
        prop_assert_eq!(changed, vec![t_s]);
        let d = out.values()[t_s] - v[t_s];
        prop_assert!((d.abs() - beta).abs() < 1e-12);
        prop_assert_eq!(d > 0.0, spike);
        prop_assert!(apply_spike(&x, beta, v.len(), sign).is_err());
    }

    #[test]
    fn baseline_adds_theta_to_every_sample(v in values(2..80), theta in 0.0f64..0.5) {
        let out = apply_baseline(&series(v.clone()), theta);
        for (o, x) in out.values().iter().zip(&v) {
            prop_assert_eq!(*o, x + theta);
        }
        prop_assert!((out.mean() - series(v).mean() - theta).abs() < 1e-12);
    }

    #[test]
    fn generated_pairs_are_consistent(seed in any::<u64>()) {
        let base = &generate_base_signals(1, 48, seed).unwrap()[0];
        let p = generate_pair("x", base, &mut substream(seed, "pair", 0)).unwrap();
        prop_assert_ne!(p.params_ref.level, p.params_tgt.level);
        prop_assert_eq!(p.target_level, p.params_tgt.level);
        prop_assert_eq!(p.label, label_of(p.characteristic, p.target_level));
        prop_assert_eq!(p.label.characteristic(), p.characteristic);
        prop_assert_eq!(p.params_ref.t_s, p.params_tgt.t_s);
        for params in [&p.params_ref, &p.params_tgt] {
            let (lo, hi) = param_range(p.characteristic, params.level);
            let m = params.magnitude().unwrap();
            prop_assert!(lo <= m && m < hi);
        }
        prop_assert_eq!(&apply_perturbation(base, p.characteristic, &p.params_tgt).unwrap(), &p.target);
        prop_assert_eq!(&apply_perturbation(base, p.characteristic, &p.params_ref).unwrap(), &p.reference);
    }
}

#[test]
fn noise_has_requested_deviation() {
    let x = series(vec![0.5; 10_000]);
    for seed in 0..5 {
        let out = apply_noise(&x, 0.1, &mut substream(seed, "noise-test", 0));
        let n = out.len() as f64;
        let mean = out.values().iter().sum::<f64>() / n;
        let sd = (out.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "seed {seed}: {sd}");
        assert!((mean - 0.5).abs() < 0.005);
    }
}

#[test]
fn magnitudes_stay_in_range_over_ten_thousand_draws() {
    let mut rng = substream(11, "ranges", 0);
    for c in Characteristic::ALL {
        for level in [PerturbLevel::Smaller, PerturbLevel::Larger] {
            let (lo, hi) = param_range(c, level);
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for _ in 0..10_000 {
                let v = sample_param(c, level, &mut rng);
                assert!(lo <= v && v < hi, "{c:?} {level:?}: {v}");
                min = min.min(v);
                max = max.max(v);
            }
            // the draws cover the range
            let w = hi - lo;
            assert!(
                min - lo < 0.01 * w && hi - max < 0.01 * w,
                "{c:?} {level:?}"
            );
        }
    }
}

#[test]
fn smaller_ranges_sit_below_larger_ones() {
    for c in Characteristic::ALL {
        let (_, s_hi) = param_range(c, PerturbLevel::Smaller);
        let (l_lo, _) = param_range(c, PerturbLevel::Larger);
        assert!(s_hi <= l_lo, "{c:?}");
    }
}

#[test]
fn labels_are_balanced() {
    let bases = generate_base_signals(2000, 64, 3).unwrap();
    let counts = SplitCounts {
        train: 9000,
        val: 500,
        test: 2500,
    };
    let data = generate_dataset(&bases, counts, 3).unwrap();
    let mut per_label = [0usize; 12];
    let mut per_char = [0usize; 6];
    for p in data.train.iter().chain(&data.val).chain(&data.test) {
        per_label[p.label.index()] += 1;
        per_char[p.characteristic.index()] += 1;
    }
    let n = counts.total() as f64;
    // trends are grouped: the base slope decides up versus down
    let trend = (per_char[0] + per_char[1]) as f64 / n;
    assert!((trend - 2.0 / 6.0).abs() < 0.02, "{per_char:?}");
    for c in 2..6 {
        let share = per_char[c] as f64 / n;
        assert!((share - 1.0 / 6.0).abs() < 0.015, "{per_char:?}");
        let larger = per_label[2 * c] as f64 / per_char[c] as f64;
        assert!((larger - 0.5).abs() < 0.05, "{per_label:?}");
    }
    for c in 0..2 {
        let larger = per_label[2 * c] as f64 / per_char[c] as f64;
        assert!((larger - 0.5).abs() < 0.05, "{per_label:?}");
    }
}

#[test]
fn trend_pairs_follow_the_base_slope() {
    let bases = generate_base_signals(300, 64, 8).unwrap();
    for (i, b) in bases.iter().enumerate() {
        let p = generate_pair("t", b, &mut substream(8, "slope", i as u64)).unwrap();
        match tsdiff_core::series::slope_sign(b) {
            1 => assert_ne!(p.characteristic, Characteristic::DownwardTrend),
            -1 => assert_ne!(p.characteristic, Characteristic::UpwardTrend),
            _ => {}
        }
    }
}
