use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use sas_core::dist::{product_cdf, product_quantile, EmpiricalCdf, ExponentialCdf, ResponseCdf};
use sas_core::{Micros, Percentile};

fn pct(p: f64) -> Percentile {
    Percentile::new(p).unwrap()
}

fn cdf_of(samples: &[i64]) -> EmpiricalCdf {
    EmpiricalCdf::from_samples(1_000, samples.iter().copied().map(Micros)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cdf_is_monotone(samples in prop::collection::vec(0i64..1_000_000, 1..400), probes in prop::collection::vec(-10i64..1_100_000, 2..40)) {
        let cdf = cdf_of(&samples);
        let mut probes = probes;
        probes.sort();
        let mut last = 0.0;
        for t in probes {
            let v = cdf.cdf_at(Micros(t)).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn same_window_same_answers(samples in prop::collection::vec(0i64..1_000_000, 1..1_500), p in 1.0f64..99.99) {
        // the same last-W samples, reached through different histories
        let tail: Vec<i64> = samples.iter().rev().take(1_000).rev().copied().collect();
        let a = cdf_of(&samples);
        let b = cdf_of(&tail);
        prop_assert_eq!(a.quantile(pct(p)).unwrap(), b.quantile(pct(p)).unwrap());
        prop_assert_eq!(a.bin_counts(), b.bin_counts());
    }

    #[test]
    fn quantile_inversion_is_sound(samples in prop::collection::vec(0i64..1_000_000, 1..600), p in 0.5f64..99.99) {
        let cdf = cdf_of(&samples);
        let q = cdf.quantile(pct(p)).unwrap();
        prop_assert!(cdf.cdf_at(q).unwrap() >= p / 100.0);
        if q.as_us() > 0 {
            prop_assert!(cdf.cdf_at(Micros(q.as_us() - 1)).unwrap() < p / 100.0);
        }
    }

    #[test]
    fn product_dominates_members(sets in prop::collection::vec(prop::collection::vec(0i64..500_000, 1..200), 1..6), p in 1.0f64..99.9) {
        let cdfs: Vec<EmpiricalCdf> = sets.iter().map(|s| cdf_of(s)).collect();
        let g = product_quantile(&cdfs, pct(p)).unwrap();
        for c in &cdfs {
            prop_assert!(g >= c.quantile(pct(p)).unwrap());
        }
        prop_assert!(product_cdf(&cdfs, g).unwrap() >= p / 100.0);
    }
}

#[test]
fn exponential_mean_sits_at_63rd_percentile() {
    let e = ExponentialCdf { mean_us: 100_000.0 };
    // 1 - 1/e
    let q = product_quantile(&[e], pct(63.212_055_9)).unwrap();
    assert!((q.as_us() - 100_000).abs() <= 1, "{q}");
}

/// Max-sampling oracle: draw one raw window sample per distribution, take
/// the maximum, repeat, read off the nearest-rank percentile. Histogram
/// interpolation moves mass by at most one bin, so the two must agree to
/// within the widest bin.
#[test]
fn product_quantile_matches_max_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [1usize, 2, 4, 8] {
        let windows: Vec<Vec<i64>> = (0..k)
            .map(|i| {
                let ln = LogNormal::new(11.0 + 0.1 * i as f64, 0.6).unwrap();
                let ex = Exp::new(1.0 / 80_000.0).unwrap();
                (0..1_000)
                    .map(|j| {
                        let x: f64 = if j % 2 == 0 { ln.sample(&mut rng) } else { ex.sample(&mut rng) };
                        x.round() as i64
                    })
                    .collect()
            })
            .collect();
        let cdfs: Vec<EmpiricalCdf> = windows.iter().map(|w| cdf_of(w)).collect();
        let width = cdfs.iter().map(|c| c.bin_width()).fold(0.0, f64::max);
        let mut maxima: Vec<i64> = (0..200_000)
            .map(|_| windows.iter().map(|w| w[rng.random_range(0..w.len())]).max().unwrap())
            .collect();
        maxima.sort_unstable();
        for p in [50.0, 90.0, 99.0] {
            let rank = ((p / 100.0) * maxima.len() as f64).ceil() as usize;
            let oracle = maxima[rank - 1] as f64;
            let got = product_quantile(&cdfs, pct(p)).unwrap().as_f64_us();
            assert!((got - oracle).abs() <= width + 1.0, "k={k} p={p}: {got} vs {oracle} (bin {width})");
        }
    }
}

#[test]
fn prior_and_empirical_share_the_trait() {
    let cdfs: Vec<Box<dyn ResponseCdf>> = vec![
        Box::new(ExponentialCdf { mean_us: 1_000.0 }),
        Box::new(cdf_of(&[500, 1_500, 2_500])),
    ];
    let refs: Vec<&dyn ResponseCdf> = cdfs.iter().map(|b| b.as_ref()).collect();
    let q = product_quantile(&refs, pct(90.0)).unwrap();
    assert!(q >= Micros(2_500));
}
