use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use sas_core::budget::{
    mm1_subtask_budget, query_percentile, subtask_queuing_budget, task_percentile, Mm1Requirement,
    QuerySlo, TaskBudget,
};
use sas_core::dist::ExponentialCdf;
use sas_core::{Micros, Percentile};

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn task_percentile_tightens_with_fanout(p in 50.0f64..99.999, k in 1u32..5_000) {
        let slo = QuerySlo::new(p, Micros::from_millis(500)).unwrap();
        let a = task_percentile(slo, k).unwrap().percentile.value();
        let b = task_percentile(slo, k + 1).unwrap().percentile.value();
        prop_assert!(a >= p);
        prop_assert!(b >= a, "k={} {} -> {}", k, a, b);
        prop_assert!(b < 100.0);
    }

    #[test]
    fn query_percentile_round_trips(p in 50.0f64..99.99, k in 1u32..200) {
        let slo = QuerySlo::new(p, Micros::from_millis(500)).unwrap();
        let t = task_percentile(slo, k).unwrap();
        let back = query_percentile(t.percentile, k).unwrap().value();
        prop_assert!((back - p).abs() < 1e-6, "{} vs {}", back, p);
    }

    #[test]
    fn budget_is_bound_minus_tail(bound_ms in 1i64..5_000, mean_ms in 1.0f64..400.0, k in 1usize..16) {
        let cdfs = vec![ExponentialCdf { mean_us: mean_ms * 1e3 }; k];
        let tb = TaskBudget { percentile: Percentile::new(99.0).unwrap(), bound: Micros::from_millis(bound_ms) };
        let q = subtask_queuing_budget(tb, &cdfs).unwrap();
        let raw = tb.bound - q.unloaded_tail;
        prop_assert_eq!(q.infeasible, raw.is_negative());
        prop_assert_eq!(q.budget, raw.max(Micros::ZERO));
    }
}

/// With a constant queuing budget added to every subtask, the `p_t`
/// percentile of the task maximum lands on the task bound.
#[test]
fn constant_budget_meets_task_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in [2usize, 8, 32] {
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(50_000.0..150_000.0)).collect();
        let cdfs: Vec<_> = means.iter().map(|&m| ExponentialCdf { mean_us: m }).collect();
        let p = Percentile::new(99.0).unwrap();
        let tb = TaskBudget { percentile: p, bound: Micros::from_millis(1_500) };
        let q = subtask_queuing_budget(tb, &cdfs).unwrap();
        assert!(!q.infeasible);
        let t_q = q.budget.as_f64_us();
        let exps: Vec<_> = means.iter().map(|&m| Exp::new(1.0 / m).unwrap()).collect();
        let mut maxima: Vec<f64> = (0..100_000)
            .map(|_| exps.iter().map(|e| e.sample(&mut rng) + t_q).fold(0.0, f64::max))
            .collect();
        maxima.sort_by(f64::total_cmp);
        let got = nearest_rank(&maxima, 99.0);
        let want = tb.bound.as_f64_us();
        assert!((got - want).abs() / want < 0.02, "k={k}: {got} vs {want}");
    }
}

#[test]
fn mm1_reference_point() {
    let req = Mm1Requirement {
        task_rate: 15.6,
        task_budget: Micros::from_millis(500),
        percentile: Percentile::new(99.0).unwrap(),
        nodes: 8,
    };
    let t_e = mm1_subtask_budget(&req).unwrap();
    // frozen from an independent evaluation of 1/(lambda - ln(1 - 0.99^(1/8))/0.5)
    assert!((t_e.as_millis_f64() - 34.529).abs() < 0.01, "{t_e}");
}
