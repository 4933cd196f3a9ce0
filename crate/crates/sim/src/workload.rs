//! Open-loop workload: Poisson query arrivals at every scheduler, class
//! mix, fanouts, target selection and the pre-queue delay segments.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use statrs::distribution::ContinuousCDF;
use sas_core::Micros;

use crate::config::{Fanout, Placement, Routing, SimConfig};
use crate::rng::{substream, Purpose};

/// Rejections before a truncated normal gives up and clamps.
const MAX_REJECTIONS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub iad: u32,
    /// Ascending edge-node indices.
    pub nodes: Vec<u32>,
}

/// One query as it enters the system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub scheduler: u32,
    /// Per-scheduler arrival counter, from 0.
    pub index: u64,
    pub time: Micros,
    /// Index into the config's class list.
    pub class: usize,
    /// Ascending by IAD.
    pub targets: Vec<Target>,
    pub query_eval: Micros,
    /// Parallel to `targets`.
    pub task_eval: Vec<Micros>,
    pub aggregation: Micros,
}

impl Arrival {
    pub fn query_fanout(&self) -> u32 {
        self.targets.len() as u32
    }

    pub fn subtasks(&self) -> u64 {
        self.targets.iter().map(|t| t.nodes.len() as u64).sum()
    }
}

/// Exponential segment with the given mean; a zero mean is a constant zero.
#[derive(Debug, Clone, Copy)]
pub struct Segment(Option<Exp<f64>>);

impl Segment {
    pub fn new(mean_ms: f64) -> Self {
        Segment((mean_ms > 0.0).then(|| Exp::new(1.0 / mean_ms).expect("positive rate")))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Micros {
        match &self.0 {
            Some(e) => Micros::from_millis_f64(e.sample(rng)),
            None => Micros::ZERO,
        }
    }
}

/// Integer fanout drawn from `f`.
pub fn sample_fanout<R: Rng + ?Sized>(f: &Fanout, rng: &mut R) -> u32 {
    match *f {
        Fanout::Fixed(k) => k,
        Fanout::Normal { mu, sigma, min, max } => {
            if sigma == 0.0 {
                return (mu.round().max(min as f64).min(max as f64)) as u32;
            }
            let n = Normal::new(mu, sigma).expect("validated sigma");
            for _ in 0..MAX_REJECTIONS {
                let x = n.sample(rng).round();
                if x >= min as f64 && x <= max as f64 {
                    return x as u32;
                }
            }
            // rejection keeps failing: draw from the same truncated law by inversion
            let n = statrs::distribution::Normal::new(mu, sigma).expect("validated sigma");
            let lo = n.cdf(min as f64 - 0.5);
            let hi = n.cdf(max as f64 + 0.5);
            let u = lo + (hi - lo) * rng.random::<f64>();
            let x = if hi > lo { n.inverse_cdf(u) } else { mu };
            (x.round().max(min as f64).min(max as f64)) as u32
        }
    }
}

/// `k` of `n` indices, ascending.
pub fn place<R: Rng + ?Sized>(placement: Placement, n: u32, k: u32, rng: &mut R) -> Vec<u32> {
    debug_assert!(k >= 1 && k <= n);
    match placement {
        Placement::Centered => {
            let start = (n - k) / 2;
            (start..start + k).collect()
        }
        Placement::Random if k == n => (0..n).collect(),
        Placement::Random => {
            let mut v: Vec<u32> =
                index::sample(rng, n as usize, k as usize).into_iter().map(|i| i as u32).collect();
            v.sort_unstable();
            v
        }
    }
}

struct SchedulerStream {
    arrivals: ChaCha8Rng,
    shape: ChaCha8Rng,
    query_eval: ChaCha8Rng,
    task_eval: ChaCha8Rng,
    aggregation: ChaCha8Rng,
    clock_s: f64,
    count: u64,
}

/// Per-scheduler arrival generator. Each scheduler's stream depends only on
/// the config and seed.
pub struct WorkloadGen {
    cfg: SimConfig,
    interarrival: Exp<f64>,
    cumulative: Vec<f64>,
    seg_query: Segment,
    seg_task: Segment,
    seg_agg: Segment,
    streams: Vec<SchedulerStream>,
}

impl WorkloadGen {
    pub fn new(cfg: &SimConfig) -> Self {
        let seed = cfg.seed;
        let streams = (0..cfg.schedulers())
            .map(|s| SchedulerStream {
                arrivals: substream(seed, Purpose::Arrivals, s, 0),
                shape: substream(seed, Purpose::Shape, s, 0),
                query_eval: substream(seed, Purpose::QueryEval, s, 0),
                task_eval: substream(seed, Purpose::TaskEval, s, 0),
                aggregation: substream(seed, Purpose::Aggregation, s, 0),
                clock_s: 0.0,
                count: 0,
            })
            .collect();
        let mut acc = 0.0;
        let cumulative = cfg
            .classes
            .iter()
            .map(|c| {
                acc += c.share;
                acc
            })
            .collect();
        WorkloadGen {
            interarrival: Exp::new(cfg.per_scheduler_rate()).expect("validated rate"),
            cumulative,
            seg_query: Segment::new(cfg.segments.query_eval_ms),
            seg_task: Segment::new(cfg.segments.task_eval_ms),
            seg_agg: Segment::new(cfg.segments.aggregation_ms),
            streams,
            cfg: cfg.clone(),
        }
    }

    /// The scheduler's next arrival.
    pub fn next(&mut self, scheduler: u32) -> Arrival {
        let cfg = &self.cfg;
        let st = &mut self.streams[scheduler as usize];
        st.clock_s += self.interarrival.sample(&mut st.arrivals);
        let index = st.count;
        st.count += 1;

        let u: f64 = st.shape.random();
        let class = self.cumulative.iter().position(|&c| u < c).unwrap_or(cfg.classes.len() - 1);
        let spec = &cfg.classes[class];
        let iads = match spec.routing {
            Routing::Hotspot(h) => vec![h],
            Routing::Uniform => {
                let k = sample_fanout(&spec.query_fanout, &mut st.shape);
                place(cfg.placement, cfg.iad_count, k, &mut st.shape)
            }
        };
        let targets: Vec<Target> = iads
            .into_iter()
            .map(|iad| {
                let k = sample_fanout(&spec.task_fanout, &mut st.shape);
                Target { iad, nodes: place(cfg.placement, cfg.nodes_per_iad, k, &mut st.shape) }
            })
            .collect();
        let task_eval = targets.iter().map(|_| self.seg_task.draw(&mut st.task_eval)).collect();
        Arrival {
            scheduler,
            index,
            time: Micros::from_secs_f64(st.clock_s),
            class,
            targets,
            query_eval: self.seg_query.draw(&mut st.query_eval),
            task_eval,
            aggregation: self.seg_agg.draw(&mut st.aggregation),
        }
    }
}

/// Every arrival strictly before `until`, ordered by `(time, scheduler)`.
pub fn generate_workload(cfg: &SimConfig, until: Micros) -> Vec<Arrival> {
    let mut gen = WorkloadGen::new(cfg);
    let mut out = Vec::new();
    for s in 0..cfg.schedulers() {
        loop {
            let a = gen.next(s);
            if a.time >= until {
                break;
            }
            out.push(a);
        }
    }
    out.sort_by_key(|a| (a.time, a.scheduler, a.index));
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::config::{large, testbed};

    #[test]
    fn centred_block_straddles_the_middle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(place(Placement::Centered, 10, 4, &mut rng), vec![3, 4, 5, 6]);
        assert_eq!(place(Placement::Centered, 5, 5, &mut rng), vec![0, 1, 2, 3, 4]);
        assert_eq!(place(Placement::Centered, 5, 1, &mut rng), vec![2]);
    }

    #[test]
    fn random_subsets_are_distinct_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let v = place(Placement::Random, 8, 5, &mut rng);
            assert_eq!(v.len(), 5);
            assert!(v.windows(2).all(|w| w[0] < w[1]));
            assert!(v.iter().all(|&i| i < 8));
        }
    }

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Fanout::Normal { mu: 100.0, sigma: 100.0, min: 1, max: 60 };
        for _ in 0..10_000 {
            let k = sample_fanout(&f, &mut rng);
            assert!((1..=60).contains(&k));
        }
    }

    #[test]
    fn far_truncation_follows_the_truncated_law() {
        // exact mean of round(N(300, 50^2)) conditioned on [1, 60]: 50.884, sd 9.13
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Fanout::Normal { mu: 300.0, sigma: 50.0, min: 1, max: 60 };
        let n = 40_000;
        let mean = (0..n).map(|_| sample_fanout(&f, &mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 50.884).abs() < 4.0 * 9.13 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn hotspot_load_share_is_55_percent() {
        let cfg = testbed();
        let arrivals = generate_workload(&cfg, Micros::from_secs(20_000));
        let mut load = 0.0;
        for a in &arrivals {
            if a.targets.iter().any(|t| t.iad == 3) {
                load += 1.0 / a.query_fanout() as f64;
            }
        }
        let share = load / arrivals.len() as f64;
        assert!((share - 0.55).abs() < 0.01, "{share}");
    }

    #[test]
    fn class_mix_follows_shares() {
        let cfg = large(4, 25);
        let arrivals = generate_workload(&cfg.at_rate(20.0), Micros::from_secs(2_000));
        for (i, c) in cfg.classes.iter().enumerate() {
            let n = arrivals.iter().filter(|a| a.class == i).count() as f64;
            assert!((n / arrivals.len() as f64 - c.share).abs() < 0.02, "class {}", c.name);
        }
    }

    #[test]
    fn poisson_rate_is_respected() {
        let mut cfg = testbed();
        cfg.rate = 8.0;
        let arrivals = generate_workload(&cfg, Micros::from_secs(5_000));
        let rate = arrivals.len() as f64 / 5_000.0;
        assert!((rate - 8.0).abs() < 0.2, "{rate}");
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = testbed();
        let a = generate_workload(&cfg, Micros::from_secs(100));
        let b = generate_workload(&cfg, Micros::from_secs(100));
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(a, generate_workload(&other, Micros::from_secs(100)));
    }
}
