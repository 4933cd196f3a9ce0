//! Windowed empirical CDFs for unloaded subtask response times.
//!
//! Each edge node keeps an [`EmpiricalCdf`] over its last `W` unloaded
//! response-time samples. The window is summarised by an equal-width
//! histogram spanning the window's own `[t_min, t_max]`; `cdf_at`
//! interpolates linearly inside a bin. Small windows (fewer than
//! [`NEAREST_RANK_BELOW`] samples) are answered exactly by nearest rank.
//!
//! [`product_quantile`] inverts the product of several CDFs, which is the
//! CDF of the maximum of independent subtask response times.

use std::collections::VecDeque;
use std::io::{self, Write};

use thiserror::Error;

use crate::units::{Micros, Percentile};

pub const DEFAULT_WINDOW: usize = 1_000;
pub const BIN_COUNT: usize = 256;
/// Windows smaller than this are answered by nearest rank instead of the
/// histogram.
pub const NEAREST_RANK_BELOW: usize = 100;
/// Below this many samples an [`UnloadedEstimator`] answers from its prior.
pub const COLD_START_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("negative response-time sample {0}")]
    NegativeSample(Micros),
    #[error("no data")]
    NoData,
    #[error("product quantile needs at least one distribution")]
    EmptyProduct,
    #[error("window capacity must be at least 1")]
    ZeroWindow,
}

/// A response-time distribution that can be evaluated at an arbitrary
/// time (microseconds, as `f64`).
pub trait ResponseCdf {
    /// `P(T <= t)`; `Err(NoData)` if the distribution has nothing to say.
    fn probability(&self, t_us: f64) -> Result<f64, DistError>;

    /// A time below which the CDF is zero.
    fn support_lo(&self) -> Result<f64, DistError>;

    /// A time at which the CDF is (close to) one; used to seed the search
    /// bracket, which is widened further when needed.
    fn support_hi(&self) -> Result<f64, DistError>;
}

/// A percentile together with its value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub p: Percentile,
    pub value: Micros,
}

/// Histogram estimate of a response-time distribution over a sliding window.
#[derive(Debug, Clone)]
pub struct EmpiricalCdf {
    capacity: usize,
    window: VecDeque<i64>,
    sorted: Vec<i64>,
    lo: i64,
    hi: i64,
    width: f64,
    bins: Vec<u32>,
    // cum[j] = samples in bins[..j]; cum[BIN_COUNT] == window.len()
    cum: Vec<u32>,
}

impl Default for EmpiricalCdf {
    fn default() -> Self {
        Self::with_window(DEFAULT_WINDOW).expect("default window is non-zero")
    }
}

impl EmpiricalCdf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_window(capacity: usize) -> Result<Self, DistError> {
        if capacity == 0 {
            return Err(DistError::ZeroWindow);
        }
        Ok(EmpiricalCdf {
            capacity,
            window: VecDeque::with_capacity(capacity),
            sorted: Vec::with_capacity(capacity),
            lo: 0,
            hi: 0,
            width: 0.0,
            bins: vec![0; BIN_COUNT],
            cum: vec![0; BIN_COUNT + 1],
        })
    }

    pub fn from_samples<I>(capacity: usize, samples: I) -> Result<Self, DistError>
    where
        I: IntoIterator<Item = Micros>,
    {
        let mut cdf = Self::with_window(capacity)?;
        for s in samples {
            cdf.record_sample(s)?;
        }
        Ok(cdf)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Samples in arrival order, oldest first.
    pub fn window(&self) -> impl Iterator<Item = Micros> + '_ {
        self.window.iter().map(|&s| Micros(s))
    }

    pub fn t_min(&self) -> Option<Micros> {
        self.sorted.first().map(|&s| Micros(s))
    }

    pub fn t_max(&self) -> Option<Micros> {
        self.sorted.last().map(|&s| Micros(s))
    }

    /// Width of one histogram bin over the current window.
    pub fn bin_width(&self) -> f64 {
        self.width
    }

    pub fn bin_counts(&self) -> &[u32] {
        &self.bins
    }

    fn uses_histogram(&self) -> bool {
        self.window.len() >= NEAREST_RANK_BELOW
    }

    fn bin_of(&self, t: f64) -> usize {
        if self.width <= 0.0 {
            return 0;
        }
        let j = ((t - self.lo as f64) / self.width).floor();
        if j <= 0.0 {
            0
        } else {
            (j as usize).min(BIN_COUNT - 1)
        }
    }

    fn rebuild(&mut self) {
        self.bins.iter_mut().for_each(|b| *b = 0);
        match (self.sorted.first(), self.sorted.last()) {
            (Some(&lo), Some(&hi)) => {
                self.lo = lo;
                self.hi = hi;
                self.width = (hi - lo) as f64 / BIN_COUNT as f64;
            }
            _ => {
                self.lo = 0;
                self.hi = 0;
                self.width = 0.0;
            }
        }
        for i in 0..self.sorted.len() {
            let j = self.bin_of(self.sorted[i] as f64);
            self.bins[j] += 1;
        }
        let mut acc = 0;
        self.cum[0] = 0;
        for j in 0..BIN_COUNT {
            acc += self.bins[j];
            self.cum[j + 1] = acc;
        }
    }

    fn bump(&mut self, sample: i64, add: bool) {
        let j = self.bin_of(sample as f64);
        if add {
            self.bins[j] += 1;
            self.cum[j + 1..].iter_mut().for_each(|c| *c += 1);
        } else {
            self.bins[j] -= 1;
            self.cum[j + 1..].iter_mut().for_each(|c| *c -= 1);
        }
    }

    /// Adds one sample, evicting the oldest once the window is full.
    pub fn record_sample(&mut self, sample: Micros) -> Result<(), DistError> {
        if sample.is_negative() {
            return Err(DistError::NegativeSample(sample));
        }
        let s = sample.as_us();
        let evicted = if self.window.len() == self.capacity {
            self.window.pop_front()
        } else {
            None
        };
        if let Some(e) = evicted {
            let pos = self.sorted.partition_point(|&x| x < e);
            self.sorted.remove(pos);
        }
        self.window.push_back(s);
        let pos = self.sorted.partition_point(|&x| x <= s);
        self.sorted.insert(pos, s);

        let range_changed = self.sorted[0] != self.lo
            || self.sorted[self.sorted.len() - 1] != self.hi
            || self.sorted.len() == 1;
        if range_changed {
            self.rebuild();
        } else {
            if let Some(e) = evicted {
                self.bump(e, false);
            }
            self.bump(s, true);
        }
        Ok(())
    }

    /// Fraction of window samples `<= t`, interpolated linearly inside a bin.
    pub fn cdf_at(&self, t: Micros) -> Result<f64, DistError> {
        self.cdf_at_us(t.as_f64_us())
    }

    pub fn cdf_at_us(&self, t: f64) -> Result<f64, DistError> {
        let n = self.window.len();
        if n == 0 {
            return Err(DistError::NoData);
        }
        if !self.uses_histogram() {
            let below = self.sorted.partition_point(|&x| (x as f64) <= t);
            return Ok(below as f64 / n as f64);
        }
        if t < self.lo as f64 {
            return Ok(0.0);
        }
        if t >= self.hi as f64 || self.width <= 0.0 {
            return Ok(1.0);
        }
        let j = self.bin_of(t);
        let edge = self.lo as f64 + j as f64 * self.width;
        let frac = ((t - edge) / self.width).clamp(0.0, 1.0);
        Ok((self.cum[j] as f64 + self.bins[j] as f64 * frac) / n as f64)
    }

    /// Smallest `t` with `cdf_at(t) >= p/100`, in floating microseconds.
    fn quantile_us(&self, target: f64) -> Result<f64, DistError> {
        let n = self.window.len();
        if n == 0 {
            return Err(DistError::NoData);
        }
        if !self.uses_histogram() {
            let rank = ((target * n as f64) - 1e-9).ceil().max(1.0) as usize;
            return Ok(self.sorted[rank.min(n) - 1] as f64);
        }
        if self.width <= 0.0 {
            return Ok(self.lo as f64);
        }
        let need = target * n as f64;
        // first bin whose upper edge reaches the target mass
        let j = self.cum[1..].partition_point(|&c| (c as f64) < need).min(BIN_COUNT - 1);
        let inside = self.bins[j] as f64;
        let frac = if inside > 0.0 {
            ((need - self.cum[j] as f64) / inside).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Ok(self.lo as f64 + (j as f64 + frac) * self.width)
    }

    pub fn quantile(&self, p: Percentile) -> Result<Micros, DistError> {
        let target = target_mass(p);
        let t = self.quantile_us(target)?;
        ceil_meeting(t, target, |x| self.cdf_at_us(x))
    }

    pub fn quantiles(&self, ps: &[Percentile]) -> Result<Vec<Quantile>, DistError> {
        ps.iter()
            .map(|&p| Ok(Quantile { p, value: self.quantile(p)? }))
            .collect()
    }

    /// Dumps `(bin_upper_edge_us, cumulative_probability)` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "bin_upper_edge_us,cumulative_probability")?;
        let n = self.window.len();
        if n == 0 {
            return Ok(());
        }
        for j in 0..BIN_COUNT {
            let edge = self.lo as f64 + (j + 1) as f64 * self.width;
            let p = self.cdf_at_us(edge).unwrap_or(1.0);
            writeln!(out, "{:.3},{:.6}", edge, p)?;
        }
        Ok(())
    }
}

/// Target mass for `p`, relaxed by a rounding tolerance so that, for
/// example, 99.9 is met by a CDF value of exactly 999/1000.
fn target_mass(p: Percentile) -> f64 {
    p.fraction() - 1e-12
}

/// Smallest whole microsecond meeting the target, starting from a
/// continuous estimate that floating point may have left off by one.
fn ceil_meeting<F>(t: f64, target: f64, cdf: F) -> Result<Micros, DistError>
where
    F: Fn(f64) -> Result<f64, DistError>,
{
    let mut q = t.ceil().max(0.0);
    while cdf(q)? < target {
        q += 1.0;
    }
    while q > 0.0 && cdf(q - 1.0)? >= target {
        q -= 1.0;
    }
    Ok(Micros(q as i64))
}

impl ResponseCdf for EmpiricalCdf {
    fn probability(&self, t_us: f64) -> Result<f64, DistError> {
        self.cdf_at_us(t_us)
    }

    fn support_lo(&self) -> Result<f64, DistError> {
        self.t_min().map(|t| t.as_f64_us()).ok_or(DistError::NoData)
    }

    fn support_hi(&self) -> Result<f64, DistError> {
        self.t_max().map(|t| t.as_f64_us()).ok_or(DistError::NoData)
    }
}

impl<T: ResponseCdf + ?Sized> ResponseCdf for &T {
    fn probability(&self, t_us: f64) -> Result<f64, DistError> {
        (**self).probability(t_us)
    }

    fn support_lo(&self) -> Result<f64, DistError> {
        (**self).support_lo()
    }

    fn support_hi(&self) -> Result<f64, DistError> {
        (**self).support_hi()
    }
}

/// An exponential distribution, used as the cold-start prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialCdf {
    pub mean_us: f64,
}

impl ResponseCdf for ExponentialCdf {
    fn probability(&self, t_us: f64) -> Result<f64, DistError> {
        if t_us <= 0.0 {
            return Ok(0.0);
        }
        Ok(-(-t_us / self.mean_us).exp_m1())
    }

    fn support_lo(&self) -> Result<f64, DistError> {
        Ok(0.0)
    }

    fn support_hi(&self) -> Result<f64, DistError> {
        Ok(self.mean_us * 10.0)
    }
}

/// Per-node unloaded response-time estimator: an [`EmpiricalCdf`] that
/// answers from an exponential prior until it holds
/// [`COLD_START_SAMPLES`] samples.
#[derive(Debug, Clone)]
pub struct UnloadedEstimator {
    cdf: EmpiricalCdf,
    prior: ExponentialCdf,
}

impl UnloadedEstimator {
    pub fn new(window: usize, prior_mean: Micros) -> Result<Self, DistError> {
        Ok(UnloadedEstimator {
            cdf: EmpiricalCdf::with_window(window)?,
            prior: ExponentialCdf { mean_us: prior_mean.as_f64_us().max(1.0) },
        })
    }

    pub fn record_sample(&mut self, sample: Micros) -> Result<(), DistError> {
        self.cdf.record_sample(sample)
    }

    pub fn is_warm(&self) -> bool {
        self.cdf.len() >= COLD_START_SAMPLES
    }

    pub fn empirical(&self) -> &EmpiricalCdf {
        &self.cdf
    }

    pub fn prior(&self) -> ExponentialCdf {
        self.prior
    }

    pub fn quantile(&self, p: Percentile) -> Result<Micros, DistError> {
        if self.is_warm() {
            self.cdf.quantile(p)
        } else {
            let t = -self.prior.mean_us * (-p.fraction()).ln_1p();
            ceil_meeting(t, target_mass(p), |x| self.prior.probability(x))
        }
    }
}

impl ResponseCdf for UnloadedEstimator {
    fn probability(&self, t_us: f64) -> Result<f64, DistError> {
        if self.is_warm() {
            self.cdf.probability(t_us)
        } else {
            self.prior.probability(t_us)
        }
    }

    fn support_lo(&self) -> Result<f64, DistError> {
        if self.is_warm() {
            self.cdf.support_lo()
        } else {
            self.prior.support_lo()
        }
    }

    fn support_hi(&self) -> Result<f64, DistError> {
        if self.is_warm() {
            self.cdf.support_hi()
        } else {
            self.prior.support_hi()
        }
    }
}

fn product_at<C: ResponseCdf>(cdfs: &[C], t: f64, target: f64) -> Result<f64, DistError> {
    let mut g = 1.0;
    for c in cdfs {
        g *= c.probability(t)?;
        // already short of the target; the rest can only shrink it
        if g < target {
            return Ok(g);
        }
    }
    Ok(g)
}

/// Smallest `t` (whole microseconds) with `prod_i F_i(t) >= p/100`.
///
/// Bisection over time, stopping once the bracket is narrower than one
/// microsecond, so the result meets the target exactly rather than to
/// within a probability tolerance.
pub fn product_quantile<C: ResponseCdf>(cdfs: &[C], p: Percentile) -> Result<Micros, DistError> {
    if cdfs.is_empty() {
        return Err(DistError::EmptyProduct);
    }
    let target = target_mass(p);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for c in cdfs {
        lo = lo.min(c.support_lo()?);
        hi = hi.max(c.support_hi()?);
    }
    lo = (lo - 1.0).max(-1.0);
    hi = hi.max(lo + 1.0);
    let mut widen = 0;
    while product_at(cdfs, hi, target)? < target {
        hi = lo + 2.0 * (hi - lo);
        widen += 1;
        if widen > 128 {
            break;
        }
    }
    if product_at(cdfs, lo, target)? >= target {
        return Ok(Micros(lo.ceil().max(0.0) as i64));
    }
    while hi - lo > 1.0 {
        let mid = 0.5 * (lo + hi);
        if product_at(cdfs, mid, target)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    ceil_meeting(lo.floor() + 1.0, target, |x| product_at(cdfs, x, target))
}

/// Product CDF `prod_i F_i(t)`.
pub fn product_cdf<C: ResponseCdf>(cdfs: &[C], t: Micros) -> Result<f64, DistError> {
    if cdfs.is_empty() {
        return Err(DistError::EmptyProduct);
    }
    product_at(cdfs, t.as_f64_us(), -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pct(p: f64) -> Percentile {
        Percentile::new(p).unwrap()
    }

    fn cdf_of(values: impl IntoIterator<Item = i64>) -> EmpiricalCdf {
        EmpiricalCdf::from_samples(DEFAULT_WINDOW, values.into_iter().map(Micros)).unwrap()
    }

    #[test]
    fn exact_mass_meets_a_decimal_percentile() {
        // 99.9/100 rounds above 999/1000
        let c = cdf_of((0..999).map(|i| i * 1_000).chain([10_000_000]));
        let q = c.quantile(pct(99.9)).unwrap();
        assert!(q.as_us() <= 998_000 + c.bin_width().ceil() as i64, "{q}");
        assert_eq!(product_quantile(std::slice::from_ref(&c), pct(99.9)).unwrap(), q);
    }

    #[test]
    fn single_sample_is_a_step() {
        let cdf = cdf_of([10_000]);
        assert_eq!(cdf.len(), 1);
        assert_eq!(cdf.cdf_at(Micros(10_000)).unwrap(), 1.0);
        assert_eq!(cdf.cdf_at(Micros(9_999)).unwrap(), 0.0);
    }

    #[test]
    fn window_evicts_fifo() {
        let mut cdf = EmpiricalCdf::with_window(3).unwrap();
        for s in 1..=4 {
            cdf.record_sample(Micros(s)).unwrap();
        }
        let w: Vec<_> = cdf.window().map(|m| m.as_us()).collect();
        assert_eq!(w, vec![2, 3, 4]);
        assert_eq!(cdf.bin_counts().iter().sum::<u32>(), 3);
    }

    #[test]
    fn negative_sample_rejected() {
        let mut cdf = EmpiricalCdf::new();
        assert_eq!(
            cdf.record_sample(Micros(-1)),
            Err(DistError::NegativeSample(Micros(-1)))
        );
        assert!(cdf.is_empty());
    }

    #[test]
    fn nearest_rank_small_window() {
        let cdf = cdf_of([1, 2, 3, 4]);
        assert_eq!(cdf.cdf_at(Micros(2)).unwrap(), 0.5);
        assert_eq!(cdf.cdf_at(Micros(0)).unwrap(), 0.0);
        assert_eq!(cdf.cdf_at(Micros(4)).unwrap(), 1.0);
        assert_eq!(cdf.cdf_at(Micros(50)).unwrap(), 1.0);
        assert_eq!(cdf.quantile(pct(50.0)).unwrap(), Micros(2));
        assert_eq!(cdf.quantile(pct(51.0)).unwrap(), Micros(3));
    }

    #[test]
    fn empty_cdf_has_no_data() {
        let cdf = EmpiricalCdf::new();
        assert_eq!(cdf.cdf_at(Micros(1)), Err(DistError::NoData));
        assert_eq!(cdf.quantile(pct(50.0)), Err(DistError::NoData));
        let none: [EmpiricalCdf; 0] = [];
        assert_eq!(product_quantile(&none, pct(50.0)), Err(DistError::EmptyProduct));
        assert_eq!(
            product_quantile(&[cdf_of([5]), EmpiricalCdf::new()], pct(50.0)),
            Err(DistError::NoData)
        );
    }

    #[test]
    fn histogram_bounds() {
        let cdf = cdf_of((1..=100).map(|ms| ms * 1_000));
        assert_eq!(cdf.cdf_at(Micros(999)).unwrap(), 0.0);
        assert_eq!(cdf.cdf_at(Micros(100_000)).unwrap(), 1.0);
        assert_eq!(cdf.cdf_at(Micros(1_000_000)).unwrap(), 1.0);
    }

    #[test]
    fn percentile_of_1_to_100_ms() {
        let cdf = cdf_of((1..=100).map(|ms| ms * 1_000));
        let q = cdf.quantile(pct(99.0)).unwrap();
        assert!((q.as_f64_us() - 99_000.0).abs() <= cdf.bin_width(), "{q}");
    }

    #[test]
    fn uniform_median() {
        // 1000 evenly spaced samples over (0, 1s]
        let cdf = cdf_of((1..=1000).map(|i| i * 1_000));
        let q = cdf.quantile(pct(50.0)).unwrap();
        assert!((q.as_f64_us() - 500_000.0).abs() <= cdf.bin_width(), "{q}");
    }

    #[test]
    fn constant_window() {
        let cdf = cdf_of(std::iter::repeat_n(7_000, 200));
        assert_eq!(cdf.cdf_at(Micros(6_999)).unwrap(), 0.0);
        assert_eq!(cdf.cdf_at(Micros(7_000)).unwrap(), 1.0);
        assert_eq!(cdf.quantile(pct(99.0)).unwrap(), Micros(7_000));
    }

    #[test]
    fn product_of_one_is_quantile() {
        let cdf = cdf_of((0..500).map(|i| (i * 7919) % 100_003));
        for p in [1.0, 25.0, 50.0, 90.0, 99.0] {
            assert_eq!(
                product_quantile(&[&cdf], pct(p)).unwrap(),
                cdf.quantile(pct(p)).unwrap(),
                "p={p}"
            );
        }
    }

    #[test]
    fn product_of_two_uniforms() {
        let u = cdf_of((1..=1000).map(|i| i * 1_000));
        let q = product_quantile(&[&u, &u], pct(81.0)).unwrap();
        assert!((q.as_f64_us() - 900_000.0).abs() <= u.bin_width(), "{q}");
    }

    #[test]
    fn cold_start_uses_prior() {
        let mut est = UnloadedEstimator::new(DEFAULT_WINDOW, Micros::from_millis(100)).unwrap();
        let q = est.quantile(pct(63.212_055_882_855_77)).unwrap();
        assert!((q.as_us() - 100_000).abs() <= 1, "{q}");
        for _ in 0..COLD_START_SAMPLES {
            est.record_sample(Micros::from_millis(5)).unwrap();
        }
        assert!(est.is_warm());
        assert_eq!(est.quantile(pct(99.0)).unwrap(), Micros::from_millis(5));
    }

    #[test]
    fn product_quantile_handles_unbounded_prior() {
        let prior = ExponentialCdf { mean_us: 1_000.0 };
        let q = product_quantile(&[prior; 4], pct(99.999)).unwrap();
        let g = product_cdf(&[prior; 4], q).unwrap();
        assert!(g >= 0.99999);
        assert!(product_cdf(&[prior; 4], q - Micros(1)).unwrap() < 0.99999);
    }

    #[test]
    fn csv_dump_ends_at_one() {
        let cdf = cdf_of(0..300);
        let mut buf = Vec::new();
        cdf.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "bin_upper_edge_us,cumulative_probability");
        assert_eq!(lines.len(), BIN_COUNT + 1);
        assert!(lines.last().unwrap().ends_with(",1.000000"));
    }
}
