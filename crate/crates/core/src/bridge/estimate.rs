//! One-way delay estimation between a robot trace and its mirrored copy.
//!
//! Two independent estimates are produced: the lag maximizing the
//! normalized cross-correlation of the position traces, and the latency
//! statistics of `receive time − stamp_tx` over the mirrored samples.

/// One position sample. `t` is the instant the sample became visible on
/// that side (publish time for the robot, receive time for the avatar).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub seq: u64,
    pub stamp_tx: f64,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub samples: Vec<TraceSample>,
}

impl Trace {
    pub fn new(mut samples: Vec<TraceSample>) -> Self {
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self { samples }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.t, self.samples.last()?.t))
    }

    /// Linear interpolation of the position at `t`; `None` outside the span.
    pub fn position_at(&self, t: f64) -> Option<[f64; 3]> {
        let s = &self.samples;
        let (t0, t1) = self.span()?;
        if t < t0 || t > t1 {
            return None;
        }
        let i = s.partition_point(|x| x.t <= t);
        if i == 0 {
            return Some(s[0].position);
        }
        if i >= s.len() {
            return Some(s[s.len() - 1].position);
        }
        let (a, b) = (&s[i - 1], &s[i]);
        let span = b.t - a.t;
        if span <= 0.0 {
            return Some(b.position);
        }
        let w = (t - a.t) / span;
        Some(std::array::from_fn(|k| a.position[k] + w * (b.position[k] - a.position[k])))
    }

    /// Resamples axis `axis` onto `t = origin + k·step`, `k ∈ [k0, k1]`.
    fn resample(&self, axis: usize, step: f64) -> Option<(i64, Vec<f64>)> {
        let (t0, t1) = self.span()?;
        let k0 = (t0 / step).ceil() as i64;
        let k1 = (t1 / step).floor() as i64;
        if k1 < k0 {
            return None;
        }
        let values = (k0..=k1).map(|k| self.position_at(k as f64 * step).map_or(0.0, |p| p[axis])).collect();
        Some((k0, values))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Common resampling grid spacing, s.
    pub resample_interval: f64,
    /// Largest |lag| searched, s.
    pub max_lag: f64,
    /// Axes whose variance is below this (m²) are ignored.
    pub min_variance: f64,
    /// Minimum overlap of the shifted traces, as a fraction of the shorter one.
    pub min_overlap: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { resample_interval: 0.005, max_lag: 2.5, min_variance: 1e-4, min_overlap: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl LatencyStats {
    /// Mean, nearest-rank 95th percentile and max of `values`.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Some(Self {
            samples: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p95: sorted[rank - 1],
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayEstimate {
    /// Lag (s) at which the avatar trace best matches the robot trace.
    pub lag: f64,
    /// Peak normalized correlation of the combined estimate.
    pub correlation: f64,
    /// Per-axis lags; `None` for axes without enough excitation.
    pub axis_lags: [Option<f64>; 3],
    pub resample_interval: f64,
    /// `receive − stamp_tx` statistics over the avatar samples.
    pub stamp_latency: Option<LatencyStats>,
    /// `|lag − stamp_latency.mean|`.
    pub disagreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error("insufficient excitation: position variance below {threshold:e} m² on every axis")]
    InsufficientExcitation { threshold: f64 },
    #[error("traces do not overlap enough to estimate a lag")]
    NoOverlap,
    #[error("empty trace")]
    Empty,
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Pearson correlation of `a[i]` with `b[i + shift]` over the overlap.
fn correlation_at(a: &[f64], b: &[f64], shift: i64, min_len: usize) -> Option<f64> {
    let start = 0.max(-shift) as usize;
    let end = (a.len() as i64).min(b.len() as i64 - shift);
    if end <= start as i64 || ((end - start as i64) as usize) < min_len {
        return None;
    }
    let end = end as usize;
    let n = (end - start) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in start..end {
        sa += a[i];
        sb += b[(i as i64 + shift) as usize];
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in start..end {
        let x = a[i] - ma;
        let y = b[(i as i64 + shift) as usize] - mb;
        cov += x * y;
        va += x * x;
        vb += y * y;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Peak of `scores` (indexed by candidate lag) refined by a parabola
/// through the neighbours. Returns (fractional index, peak score).
fn refine_peak(scores: &[Option<f64>]) -> Option<(f64, f64)> {
    let (best, peak) = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    let mut offset = 0.0;
    if best > 0 && best + 1 < scores.len() {
        if let (Some(l), Some(r)) = (scores[best - 1], scores[best + 1]) {
            let denom = l - 2.0 * peak + r;
            if denom < 0.0 {
                offset = (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
            }
        }
    }
    Some((best as f64 + offset, peak))
}

pub fn estimate_delay(robot: &Trace, avatar: &Trace, config: &EstimatorConfig) -> Result<DelayEstimate, EstimateError> {
    if robot.is_empty() || avatar.is_empty() {
        return Err(EstimateError::Empty);
    }
    let step = config.resample_interval;
    let max_shift = (config.max_lag / step).round() as i64;
    let n_lags = (2 * max_shift + 1) as usize;

    let mut combined = vec![(0.0, 0usize); n_lags];
    let mut axis_lags = [None; 3];
    let mut excited = 0;
    for axis in 0..3 {
        let (Some((ra0, ra)), Some((av0, av))) = (robot.resample(axis, step), avatar.resample(axis, step)) else {
            return Err(EstimateError::NoOverlap);
        };
        if variance(&ra) < config.min_variance {
            continue;
        }
        excited += 1;
        let min_len = ((ra.len().min(av.len()) as f64 * config.min_overlap) as usize).max(2);
        // robot grid index i ↔ avatar grid index i + (ra0 - av0) + lag_steps
        let base = ra0 - av0;
        let scores: Vec<Option<f64>> = (-max_shift..=max_shift)
            .map(|lag| correlation_at(&ra, &av, base + lag, min_len))
            .collect();
        for (c, s) in combined.iter_mut().zip(&scores) {
            if let Some(s) = s {
                c.0 += s;
                c.1 += 1;
            }
        }
        if let Some((idx, _)) = refine_peak(&scores) {
            axis_lags[axis] = Some((idx - max_shift as f64) * step);
        }
    }
    if excited == 0 {
        return Err(EstimateError::InsufficientExcitation { threshold: config.min_variance });
    }
    let combined: Vec<Option<f64>> =
        combined.iter().map(|(s, n)| (*n == excited).then(|| s / excited as f64)).collect();
    let (idx, correlation) = refine_peak(&combined).ok_or(EstimateError::NoOverlap)?;
    let lag = (idx - max_shift as f64) * step;

    let latencies: Vec<f64> = avatar.samples.iter().map(|s| s.t - s.stamp_tx).collect();
    let stamp_latency = LatencyStats::from_values(&latencies);
    Ok(DelayEstimate {
        lag,
        correlation,
        axis_lags,
        resample_interval: step,
        disagreement: stamp_latency.map(|s| (lag - s.mean).abs()),
        stamp_latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth, non-periodic excitation with distinct features on each axis.
    pub(crate) fn motion(t: f64) -> [f64; 3] {
        [
            (0.7 * t).sin() + 0.3 * (1.9 * t).sin(),
            0.5 * (0.45 * t + 0.4).cos() + 0.2 * (2.3 * t).sin(),
            -2.0 + 0.4 * (0.9 * t).sin(),
        ]
    }

    fn trace(rate: f64, duration: f64, shift: f64) -> Trace {
        let n = (duration * rate) as u64;
        Trace::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    TraceSample { t: t + shift, seq: i, stamp_tx: t, position: motion(t) }
                })
                .collect(),
        )
    }

    #[test]
    fn identical_traces_have_zero_lag() {
        let r = trace(50.0, 20.0, 0.0);
        let e = estimate_delay(&r, &r, &EstimatorConfig::default()).unwrap();
        assert!(e.lag.abs() < 1e-9, "{}", e.lag);
        assert!(e.correlation > 0.999);
        assert_eq!(e.stamp_latency.unwrap().mean, 0.0);
    }

    #[test]
    fn recovers_synthetic_shift() {
        let cfg = EstimatorConfig::default();
        for shift in [0.05, 0.25, 0.5, 1.0, 1.37, 2.0] {
            let r = trace(50.0, 30.0, 0.0);
            let a = trace(50.0, 30.0, shift);
            let e = estimate_delay(&r, &a, &cfg).unwrap();
            assert!((e.lag - shift).abs() <= cfg.resample_interval, "shift {shift} got {}", e.lag);
            let st = e.stamp_latency.unwrap();
            assert!((st.mean - shift).abs() < 1e-9);
            assert!(e.disagreement.unwrap() <= cfg.resample_interval);
            for lag in e.axis_lags.iter().flatten() {
                assert!((lag - shift).abs() <= 2.0 * cfg.resample_interval);
            }
        }
    }

    #[test]
    fn flat_traces_are_rejected() {
        let flat = Trace::new(
            (0..500)
                .map(|i| TraceSample { t: i as f64 * 0.02, seq: i, stamp_tx: i as f64 * 0.02, position: [1.0, 2.0, -3.0] })
                .collect(),
        );
        assert!(matches!(
            estimate_delay(&flat, &flat, &EstimatorConfig::default()),
            Err(EstimateError::InsufficientExcitation { .. })
        ));
        assert_eq!(estimate_delay(&Trace::default(), &flat, &EstimatorConfig::default()), Err(EstimateError::Empty));
    }

    #[test]
    fn latency_stats_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let s = LatencyStats::from_values(&v).unwrap();
        assert_eq!(s.p95, 95.0);
        assert_eq!(s.mean, 50.5);
        assert_eq!(s.max, 100.0);
        assert_eq!(LatencyStats::from_values(&[]), None);
    }

    #[test]
    fn interpolation() {
        let t = Trace::new(vec![
            TraceSample { t: 0.0, seq: 0, stamp_tx: 0.0, position: [0.0; 3] },
            TraceSample { t: 1.0, seq: 1, stamp_tx: 1.0, position: [1.0, 0.0, 0.0] },
        ]);
        assert_eq!(t.position_at(0.5), Some([0.5, 0.0, 0.0]));
        assert_eq!(t.position_at(1.5), None);
    }
}
