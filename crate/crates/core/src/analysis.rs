//! Change-point detection on order-parameter series, attractor
//! classification and small statistics helpers.

use serde::{Deserialize, Serialize};

use crate::dynsys::Trajectory;
use crate::error::{Error, Result};

/// Running sums for O(1) window means and variances.
struct Prefix {
    s: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(x: &[f64]) -> Self {
        let mut s = Vec::with_capacity(x.len() + 1);
        let mut s2 = Vec::with_capacity(x.len() + 1);
        s.push(0.0);
        s2.push(0.0);
        for v in x {
            s.push(s.last().unwrap() + v);
            s2.push(s2.last().unwrap() + v * v);
        }
        Self { s, s2 }
    }

    fn mean(&self, a: usize, b: usize) -> f64 {
        (self.s[b] - self.s[a]) / (b - a) as f64
    }

    fn std(&self, a: usize, b: usize) -> f64 {
        let n = (b - a) as f64;
        let m = self.mean(a, b);
        ((self.s2[b] - self.s2[a]) / n - m * m).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    /// Frame at which the alarm was raised.
    pub frame: usize,
    #[serde(rename = "R_before")]
    pub r_before: f64,
    #[serde(rename = "R_after")]
    pub r_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub change_points: Vec<ChangePoint>,
    /// Per change point: frames since the most recent true switch at or
    /// before it. `None` when no ground truth precedes the alarm.
    pub latency_frames: Vec<Option<usize>>,
    /// Every plateau the detector locked onto: `(start, end, mean, std)`.
    pub plateaus: Vec<Plateau>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub std: f64,
}

impl ChangeReport {
    /// Fills `latency_frames` from ground-truth switch frames.
    pub fn with_truth(mut self, switches: &[usize]) -> Self {
        self.latency_frames =
            self.change_points.iter().map(|cp| switches.iter().filter(|&&s| s <= cp.frame).max().map(|&s| cp.frame - s)).collect();
        self
    }

    /// First alarm at or after `frame`, as a latency.
    pub fn latency_after(&self, frame: usize) -> Option<usize> {
        self.change_points.iter().find(|cp| cp.frame >= frame).map(|cp| cp.frame - frame)
    }
}

/// Smallest band half-width, so that a perfectly flat plateau still needs a
/// real excursion to alarm.
pub const BAND_FLOOR: f64 = 1e-6;

/// A window is flat when the means of its two halves differ by at most this
/// many standard deviations of the whole window, and neither half is more
/// than `SPREAD_RATIO` times as noisy as the other.
const FLAT_TOL: f64 = 0.5;
const SPREAD_RATIO: f64 = 2.0;

/// Unsupervised plateau-shift detector.
///
/// The detector alternates between two states. While settling it scans for
/// the first `window`-frame segment with no trend (half-means and half-spreads
/// agree) and
/// takes its mean and standard deviation as the reference plateau. While
/// monitoring it raises an alarm as soon as the rolling mean over the last
/// `window / 4` frames leaves `mean +- k_sigma * std`; it then settles again
/// from the frame after the alarm.
pub fn detect_equilibrium_shift(r: &[f64], window: usize, k_sigma: f64) -> Result<ChangeReport> {
    if window < 4 || r.len() <= 2 * window {
        return Err(Error::WindowTooLarge { window, len: r.len() });
    }
    let pre = Prefix::new(r);
    let probe = (window / 4).max(1);
    let half = window / 2;
    let mut change_points = Vec::new();
    let mut plateaus: Vec<Plateau> = Vec::new();
    let mut from = 0usize;

    'settle: while from + window <= r.len() {
        let Some(start) = (from..=r.len() - window).find(|&s| {
            let sd = pre.std(s, s + window);
            let (a, b) = (pre.std(s, s + half).max(BAND_FLOOR), pre.std(s + half, s + window).max(BAND_FLOOR));
            (pre.mean(s, s + half) - pre.mean(s + half, s + window)).abs() <= FLAT_TOL * sd && a.max(b) <= SPREAD_RATIO * a.min(b)
        }) else {
            break;
        };
        let (mean, std) = (pre.mean(start, start + window), pre.std(start, start + window));
        if let Some(cp) = change_points.last_mut() {
            let cp: &mut ChangePoint = cp;
            if cp.r_after.is_nan() {
                cp.r_after = mean;
            }
        }
        let band = k_sigma * std.max(BAND_FLOOR);
        let first = start + window + probe;
        for t in first..=r.len() {
            if (pre.mean(t - probe, t) - mean).abs() > band {
                plateaus.push(Plateau { start, end: t - probe, mean, std });
                change_points.push(ChangePoint { frame: t - 1, r_before: mean, r_after: f64::NAN });
                from = t;
                continue 'settle;
            }
        }
        plateaus.push(Plateau { start, end: r.len(), mean, std });
        break;
    }
    if let Some(cp) = change_points.last_mut() {
        if cp.r_after.is_nan() {
            let a = (cp.frame + 1).min(r.len() - 1);
            cp.r_after = pre.mean(a, r.len());
        }
    }
    let n = change_points.len();
    Ok(ChangeReport { change_points, latency_frames: vec![None; n], plateaus })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttractorClass {
    Dead,
    Periodic,
    Chaotic,
}

/// Diagnostics behind an [`AttractorClass`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: AttractorClass,
    pub trailing_variance: f64,
    /// Highest autocorrelation peak after the first decorrelation.
    pub acf_peak: f64,
    pub acf_peak_lag: usize,
    /// Mean log-divergence slope of nearest neighbours, per frame.
    pub lyapunov_proxy: f64,
}

pub const MIN_CLASSIFY_FRAMES: usize = 4000;
pub const DEAD_VARIANCE: f64 = 1e-8;
pub const PERIODIC_ACF: f64 = 0.98;

/// Dead if the trailing quarter has variance below [`DEAD_VARIANCE`] in every
/// component; Periodic if the mean autocorrelation has a repeating peak above
/// [`PERIODIC_ACF`]; Chaotic if nearest neighbours diverge on average; and
/// Periodic otherwise (regular, non-repeating motion such as a slowly
/// decaying spiral).
pub fn classify_attractor(traj: &Trajectory) -> Result<Classification> {
    if traj.len() < MIN_CLASSIFY_FRAMES {
        return Err(Error::TooShort { needed: MIN_CLASSIFY_FRAMES, available: traj.len() });
    }
    let comps: Vec<Vec<f64>> = (0..traj.dim).map(|c| traj.component(c)).collect();
    let tail = traj.len() - traj.len() / 4;
    let trailing_variance = comps.iter().map(|x| variance(&x[tail..])).fold(0.0, f64::max);
    let mut out =
        Classification { class: AttractorClass::Dead, trailing_variance, acf_peak: f64::NAN, acf_peak_lag: 0, lyapunov_proxy: f64::NAN };
    if trailing_variance < DEAD_VARIANCE {
        return Ok(out);
    }

    let max_lag = traj.len() / 2;
    let live: Vec<&Vec<f64>> = comps.iter().filter(|x| variance(x) > 0.0).collect();
    let acfs: Vec<Vec<f64>> = live.iter().map(|x| autocorrelation(x, max_lag)).collect();
    let acf: Vec<f64> = (0..=max_lag).map(|k| acfs.iter().map(|a| a[k]).sum::<f64>() / acfs.len() as f64).collect();
    let decor = acf.iter().position(|&v| v < 0.0).or_else(|| acf.iter().position(|&v| v < (-1.0f64).exp()));
    if let Some(z) = decor {
        for k in z.max(1)..max_lag {
            if acf[k] >= acf[k - 1] && acf[k] >= acf[k + 1] && (acf[k] > out.acf_peak || out.acf_peak.is_nan()) {
                out.acf_peak = acf[k];
                out.acf_peak_lag = k;
            }
        }
    }
    if out.acf_peak > PERIODIC_ACF {
        out.class = AttractorClass::Periodic;
        return Ok(out);
    }

    let corr_time = acf.iter().position(|&v| v < (-1.0f64).exp()).unwrap_or(max_lag / 4).max(1);
    out.lyapunov_proxy = divergence_rate(&comps, corr_time);
    out.class = if out.lyapunov_proxy > 0.0 { AttractorClass::Chaotic } else { AttractorClass::Periodic };
    Ok(out)
}

/// Rosenstein-style largest-Lyapunov proxy. Points are the raw state vectors
/// (a delay embedding of dimension 3 for scalar series); each reference point
/// is paired with its nearest neighbour outside a Theiler window of
/// `2 * corr_time`, and the slope of the mean log-separation over
/// `0..=2 * corr_time` frames is returned.
fn divergence_rate(comps: &[Vec<f64>], corr_time: usize) -> f64 {
    let points: Vec<Vec<f64>> = if comps.len() == 1 {
        let lag = corr_time.max(1);
        let x = &comps[0];
        (2 * lag..x.len()).map(|i| vec![x[i], x[i - lag], x[i - 2 * lag]]).collect()
    } else {
        (0..comps[0].len()).map(|i| comps.iter().map(|c| c[i]).collect()).collect()
    };
    let scale: Vec<f64> =
        (0..points[0].len()).map(|d| variance(&points.iter().map(|p| p[d]).collect::<Vec<_>>()).sqrt().max(1e-300)).collect();
    let horizon = 2 * corr_time;
    let theiler = 2 * corr_time;
    let usable = points.len().saturating_sub(horizon);
    let stride = (usable / 1500).max(1);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(&scale).map(|((x, y), s)| ((x - y) / s).powi(2)).sum::<f64>().sqrt();

    let mut sums = vec![0.0; horizon + 1];
    let mut counts = vec![0usize; horizon + 1];
    for i in (0..usable).step_by(stride) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in (0..usable).step_by(stride.max(1)) {
            if i.abs_diff(j) <= theiler {
                continue;
            }
            let d = dist(&points[i], &points[j]);
            if d > 0.0 && d < best.0 {
                best = (d, j);
            }
        }
        if best.1 == usize::MAX {
            continue;
        }
        for k in 0..=horizon {
            let d = dist(&points[i + k], &points[best.1 + k]);
            if d > 0.0 {
                sums[k] += d.ln();
                counts[k] += 1;
            }
        }
    }
    let ys: Vec<(f64, f64)> = (0..=horizon).filter(|&k| counts[k] > 0).map(|k| (k as f64, sums[k] / counts[k] as f64)).collect();
    if ys.len() < 2 {
        return f64::NAN;
    }
    let n = ys.len() as f64;
    let mx = ys.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ys.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = ys.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = ys.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

/// Normalized autocorrelation for lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    let c0: f64 = d.iter().map(|v| v * v).sum();
    (0..=max_lag.min(x.len() - 1))
        .map(|k| if c0 == 0.0 { 0.0 } else { d[..d.len() - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / c0 })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::DimensionMismatch(format!("pearson of lengths {} and {}", a.len(), b.len())));
    }
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateTrajectory("zero variance in correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Centered moving average; the window shrinks at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let pre = Prefix::new(x);
    let h = window / 2;
    (0..x.len())
        .map(|i| {
            let a = i.saturating_sub(h);
            let b = (i + window - h).min(x.len());
            pre.mean(a, b)
        })
        .collect()
}

/// Mean spacing in frames between successive local maxima of `x`.
pub fn cycle_period(x: &[f64]) -> Option<f64> {
    let peaks: Vec<usize> = (1..x.len().saturating_sub(1)).filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1]).collect();
    if peaks.len() < 2 {
        return None;
    }
    Some((peaks[peaks.len() - 1] - peaks[0]) as f64 / (peaks.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{simulate, ParamSchedule, SimOptions, SystemSpec};
    use crate::rng::seeded;
    use rand_distr_free::normal;

    /// Box-Muller, to avoid a distribution crate for test noise.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal<R: Rng>(rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }

    #[test]
    fn constant_series_has_no_change_points() {
        let rep = detect_equilibrium_shift(&vec![0.7; 1000], 100, 4.0).unwrap();
        assert!(rep.change_points.is_empty());
        assert_eq!(rep.plateaus.len(), 1);
    }

    #[test]
    fn noisy_step_detected_once_in_range() {
        let mut rng = seeded(3, 0);
        let r: Vec<f64> = (0..1200).map(|t| if t < 500 { 1.0 } else { 0.6 } + 0.01 * normal(&mut rng)).collect();
        let rep = detect_equilibrium_shift(&r, 100, 4.0).unwrap().with_truth(&[500]);
        assert_eq!(rep.change_points.len(), 1, "{rep:?}");
        let cp = rep.change_points[0];
        assert!((500..=560).contains(&cp.frame), "{cp:?}");
        assert!((cp.r_before - 1.0).abs() < 0.01 && (cp.r_after - 0.6).abs() < 0.01);
        assert_eq!(rep.latency_frames, vec![Some(cp.frame - 500)]);
    }

    #[test]
    fn slow_sinusoid_inside_band_is_quiet() {
        let mut rng = seeded(4, 0);
        let r: Vec<f64> = (0..5000).map(|t| 0.8 + 0.005 * (t as f64 * 0.003).sin() + 0.01 * normal(&mut rng)).collect();
        assert!(detect_equilibrium_shift(&r, 200, 4.0).unwrap().change_points.is_empty());
    }

    #[test]
    fn window_too_large() {
        assert!(matches!(detect_equilibrium_shift(&[0.0; 100], 50, 4.0), Err(Error::WindowTooLarge { .. })));
    }

    #[test]
    fn latencies_follow_most_recent_switch() {
        let rep = ChangeReport {
            change_points: vec![
                ChangePoint { frame: 40, r_before: 1.0, r_after: 0.5 },
                ChangePoint { frame: 130, r_before: 0.5, r_after: 0.9 },
            ],
            latency_frames: vec![],
            plateaus: vec![],
        }
        .with_truth(&[50, 100, 120]);
        assert_eq!(rep.latency_frames, vec![None, Some(10)]);
    }

    fn traj_from(f: impl Fn(usize) -> f64, n: usize) -> Trajectory {
        Trajectory::from_frames(0.1, 1, (0..n).map(f).collect(), vec![0.0; n]).unwrap()
    }

    #[test]
    fn decaying_signal_is_dead() {
        let t = traj_from(|i| (-(i as f64) * 0.01).exp() * (i as f64 * 0.3).sin(), 5000);
        assert_eq!(classify_attractor(&t).unwrap().class, AttractorClass::Dead);
    }

    #[test]
    fn sine_is_periodic() {
        let t = traj_from(|i| (i as f64 * 0.05).sin(), 5000);
        let c = classify_attractor(&t).unwrap();
        assert_eq!(c.class, AttractorClass::Periodic);
        assert!((c.acf_peak_lag as f64 - std::f64::consts::TAU / 0.05).abs() < 2.0, "{c:?}");
    }

    #[test]
    fn short_series_rejected() {
        let t = traj_from(|i| i as f64, 100);
        assert!(matches!(classify_attractor(&t), Err(Error::TooShort { .. })));
    }

    #[test]
    fn lorenz_is_chaotic() {
        let spec = SystemSpec::lorenz();
        let traj = simulate(&spec, &ParamSchedule::constant(24.5), &SimOptions::for_system(&spec, 6000), 2).unwrap();
        let c = classify_attractor(&traj).unwrap();
        assert_eq!(c.class, AttractorClass::Chaotic, "{c:?}");
    }

    #[test]
    fn thomas_states() {
        let spec = SystemSpec::Thomas;
        let opts = SimOptions::for_system(&spec, 20_000);
        let chaos = simulate(&spec, &ParamSchedule::constant(0.18), &opts, 1).unwrap();
        let orbit = simulate(&spec, &ParamSchedule::constant(0.29), &opts, 1).unwrap();
        assert_eq!(classify_attractor(&chaos).unwrap().class, AttractorClass::Chaotic);
        assert_eq!(classify_attractor(&orbit).unwrap().class, AttractorClass::Periodic);
    }

    #[test]
    fn classification_ignores_time_offset() {
        let spec = SystemSpec::Thomas;
        let traj = simulate(&spec, &ParamSchedule::constant(0.18), &SimOptions::for_system(&spec, 5000), 9).unwrap();
        let shifted = Trajectory::from_frames(traj.dt, 3, traj.data().to_vec(), traj.lambda.clone()).unwrap();
        assert_eq!(classify_attractor(&traj).unwrap(), classify_attractor(&shifted).unwrap());
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[-1.0, -2.0, -3.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn moving_average_and_period() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 3), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * std::f64::consts::TAU / 50.0).sin()).collect();
        assert!((cycle_period(&x).unwrap() - 50.0).abs() < 0.5);
    }
}
