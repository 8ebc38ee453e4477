use crate::error::{Error, Result};

/// Per-channel lag, in frames, relative to a reference signal.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMap {
    pub height: usize,
    pub width: usize,
    /// Row-major lags; positive means the channel trails the reference.
    pub delays: Vec<i32>,
    /// Channels with zero variance (or invalid); their delay is reported as 0.
    pub degenerate: Vec<bool>,
    pub max_lag: usize,
}

impl DelayMap {
    pub fn delay(&self, row: usize, col: usize) -> i32 {
        self.delays[row * self.width + col]
    }

    pub fn to_millis(&self, sampling_rate: f64) -> Vec<f64> {
        self.delays.iter().map(|&d| d as f64 * 1000.0 / sampling_rate).collect()
    }
}

/// Delay map against the per-frame mean of the valid channels.
///
/// `frames` holds `T'` frames of `height × width` values.
pub fn delay_map(
    frames: &[f32],
    height: usize,
    width: usize,
    valid_mask: &[bool],
    max_lag: usize,
) -> Result<DelayMap> {
    let d = height * width;
    if d == 0 || valid_mask.len() != d || frames.len() % d != 0 {
        return Err(Error::Data("delay map: frame buffer does not match the grid".into()));
    }
    let t = frames.len() / d;
    let n_valid = valid_mask.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Err(Error::Data("delay map: no valid channel".into()));
    }
    let reference: Vec<f64> = (0..t)
        .map(|k| {
            let f = &frames[k * d..(k + 1) * d];
            f.iter()
                .zip(valid_mask)
                .filter(|(_, ok)| **ok)
                .map(|(&v, _)| v as f64)
                .sum::<f64>()
                / n_valid as f64
        })
        .collect();
    delay_map_with_reference(frames, height, width, valid_mask, &reference, max_lag)
}

/// Delay map against an explicit reference trace of length `T'`.
pub fn delay_map_with_reference(
    frames: &[f32],
    height: usize,
    width: usize,
    valid_mask: &[bool],
    reference: &[f64],
    max_lag: usize,
) -> Result<DelayMap> {
    let d = height * width;
    if d == 0 || valid_mask.len() != d || frames.len() % d != 0 {
        return Err(Error::Data("delay map: frame buffer does not match the grid".into()));
    }
    let t = frames.len() / d;
    if reference.len() != t {
        return Err(Error::Data(format!(
            "delay map: reference has {} samples, sequence has {t}",
            reference.len()
        )));
    }
    if t <= 2 * max_lag {
        return Err(Error::Data(format!(
            "delay map: {t} frames cannot cover lags up to ±{max_lag}"
        )));
    }
    let mut delays = vec![0; d];
    let mut degenerate = vec![false; d];
    let ref_flat = variance(reference) == 0.0;
    let mut channel = vec![0.0f64; t];
    for ch in 0..d {
        for (k, v) in channel.iter_mut().enumerate() {
            *v = frames[k * d + ch] as f64;
        }
        if !valid_mask[ch] || ref_flat || variance(&channel) == 0.0 {
            degenerate[ch] = true;
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0i32);
        // Ties go to the lag of smallest magnitude, then the negative one.
        let mut lags: Vec<i32> = (-(max_lag as i32)..=max_lag as i32).collect();
        lags.sort_by_key(|l| (l.abs(), *l));
        for lag in lags {
            let r = shifted_correlation(&channel, reference, lag);
            if r > best.0 + 1e-12 {
                best = (r, lag);
            }
        }
        delays[ch] = best.1;
    }
    Ok(DelayMap {
        height,
        width,
        delays,
        degenerate,
        max_lag,
    })
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Pearson correlation of `x[k + lag]` with `y[k]` over the overlap.
fn shifted_correlation(x: &[f64], y: &[f64], lag: i32) -> f64 {
    let n = x.len() as i64;
    let lo = 0.max(-lag as i64);
    let hi = n.min(n - lag as i64);
    let pairs: Vec<(f64, f64)> = (lo..hi).map(|k| (x[(k + lag as i64) as usize], y[k as usize])).collect();
    let m = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(a, b) in &pairs {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NEG_INFINITY;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig, PatternKind, PatternSpec};
    use proptest::prelude::*;

    fn signal(k: i64) -> f64 {
        let k = k as f64;
        (0.31 * k).sin() + 0.5 * (0.113 * k + 0.4).cos() + 0.2 * (0.73 * k).sin()
    }

    #[test]
    fn identical_channels_give_zero_map() {
        let frames: Vec<f32> = (0..40).flat_map(|k| [signal(k) as f32; 4]).collect();
        let m = delay_map(&frames, 2, 2, &[true; 4], 5).unwrap();
        assert_eq!(m.delays, vec![0; 4]);
        assert!(m.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn shifted_channel_reports_its_shift() {
        let t = 60;
        let reference: Vec<f64> = (0..t).map(signal).collect();
        let frames: Vec<f32> = (0..t).flat_map(|k| [signal(k) as f32, signal(k - 3) as f32]).collect();
        let m = delay_map_with_reference(&frames, 1, 2, &[true; 2], &reference, 6).unwrap();
        assert_eq!(m.delays, vec![0, 3]);
        assert!((m.to_millis(250.0)[1] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn flat_channel_is_degenerate() {
        let frames: Vec<f32> = (0..30).flat_map(|k| [signal(k) as f32, 0.5]).collect();
        let m = delay_map(&frames, 1, 2, &[true; 2], 3).unwrap();
        assert_eq!(m.delays[1], 0);
        assert!(m.degenerate[1]);
    }

    #[test]
    fn too_short_is_an_error() {
        let frames = vec![0.0f32; 10];
        assert!(delay_map(&frames, 1, 1, &[true], 5).is_err());
    }

    #[test]
    fn plane_wave_delay_is_monotone_along_propagation() {
        let mut p = PatternSpec::new(PatternKind::PlaneWave);
        p.direction = (1.0, 0.0);
        p.spatial_scale = 40.0;
        p.temporal_frequency = 0.05;
        p.baseline_weight = 1.0;
        let cfg = GeneratorConfig {
            height: 3,
            width: 8,
            episodes: 1,
            baseline_frames: 80,
            event_frames: 0,
            segment_min: 80,
            segment_max: 80,
            patterns: vec![p],
            ..Default::default()
        };
        let rec = generate_synthetic(&cfg).unwrap();
        let m = delay_map(&rec.frames, 3, 8, &rec.valid_mask, 10).unwrap();
        for r in 0..3 {
            for c in 1..8 {
                assert!(m.delay(r, c) >= m.delay(r, c - 1), "row {r}: {:?}", &m.delays[r * 8..r * 8 + 8]);
            }
            assert!(m.delay(r, 7) > m.delay(r, 0));
        }
    }

    proptest! {
        #[test]
        fn time_reversal_negates_pure_shift(shift in -4i64..=4) {
            let t = 64;
            let forward: Vec<f64> = (0..t).map(signal).collect();
            let frames: Vec<f32> = (0..t).flat_map(|k| [signal(k - shift) as f32]).collect();
            let m = delay_map_with_reference(&frames, 1, 1, &[true], &forward, 6).unwrap();
            prop_assert_eq!(m.delays[0] as i64, shift);
            let rev_ref: Vec<f64> = forward.iter().rev().copied().collect();
            let rev: Vec<f32> = frames.iter().rev().copied().collect();
            let m = delay_map_with_reference(&rev, 1, 1, &[true], &rev_ref, 6).unwrap();
            prop_assert_eq!(m.delays[0] as i64, -shift);
        }
    }
}
