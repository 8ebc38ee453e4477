//! Synthetic multi-cluster wavefields.
//!
//! A recording is a run of episodes, each a baseline block followed by an
//! event block. Blocks are cut into segments; every segment is rendered from
//! one pattern drawn with that phase's mixture weights, so each segment
//! belongs to exactly one ground-truth cluster (the pattern's index).

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};

use super::{FrameTag, Phase, Recording, RecordingMeta};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    PlaneWave,
    Spiral,
    LocalBurst,
    Silence,
    RefractoryDecay,
}

impl PatternKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "plane_wave" => PatternKind::PlaneWave,
            "spiral" => PatternKind::Spiral,
            "local_burst" => PatternKind::LocalBurst,
            "silence" => PatternKind::Silence,
            "refractory_decay" => PatternKind::RefractoryDecay,
            other => return Err(Error::Config(format!("unknown pattern kind {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::PlaneWave => "plane_wave",
            PatternKind::Spiral => "spiral",
            PatternKind::LocalBurst => "local_burst",
            PatternKind::Silence => "silence",
            PatternKind::RefractoryDecay => "refractory_decay",
        }
    }
}

/// One pattern cluster.
///
/// Coordinates: `x` runs along columns, `y` up the rows (row 0 is the top).
/// `center` is in grid fractions, `(0.5, 0.5)` being the middle.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Propagation direction `(dx, dy)` of a plane wave; normalized on use.
    pub direction: (f64, f64),
    /// Rotation rate of a spiral in radians per frame; positive is
    /// counter-clockwise.
    pub angular_velocity: f64,
    pub center: (f64, f64),
    /// Wavelength in pixels (plane wave, spiral) or blob radius (burst).
    pub spatial_scale: f64,
    pub amplitude: f64,
    /// Cycles per frame (waves, bursts) or decay rate per frame (refractory).
    pub temporal_frequency: f64,
    /// Standard deviation of additive white noise.
    pub noise: f64,
    /// Relative per-segment jitter of scale and frequency, in `[0, 1)`.
    pub jitter: f64,
    /// Mixture weight inside baseline blocks.
    pub baseline_weight: f64,
    /// Mixture weight inside event blocks.
    pub event_weight: f64,
}

impl PatternSpec {
    pub fn new(kind: PatternKind) -> Self {
        Self {
            kind,
            direction: (1.0, 0.0),
            angular_velocity: 0.3,
            center: (0.5, 0.5),
            spatial_scale: 6.0,
            amplitude: 1.0,
            temporal_frequency: 0.1,
            noise: 0.0,
            jitter: 0.0,
            baseline_weight: 0.0,
            event_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.kind.name())));
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be finite and non-negative");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must be in [0, 1)");
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return bad("spatial scale must be positive");
        }
        if !(self.temporal_frequency >= 0.0 && self.temporal_frequency.is_finite()) {
            return bad("temporal frequency must be non-negative");
        }
        if !self.angular_velocity.is_finite() {
            return bad("angular velocity must be finite");
        }
        if self.kind == PatternKind::PlaneWave && self.direction.0.hypot(self.direction.1) == 0.0 {
            return bad("direction must be non-zero");
        }
        if !(0.0..=1.0).contains(&self.center.0) || !(0.0..=1.0).contains(&self.center.1) {
            return bad("center must lie in the unit square");
        }
        if self.baseline_weight < 0.0 || self.event_weight < 0.0 {
            return bad("mixture weights must be non-negative");
        }
        Ok(())
    }
}

/// Per-segment draw of the pattern's free parameters.
#[derive(Debug, Clone, Copy)]
struct SegmentParams {
    phase: f64,
    scale: f64,
    frequency: f64,
    center: (f64, f64),
}

fn draw_params(spec: &PatternSpec, rng: &mut Rng) -> SegmentParams {
    let jitter = |rng: &mut Rng| 1.0 + spec.jitter * rng.uniform_range(-1.0, 1.0);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let scale = spec.spatial_scale * jitter(rng);
    let frequency = spec.temporal_frequency * jitter(rng);
    let center = if spec.kind == PatternKind::LocalBurst && spec.jitter > 0.0 {
        // Bursts wander: anywhere in the central region of the grid.
        (rng.uniform_range(0.25, 0.75), rng.uniform_range(0.25, 0.75))
    } else {
        spec.center
    };
    SegmentParams {
        phase,
        scale,
        frequency,
        center,
    }
}

/// Noise-free value of pattern `spec` at pixel `(row, col)` and local time `t`.
fn render(spec: &PatternSpec, p: &SegmentParams, height: usize, width: usize, row: usize, col: usize, t: f64) -> f64 {
    let x = col as f64;
    let y = (height - 1 - row) as f64;
    let a = spec.amplitude;
    match spec.kind {
        PatternKind::Silence => 0.0,
        PatternKind::PlaneWave => {
            let (dx, dy) = spec.direction;
            let norm = dx.hypot(dy);
            let s = (dx * x + dy * y) / norm;
            a * (2.0 * PI * (s / p.scale - p.frequency * t) + p.phase).sin()
        }
        PatternKind::Spiral => {
            let cx = p.center.0 * (width - 1) as f64;
            let cy = p.center.1 * (height - 1) as f64;
            let (rx, ry) = (x - cx, y - cy);
            let theta = ry.atan2(rx);
            let r = rx.hypot(ry);
            a * (theta - spec.angular_velocity * t + 2.0 * PI * r / p.scale + p.phase).sin()
        }
        PatternKind::LocalBurst => {
            let cx = p.center.0 * (width - 1) as f64;
            let cy = p.center.1 * (height - 1) as f64;
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            let envelope = (-r2 / (2.0 * p.scale * p.scale)).exp();
            a * envelope * (2.0 * PI * p.frequency * t + p.phase).sin()
        }
        PatternKind::RefractoryDecay => {
            // Global hyperpolarization relaxing back to rest, re-triggered
            // every three time constants.
            let tau = 1.0 / p.frequency.max(1e-6);
            let local = t % (3.0 * tau);
            let (dx, dy) = spec.direction;
            let norm = dx.hypot(dy).max(1e-12);
            let s = (dx * x + dy * y) / norm;
            let profile = 0.75 + 0.25 * (2.0 * PI * s / p.scale + p.phase).cos();
            -a * (-local / tau).exp() * profile
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub episodes: usize,
    pub baseline_frames: usize,
    pub event_frames: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub patterns: Vec<PatternSpec>,
    /// Channels marked invalid (dead) and zeroed.
    pub missing_channels: usize,
    pub sampling_rate: f64,
    /// Level the activity rides on, in `(-1, 1)`. Valid channels end up in
    /// `level ± (1 - |level|)`.
    pub resting_level: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 12,
            width: 12,
            episodes: 4,
            baseline_frames: 400,
            event_frames: 600,
            segment_min: 40,
            segment_max: 80,
            patterns: vec![],
            missing_channels: 0,
            sampling_rate: 277.78,
            resting_level: 0.0,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid must be at least 1×1".into()));
        }
        if self.episodes == 0 || self.baseline_frames + self.event_frames == 0 {
            return Err(Error::Config("recording must contain at least one frame".into()));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return Err(Error::Config("segment length range is empty".into()));
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("at least one pattern is required".into()));
        }
        if self.missing_channels >= self.height * self.width {
            return Err(Error::Config("at least one channel must stay valid".into()));
        }
        if !(self.resting_level.abs() < 1.0) {
            return Err(Error::Config("resting level must lie in (-1, 1)".into()));
        }
        for p in &self.patterns {
            p.validate()?;
        }
        for (phase, len) in [(Phase::Baseline, self.baseline_frames), (Phase::Event, self.event_frames)] {
            if len == 0 {
                continue;
            }
            let sum: f64 = self.patterns.iter().map(|p| weight(p, phase)).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{} mixture weights sum to {sum}, expected 1",
                    phase.name()
                )));
            }
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.episodes * (self.baseline_frames + self.event_frames)
    }
}

fn weight(p: &PatternSpec, phase: Phase) -> f64 {
    match phase {
        Phase::Baseline => p.baseline_weight,
        Phase::Event => p.event_weight,
    }
}

fn pick(patterns: &[PatternSpec], phase: Phase, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in patterns.iter().enumerate() {
        let w = weight(p, phase);
        if w <= 0.0 {
            continue;
        }
        last = i;
        acc += w;
        if u < acc {
            return i;
        }
    }
    last
}

/// Renders a recording. Identical configs give bit-identical recordings.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Recording> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let d = h * w;
    let total = cfg.total_frames();
    let root = Rng::new(cfg.seed);
    let mut frames = vec![0.0f64; total * d];
    let mut tags = Vec::with_capacity(total);
    let mut clusters = Vec::with_capacity(total);
    let mut runs: Vec<String> = Vec::new();
    let mut layout = root.split(1);
    let mut segment_id = 0u64;

    for e in 0..cfg.episodes {
        for (phase, len) in [(Phase::Baseline, cfg.baseline_frames), (Phase::Event, cfg.event_frames)] {
            let mut done = 0;
            while done < len {
                let span = cfg.segment_min + layout.below(cfg.segment_max - cfg.segment_min + 1);
                let span = span.min(len - done);
                let cluster = pick(&cfg.patterns, phase, layout.uniform());
                let spec = &cfg.patterns[cluster];
                let mut seg_rng = root.split(1000 + segment_id);
                let params = draw_params(spec, &mut seg_rng);
                let normal = Normal::new(0.0, spec.noise.max(0.0)).expect("valid sigma");
                let start = tags.len();
                runs.push(format!("{start}+{span}:{cluster}"));
                for k in 0..span {
                    let base = (start + k) * d;
                    for r in 0..h {
                        for c in 0..w {
                            let mut v = render(spec, &params, h, w, r, c, k as f64);
                            if spec.noise > 0.0 {
                                v += normal.sample(&mut seg_rng);
                            }
                            frames[base + r * w + c] = v;
                        }
                    }
                    tags.push(FrameTag {
                        episode: e as u32 + 1,
                        phase,
                    });
                    clusters.push(cluster as u16);
                }
                done += span;
                segment_id += 1;
            }
        }
    }

    let mut valid_mask = vec![true; d];
    if cfg.missing_channels > 0 {
        let mut idx: Vec<usize> = (0..d).collect();
        root.split(2).shuffle(&mut idx);
        for &i in &idx[..cfg.missing_channels] {
            valid_mask[i] = false;
        }
        for t in 0..total {
            for (i, &ok) in valid_mask.iter().enumerate() {
                if !ok {
                    frames[t * d + i] = 0.0;
                }
            }
        }
    }

    let peak = frames.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let level = cfg.resting_level;
    let scale = (1.0 - level.abs()) / if peak > 0.0 { peak } else { 1.0 };
    let frames: Vec<f32> = frames
        .iter()
        .enumerate()
        .map(|(i, &v)| if valid_mask[i % d] { (level + v * scale) as f32 } else { 0.0 })
        .collect();

    let mut meta = RecordingMeta {
        sampling_rate: cfg.sampling_rate,
        max_intensity: 1.0,
        ..Default::default()
    };
    meta.extra.insert("generator_seed".into(), cfg.seed.to_string());
    meta.extra.insert(
        "generator_patterns".into(),
        cfg.patterns.iter().map(|p| p.kind.name()).collect::<Vec<_>>().join(","),
    );
    meta.extra.insert("raw_peak".into(), format!("{peak:e}"));
    meta.extra.insert("cluster_runs".into(), runs.join(","));

    let mut rec = Recording::new(h, w, frames, valid_mask, tags)?;
    rec.clusters = Some(clusters);
    rec.meta = meta;
    Ok(rec)
}

/// Parses the `cluster_runs` sidecar entry back into per-frame labels.
pub(crate) fn parse_cluster_runs(s: &str, frames: usize) -> Result<Vec<u16>> {
    let mut out = vec![u16::MAX; frames];
    for run in s.split(',').filter(|r| !r.is_empty()) {
        let bad = || Error::Data(format!("malformed cluster run {run:?}"));
        let (span, cluster) = run.split_once(':').ok_or_else(bad)?;
        let (start, len) = span.split_once('+').ok_or_else(bad)?;
        let start: usize = start.parse().map_err(|_| bad())?;
        let len: usize = len.parse().map_err(|_| bad())?;
        let cluster: u16 = cluster.parse().map_err(|_| bad())?;
        if start + len > frames {
            return Err(bad());
        }
        out[start..start + len].iter_mut().for_each(|c| *c = cluster);
    }
    if out.contains(&u16::MAX) {
        return Err(Error::Data("cluster runs do not cover every frame".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pattern(spec: PatternSpec, frames: usize, h: usize, w: usize) -> GeneratorConfig {
        let mut spec = spec;
        spec.baseline_weight = 1.0;
        spec.event_weight = 1.0;
        GeneratorConfig {
            height: h,
            width: w,
            episodes: 1,
            baseline_frames: frames,
            event_frames: 0,
            segment_min: frames,
            segment_max: frames,
            patterns: vec![spec],
            ..Default::default()
        }
    }

    #[test]
    fn silence_without_noise_is_all_zero() {
        let rec = generate_synthetic(&one_pattern(PatternSpec::new(PatternKind::Silence), 10, 4, 5)).unwrap();
        assert!(rec.frames.iter().all(|&v| v == 0.0));
        assert_eq!(rec.meta.max_intensity, 1.0);
    }

    #[test]
    fn horizontal_plane_wave_is_constant_down_each_column() {
        let mut p = PatternSpec::new(PatternKind::PlaneWave);
        p.direction = (1.0, 0.0);
        let rec = generate_synthetic(&one_pattern(p, 5, 6, 8)).unwrap();
        for t in 0..5 {
            let f = rec.frame(t);
            for r in 1..6 {
                assert_eq!(&f[r * 8..(r + 1) * 8], &f[..8]);
            }
        }
    }

    #[test]
    fn plane_wave_translates_cyclically() {
        // Wavelength 8 on an 8-wide grid, speed λ·f = 1 pixel per frame.
        let mut p = PatternSpec::new(PatternKind::PlaneWave);
        p.direction = (1.0, 0.0);
        p.spatial_scale = 8.0;
        p.temporal_frequency = 0.125;
        let rec = generate_synthetic(&one_pattern(p, 12, 3, 8)).unwrap();
        let delta = 3;
        for t in 0..12 - delta {
            let a = rec.frame(t);
            let b = rec.frame(t + delta);
            for r in 0..3 {
                for c in 0..8 {
                    let shifted = a[r * 8 + (c + 8 - delta) % 8];
                    assert!((b[r * 8 + c] - shifted).abs() < 1e-6, "t={t} r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_normalized() {
        let mut a = PatternSpec::new(PatternKind::Spiral);
        a.noise = 0.1;
        a.baseline_weight = 0.5;
        a.event_weight = 0.2;
        let mut b = PatternSpec::new(PatternKind::LocalBurst);
        b.jitter = 0.2;
        b.baseline_weight = 0.5;
        b.event_weight = 0.8;
        let cfg = GeneratorConfig {
            episodes: 2,
            baseline_frames: 50,
            event_frames: 70,
            segment_min: 10,
            segment_max: 30,
            patterns: vec![a, b],
            missing_channels: 3,
            ..Default::default()
        };
        let x = generate_synthetic(&cfg).unwrap();
        let y = generate_synthetic(&cfg).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.num_frames(), 240);
        assert!(x.frames.iter().all(|v| v.abs() <= 1.0));
        assert!(x.frames.iter().any(|v| v.abs() == 1.0));
        assert_eq!(x.valid_mask.iter().filter(|v| !**v).count(), 3);
        assert_eq!(x.episodes(), vec![1, 2]);
        let labels = parse_cluster_runs(&x.meta.extra["cluster_runs"], 240).unwrap();
        assert_eq!(Some(labels), x.clusters);

        let raised = generate_synthetic(&GeneratorConfig {
            resting_level: 0.5,
            ..cfg.clone()
        })
        .unwrap();
        for (i, (&r, &v)) in raised.frames.iter().zip(&x.frames).enumerate() {
            let expect = if x.valid_mask[i % 144] { 0.5 + 0.5 * v } else { 0.0 };
            assert!((r - expect).abs() < 1e-6);
        }
        assert!(raised.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut p = PatternSpec::new(PatternKind::PlaneWave);
        p.baseline_weight = 0.7;
        let cfg = GeneratorConfig {
            event_frames: 0,
            patterns: vec![p.clone()],
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
        p.baseline_weight = 1.0;
        p.direction = (0.0, 0.0);
        let cfg = GeneratorConfig {
            event_frames: 0,
            patterns: vec![p],
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = one_pattern(PatternSpec::new(PatternKind::Silence), 4, 2, 2);
        cfg.resting_level = -1.0;
        assert!(generate_synthetic(&cfg).is_err());
    }
}
