//! Run configuration as a `key = value` text file.
//!
//! Every key is optional and falls back to its default, but unknown or
//! repeated keys are errors. Patterns are given as `pattern.<i>.<field>`
//! with consecutive indices from 0; any pattern key replaces the default
//! pattern set entirely.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::classifier::ClassifierConfig;
use crate::data::{GeneratorConfig, PatternKind, PatternSpec};
use crate::error::{Error, Result};
use crate::mcl::{EpochKind, TrainConfig};
use crate::optim::{IdlePolicy, OptimizerConfig};
use crate::selection::FeatureLayers;
use crate::seq2seq::{Architecture, SequenceSpec};

/// Floating point width used for the sequence models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (f32 or f64)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub seq_len: usize,
    pub pred_len: usize,
    pub window_stride: usize,
    pub test_episode: u32,
    pub validation_episode: u32,
    pub arch: Architecture,
    pub members: usize,
    pub precision: Precision,
    pub train: TrainConfig,
    pub pretrain: bool,
    pub model_seed: u64,
    pub pretrain_seed: u64,
    pub train_seed: u64,
    pub classifier: ClassifierConfig,
    pub classifier_features: FeatureLayers,
    pub delay_max_lag: usize,
    pub data_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

/// Four dynamics on a grid: two plane waves that dominate baseline
/// episodes and two counter-rotating spirals that dominate event episodes.
pub fn four_cluster_patterns() -> Vec<PatternSpec> {
    let mk = |kind, direction, angular_velocity, baseline_weight, event_weight| PatternSpec {
        direction,
        angular_velocity,
        spatial_scale: 8.0,
        temporal_frequency: 0.08,
        noise: 0.05,
        jitter: 0.2,
        baseline_weight,
        event_weight,
        ..PatternSpec::new(kind)
    };
    vec![
        mk(PatternKind::PlaneWave, (0.0, 1.0), 0.0, 0.35, 0.15),
        mk(PatternKind::PlaneWave, (1.0, -1.0), 0.0, 0.35, 0.15),
        mk(PatternKind::Spiral, (1.0, 0.0), 0.4, 0.15, 0.35),
        mk(PatternKind::Spiral, (1.0, 0.0), -0.4, 0.15, 0.35),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GeneratorConfig {
                episodes: 6,
                baseline_frames: 400,
                event_frames: 700,
                segment_min: 60,
                segment_max: 120,
                missing_channels: 4,
                patterns: four_cluster_patterns(),
                resting_level: 0.5,
                seed: 7,
                ..GeneratorConfig::default()
            },
            seq_len: 20,
            pred_len: 10,
            window_stride: 1,
            test_episode: 6,
            validation_episode: 5,
            arch: Architecture::default(),
            members: 4,
            precision: Precision::F32,
            train: TrainConfig::default(),
            pretrain: true,
            model_seed: 1,
            pretrain_seed: 2,
            train_seed: 3,
            classifier: ClassifierConfig::default(),
            classifier_features: FeatureLayers::Top,
            delay_max_lag: 5,
            data_path: None,
            checkpoint_path: None,
            report_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_pair<T: std::str::FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected two comma-separated values, got {v:?}")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

fn set_pattern_field(p: &mut PatternSpec, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "kind" => p.kind = PatternKind::parse(v)?,
        "direction" => p.direction = parse_pair(key, v)?,
        "angular_velocity" => p.angular_velocity = parse_num(key, v)?,
        "center" => p.center = parse_pair(key, v)?,
        "spatial_scale" => p.spatial_scale = parse_num(key, v)?,
        "amplitude" => p.amplitude = parse_num(key, v)?,
        "temporal_frequency" => p.temporal_frequency = parse_num(key, v)?,
        "noise" => p.noise = parse_num(key, v)?,
        "jitter" => p.jitter = parse_num(key, v)?,
        "baseline_weight" => p.baseline_weight = parse_num(key, v)?,
        "event_weight" => p.event_weight = parse_num(key, v)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

fn parse_kind(v: &str) -> Result<EpochKind> {
    match v {
        "mcl" => Ok(EpochKind::Mcl),
        "independent" => Ok(EpochKind::Independent),
        _ => Err(Error::Config(format!("training must be mcl or independent, got {v:?}"))),
    }
}

fn kind_name(k: EpochKind) -> &'static str {
    match k {
        EpochKind::Mcl => "mcl",
        EpochKind::Independent => "independent",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        let mut patterns: BTreeMap<usize, Vec<(String, String, String)>> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_owned(), lineno + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            if let Some(rest) = key.strip_prefix("pattern.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let idx: usize = parse_num(key, idx)?;
                patterns
                    .entry(idx)
                    .or_default()
                    .push((field.to_owned(), key.to_owned(), value.to_owned()));
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, e.to_string().trim_start_matches("invalid configuration: "))))?;
        }
        if !patterns.is_empty() {
            if patterns.keys().copied().ne(0..patterns.len()) {
                return Err(Error::Config("pattern indices must run 0, 1, 2, ... without gaps".into()));
            }
            cfg.data.patterns = patterns
                .values()
                .map(|fields| {
                    let kind = fields
                        .iter()
                        .find(|(f, _, _)| f == "kind")
                        .ok_or_else(|| Error::Config(format!("{}: missing kind", fields[0].1.rsplit_once('.').unwrap().0)))?;
                    let mut p = PatternSpec::new(PatternKind::parse(&kind.2)?);
                    for (field, key, value) in fields {
                        set_pattern_field(&mut p, field, key, value)?;
                    }
                    Ok(p)
                })
                .collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "height" => d.height = parse_num(key, v)?,
            "width" => d.width = parse_num(key, v)?,
            "episodes" => d.episodes = parse_num(key, v)?,
            "baseline_frames" => d.baseline_frames = parse_num(key, v)?,
            "event_frames" => d.event_frames = parse_num(key, v)?,
            "segment_min" => d.segment_min = parse_num(key, v)?,
            "segment_max" => d.segment_max = parse_num(key, v)?,
            "missing_channels" => d.missing_channels = parse_num(key, v)?,
            "sampling_rate" => d.sampling_rate = parse_num(key, v)?,
            "resting_level" => d.resting_level = parse_num(key, v)?,
            "data_seed" => d.seed = parse_num(key, v)?,
            "seq_len" => self.seq_len = parse_num(key, v)?,
            "pred_len" => self.pred_len = parse_num(key, v)?,
            "window_stride" => self.window_stride = parse_num(key, v)?,
            "test_episode" => self.test_episode = parse_num(key, v)?,
            "validation_episode" => self.validation_episode = parse_num(key, v)?,
            "hidden" => self.arch.hidden = parse_num(key, v)?,
            "layers" => self.arch.layers = parse_num(key, v)?,
            "peepholes" => self.arch.peepholes = parse_bool(key, v)?,
            "reverse_reconstruction" => self.arch.reverse_reconstruction = parse_bool(key, v)?,
            "members" => self.members = parse_num(key, v)?,
            "precision" => self.precision = Precision::parse(v)?,
            "learning_rate" => self.train.opt.learning_rate = parse_num(key, v)?,
            "momentum" => self.train.opt.momentum = parse_num(key, v)?,
            "clip_norm" => self.train.opt.clip_norm = parse_num(key, v)?,
            "batch_size" => self.train.opt.batch_size = parse_num(key, v)?,
            "idle_policy" => self.train.opt.idle = IdlePolicy::parse(v)?,
            "dropout" => self.train.dropout = parse_num(key, v)?,
            "patience" => self.train.patience = parse_num(key, v)?,
            "max_epochs" => self.train.max_epochs = parse_num(key, v)?,
            "pretrain" => self.pretrain = parse_bool(key, v)?,
            "training" => self.train.kind = parse_kind(v)?,
            "model_seed" => self.model_seed = parse_num(key, v)?,
            "pretrain_seed" => self.pretrain_seed = parse_num(key, v)?,
            "train_seed" => self.train_seed = parse_num(key, v)?,
            "classifier_hidden" => self.classifier.hidden = parse_pair(key, v)?,
            "classifier_learning_rate" => self.classifier.learning_rate = parse_num(key, v)?,
            "classifier_momentum" => self.classifier.momentum = parse_num(key, v)?,
            "classifier_batch_size" => self.classifier.batch_size = parse_num(key, v)?,
            "classifier_max_epochs" => self.classifier.max_epochs = parse_num(key, v)?,
            "classifier_patience" => self.classifier.patience = parse_num(key, v)?,
            "classifier_bn_decay" => self.classifier.bn_decay = parse_num(key, v)?,
            "classifier_seed" => self.classifier.seed = parse_num(key, v)?,
            "classifier_features" => self.classifier_features = FeatureLayers::parse(v)?,
            "delay_max_lag" => self.delay_max_lag = parse_num(key, v)?,
            "data_path" => self.data_path = Some(PathBuf::from(v)),
            "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(v)),
            "report_dir" => self.report_dir = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn sequence_spec(&self) -> Result<SequenceSpec> {
        SequenceSpec::new(self.seq_len, self.pred_len, self.data.height * self.data.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sequence_spec()?;
        self.train.validate()?;
        if self.window_stride == 0 {
            return Err(Error::Config("window_stride must be at least 1".into()));
        }
        if self.arch.hidden == 0 || self.arch.layers == 0 {
            return Err(Error::Config("hidden and layers must be at least 1".into()));
        }
        if self.members == 0 {
            return Err(Error::Config("members must be at least 1".into()));
        }
        if self.test_episode == self.validation_episode {
            return Err(Error::Config("test and validation episodes must differ".into()));
        }
        let c = &self.classifier;
        if c.hidden.0 == 0 || c.hidden.1 == 0 || c.batch_size < 2 || !(c.learning_rate > 0.0) {
            return Err(Error::Config(
                "classifier needs non-zero widths, batch size of at least 2 and a positive learning rate".into(),
            ));
        }
        if !(0.0..1.0).contains(&c.momentum) || !(0.0..1.0).contains(&c.bn_decay) {
            return Err(Error::Config("classifier momentum and bn decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical text: every key, in a fixed order. Parsing it yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("height", d.height.to_string());
        kv("width", d.width.to_string());
        kv("episodes", d.episodes.to_string());
        kv("baseline_frames", d.baseline_frames.to_string());
        kv("event_frames", d.event_frames.to_string());
        kv("segment_min", d.segment_min.to_string());
        kv("segment_max", d.segment_max.to_string());
        kv("missing_channels", d.missing_channels.to_string());
        kv("sampling_rate", d.sampling_rate.to_string());
        kv("resting_level", d.resting_level.to_string());
        kv("data_seed", d.seed.to_string());
        for (i, p) in d.patterns.iter().enumerate() {
            let pk = |f: &str| format!("pattern.{i}.{f}");
            kv(&pk("kind"), p.kind.name().to_owned());
            kv(&pk("direction"), format!("{},{}", p.direction.0, p.direction.1));
            kv(&pk("angular_velocity"), p.angular_velocity.to_string());
            kv(&pk("center"), format!("{},{}", p.center.0, p.center.1));
            kv(&pk("spatial_scale"), p.spatial_scale.to_string());
            kv(&pk("amplitude"), p.amplitude.to_string());
            kv(&pk("temporal_frequency"), p.temporal_frequency.to_string());
            kv(&pk("noise"), p.noise.to_string());
            kv(&pk("jitter"), p.jitter.to_string());
            kv(&pk("baseline_weight"), p.baseline_weight.to_string());
            kv(&pk("event_weight"), p.event_weight.to_string());
        }
        kv("seq_len", self.seq_len.to_string());
        kv("pred_len", self.pred_len.to_string());
        kv("window_stride", self.window_stride.to_string());
        kv("test_episode", self.test_episode.to_string());
        kv("validation_episode", self.validation_episode.to_string());
        kv("hidden", self.arch.hidden.to_string());
        kv("layers", self.arch.layers.to_string());
        kv("peepholes", self.arch.peepholes.to_string());
        kv("reverse_reconstruction", self.arch.reverse_reconstruction.to_string());
        kv("members", self.members.to_string());
        kv("precision", self.precision.name().to_owned());
        let o: &OptimizerConfig = &self.train.opt;
        kv("learning_rate", o.learning_rate.to_string());
        kv("momentum", o.momentum.to_string());
        kv("clip_norm", o.clip_norm.to_string());
        kv("batch_size", o.batch_size.to_string());
        kv("idle_policy", o.idle.name().to_owned());
        kv("dropout", self.train.dropout.to_string());
        kv("patience", self.train.patience.to_string());
        kv("max_epochs", self.train.max_epochs.to_string());
        kv("pretrain", self.pretrain.to_string());
        kv("training", kind_name(self.train.kind).to_owned());
        kv("model_seed", self.model_seed.to_string());
        kv("pretrain_seed", self.pretrain_seed.to_string());
        kv("train_seed", self.train_seed.to_string());
        let c = &self.classifier;
        kv("classifier_hidden", format!("{},{}", c.hidden.0, c.hidden.1));
        kv("classifier_learning_rate", c.learning_rate.to_string());
        kv("classifier_momentum", c.momentum.to_string());
        kv("classifier_batch_size", c.batch_size.to_string());
        kv("classifier_max_epochs", c.max_epochs.to_string());
        kv("classifier_patience", c.patience.to_string());
        kv("classifier_bn_decay", c.bn_decay.to_string());
        kv("classifier_seed", c.seed.to_string());
        kv("classifier_features", self.classifier_features.name().to_owned());
        kv("delay_max_lag", self.delay_max_lag.to_string());
        for (k, p) in [
            ("data_path", &self.data_path),
            ("checkpoint_path", &self.checkpoint_path),
            ("report_dir", &self.report_dir),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# toy\nhidden = 8 # small\nlearning_rate=0.02\n\nprecision = f64\n").unwrap();
        assert_eq!(cfg.arch.hidden, 8);
        assert_eq!(cfg.train.opt.learning_rate, 0.02);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        let err = RunConfig::parse("hiden = 8").unwrap_err().to_string();
        assert!(err.contains("unknown key") && err.contains("hiden"), "{err}");
        assert!(RunConfig::parse("hidden = 8\nhidden = 9").unwrap_err().to_string().contains("duplicate"));
        assert!(RunConfig::parse("hidden = eight").is_err());
        assert!(RunConfig::parse("just a line").is_err());
        assert!(RunConfig::parse("momentum = 1.5").is_err());
        assert!(RunConfig::parse("pred_len = 20").is_err());
        assert!(RunConfig::parse("pattern.0.colour = red").is_err());
    }

    #[test]
    fn patterns_replace_defaults() {
        let text = "pattern.0.kind = silence\npattern.0.baseline_weight = 1\npattern.0.event_weight = 1\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.data.patterns.len(), 1);
        assert_eq!(cfg.data.patterns[0].kind, PatternKind::Silence);
        assert!(RunConfig::parse("pattern.1.kind = silence\npattern.1.baseline_weight = 1\npattern.1.event_weight = 1").is_err());
        assert!(RunConfig::parse("pattern.0.noise = 0.1").is_err());
    }
}
