//! Grid recordings: synthetic generation, missing-channel filling, sliding
//! windows, episode-disjoint splits, delay maps and the on-disk format.

mod delay;
mod fill;
mod io;
mod synth;
mod window;

use std::collections::BTreeMap;

pub use delay::{delay_map, delay_map_with_reference, DelayMap};
pub use fill::{fill_missing, FILL_TOLERANCE};
pub use io::{read_recording, sidecar_path, write_recording, RECORDING_MAGIC};
pub use synth::{generate_synthetic, GeneratorConfig, PatternKind, PatternSpec};
pub use window::{sliding_windows, split_by_episode, DatasetSplit, SequenceSample};

use crate::error::{Error, Result};

/// Recording phase. Analyses label baseline as non-seizure and event as seizure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Baseline = 0,
    Event = 1,
}

impl Phase {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Phase::Baseline),
            1 => Ok(Phase::Event),
            other => Err(Error::Data(format!("unknown phase tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Event => "event",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" | "non-seizure" => Ok(Phase::Baseline),
            "event" | "seizure" => Ok(Phase::Event),
            other => Err(Error::Data(format!("unknown phase tag {other:?}"))),
        }
    }

    pub const ALL: [Phase; 2] = [Phase::Baseline, Phase::Event];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTag {
    pub episode: u32,
    pub phase: Phase,
}

/// Human-readable metadata stored next to the binary recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingMeta {
    pub sampling_rate: f64,
    /// Largest absolute value in the (normalized) frames; the PSNR peak.
    pub max_intensity: f64,
    /// Generator description and any other free-form entries.
    pub extra: BTreeMap<String, String>,
}

impl Default for RecordingMeta {
    fn default() -> Self {
        Self {
            sampling_rate: 277.78,
            max_intensity: 1.0,
            extra: BTreeMap::new(),
        }
    }
}

/// `T × H × W` frames with channel validity and per-frame episode tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub height: usize,
    pub width: usize,
    /// Row-major frames, `len == T·H·W`.
    pub frames: Vec<f32>,
    /// `H × W`, `true` where the channel is present.
    pub valid_mask: Vec<bool>,
    pub tags: Vec<FrameTag>,
    /// Ground-truth pattern cluster per frame, known only for synthetic data.
    pub clusters: Option<Vec<u16>>,
    pub meta: RecordingMeta,
}

impl Recording {
    pub fn new(
        height: usize,
        width: usize,
        frames: Vec<f32>,
        valid_mask: Vec<bool>,
        tags: Vec<FrameTag>,
    ) -> Result<Self> {
        let rec = Self {
            height,
            width,
            frames,
            valid_mask,
            tags,
            clusters: None,
            meta: RecordingMeta::default(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.frame_dim();
        if d == 0 {
            return Err(Error::Data("grid must be at least 1×1".into()));
        }
        if self.valid_mask.len() != d {
            return Err(Error::Data(format!(
                "mask has {} entries, grid has {d}",
                self.valid_mask.len()
            )));
        }
        if self.frames.len() != self.tags.len() * d {
            return Err(Error::Data(format!(
                "{} values for {} frames of {d} channels",
                self.frames.len(),
                self.tags.len()
            )));
        }
        if let Some(c) = &self.clusters {
            if c.len() != self.tags.len() {
                return Err(Error::Data("cluster labels do not cover every frame".into()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn frame_dim(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn num_frames(&self) -> usize {
        self.tags.len()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let d = self.frame_dim();
        &self.frames[t * d..(t + 1) * d]
    }

    /// Distinct episode ids in order of first appearance.
    pub fn episodes(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for t in &self.tags {
            if out.last() != Some(&t.episode) && !out.contains(&t.episode) {
                out.push(t.episode);
            }
        }
        out
    }

    /// Maximal runs of frames sharing `(episode, phase)`: `(start, len, tag)`.
    pub fn blocks(&self) -> Vec<(usize, usize, FrameTag)> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 1..=self.tags.len() {
            if t == self.tags.len() || self.tags[t] != self.tags[start] {
                out.push((start, t - start, self.tags[start]));
                start = t;
            }
        }
        out
    }
}
