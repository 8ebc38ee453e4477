use std::collections::BTreeSet;

use super::{Phase, Recording};
use crate::error::{Error, Result};

/// One window of `L` consecutive frames, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Position in the full window list; keys per-sample randomness.
    pub id: usize,
    /// `L · H · W` values.
    pub frames: Vec<f32>,
    pub episode: u32,
    pub phase: Phase,
    /// First frame in the recording.
    pub start: usize,
    /// Index among the windows of the same `(episode, phase)` block.
    pub window_index: usize,
    /// Majority ground-truth cluster, when the recording carries labels.
    pub cluster: Option<u16>,
}

impl SequenceSample {
    pub fn len(&self, frame_dim: usize) -> usize {
        self.frames.len() / frame_dim
    }
}

/// Dense windows of `seq_len` frames at `stride`, never crossing a block of
/// constant `(episode, phase)`. Blocks shorter than `seq_len` yield nothing.
pub fn sliding_windows(recording: &Recording, seq_len: usize, stride: usize) -> Result<Vec<SequenceSample>> {
    if seq_len == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    recording.validate()?;
    let d = recording.frame_dim();
    let mut out = Vec::new();
    for (start, len, tag) in recording.blocks() {
        if len < seq_len {
            log::warn!(
                "episode {} ({}) has {len} frames, shorter than the window length {seq_len}; skipped",
                tag.episode,
                tag.phase.name()
            );
            continue;
        }
        for (k, s) in (start..=start + len - seq_len).step_by(stride).enumerate() {
            let cluster = recording.clusters.as_ref().map(|c| majority(&c[s..s + seq_len]));
            out.push(SequenceSample {
                id: out.len(),
                frames: recording.frames[s * d..(s + seq_len) * d].to_vec(),
                episode: tag.episode,
                phase: tag.phase,
                start: s,
                window_index: k,
                cluster,
            });
        }
    }
    Ok(out)
}

/// Most frequent label; ties go to the smallest.
fn majority(labels: &[u16]) -> u16 {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|&(_, n)| n == best).map(|(l, _)| l).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    pub train_episodes: Vec<u32>,
    pub validation_episodes: Vec<u32>,
    pub test_episodes: Vec<u32>,
}

/// Holds out every window (baseline and event) of one episode for test and
/// another for validation; the remaining episodes train.
pub fn split_by_episode(windows: &[SequenceSample], test_episode: u32, val_episode: u32) -> Result<DatasetSplit> {
    if test_episode == val_episode {
        return Err(Error::Config(format!(
            "test and validation episodes must differ (both {test_episode})"
        )));
    }
    let present: BTreeSet<u32> = windows.iter().map(|w| w.episode).collect();
    for id in [test_episode, val_episode] {
        if !present.contains(&id) {
            return Err(Error::UnknownEpisode(id));
        }
    }
    let mut split = DatasetSplit {
        test_episodes: vec![test_episode],
        validation_episodes: vec![val_episode],
        train_episodes: present
            .iter()
            .copied()
            .filter(|&e| e != test_episode && e != val_episode)
            .collect(),
        ..Default::default()
    };
    for w in windows {
        let dst = if w.episode == test_episode {
            &mut split.test
        } else if w.episode == val_episode {
            &mut split.validation
        } else {
            &mut split.train
        };
        dst.push(w.clone());
    }
    Ok(split)
}
