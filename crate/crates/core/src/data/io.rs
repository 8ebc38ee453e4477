//! Binary recording format plus a `key=value` sidecar.
//!
//! ```text
//! "MCLSEQ01"
//! u32 T, u32 H, u32 W, u32 episode_count        (little-endian)
//! H·W mask bytes                                 (1 = valid)
//! T × (u32 episode id, u8 phase)
//! T·H·W f32 values, row-major                    (little-endian)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::synth::parse_cluster_runs;
use super::{FrameTag, Phase, Recording, RecordingMeta};
use crate::error::{Error, Result};

pub const RECORDING_MAGIC: &[u8; 8] = b"MCLSEQ01";

/// `<path>.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_recording(path: &Path, rec: &Recording) -> Result<()> {
    rec.validate()?;
    let (t, d) = (rec.num_frames(), rec.frame_dim());
    let mut buf = Vec::with_capacity(24 + d + t * 5 + t * d * 4);
    buf.extend_from_slice(RECORDING_MAGIC);
    for v in [t, rec.height, rec.width, rec.episodes().len()] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the header")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(rec.valid_mask.iter().map(|&ok| ok as u8));
    for tag in &rec.tags {
        buf.extend_from_slice(&tag.episode.to_le_bytes());
        buf.push(tag.phase as u8);
    }
    for v in &rec.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let mut meta = String::new();
    meta.push_str(&format!("sampling_rate={}\n", rec.meta.sampling_rate));
    meta.push_str(&format!("max_intensity={}\n", rec.meta.max_intensity));
    for (k, v) in &rec.meta.extra {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Data(format!("metadata entry {k:?} cannot be stored")));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(side, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("recording ends inside {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if buf.len() < 8 || r.take(8, "magic")? != RECORDING_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: "recording",
        });
    }
    let t = r.u32("header")? as usize;
    let h = r.u32("header")? as usize;
    let w = r.u32("header")? as usize;
    let episode_count = r.u32("header")? as usize;
    let d = h
        .checked_mul(w)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Malformed(format!("grid {h}×{w}")))?;
    let valid_mask = r
        .take(d, "channel mask")?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Malformed(format!("mask byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tags = Vec::with_capacity(t);
    for _ in 0..t {
        let episode = r.u32("frame tags")?;
        let phase = Phase::from_u8(r.take(1, "frame tags")?[0]).map_err(|e| Error::Malformed(e.to_string()))?;
        tags.push(FrameTag { episode, phase });
    }
    let n = t
        .checked_mul(d)
        .ok_or_else(|| Error::Malformed("frame count overflows".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("frame count overflows".into()))?, "frames")?;
    let frames: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if r.pos != buf.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut rec = Recording::new(h, w, frames, valid_mask, tags)?;
    if rec.episodes().len() != episode_count {
        return Err(Error::Malformed(format!(
            "header declares {episode_count} episodes, tags contain {}",
            rec.episodes().len()
        )));
    }

    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        rec.meta = parse_meta(&text)?;
        if let Some(runs) = rec.meta.extra.get("cluster_runs") {
            rec.clusters = Some(parse_cluster_runs(runs, t)?);
        }
    } else {
        log::warn!("{} not found; using default metadata", side.display());
        let peak = rec.frames.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        rec.meta.max_intensity = if peak > 0.0 { peak } else { 1.0 };
    }
    Ok(rec)
}

fn parse_meta(text: &str) -> Result<RecordingMeta> {
    let mut meta = RecordingMeta::default();
    let mut extra = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("metadata line {}: expected key=value", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x > 0.0)
                .ok_or_else(|| Error::Data(format!("metadata {k}: expected a positive number, got {v:?}")))
        };
        match k {
            "sampling_rate" => meta.sampling_rate = num()?,
            "max_intensity" => meta.max_intensity = num()?,
            _ => {
                extra.insert(k.to_owned(), v.to_owned());
            }
        }
    }
    meta.extra = extra;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig, PatternKind, PatternSpec};

    fn sample() -> Recording {
        let mut a = PatternSpec::new(PatternKind::PlaneWave);
        a.noise = 0.05;
        a.baseline_weight = 1.0;
        a.event_weight = 0.5;
        let mut b = PatternSpec::new(PatternKind::Spiral);
        b.event_weight = 0.5;
        generate_synthetic(&GeneratorConfig {
            height: 3,
            width: 4,
            episodes: 2,
            baseline_frames: 7,
            event_frames: 9,
            segment_min: 3,
            segment_max: 5,
            patterns: vec![a, b],
            missing_channels: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.bin");
        let rec = sample();
        write_recording(&path, &rec).unwrap();
        let back = read_recording(&path).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn layout_is_bit_exact() {
        let tags = vec![
            FrameTag {
                episode: 7,
                phase: Phase::Baseline,
            },
            FrameTag {
                episode: 7,
                phase: Phase::Event,
            },
        ];
        let rec = Recording::new(1, 2, vec![1.0, -2.0, 0.5, 0.0], vec![true, false], tags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.bin");
        write_recording(&path, &rec).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expected = b"MCLSEQ01".to_vec();
        for v in [2u32, 1, 2, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&[1, 0]);
        expected.extend_from_slice(&[7, 0, 0, 0, 0, 7, 0, 0, 0, 1]);
        for v in [1.0f32, -2.0, 0.5, 0.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        let meta = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(meta.contains("sampling_rate=277.78\n"));
        assert!(meta.contains("max_intensity=1\n"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.bin");
        write_recording(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_recording(&path), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_recording(&path), Err(Error::BadMagic { .. })));

        let mut extra = bytes.clone();
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(matches!(read_recording(&path), Err(Error::Malformed(_))));

        assert!(matches!(
            read_recording(&dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }
}
