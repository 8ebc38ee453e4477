use super::Recording;
use crate::error::{Error, Result};

/// Largest per-sweep change at which the harmonic fill is considered converged.
pub const FILL_TOLERANCE: f64 = 1e-6;

const MAX_SWEEPS: usize = 100_000;

/// Fills invalid channels with the harmonic interpolant of the valid ones on
/// the 4-connected grid graph: every filled value equals the mean of its grid
/// neighbours. Valid channels are copied bit-for-bit; the returned recording
/// marks every channel valid.
pub fn fill_missing(recording: &Recording, valid_mask: &[bool]) -> Result<Recording> {
    let (h, w) = (recording.height, recording.width);
    let d = h * w;
    if valid_mask.len() != d {
        return Err(Error::Data(format!(
            "mask has {} entries, grid has {d}",
            valid_mask.len()
        )));
    }
    let holes: Vec<usize> = (0..d).filter(|&i| !valid_mask[i]).collect();
    let mut out = recording.clone();
    out.valid_mask = vec![true; d];
    if holes.is_empty() {
        return Ok(out);
    }
    if holes.len() == d {
        return Err(Error::Data("cannot fill a frame with no valid channel".into()));
    }
    let neighbours: Vec<Vec<usize>> = holes
        .iter()
        .map(|&i| {
            let (r, c) = (i / w, i % w);
            let mut n = Vec::with_capacity(4);
            if r > 0 {
                n.push(i - w);
            }
            if r + 1 < h {
                n.push(i + w);
            }
            if c > 0 {
                n.push(i - 1);
            }
            if c + 1 < w {
                n.push(i + 1);
            }
            n
        })
        .collect();
    let filled = out.frames.len() / d;
    out.meta
        .extra
        .insert("filled_channels".into(), holes.len().to_string());

    for t in 0..filled {
        let frame = &recording.frames[t * d..(t + 1) * d];
        let mut v: Vec<f64> = frame.iter().map(|&x| x as f64).collect();
        let valid_mean = {
            let (s, n) = (0..d)
                .filter(|&i| valid_mask[i])
                .fold((0.0, 0usize), |(s, n), i| (s + v[i], n + 1));
            s / n as f64
        };
        for &i in &holes {
            v[i] = valid_mean;
        }
        // Gauss-Seidel sweeps in fixed hole order.
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut change = 0.0f64;
            for (k, &i) in holes.iter().enumerate() {
                let nb = &neighbours[k];
                let mean = nb.iter().map(|&j| v[j]).sum::<f64>() / nb.len() as f64;
                change = change.max((mean - v[i]).abs());
                v[i] = mean;
            }
            if change < FILL_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Data(format!("harmonic fill did not converge at frame {t}")));
        }
        let dst = &mut out.frames[t * d..(t + 1) * d];
        for &i in &holes {
            dst[i] = v[i] as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FrameTag, Phase};

    fn rec(h: usize, w: usize, frames: Vec<f32>, mask: Vec<bool>) -> Recording {
        let t = frames.len() / (h * w);
        let tags = vec![
            FrameTag {
                episode: 1,
                phase: Phase::Baseline
            };
            t
        ];
        Recording::new(h, w, frames, mask, tags).unwrap()
    }

    #[test]
    fn all_valid_is_identity() {
        let r = rec(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]);
        assert_eq!(fill_missing(&r, &r.valid_mask).unwrap().frames, r.frames);
    }

    #[test]
    fn constants_are_preserved() {
        let mut mask = vec![true; 25];
        mask[6] = false;
        mask[7] = false;
        mask[12] = false;
        let mut frames = vec![0.75f32; 25];
        for &i in &[6, 7, 12] {
            frames[i] = -9.0;
        }
        let r = rec(5, 5, frames, mask.clone());
        let f = fill_missing(&r, &mask).unwrap();
        assert!(f.frames.iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn single_hole_takes_neighbour_mean() {
        // 3×3 grid, hole in the middle, neighbours 1 (up), 4 (down), 2 (left), 3 (right).
        let frames = vec![0.0, 1.0, 0.0, 2.0, 99.0, 3.0, 0.0, 4.0, 0.0];
        let mut mask = vec![true; 9];
        mask[4] = false;
        let r = rec(3, 3, frames, mask.clone());
        let f = fill_missing(&r, &mask).unwrap();
        assert!((f.frames[4] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn valid_channels_untouched_and_idempotent() {
        let mut mask = vec![true; 16];
        mask[0] = false;
        mask[9] = false;
        let frames: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let r = rec(4, 4, frames, mask.clone());
        let once = fill_missing(&r, &mask).unwrap();
        for t in 0..2 {
            for i in 0..16 {
                if mask[i] {
                    assert_eq!(once.frames[t * 16 + i].to_bits(), r.frames[t * 16 + i].to_bits());
                }
            }
        }
        let twice = fill_missing(&once, &once.valid_mask.clone()).unwrap();
        assert_eq!(once.frames, twice.frames);
        let again = fill_missing(&once, &mask).unwrap();
        for (a, b) in once.frames.iter().zip(&again.frames) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn all_invalid_is_an_error() {
        let r = rec(2, 2, vec![0.0; 4], vec![false; 4]);
        assert!(fill_missing(&r, &r.valid_mask).is_err());
    }
}
