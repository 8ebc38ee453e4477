//! Choosing which ensemble member predicts a given window.

use rayon::prelude::*;

use crate::classifier::MlpClassifier;
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::seq2seq::{forward_eval, Seq2SeqModel, SequenceBatch, SequenceSpec};

/// Windows per evaluation chunk; only bounds memory.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Lowest prediction error against the true future. Not deployable.
    Oracle,
    /// Lowest reconstruction error of the observed prefix.
    Reconstruction,
    /// Highest classifier probability.
    Classifier,
    /// Mean of all members' predictions.
    Average,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Oracle,
        Strategy::Reconstruction,
        Strategy::Classifier,
        Strategy::Average,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "oracle" => Ok(Strategy::Oracle),
            "recon" | "reconstruction" => Ok(Strategy::Reconstruction),
            "classifier" => Ok(Strategy::Classifier),
            "average" => Ok(Strategy::Average),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    /// Parses a comma-separated list, keeping the given order.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let st = Self::parse(part)?;
            if !out.contains(&st) {
                out.push(st);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no strategy given".into()));
        }
        Ok(out)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Oracle => "oracle",
            Strategy::Reconstruction => "recon",
            Strategy::Classifier => "classifier",
            Strategy::Average => "average",
        }
    }

    pub fn deployable(self) -> bool {
        self != Strategy::Oracle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Zero-based member index.
    pub model: usize,
    /// Per-member score: a loss for oracle/reconstruction, a probability for
    /// the classifier.
    pub scores: Vec<f64>,
    pub strategy: Strategy,
}

impl SelectionResult {
    /// Member number as shown in reports, `1..=M`.
    pub fn one_based(&self) -> usize {
        self.model + 1
    }
}

/// Which encoder layers feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureLayers {
    #[default]
    Top,
    All,
}

impl FeatureLayers {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(FeatureLayers::Top),
            "all" => Ok(FeatureLayers::All),
            other => Err(Error::Config(format!("unknown feature layers {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureLayers::Top => "top",
            FeatureLayers::All => "all",
        }
    }

    pub fn width(self, arch_hidden: usize, layers: usize) -> usize {
        match self {
            FeatureLayers::Top => arch_hidden,
            FeatureLayers::All => arch_hidden * layers,
        }
    }
}

/// First index of the smallest value.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// First index of the largest value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn prefix_batch<T: Real>(spec: &SequenceSpec, windows: &[&[f32]]) -> Result<SequenceBatch<T>> {
    let d = spec.frame_dim;
    let n_in = spec.input_len();
    let mut frames: Vec<Matrix<T>> = (0..n_in).map(|_| Matrix::zeros(windows.len(), d)).collect();
    for (r, w) in windows.iter().enumerate() {
        if w.len() < n_in * d || w.len() % d != 0 {
            return Err(Error::Shape {
                op: "window prefix",
                left: (w.len(), 1),
                right: (n_in * d, 1),
            });
        }
        for (t, f) in frames.iter_mut().enumerate() {
            for (dst, &src) in f.row_mut(r).iter_mut().zip(&w[t * d..(t + 1) * d]) {
                *dst = T::of(src as f64);
            }
        }
    }
    Ok(SequenceBatch { frames })
}

/// Everything the selection strategies and metrics need, from one eval-mode
/// pass of every member over every window.
#[derive(Debug, Clone)]
pub struct EnsembleEval {
    pub members: usize,
    pub pred_len: usize,
    pub frame_dim: usize,
    /// `pred_sse[k]` is `N × M`: squared error of the frame at future offset
    /// `k`, summed over pixels.
    pub pred_sse: Vec<Matrix<f64>>,
    /// `N × M` reconstruction mean squared error over the observed prefix.
    pub recon_mse: Matrix<f64>,
    /// `N × (M · width)` concatenated encoder states after the last input.
    pub features: Matrix<f64>,
    /// `average_sse[k][i]`: squared error of the averaged prediction.
    pub average_sse: Vec<Vec<f64>>,
}

fn check_members<T: Real>(members: &[Seq2SeqModel<T>]) -> Result<()> {
    let first = members.first().ok_or_else(|| Error::Config("no models".into()))?;
    if members.iter().any(|m| m.spec != first.spec || m.arch != first.arch) {
        return Err(Error::Config("members disagree on spec or architecture".into()));
    }
    Ok(())
}

struct MemberChunk {
    pred_sse: Vec<Vec<f64>>,
    recon_mse: Vec<f64>,
    features: Vec<Vec<f64>>,
    prediction: Vec<Vec<f64>>,
}

fn run_member<T: Real>(
    model: &Seq2SeqModel<T>,
    batch: &SequenceBatch<T>,
    windows: &[&[f32]],
    layers: FeatureLayers,
) -> Result<MemberChunk> {
    let spec = &model.spec;
    let (d, n_in, n) = (spec.frame_dim, spec.input_len(), spec.pred_len);
    let out = forward_eval(model, batch)?;
    let b = windows.len();
    let mut chunk = MemberChunk {
        pred_sse: vec![vec![0.0; b]; n],
        recon_mse: vec![0.0; b],
        features: Vec::with_capacity(b),
        prediction: Vec::with_capacity(b),
    };
    for (r, w) in windows.iter().enumerate() {
        let has_future = w.len() >= spec.seq_len * d;
        let mut pred = Vec::with_capacity(n * d);
        for (k, frame) in out.prediction.iter().enumerate() {
            let row = frame.row(r);
            pred.extend(row.iter().map(|v| v.as_f64()));
            if has_future {
                let truth = &w[(n_in + k) * d..(n_in + k + 1) * d];
                chunk.pred_sse[k][r] = row
                    .iter()
                    .zip(truth)
                    .map(|(p, &t)| (p.as_f64() - t as f64).powi(2))
                    .sum();
            }
        }
        chunk.prediction.push(pred);
        let mut sse = 0.0;
        for (k, frame) in out.reconstruction.iter().enumerate() {
            let t = model.recon_target(k);
            let truth = &w[t * d..(t + 1) * d];
            sse += frame
                .row(r)
                .iter()
                .zip(truth)
                .map(|(p, &t)| (p.as_f64() - t as f64).powi(2))
                .sum::<f64>();
        }
        chunk.recon_mse[r] = sse / (n_in * d) as f64;
        let states = &out.encoder.final_states;
        let feats: Vec<f64> = match layers {
            FeatureLayers::Top => out.encoder_top_h().row(r).iter().map(|v| v.as_f64()).collect(),
            FeatureLayers::All => states
                .iter()
                .flat_map(|s| s.h.row(r).iter().map(|v| v.as_f64()))
                .collect(),
        };
        chunk.features.push(feats);
    }
    Ok(chunk)
}

/// Evaluates every member on every window. Windows shorter than `L` frames
/// (prefix only) get zero prediction errors.
pub fn evaluate_windows<T: Real>(
    members: &[Seq2SeqModel<T>],
    windows: &[&[f32]],
    layers: FeatureLayers,
) -> Result<EnsembleEval> {
    check_members(members)?;
    let spec = members[0].spec;
    let arch = members[0].arch;
    let (m, n, d) = (members.len(), spec.pred_len, spec.frame_dim);
    let width = layers.width(arch.hidden, arch.layers);
    let total = windows.len();
    let mut eval = EnsembleEval {
        members: m,
        pred_len: n,
        frame_dim: d,
        pred_sse: (0..n).map(|_| Matrix::zeros(total, m)).collect(),
        recon_mse: Matrix::zeros(total, m),
        features: Matrix::zeros(total, m * width),
        average_sse: vec![vec![0.0; total]; n],
    };
    let n_in = spec.input_len();
    for (c, chunk) in windows.chunks(EVAL_CHUNK).enumerate() {
        let base = c * EVAL_CHUNK;
        let batch: SequenceBatch<T> = prefix_batch(&spec, chunk)?;
        let results: Vec<MemberChunk> = members
            .par_iter()
            .map(|model| run_member(model, &batch, chunk, layers))
            .collect::<Result<_>>()?;
        for (j, res) in results.iter().enumerate() {
            for r in 0..chunk.len() {
                for k in 0..n {
                    eval.pred_sse[k].set(base + r, j, res.pred_sse[k][r]);
                }
                eval.recon_mse.set(base + r, j, res.recon_mse[r]);
                eval.features.row_mut(base + r)[j * width..(j + 1) * width].copy_from_slice(&res.features[r]);
            }
        }
        for (r, w) in chunk.iter().enumerate() {
            if w.len() < spec.seq_len * d {
                continue;
            }
            for k in 0..n {
                let truth = &w[(n_in + k) * d..(n_in + k + 1) * d];
                let mut sse = 0.0;
                for (p, &t) in truth.iter().enumerate() {
                    let mean = results.iter().map(|res| res.prediction[r][k * d + p]).sum::<f64>() / m as f64;
                    sse += (mean - t as f64).powi(2);
                }
                eval.average_sse[k][base + r] = sse;
            }
        }
    }
    Ok(eval)
}

pub fn evaluate_ensemble<T: Real>(
    members: &[Seq2SeqModel<T>],
    samples: &[SequenceSample],
    layers: FeatureLayers,
) -> Result<EnsembleEval> {
    let windows: Vec<&[f32]> = samples.iter().map(|s| s.frames.as_slice()).collect();
    evaluate_windows(members, &windows, layers)
}

impl EnsembleEval {
    pub fn len(&self) -> usize {
        self.recon_mse.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prediction MSE of member `m` on window `i`.
    pub fn pred_mse(&self, i: usize, m: usize) -> f64 {
        self.pred_sse.iter().map(|k| k.get(i, m)).sum::<f64>() / (self.pred_len * self.frame_dim) as f64
    }

    pub fn oracle(&self, i: usize) -> SelectionResult {
        let scores: Vec<f64> = (0..self.members).map(|m| self.pred_mse(i, m)).collect();
        SelectionResult {
            model: argmin(&scores),
            scores,
            strategy: Strategy::Oracle,
        }
    }

    pub fn reconstruction(&self, i: usize) -> SelectionResult {
        let scores = self.recon_mse.row(i).to_vec();
        SelectionResult {
            model: argmin(&scores),
            scores,
            strategy: Strategy::Reconstruction,
        }
    }

    /// Classifier choices for every window.
    pub fn classifier(&self, clf: &MlpClassifier) -> Result<Vec<SelectionResult>> {
        if clf.classes() != self.members || clf.input_dim() != self.features.cols() {
            return Err(Error::Shape {
                op: "classifier input",
                left: (clf.input_dim(), clf.classes()),
                right: (self.features.cols(), self.members),
            });
        }
        let probs = clf.predict_proba(&self.features)?;
        Ok((0..self.len())
            .map(|i| {
                let scores = probs.row(i).to_vec();
                SelectionResult {
                    model: argmax(&scores),
                    scores,
                    strategy: Strategy::Classifier,
                }
            })
            .collect())
    }

    /// Zero-based member chosen per window; `None` for the average baseline.
    pub fn choices(&self, strategy: Strategy, clf: Option<&MlpClassifier>) -> Result<Option<Vec<usize>>> {
        Ok(match strategy {
            Strategy::Oracle => Some((0..self.len()).map(|i| self.oracle(i).model).collect()),
            Strategy::Reconstruction => Some((0..self.len()).map(|i| self.reconstruction(i).model).collect()),
            Strategy::Classifier => {
                let clf = clf.ok_or_else(|| Error::Config("classifier strategy needs a trained classifier".into()))?;
                Some(self.classifier(clf)?.into_iter().map(|s| s.model).collect())
            }
            Strategy::Average => None,
        })
    }

    /// Per-offset squared error of each window under `strategy`.
    pub fn strategy_sse(&self, strategy: Strategy, clf: Option<&MlpClassifier>) -> Result<Vec<Vec<f64>>> {
        Ok(match self.choices(strategy, clf)? {
            Some(choice) => (0..self.pred_len)
                .map(|k| choice.iter().enumerate().map(|(i, &m)| self.pred_sse[k].get(i, m)).collect())
                .collect(),
            None => self.average_sse.clone(),
        })
    }
}

fn single<T: Real>(members: &[Seq2SeqModel<T>], window: &[f32]) -> Result<EnsembleEval> {
    evaluate_windows(members, &[window], FeatureLayers::Top)
}

/// Member with the lowest prediction error on a full window.
pub fn oracle_select<T: Real>(members: &[Seq2SeqModel<T>], window: &[f32]) -> Result<SelectionResult> {
    check_members(members)?;
    let spec = members[0].spec;
    if window.len() != spec.seq_len * spec.frame_dim {
        return Err(Error::Shape {
            op: "oracle needs the full window",
            left: (window.len(), 1),
            right: (spec.seq_len * spec.frame_dim, 1),
        });
    }
    Ok(single(members, window)?.oracle(0))
}

/// Member with the lowest reconstruction error on the observed prefix.
pub fn reconstruction_select<T: Real>(members: &[Seq2SeqModel<T>], prefix: &[f32]) -> Result<SelectionResult> {
    Ok(single(members, prefix)?.reconstruction(0))
}

/// Concatenated encoder states (member order) after the last observed frame.
pub fn classifier_features<T: Real>(
    members: &[Seq2SeqModel<T>],
    prefix: &[f32],
    layers: FeatureLayers,
) -> Result<Vec<f64>> {
    Ok(evaluate_windows(members, &[prefix], layers)?.features.row(0).to_vec())
}

pub fn classifier_select<T: Real>(
    members: &[Seq2SeqModel<T>],
    clf: &MlpClassifier,
    prefix: &[f32],
    layers: FeatureLayers,
) -> Result<SelectionResult> {
    let e = evaluate_windows(members, &[prefix], layers)?;
    Ok(e.classifier(clf)?.remove(0))
}

/// Oracle labels (lowest prediction error) for classifier training.
pub fn oracle_labels(eval: &EnsembleEval) -> Vec<usize> {
    (0..eval.len()).map(|i| eval.oracle(i).model).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
        }
        assert_eq!(
            Strategy::parse_list("oracle,recon,oracle").unwrap(),
            vec![Strategy::Oracle, Strategy::Reconstruction]
        );
        assert!(Strategy::parse("best").is_err());
        assert!(!Strategy::Oracle.deployable());
    }

    #[test]
    fn arg_helpers_break_ties_low() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
    }
}
