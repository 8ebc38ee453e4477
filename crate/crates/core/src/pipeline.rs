//! End-to-end steps shared by the command-line driver and the tests:
//! data preparation, training runs, classifier fitting, evaluation,
//! prediction and delay maps.

use std::fmt::Write as _;

use crate::checkpoint::{Checkpoint, StoredClassifier};
use crate::classifier::{train_classifier, ClassifierEpoch};
use crate::config::RunConfig;
use crate::data::{
    delay_map, fill_missing, sliding_windows, split_by_episode, DatasetSplit, DelayMap, FrameTag, Recording,
    SequenceSample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::mcl::{diversity_pretrain, train, Ensemble, EpochKind, EpochRecord, TrainState};
use crate::numerics::{Real, Rng};
use crate::selection::{evaluate_ensemble, evaluate_windows, oracle_labels, FeatureLayers, Strategy};
use crate::seq2seq::{forward_eval, Seq2SeqModel, SequenceBatch};

/// Filled recording and its episode-disjoint window split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub recording: Recording,
    pub split: DatasetSplit,
}

pub fn prepare_data(cfg: &RunConfig, raw: &Recording) -> Result<PreparedData> {
    let recording = fill_missing(raw, &raw.valid_mask)?;
    let windows = sliding_windows(&recording, cfg.seq_len, cfg.window_stride)?;
    let split = split_by_episode(&windows, cfg.test_episode, cfg.validation_episode)?;
    if split.train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    Ok(PreparedData { recording, split })
}

/// What kind of model a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Diversity pretraining (if enabled in the config), then MCL.
    Ensemble,
    /// MCL straight from random initialization.
    NoPretrain,
    /// One member of the configured width.
    Single,
    /// One member `k` times as wide as the configured width.
    Wide(usize),
    /// Every member trained on every sample from its own initialization;
    /// the baseline whose predictions are averaged.
    Independent,
}

/// The config a mode actually trains with.
pub fn effective_config(cfg: &RunConfig, mode: TrainMode) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match mode {
        TrainMode::Ensemble => {}
        TrainMode::NoPretrain => c.pretrain = false,
        TrainMode::Single => {
            c.members = 1;
            c.pretrain = false;
        }
        TrainMode::Wide(k) => {
            if k == 0 {
                return Err(Error::Config("width multiplier must be at least 1".into()));
            }
            c.members = 1;
            c.pretrain = false;
            c.arch.hidden *= k;
        }
        TrainMode::Independent => {
            c.pretrain = false;
            c.train.kind = EpochKind::Independent;
        }
    }
    c.validate()?;
    Ok(c)
}

/// Fresh ensemble from the config seeds, diversity-pretrained when the
/// config asks for it. `cfg` should already be an effective config.
pub fn initial_checkpoint<T: Real>(cfg: &RunConfig, train: &[SequenceSample]) -> Result<Checkpoint<T>> {
    let spec = cfg.sequence_spec()?;
    let mut ens = Ensemble::<T>::init(&Rng::new(cfg.model_seed), cfg.members, spec, cfg.arch)?;
    if cfg.pretrain && cfg.members > 1 {
        diversity_pretrain(&mut ens, train, &cfg.train, &Rng::new(cfg.pretrain_seed))?;
    }
    let mut ckpt = Checkpoint::new(ens, TrainState::new(cfg.train_seed));
    ckpt.config = cfg.to_text();
    Ok(ckpt)
}

/// Runs epochs from the checkpoint's position until early stopping or the
/// epoch limit. Any stored classifier is dropped because the members change.
pub fn continue_training<T: Real>(
    ckpt: Checkpoint<T>,
    cfg: &RunConfig,
    data: &PreparedData,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint<T>> {
    let best = ckpt.best_ensemble()?;
    let outcome = train(
        ckpt.ensemble,
        &data.split.train,
        &data.split.validation,
        &cfg.train,
        ckpt.state,
        best,
        on_epoch,
    )?;
    let mut log = ckpt.log;
    log.extend(outcome.log);
    Ok(Checkpoint {
        ensemble: outcome.last,
        best: Some(outcome.best.members),
        classifier: None,
        state: outcome.state,
        log,
        config: cfg.to_text(),
    })
}

/// Initializes and trains in one go.
pub fn train_run<T: Real>(
    cfg: &RunConfig,
    mode: TrainMode,
    data: &PreparedData,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint<T>> {
    let cfg = effective_config(cfg, mode)?;
    let ckpt = initial_checkpoint(&cfg, &data.split.train)?;
    continue_training(ckpt, &cfg, data, on_epoch)
}

/// Fits the selection classifier on encoder features, labelled with each
/// training window's lowest-prediction-error member.
pub fn fit_classifier<T: Real>(
    ckpt: &Checkpoint<T>,
    cfg: &RunConfig,
    data: &PreparedData,
) -> Result<(StoredClassifier, Vec<ClassifierEpoch>)> {
    let members = ckpt.inference_members();
    let layers = cfg.classifier_features;
    if data.split.validation.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let tr = evaluate_ensemble(members, &data.split.train, layers)?;
    let va = evaluate_ensemble(members, &data.split.validation, layers)?;
    let (model, log) = train_classifier(
        &tr.features,
        &oracle_labels(&tr),
        &va.features,
        &oracle_labels(&va),
        members.len(),
        &cfg.classifier,
    )?;
    Ok((StoredClassifier { model, layers }, log))
}

/// Full report on the test split.
pub fn evaluate_checkpoint<T: Real>(
    ckpt: &Checkpoint<T>,
    data: &PreparedData,
    strategies: &[Strategy],
    baselines: &[(String, Vec<Seq2SeqModel<T>>)],
) -> Result<EvalReport> {
    let clf = ckpt.classifier.as_ref();
    if strategies.contains(&Strategy::Classifier) && clf.is_none() {
        return Err(Error::Config(
            "classifier selection needs a checkpoint with a trained classifier".into(),
        ));
    }
    evaluate(
        ckpt.inference_members(),
        &data.split.test,
        strategies,
        clf.map(|c| &c.model),
        clf.map_or(FeatureLayers::Top, |c| c.layers),
        data.recording.meta.max_intensity,
        baselines,
    )
}

/// Predicted frames (`n × D` each) for every window, with the chosen member
/// per window (`None` for the average).
pub fn predict_windows<T: Real>(
    ckpt: &Checkpoint<T>,
    windows: &[SequenceSample],
    strategy: Strategy,
) -> Result<(Vec<Vec<f32>>, Vec<Option<usize>>)> {
    let members = ckpt.inference_members();
    let clf = ckpt.classifier.as_ref();
    if strategy == Strategy::Classifier && clf.is_none() {
        return Err(Error::Config("classifier selection needs a trained classifier".into()));
    }
    let views: Vec<&[f32]> = windows.iter().map(|w| w.frames.as_slice()).collect();
    let eval = evaluate_windows(members, &views, clf.map_or(FeatureLayers::Top, |c| c.layers))?;
    let spec = members[0].spec;
    let out_len = spec.pred_len * spec.frame_dim;
    match eval.choices(strategy, clf.map(|c| &c.model))? {
        Some(choice) => {
            let mut preds = vec![Vec::new(); windows.len()];
            for (m, model) in members.iter().enumerate() {
                let rows: Vec<usize> = (0..windows.len()).filter(|&i| choice[i] == m).collect();
                for (i, p) in rows.iter().zip(member_predictions(model, &views, &rows)?) {
                    preds[*i] = p;
                }
            }
            Ok((preds, choice.into_iter().map(Some).collect()))
        }
        None => {
            let all: Vec<usize> = (0..windows.len()).collect();
            let mut sum = vec![vec![0.0f64; out_len]; windows.len()];
            for model in members {
                for (acc, p) in sum.iter_mut().zip(member_predictions(model, &views, &all)?) {
                    acc.iter_mut().zip(&p).for_each(|(a, &v)| *a += v as f64);
                }
            }
            let m = members.len() as f64;
            let preds = sum.into_iter().map(|s| s.into_iter().map(|v| (v / m) as f32).collect()).collect();
            Ok((preds, vec![None; windows.len()]))
        }
    }
}

fn member_predictions<T: Real>(model: &Seq2SeqModel<T>, windows: &[&[f32]], rows: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let batch = SequenceBatch::<T>::from_windows(&model.spec, chunk.iter().map(|&i| windows[i]))?;
        let o = forward_eval(model, &batch)?;
        for r in 0..chunk.len() {
            out.push(o.prediction.iter().flat_map(|f| f.row(r).iter().map(|v| v.as_f64() as f32)).collect());
        }
    }
    Ok(out)
}

/// Predictions for every window of the filled recording, laid out as a
/// recording of `windows × n` frames tagged with each window's episode and
/// phase. The window starts and chosen members are kept in the metadata.
pub fn predict_recording<T: Real>(
    ckpt: &Checkpoint<T>,
    cfg: &RunConfig,
    raw: &Recording,
    strategy: Strategy,
) -> Result<Recording> {
    let spec = ckpt.spec();
    if spec.frame_dim != raw.frame_dim() {
        return Err(Error::Shape {
            op: "recording grid vs model",
            left: (raw.height, raw.width),
            right: (spec.frame_dim, 1),
        });
    }
    let filled = fill_missing(raw, &raw.valid_mask)?;
    let windows = sliding_windows(&filled, spec.seq_len, cfg.window_stride)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset("prediction windows"));
    }
    let (preds, chosen) = predict_windows(ckpt, &windows, strategy)?;
    let mut tags = Vec::with_capacity(windows.len() * spec.pred_len);
    for w in &windows {
        tags.extend(std::iter::repeat(FrameTag { episode: w.episode, phase: w.phase }).take(spec.pred_len));
    }
    let mut rec = Recording::new(raw.height, raw.width, preds.concat(), vec![true; spec.frame_dim], tags)?;
    rec.meta.sampling_rate = raw.meta.sampling_rate;
    rec.meta.max_intensity = raw.meta.max_intensity;
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(",");
    let e = &mut rec.meta.extra;
    e.insert("predict_strategy".into(), strategy.name().into());
    e.insert("pred_len".into(), spec.pred_len.to_string());
    e.insert(
        "window_starts".into(),
        join(&mut windows.iter().map(|w| (w.start + spec.input_len()).to_string())),
    );
    e.insert(
        "selected_models".into(),
        join(&mut chosen.iter().map(|c| c.map_or("avg".into(), |m| (m + 1).to_string()))),
    );
    Ok(rec)
}

/// Delay map of every window, computed on the filled frames against the
/// mean of the originally valid channels.
pub fn window_delay_maps(cfg: &RunConfig, raw: &Recording) -> Result<Vec<(SequenceSample, DelayMap)>> {
    let filled = fill_missing(raw, &raw.valid_mask)?;
    let windows = sliding_windows(&filled, cfg.seq_len, cfg.window_stride)?;
    windows
        .into_iter()
        .map(|w| {
            let map = delay_map(&w.frames, raw.height, raw.width, &raw.valid_mask, cfg.delay_max_lag)?;
            Ok((w, map))
        })
        .collect()
}

pub fn delay_maps_csv(maps: &[(SequenceSample, DelayMap)], sampling_rate: f64) -> String {
    let mut s = String::from("episode,phase,start,row,col,lag_frames,lag_ms,degenerate\n");
    for (w, m) in maps {
        let ms = m.to_millis(sampling_rate);
        for r in 0..m.height {
            for c in 0..m.width {
                let i = r * m.width + c;
                let _ = writeln!(
                    s,
                    "{},{},{},{r},{c},{},{:.4},{}",
                    w.episode,
                    crate::eval::phase_label(w.phase),
                    w.start,
                    m.delays[i],
                    ms[i],
                    m.degenerate[i] as u8
                );
            }
        }
    }
    s
}
