//! Multiple Choice Learning: winner-take-all coordinate descent over an
//! ensemble of sequence models.
//!
//! All randomness is keyed, never sequential: the dropout masks for sample
//! `id` under member `m` at step `s` of epoch `e` come from
//! `root.split(e).split(s).split(m).split(id)`. Results therefore do not
//! depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::lstm::DropoutSpec;
use crate::numerics::{Matrix, Real, Rng};
use crate::optim::{idle_update, sgd_momentum_update, OptimizerConfig};
use crate::params::Params;
use crate::seq2seq::{
    forward, forward_eval, model_backward, sample_losses, Architecture, BranchWeights, ModelMasks, Seq2SeqModel,
    SequenceBatch, SequenceSpec,
};

/// Stream ids under the training root.
const STREAM_PRETRAIN: u64 = 0x5052_4554;
const STREAM_PARTITION: u64 = 0x5041_5254;
const STREAM_SHUFFLE: u64 = u64::MAX;

/// Evaluation batch size; only affects memory, not results.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone)]
pub struct Ensemble<T> {
    pub members: Vec<Seq2SeqModel<T>>,
    pub velocities: Vec<Seq2SeqModel<T>>,
}

impl<T: Real> Ensemble<T> {
    pub fn new(members: Vec<Seq2SeqModel<T>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        if members.iter().any(|m| m.spec != first.spec || m.arch != first.arch) {
            return Err(Error::Config("ensemble members must share one sequence spec and architecture".into()));
        }
        let velocities = members.iter().map(|m| m.zeros_like()).collect();
        Ok(Self { members, velocities })
    }

    /// Member `m` is initialized from `rng.split(m)`.
    pub fn init(rng: &Rng, size: usize, spec: SequenceSpec, arch: Architecture) -> Result<Self> {
        let members = (0..size)
            .map(|m| Seq2SeqModel::init(&mut rng.split(m as u64), spec, arch))
            .collect();
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.members[0].spec
    }

    pub fn arch(&self) -> &Architecture {
        &self.members[0].arch
    }

    pub fn reset_velocities(&mut self) {
        self.velocities.iter_mut().for_each(|v| v.zero());
    }
}

/// One-hot assignment of each sample to its lowest-loss member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    winners: Vec<usize>,
    models: usize,
}

impl AssignmentMatrix {
    pub fn rows(&self) -> usize {
        self.winners.len()
    }

    pub fn models(&self) -> usize {
        self.models
    }

    /// `p_im ∈ {0, 1}`.
    pub fn get(&self, sample: usize, model: usize) -> u8 {
        (self.winners[sample] == model) as u8
    }

    pub fn winner(&self, sample: usize) -> usize {
        self.winners[sample]
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.models];
        for &w in &self.winners {
            c[w] += 1;
        }
        c
    }

    /// Rows assigned to `model`, ascending.
    pub fn rows_of(&self, model: usize) -> Vec<usize> {
        (0..self.winners.len()).filter(|&i| self.winners[i] == model).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows())
            .map(|i| (0..self.models).map(|m| self.get(i, m)).collect())
            .collect()
    }
}

/// Winner-take-all over a `batch × M` loss matrix. Exact comparison; ties go
/// to the lowest member index. Non-finite losses are errors.
pub fn assign<T: Real>(losses: &Matrix<T>) -> Result<AssignmentMatrix> {
    let m = losses.cols();
    if m == 0 {
        return Err(Error::Config("assignment needs at least one model".into()));
    }
    let mut winners = Vec::with_capacity(losses.rows());
    for i in 0..losses.rows() {
        let row = losses.row(i);
        if let Some(model) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { sample: i, model });
        }
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v < row[best] {
                best = k;
            }
        }
        winners.push(best);
    }
    Ok(AssignmentMatrix { winners, models: m })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub opt: OptimizerConfig,
    pub dropout: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub kind: EpochKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            opt: OptimizerConfig::default(),
            dropout: 0.1,
            patience: 3,
            max_epochs: 100,
            kind: EpochKind::Mcl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.opt.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {}", self.dropout)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }

    fn dropout_spec(&self) -> DropoutSpec {
        DropoutSpec::train(self.dropout)
    }
}

/// A mini-batch plus the ids that key its randomness.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub data: SequenceBatch<T>,
    pub ids: Vec<usize>,
}

impl<T: Real> TrainBatch<T> {
    pub fn from_samples(spec: &SequenceSpec, samples: &[&SequenceSample]) -> Result<Self> {
        Ok(Self {
            data: SequenceBatch::from_windows(spec, samples.iter().map(|s| s.frames.as_slice()))?,
            ids: samples.iter().map(|s| s.id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Sum over the batch of the winning member's loss.
    pub objective: f64,
    pub counts: Vec<usize>,
    pub assignment: AssignmentMatrix,
}

fn member_masks<T: Real>(
    model: &Seq2SeqModel<T>,
    dropout: &DropoutSpec,
    member_rng: &Rng,
    ids: &[usize],
) -> ModelMasks<T> {
    if !dropout.is_active() {
        return ModelMasks::none(model.arch.layers);
    }
    let mut rngs: Vec<Rng> = ids.iter().map(|&id| member_rng.split(id as u64)).collect();
    ModelMasks::sample(model, dropout, &mut rngs)
}

/// Gradient of the summed loss over `rows` of the batch (all rows when
/// `None`), followed by one optimizer update.
fn fit_rows<T: Real>(
    model: &mut Seq2SeqModel<T>,
    velocity: &mut Seq2SeqModel<T>,
    batch: &SequenceBatch<T>,
    out: &crate::seq2seq::ModelOutput<T>,
    rows: Option<&[usize]>,
    opt: &OptimizerConfig,
) -> Result<()> {
    let mut grads = model.zeros_like();
    match rows {
        Some(rows) => {
            let sub = batch.select_rows(rows);
            let sub_out = out.select_rows(rows);
            let w = vec![T::one(); rows.len()];
            model_backward(model, &sub, &sub_out, &w, BranchWeights::default(), &mut grads)?;
        }
        None => {
            let w = vec![T::one(); batch.batch_size()];
            model_backward(model, batch, out, &w, BranchWeights::default(), &mut grads)?;
        }
    }
    sgd_momentum_update(model, &grads, velocity, opt)?;
    Ok(())
}

/// One coordinate-descent step: forward all members, assign every sample to
/// its best member, then update each member on its own samples only.
pub fn mcl_step<T: Real>(
    ens: &mut Ensemble<T>,
    batch: &TrainBatch<T>,
    cfg: &TrainConfig,
    step_rng: &Rng,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("mini-batch"));
    }
    let dropout = cfg.dropout_spec();
    let fwd: Vec<_> = ens
        .members
        .par_iter()
        .enumerate()
        .map(|(m, model)| {
            let masks = member_masks(model, &dropout, &step_rng.split(m as u64), &batch.ids);
            let out = forward(model, &batch.data, masks)?;
            let losses = sample_losses(model, &batch.data, &out)?;
            Ok((out, losses))
        })
        .collect::<Result<Vec<_>>>()?;

    let b = batch.len();
    let m_count = ens.len();
    let mut loss_matrix = Matrix::<T>::zeros(b, m_count);
    for (m, (_, losses)) in fwd.iter().enumerate() {
        for (i, l) in losses.iter().enumerate() {
            loss_matrix.set(i, m, l.total);
        }
    }
    let assignment = assign(&loss_matrix).map_err(|e| match e {
        Error::NonFiniteLoss { sample, model } => Error::NonFiniteLoss {
            sample: batch.ids[sample],
            model,
        },
        other => other,
    })?;
    let objective: f64 = (0..b)
        .map(|i| loss_matrix.get(i, assignment.winner(i)).as_f64())
        .sum();

    ens.members
        .par_iter_mut()
        .zip(ens.velocities.par_iter_mut())
        .zip(fwd.par_iter())
        .enumerate()
        .map(|(m, ((model, vel), (out, _)))| {
            let rows = assignment.rows_of(m);
            if rows.is_empty() {
                idle_update(model, vel, &cfg.opt)
            } else {
                fit_rows(model, vel, &batch.data, out, Some(&rows), &cfg.opt)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StepOutcome {
        objective,
        counts: assignment.counts(),
        assignment,
    })
}

/// Plain SGD step on the summed MSE of the whole batch, keyed exactly like a
/// one-member `mcl_step`.
pub fn plain_step<T: Real>(
    model: &mut Seq2SeqModel<T>,
    velocity: &mut Seq2SeqModel<T>,
    batch: &TrainBatch<T>,
    cfg: &TrainConfig,
    member_rng: &Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("mini-batch"));
    }
    let masks = member_masks(model, &cfg.dropout_spec(), member_rng, &batch.ids);
    let out = forward(model, &batch.data, masks)?;
    let losses = sample_losses(model, &batch.data, &out)?;
    if let Some(i) = losses.iter().position(|l| !l.total.is_finite()) {
        return Err(Error::NonFiniteLoss {
            sample: batch.ids[i],
            model: 0,
        });
    }
    fit_rows(model, velocity, &batch.data, &out, None, &cfg.opt)?;
    Ok(losses.iter().map(|l| l.total.as_f64()).sum())
}

/// Shuffled mini-batches of `indices` for one epoch.
fn epoch_batches(indices: &[usize], batch_size: usize, epoch_rng: &Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    epoch_rng.split(STREAM_SHUFFLE).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn gather<'a>(samples: &'a [SequenceSample], idx: &[usize]) -> Vec<&'a SequenceSample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

/// One epoch of plain SGD for a single model over `indices` of `samples`.
/// `member` selects the dropout stream so a lone member matches its slot in
/// an ensemble. Returns the mean per-sample training loss.
pub fn plain_epoch<T: Real>(
    model: &mut Seq2SeqModel<T>,
    velocity: &mut Seq2SeqModel<T>,
    samples: &[SequenceSample],
    indices: &[usize],
    cfg: &TrainConfig,
    epoch_rng: &Rng,
    member: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("training subset"));
    }
    let spec = model.spec;
    let mut total = 0.0;
    for (s, idx) in epoch_batches(indices, cfg.opt.batch_size, epoch_rng).iter().enumerate() {
        let batch = TrainBatch::from_samples(&spec, &gather(samples, idx))?;
        let step_rng = epoch_rng.split(s as u64);
        total += plain_step(model, velocity, &batch, cfg, &step_rng.split(member as u64))?;
    }
    Ok(total / indices.len() as f64)
}

/// Random partition of `0..n` into `parts` disjoint subsets whose sizes
/// differ by at most one.
pub fn random_partition(n: usize, parts: usize, rng: &Rng) -> Result<Vec<Vec<usize>>> {
    if parts == 0 || n < parts {
        return Err(Error::Config(format!(
            "cannot split {n} samples into {parts} non-empty subsets"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.clone().shuffle(&mut order);
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        let mut subset = order[at..at + len].to_vec();
        subset.sort_unstable();
        out.push(subset);
        at += len;
    }
    Ok(out)
}

/// Trains member `m` for one epoch on `subsets[m]` only.
pub fn pretrain_on_subsets<T: Real>(
    ens: &mut Ensemble<T>,
    samples: &[SequenceSample],
    subsets: &[Vec<usize>],
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    if subsets.len() != ens.len() {
        return Err(Error::Config(format!(
            "{} subsets for {} members",
            subsets.len(),
            ens.len()
        )));
    }
    let epoch_rng = rng.split(STREAM_PRETRAIN);
    ens.members
        .par_iter_mut()
        .zip(ens.velocities.par_iter_mut())
        .zip(subsets.par_iter())
        .enumerate()
        .map(|(m, ((model, vel), subset))| {
            plain_epoch(model, vel, samples, subset, cfg, &epoch_rng.split(m as u64), m)
        })
        .collect()
}

/// Diversity pretraining: a random near-equal partition of the training set,
/// one epoch of plain SGD per member on its own subset. Velocities are reset
/// afterwards.
pub fn diversity_pretrain<T: Real>(
    ens: &mut Ensemble<T>,
    samples: &[SequenceSample],
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let subsets = random_partition(samples.len(), ens.len(), &rng.split(STREAM_PARTITION))?;
    pretrain_on_subsets(ens, samples, &subsets, cfg, rng)?;
    ens.reset_velocities();
    Ok(subsets)
}

/// Eval-mode per-sample losses, `samples × M`.
pub fn loss_matrix<T: Real>(members: &[Seq2SeqModel<T>], samples: &[SequenceSample]) -> Result<Matrix<f64>> {
    if members.is_empty() {
        return Err(Error::Config("no models".into()));
    }
    let spec = members[0].spec;
    let mut out = Matrix::zeros(samples.len(), members.len());
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    for (c, chunk) in refs.chunks(EVAL_BATCH).enumerate() {
        let batch: SequenceBatch<T> = SequenceBatch::from_windows(&spec, chunk.iter().map(|s| s.frames.as_slice()))?;
        let cols: Vec<Vec<f64>> = members
            .par_iter()
            .map(|model| {
                let o = forward_eval(model, &batch)?;
                Ok(sample_losses(model, &batch, &o)?.iter().map(|l| l.total.as_f64()).collect())
            })
            .collect::<Result<_>>()?;
        for (m, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                out.set(c * EVAL_BATCH + i, m, v);
            }
        }
    }
    Ok(out)
}

/// Mean over samples of the best member's loss.
pub fn oracle_loss<T: Real>(members: &[Seq2SeqModel<T>], samples: &[SequenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let l = loss_matrix(members, samples)?;
    let sum: f64 = (0..l.rows())
        .map(|i| l.row(i).iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    Ok(sum / samples.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training objective.
    pub train_loss: f64,
    pub val_oracle_loss: f64,
    pub assignments: Vec<usize>,
    pub improved: bool,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Resumable training position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub since_improvement: usize,
    /// Root of all epoch streams.
    pub rng: Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            best_val: f64::INFINITY,
            since_improvement: 0,
            rng: Rng::new(seed),
        }
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.max_epochs || (self.epoch > 0 && self.since_improvement >= cfg.patience)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot with the lowest validation oracle loss.
    pub best: Ensemble<T>,
    /// Ensemble after the last completed epoch, for resuming.
    pub last: Ensemble<T>,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

/// Which update an epoch performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochKind {
    /// Winner-take-all coordinate descent.
    Mcl,
    /// Every member fits every sample (average-ensemble baseline). Members
    /// share the batch order; dropout streams differ per member.
    Independent,
}

/// One epoch over `train`. Returns the mean per-sample objective and the
/// per-member assignment counts.
pub fn run_epoch<T: Real>(
    ens: &mut Ensemble<T>,
    train: &[SequenceSample],
    cfg: &TrainConfig,
    epoch_rng: &Rng,
) -> Result<(f64, Vec<usize>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let spec = *ens.spec();
    let all: Vec<usize> = (0..train.len()).collect();
    match cfg.kind {
        EpochKind::Mcl => {
            let mut counts = vec![0; ens.len()];
            let mut total = 0.0;
            for (s, idx) in epoch_batches(&all, cfg.opt.batch_size, epoch_rng).iter().enumerate() {
                let batch = TrainBatch::from_samples(&spec, &gather(train, idx))?;
                let outcome = mcl_step(ens, &batch, cfg, &epoch_rng.split(s as u64))?;
                total += outcome.objective;
                counts.iter_mut().zip(&outcome.counts).for_each(|(a, b)| *a += b);
            }
            Ok((total / train.len() as f64, counts))
        }
        EpochKind::Independent => {
            let losses = ens
                .members
                .par_iter_mut()
                .zip(ens.velocities.par_iter_mut())
                .enumerate()
                .map(|(m, (model, vel))| plain_epoch(model, vel, train, &all, cfg, epoch_rng, m))
                .collect::<Result<Vec<f64>>>()?;
            Ok((losses.iter().sum::<f64>() / losses.len() as f64, vec![train.len(); ens.len()]))
        }
    }
}

/// Epoch loop with early stopping on the validation oracle loss.
///
/// A fresh run passes `TrainState::new(seed)` and no snapshot; a resumed run
/// passes the saved state and best snapshot. `on_epoch` sees every record as
/// soon as it is produced.
pub fn train<T: Real>(
    ens: Ensemble<T>,
    train: &[SequenceSample],
    val: &[SequenceSample],
    cfg: &TrainConfig,
    state: TrainState,
    best: Option<Ensemble<T>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let mut state = state;
    let mut best = best.unwrap_or_else(|| ens.clone());
    let mut ens = ens;
    let mut log = Vec::new();
    while !state.finished(cfg) {
        let epoch_rng = state.rng.split(state.epoch as u64 + 1);
        let (train_loss, assignments) = run_epoch(&mut ens, train, cfg, &epoch_rng)?;
        let val_loss = oracle_loss(&ens.members, val)?;
        state.epoch += 1;
        let improved = val_loss < state.best_val;
        if improved {
            state.best_val = val_loss;
            state.since_improvement = 0;
            best = ens.clone();
        } else {
            state.since_improvement += 1;
        }
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss,
            val_oracle_loss: val_loss,
            assignments,
            improved,
        };
        log::info!(
            "epoch {} train {:.6} val {:.6} assignments {:?}{}",
            record.epoch,
            record.train_loss,
            record.val_oracle_loss,
            record.assignments,
            if improved { " *" } else { "" }
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        best,
        last: ens,
        state,
        log,
    })
}
