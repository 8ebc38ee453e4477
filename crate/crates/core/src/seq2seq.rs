//! Encoder / decoder / predictor composite.
//!
//! The encoder reads the first `L - n` frames. Its final states (every layer)
//! seed two unconditioned stacks: the decoder reconstructs the observed
//! frames, the predictor produces the next `n`. The loss is one mean squared
//! error over all `L` frames.

use crate::error::{Error, Result};
use crate::lstm::{
    gather_rows, init_stack, stack_backward, stack_forward, DropoutSpec, LstmLayer, LstmState,
    StackForward, StepCache,
};
use crate::numerics::{dot, gemm_nn_acc, gemm_tn_acc, uniform_init, Matrix, Real, Rng, Vector};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSpec {
    /// Total window length.
    pub seq_len: usize,
    /// Frames to predict.
    pub pred_len: usize,
    pub frame_dim: usize,
}

impl SequenceSpec {
    pub fn new(seq_len: usize, pred_len: usize, frame_dim: usize) -> Result<Self> {
        if pred_len == 0 || pred_len >= seq_len {
            return Err(Error::Config(format!(
                "prediction length {pred_len} must be in 1..{seq_len}"
            )));
        }
        if frame_dim == 0 {
            return Err(Error::Config("frame dimension must be positive".into()));
        }
        Ok(Self {
            seq_len,
            pred_len,
            frame_dim,
        })
    }

    /// Number of observed (input) frames.
    #[inline]
    pub fn input_len(&self) -> usize {
        self.seq_len - self.pred_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub hidden: usize,
    pub layers: usize,
    pub peepholes: bool,
    /// Reconstruct the observed frames last-to-first.
    pub reverse_reconstruction: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            peepholes: true,
            reverse_reconstruction: true,
        }
    }
}

/// Affine map from a top hidden state to a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    /// `frame_dim × hidden`.
    pub weight: Matrix<T>,
    pub bias: Vector<T>,
}

impl<T: Real> Projection<T> {
    fn zeros(frame_dim: usize, hidden: usize) -> Self {
        Self {
            weight: Matrix::zeros(frame_dim, hidden),
            bias: Vector::zeros(frame_dim),
        }
    }

    fn init(rng: &mut Rng, frame_dim: usize, hidden: usize) -> Self {
        Self {
            weight: uniform_init(rng, frame_dim, hidden, crate::lstm::INIT_SCALE),
            bias: Vector::zeros(frame_dim),
        }
    }

    /// `B × hidden` → `B × frame_dim`.
    fn apply(&self, h: &Matrix<T>) -> Matrix<T> {
        let b = h.rows();
        let d = self.weight.rows();
        let mut out = Matrix::zeros(b, d);
        for r in 0..b {
            let hr = h.row(r);
            let orow = out.row_mut(r);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(hr, self.weight.row(j)) + self.bias.data()[j];
            }
        }
        out
    }
}

/// One ensemble member θ: encoder, decoder and predictor stacks plus the two
/// output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel<T> {
    pub spec: SequenceSpec,
    pub arch: Architecture,
    pub encoder: Vec<LstmLayer<T>>,
    pub decoder: Vec<LstmLayer<T>>,
    pub predictor: Vec<LstmLayer<T>>,
    pub recon_proj: Projection<T>,
    pub pred_proj: Projection<T>,
}

impl<T: Real> Params<T> for Projection<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.weight.data(), self.bias.data()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.data_mut(), self.bias.data_mut()]
    }
}

impl<T: Real> Params<T> for Seq2SeqModel<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v.extend(self.predictor.tensors());
        v.extend(self.recon_proj.tensors());
        v.extend(self.pred_proj.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v.extend(self.predictor.tensors_mut());
        v.extend(self.recon_proj.tensors_mut());
        v.extend(self.pred_proj.tensors_mut());
        v
    }
}

impl<T: Real> Seq2SeqModel<T> {
    pub fn init(rng: &mut Rng, spec: SequenceSpec, arch: Architecture) -> Self {
        let d = spec.frame_dim;
        let h = arch.hidden;
        let encoder = init_stack(rng, d, h, arch.layers, arch.peepholes);
        let decoder = init_stack(rng, d, h, arch.layers, arch.peepholes);
        let predictor = init_stack(rng, d, h, arch.layers, arch.peepholes);
        let recon_proj = Projection::init(rng, d, h);
        let pred_proj = Projection::init(rng, d, h);
        Self {
            spec,
            arch,
            encoder,
            decoder,
            predictor,
            recon_proj,
            pred_proj,
        }
    }

    /// All-zero model (also the shape of a gradient buffer).
    pub fn zeros(spec: SequenceSpec, arch: Architecture) -> Self {
        let d = spec.frame_dim;
        let h = arch.hidden;
        let stack = |_| {
            (0..arch.layers)
                .map(|l| LstmLayer::zeros(if l == 0 { d } else { h }, h, arch.peepholes))
                .collect::<Vec<_>>()
        };
        Self {
            spec,
            arch,
            encoder: stack(0),
            decoder: stack(1),
            predictor: stack(2),
            recon_proj: Projection::zeros(d, h),
            pred_proj: Projection::zeros(d, h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec, self.arch)
    }

    /// Input frame index that reconstruction step `k` targets.
    #[inline]
    pub fn recon_target(&self, k: usize) -> usize {
        if self.arch.reverse_reconstruction {
            self.spec.input_len() - 1 - k
        } else {
            k
        }
    }
}

/// A batch of full windows, one `B × frame_dim` matrix per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    pub frames: Vec<Matrix<T>>,
}

impl<T: Real> SequenceBatch<T> {
    /// Builds a batch from flattened windows (`seq_len × frame_dim` each).
    pub fn from_windows<'a, I>(spec: &SequenceSpec, windows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let windows: Vec<&[f32]> = windows.into_iter().collect();
        let d = spec.frame_dim;
        let b = windows.len();
        let mut frames: Vec<Matrix<T>> = (0..spec.seq_len).map(|_| Matrix::zeros(b, d)).collect();
        for (r, w) in windows.iter().enumerate() {
            if w.len() != spec.seq_len * d {
                return Err(Error::Shape {
                    op: "window length",
                    left: (w.len(), 1),
                    right: (spec.seq_len * d, 1),
                });
            }
            for (t, frame) in frames.iter_mut().enumerate() {
                for (dst, &src) in frame.row_mut(r).iter_mut().zip(&w[t * d..(t + 1) * d]) {
                    *dst = T::of(src as f64);
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn batch_size(&self) -> usize {
        self.frames.first().map_or(0, |f| f.rows())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            frames: self.frames.iter().map(|f| gather_rows(f, rows)).collect(),
        }
    }
}

/// Dropout masks for the three stacks of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelMasks<T> {
    pub encoder: Vec<Option<Matrix<T>>>,
    pub decoder: Vec<Option<Matrix<T>>>,
    pub predictor: Vec<Option<Matrix<T>>>,
}

impl<T: Real> ModelMasks<T> {
    pub fn none(layers: usize) -> Self {
        Self {
            encoder: vec![None; layers],
            decoder: vec![None; layers],
            predictor: vec![None; layers],
        }
    }

    /// Draws masks for every row from that row's own stream.
    pub fn sample(model: &Seq2SeqModel<T>, dropout: &DropoutSpec, rngs: &mut [Rng]) -> Self {
        Self {
            encoder: dropout.sample_masks(&model.encoder, rngs),
            decoder: dropout.sample_masks(&model.decoder, rngs),
            predictor: dropout.sample_masks(&model.predictor, rngs),
        }
    }
}

/// Outputs and caches of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// Decoder outputs in decoder step order; step `k` targets input frame
    /// `recon_target(k)`.
    pub reconstruction: Vec<Matrix<T>>,
    /// Predictor outputs; step `k` targets frame `input_len + k`.
    pub prediction: Vec<Matrix<T>>,
    pub encoder: StackForward<T>,
    pub decoder: StackForward<T>,
    pub predictor: StackForward<T>,
}

/// Per-sample squared-error breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss<T> {
    /// Mean squared error over all `L` frames.
    pub total: T,
    /// Mean squared error of the reconstructed frames only.
    pub recon: T,
    /// Mean squared error of the predicted frames only.
    pub pred: T,
}

fn select_cache<T: Real>(c: &StepCache<T>, rows: &[usize]) -> StepCache<T> {
    StepCache {
        x: gather_rows(&c.x, rows),
        x_is_zero: c.x_is_zero,
        h_prev: gather_rows(&c.h_prev, rows),
        c_prev: gather_rows(&c.c_prev, rows),
        i: gather_rows(&c.i, rows),
        f: gather_rows(&c.f, rows),
        g: gather_rows(&c.g, rows),
        o: gather_rows(&c.o, rows),
        c: gather_rows(&c.c, rows),
        tanh_c: gather_rows(&c.tanh_c, rows),
        h: gather_rows(&c.h, rows),
    }
}

fn select_stack<T: Real>(s: &StackForward<T>, rows: &[usize]) -> StackForward<T> {
    StackForward {
        caches: s
            .caches
            .iter()
            .map(|layer| layer.iter().map(|c| select_cache(c, rows)).collect())
            .collect(),
        masks: s
            .masks
            .iter()
            .map(|m| m.as_ref().map(|m| gather_rows(m, rows)))
            .collect(),
        final_states: s.final_states.iter().map(|st| st.select_rows(rows)).collect(),
    }
}

impl<T: Real> ModelOutput<T> {
    pub fn batch_size(&self) -> usize {
        self.prediction.first().map_or(0, |p| p.rows())
    }

    /// Restriction of this forward pass to the given rows. Bit-identical to
    /// running the forward pass on those rows alone.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            reconstruction: self.reconstruction.iter().map(|m| gather_rows(m, rows)).collect(),
            prediction: self.prediction.iter().map(|m| gather_rows(m, rows)).collect(),
            encoder: select_stack(&self.encoder, rows),
            decoder: select_stack(&self.decoder, rows),
            predictor: select_stack(&self.predictor, rows),
        }
    }

    /// Top encoder hidden state after the last observed frame (`B × hidden`).
    pub fn encoder_top_h(&self) -> &Matrix<T> {
        &self.encoder.final_states.last().expect("encoder layers").h
    }

    /// Reconstruction rearranged into input time order.
    pub fn reconstruction_in_time_order(&self, model: &Seq2SeqModel<T>) -> Vec<Matrix<T>> {
        let mut out = self.reconstruction.clone();
        for (k, m) in self.reconstruction.iter().enumerate() {
            out[model.recon_target(k)] = m.clone();
        }
        out
    }
}

fn check_frames<T: Real>(spec: &SequenceSpec, frames: &[Matrix<T>], expected: usize) -> Result<()> {
    if frames.len() != expected {
        return Err(Error::Shape {
            op: "sequence length",
            left: (frames.len(), spec.frame_dim),
            right: (expected, spec.frame_dim),
        });
    }
    for f in frames {
        if f.cols() != spec.frame_dim {
            return Err(Error::Shape {
                op: "frame dimension",
                left: f.shape(),
                right: (f.rows(), spec.frame_dim),
            });
        }
    }
    Ok(())
}

/// Runs the encoder over the observed frames.
pub fn encode<T: Real>(
    model: &Seq2SeqModel<T>,
    inputs: &[Matrix<T>],
    masks: Vec<Option<Matrix<T>>>,
) -> Result<StackForward<T>> {
    check_frames(&model.spec, inputs, model.spec.input_len())?;
    let batch = inputs[0].rows();
    stack_forward(&model.encoder, masks, Some(inputs), inputs.len(), batch, None)
}

fn run_branch<T: Real>(
    layers: &[LstmLayer<T>],
    proj: &Projection<T>,
    states: &[LstmState<T>],
    steps: usize,
    masks: Vec<Option<Matrix<T>>>,
) -> Result<(StackForward<T>, Vec<Matrix<T>>)> {
    if states.len() != layers.len() {
        return Err(Error::Shape {
            op: "branch initial states",
            left: (states.len(), 0),
            right: (layers.len(), 0),
        });
    }
    for (s, l) in states.iter().zip(layers) {
        if s.h.cols() != l.hidden_dim() {
            return Err(Error::Shape {
                op: "branch initial state width",
                left: s.h.shape(),
                right: (s.h.rows(), l.hidden_dim()),
            });
        }
    }
    let batch = states[0].batch();
    let fwd = stack_forward(layers, masks, None, steps, batch, Some(states))?;
    let frames = (0..steps).map(|t| proj.apply(fwd.top_h(t))).collect();
    Ok((fwd, frames))
}

/// Decoder output frames (decoder step order) seeded with encoder states.
pub fn decode_reconstruct<T: Real>(
    model: &Seq2SeqModel<T>,
    encoder_states: &[LstmState<T>],
) -> Result<Vec<Matrix<T>>> {
    let masks = vec![None; model.decoder.len()];
    let (_, frames) = run_branch(
        &model.decoder,
        &model.recon_proj,
        encoder_states,
        model.spec.input_len(),
        masks,
    )?;
    Ok(frames)
}

/// Predictor output frames in forward time order.
pub fn predict_future<T: Real>(
    model: &Seq2SeqModel<T>,
    encoder_states: &[LstmState<T>],
) -> Result<Vec<Matrix<T>>> {
    let masks = vec![None; model.predictor.len()];
    let (_, frames) = run_branch(
        &model.predictor,
        &model.pred_proj,
        encoder_states,
        model.spec.pred_len,
        masks,
    )?;
    Ok(frames)
}

/// Full forward pass on the observed prefix of `batch` (extra frames beyond
/// the prefix are ignored).
pub fn forward<T: Real>(
    model: &Seq2SeqModel<T>,
    batch: &SequenceBatch<T>,
    masks: ModelMasks<T>,
) -> Result<ModelOutput<T>> {
    let n_in = model.spec.input_len();
    if batch.len() < n_in {
        return Err(Error::Shape {
            op: "sequence length",
            left: (batch.len(), 0),
            right: (n_in, 0),
        });
    }
    let encoder = encode(model, &batch.frames[..n_in], masks.encoder)?;
    let (decoder, reconstruction) = run_branch(
        &model.decoder,
        &model.recon_proj,
        &encoder.final_states,
        n_in,
        masks.decoder,
    )?;
    let (predictor, prediction) = run_branch(
        &model.predictor,
        &model.pred_proj,
        &encoder.final_states,
        model.spec.pred_len,
        masks.predictor,
    )?;
    Ok(ModelOutput {
        reconstruction,
        prediction,
        encoder,
        decoder,
        predictor,
    })
}

/// Evaluation-mode forward pass (no dropout).
pub fn forward_eval<T: Real>(model: &Seq2SeqModel<T>, batch: &SequenceBatch<T>) -> Result<ModelOutput<T>> {
    forward(model, batch, ModelMasks::none(model.arch.layers))
}

fn sse_row<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Per-sample losses of a forward pass against the full windows in `batch`.
pub fn sample_losses<T: Real>(
    model: &Seq2SeqModel<T>,
    batch: &SequenceBatch<T>,
    out: &ModelOutput<T>,
) -> Result<Vec<SampleLoss<T>>> {
    let spec = &model.spec;
    check_frames(spec, &batch.frames, spec.seq_len)?;
    let b = batch.batch_size();
    if out.batch_size() != b {
        return Err(Error::Shape {
            op: "output batch",
            left: (out.batch_size(), 0),
            right: (b, 0),
        });
    }
    let n_in = spec.input_len();
    let d = spec.frame_dim;
    let mut losses = Vec::with_capacity(b);
    for r in 0..b {
        let mut recon = T::zero();
        for (k, frame) in out.reconstruction.iter().enumerate() {
            recon += sse_row(frame.row(r), batch.frames[model.recon_target(k)].row(r));
        }
        let mut pred = T::zero();
        for (k, frame) in out.prediction.iter().enumerate() {
            pred += sse_row(frame.row(r), batch.frames[n_in + k].row(r));
        }
        losses.push(SampleLoss {
            total: (recon + pred) / T::of((spec.seq_len * d) as f64),
            recon: recon / T::of((n_in * d) as f64),
            pred: pred / T::of((spec.pred_len * d) as f64),
        });
    }
    Ok(losses)
}

/// Mean squared error over all frames for each sample in `batch`, plus the
/// forward pass that produced it.
pub fn sequence_loss<T: Real>(
    model: &Seq2SeqModel<T>,
    batch: &SequenceBatch<T>,
    masks: ModelMasks<T>,
) -> Result<(Vec<SampleLoss<T>>, ModelOutput<T>)> {
    check_frames(&model.spec, &batch.frames, model.spec.seq_len)?;
    let out = forward(model, batch, masks)?;
    let losses = sample_losses(model, batch, &out)?;
    Ok((losses, out))
}

/// Multipliers on the two halves of the loss; both 1 for the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchWeights {
    pub recon: f64,
    pub pred: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            pred: 1.0,
        }
    }
}

fn projection_backward<T: Real>(
    proj: &Projection<T>,
    grads: &mut Projection<T>,
    h: &Matrix<T>,
    d_out: &Matrix<T>,
) -> Matrix<T> {
    let b = h.rows();
    let hidden = h.cols();
    let d = proj.weight.rows();
    gemm_tn_acc(d_out.data(), b, d, h.data(), hidden, grads.weight.data_mut());
    for r in 0..b {
        for (acc, &v) in grads.bias.data_mut().iter_mut().zip(d_out.row(r)) {
            *acc += v;
        }
    }
    let mut dh = Matrix::zeros(b, hidden);
    gemm_nn_acc(d_out.data(), b, d, proj.weight.data(), hidden, dh.data_mut());
    dh
}

/// Accumulates into `grads` the gradient of `Σ_b weight_b · loss_b`, where
/// `loss_b` is the full-window mean squared error of sample `b`.
pub fn model_backward<T: Real>(
    model: &Seq2SeqModel<T>,
    batch: &SequenceBatch<T>,
    out: &ModelOutput<T>,
    sample_weights: &[T],
    branches: BranchWeights,
    grads: &mut Seq2SeqModel<T>,
) -> Result<()> {
    let spec = &model.spec;
    check_frames(spec, &batch.frames, spec.seq_len)?;
    let b = batch.batch_size();
    if out.batch_size() != b
        || sample_weights.len() != b
        || out.reconstruction.len() != spec.input_len()
        || out.prediction.len() != spec.pred_len
        || out.encoder.steps() != spec.input_len()
    {
        return Err(Error::Shape {
            op: "stale forward cache",
            left: (out.batch_size(), out.prediction.len()),
            right: (b, spec.pred_len),
        });
    }
    if grads.num_params() != model.num_params() {
        return Err(Error::Shape {
            op: "gradient buffer",
            left: (grads.num_params(), 0),
            right: (model.num_params(), 0),
        });
    }
    let n_in = spec.input_len();
    let norm = T::of(2.0 / (spec.seq_len * spec.frame_dim) as f64);
    let d_frame = |pred: &Matrix<T>, target: &Matrix<T>, branch: f64| -> Matrix<T> {
        let mut d = Matrix::zeros(pred.rows(), pred.cols());
        let bw = T::of(branch);
        for r in 0..pred.rows() {
            let s = norm * sample_weights[r] * bw;
            for ((g, &p), &y) in d.row_mut(r).iter_mut().zip(pred.row(r)).zip(target.row(r)) {
                *g = s * (p - y);
            }
        }
        d
    };

    let d_recon_top: Vec<Option<Matrix<T>>> = out
        .reconstruction
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            let d = d_frame(frame, &batch.frames[model.recon_target(k)], branches.recon);
            Some(projection_backward(
                &model.recon_proj,
                &mut grads.recon_proj,
                out.decoder.top_h(k),
                &d,
            ))
        })
        .collect();
    let d_pred_top: Vec<Option<Matrix<T>>> = out
        .prediction
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            let d = d_frame(frame, &batch.frames[n_in + k], branches.pred);
            Some(projection_backward(
                &model.pred_proj,
                &mut grads.pred_proj,
                out.predictor.top_h(k),
                &d,
            ))
        })
        .collect();

    let dec = stack_backward(&model.decoder, &out.decoder, &d_recon_top, None, &mut grads.decoder, false)?;
    let pred = stack_backward(
        &model.predictor,
        &out.predictor,
        &d_pred_top,
        None,
        &mut grads.predictor,
        false,
    )?;
    let mut d_final = dec.d_init;
    for (a, p) in d_final.iter_mut().zip(&pred.d_init) {
        a.add_assign(p);
    }
    let none: Vec<Option<Matrix<T>>> = vec![None; n_in];
    stack_backward(
        &model.encoder,
        &out.encoder,
        &none,
        Some(&d_final),
        &mut grads.encoder,
        false,
    )?;
    Ok(())
}
