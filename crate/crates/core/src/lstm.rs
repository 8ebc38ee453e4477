//! LSTM layers with peephole connections, processed a batch at a time.
//!
//! Gate order everywhere is input, forget, cell, output. Row `b` of every
//! batch matrix belongs to sequence `b`; rows never interact, so a sequence
//! produces the same values whatever batch it is evaluated in.
//!
//! ```text
//! i = σ(W_xi x + W_hi h' + w_ci ∘ c' + b_i)
//! f = σ(W_xf x + W_hf h' + w_cf ∘ c' + b_f)
//! g = tanh(W_xc x + W_hc h' + b_c)
//! c = f ∘ c' + i ∘ g
//! o = σ(W_xo x + W_ho h' + w_co ∘ c + b_o)
//! h = o ∘ tanh(c)
//! ```

use crate::error::{Error, Result};
use crate::numerics::{
    gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, uniform_init, Matrix, Real, Rng, Vector,
};
use crate::params::Params;

pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

/// Parameters of one LSTM layer.
///
/// The four per-gate input matrices are stacked into `w_x` (`4h × in`) and the
/// recurrent ones into `w_h` (`4h × h`), gate blocks in [`Gate`] order. The
/// peephole weights are elementwise, stored as three length-`h` vectors for
/// the input, forget and output gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    pub w_x: Matrix<T>,
    pub w_h: Matrix<T>,
    pub peep_i: Vector<T>,
    pub peep_f: Vector<T>,
    pub peep_o: Vector<T>,
    pub bias: Vector<T>,
    pub peepholes: bool,
}

impl<T: Real> LstmLayer<T> {
    pub fn zeros(input_dim: usize, hidden_dim: usize, peepholes: bool) -> Self {
        Self {
            w_x: Matrix::zeros(4 * hidden_dim, input_dim),
            w_h: Matrix::zeros(4 * hidden_dim, hidden_dim),
            peep_i: Vector::zeros(hidden_dim),
            peep_f: Vector::zeros(hidden_dim),
            peep_o: Vector::zeros(hidden_dim),
            bias: Vector::zeros(4 * hidden_dim),
            peepholes,
        }
    }

    /// Uniform `[-0.08, 0.08]` for every parameter, then `+1` on the forget bias.
    pub fn init(rng: &mut Rng, input_dim: usize, hidden_dim: usize, peepholes: bool) -> Self {
        let h = hidden_dim;
        let w_x = if input_dim == 0 {
            Matrix::zeros(4 * h, 0)
        } else {
            uniform_init(rng, 4 * h, input_dim, INIT_SCALE)
        };
        let w_h = uniform_init(rng, 4 * h, h, INIT_SCALE);
        let mut vec = |n: usize| Vector::from_vec(uniform_init::<T>(rng, 1, n, INIT_SCALE).into_vec());
        let (peep_i, peep_f, peep_o) = if peepholes {
            (vec(h), vec(h), vec(h))
        } else {
            (Vector::zeros(h), Vector::zeros(h), Vector::zeros(h))
        };
        let mut bias = vec(4 * h);
        for v in &mut bias.data_mut()[h..2 * h] {
            *v += T::of(FORGET_BIAS);
        }
        Self {
            w_x,
            w_h,
            peep_i,
            peep_f,
            peep_o,
            bias,
            peepholes,
        }
    }

    /// Zeroed container with the same shapes, used for gradients and velocities.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.peepholes)
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    #[inline]
    pub fn hidden_dim(&self) -> usize {
        self.w_h.cols()
    }

    /// `W_x` block of one gate, `h × in` row-major.
    pub fn input_weights(&self, gate: Gate) -> &[T] {
        let h = self.hidden_dim();
        let n = self.input_dim();
        let g = gate as usize;
        &self.w_x.data()[g * h * n..(g + 1) * h * n]
    }

    /// `W_h` block of one gate, `h × h` row-major.
    pub fn recurrent_weights(&self, gate: Gate) -> &[T] {
        let h = self.hidden_dim();
        let g = gate as usize;
        &self.w_h.data()[g * h * h..(g + 1) * h * h]
    }

    pub fn gate_bias(&self, gate: Gate) -> &[T] {
        let h = self.hidden_dim();
        let g = gate as usize;
        &self.bias.data()[g * h..(g + 1) * h]
    }
}

impl<T: Real> Params<T> for LstmLayer<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.w_x.data(),
            self.w_h.data(),
            self.peep_i.data(),
            self.peep_f.data(),
            self.peep_o.data(),
            self.bias.data(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_x.data_mut(),
            self.w_h.data_mut(),
            self.peep_i.data_mut(),
            self.peep_f.data_mut(),
            self.peep_o.data_mut(),
            self.bias.data_mut(),
        ]
    }
}

/// Hidden and cell state for a batch (`B × h` each).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Matrix<T>,
    pub c: Matrix<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(batch: usize, hidden_dim: usize) -> Self {
        Self {
            h: Matrix::zeros(batch, hidden_dim),
            c: Matrix::zeros(batch, hidden_dim),
        }
    }

    /// Single-sequence state from vectors.
    pub fn single(h: &Vector<T>, c: &Vector<T>) -> Self {
        Self {
            h: Matrix::from_vec(1, h.len(), h.data().to_vec()).expect("row"),
            c: Matrix::from_vec(1, c.len(), c.data().to_vec()).expect("row"),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    pub fn add_assign(&mut self, other: &LstmState<T>) {
        for (a, &b) in self.h.data_mut().iter_mut().zip(other.h.data()) {
            *a += b;
        }
        for (a, &b) in self.c.data_mut().iter_mut().zip(other.c.data()) {
            *a += b;
        }
    }

    /// Rows `rows` of this state, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            h: gather_rows(&self.h, rows),
            c: gather_rows(&self.c, rows),
        }
    }
}

pub(crate) fn gather_rows<T: Real>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("gathered shape")
}

/// Everything `cell_backward` needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache<T> {
    pub x: Matrix<T>,
    /// Input known to be identically zero; the `W_x` products are skipped.
    pub x_is_zero: bool,
    pub h_prev: Matrix<T>,
    pub c_prev: Matrix<T>,
    pub i: Matrix<T>,
    pub f: Matrix<T>,
    pub g: Matrix<T>,
    pub o: Matrix<T>,
    pub c: Matrix<T>,
    pub tanh_c: Matrix<T>,
    pub h: Matrix<T>,
}

fn check_step<T: Real>(layer: &LstmLayer<T>, state: &LstmState<T>, x: &Matrix<T>) -> Result<()> {
    let h = layer.hidden_dim();
    if x.cols() != layer.input_dim() {
        return Err(Error::Shape {
            op: "lstm input",
            left: (x.rows(), x.cols()),
            right: (x.rows(), layer.input_dim()),
        });
    }
    for m in [&state.h, &state.c] {
        if m.cols() != h || m.rows() != x.rows() {
            return Err(Error::Shape {
                op: "lstm state",
                left: m.shape(),
                right: (x.rows(), h),
            });
        }
    }
    Ok(())
}

/// One time step for a batch. `x_is_zero` lets unconditioned branches skip the
/// input product; the result is bit-identical either way.
pub fn cell_forward_batch<T: Real>(
    layer: &LstmLayer<T>,
    state: &LstmState<T>,
    x: &Matrix<T>,
    x_is_zero: bool,
) -> Result<(LstmState<T>, StepCache<T>)> {
    check_step(layer, state, x)?;
    let b = x.rows();
    let h = layer.hidden_dim();
    let n = layer.input_dim();
    let mut pre = vec![T::zero(); b * 4 * h];
    if !x_is_zero {
        gemm_nt_acc(x.data(), b, n, layer.w_x.data(), 4 * h, &mut pre);
    }
    gemm_nt_acc(state.h.data(), b, h, layer.w_h.data(), 4 * h, &mut pre);

    let mut i_m = Matrix::zeros(b, h);
    let mut f_m = Matrix::zeros(b, h);
    let mut g_m = Matrix::zeros(b, h);
    let mut o_m = Matrix::zeros(b, h);
    let mut c_m = Matrix::zeros(b, h);
    let mut tc_m = Matrix::zeros(b, h);
    let mut h_m = Matrix::zeros(b, h);
    let bias = layer.bias.data();
    let (wci, wcf, wco) = (layer.peep_i.data(), layer.peep_f.data(), layer.peep_o.data());
    let peep = layer.peepholes;

    for r in 0..b {
        let p = &pre[r * 4 * h..(r + 1) * 4 * h];
        let cp = state.c.row(r);
        for j in 0..h {
            let mut ai = p[j] + bias[j];
            let mut af = p[h + j] + bias[h + j];
            if peep {
                ai += wci[j] * cp[j];
                af += wcf[j] * cp[j];
            }
            let ig = sigmoid(ai);
            let fg = sigmoid(af);
            let gg = (p[2 * h + j] + bias[2 * h + j]).tanh();
            let c = fg * cp[j] + ig * gg;
            let mut ao = p[3 * h + j] + bias[3 * h + j];
            if peep {
                ao += wco[j] * c;
            }
            let og = sigmoid(ao);
            let tc = c.tanh();
            let k = r * h + j;
            i_m.data_mut()[k] = ig;
            f_m.data_mut()[k] = fg;
            g_m.data_mut()[k] = gg;
            o_m.data_mut()[k] = og;
            c_m.data_mut()[k] = c;
            tc_m.data_mut()[k] = tc;
            h_m.data_mut()[k] = og * tc;
        }
    }

    let next = LstmState {
        h: h_m.clone(),
        c: c_m.clone(),
    };
    let cache = StepCache {
        x: x.clone(),
        x_is_zero,
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        i: i_m,
        f: f_m,
        g: g_m,
        o: o_m,
        c: c_m,
        tanh_c: tc_m,
        h: h_m,
    };
    Ok((next, cache))
}

/// Gradients flowing out of one backward step.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    /// `None` when the caller did not ask for the input gradient.
    pub dx: Option<Matrix<T>>,
    pub dh_prev: Matrix<T>,
    pub dc_prev: Matrix<T>,
}

/// Backward through one step, accumulating parameter gradients into `grads`.
///
/// `dh` and `dc` are the loss gradients with respect to this step's `h` and
/// `c` coming from everything downstream (outputs, the next step, the next
/// layer).
pub fn cell_backward_batch<T: Real>(
    layer: &LstmLayer<T>,
    cache: &StepCache<T>,
    dh: &Matrix<T>,
    dc: &Matrix<T>,
    grads: &mut LstmLayer<T>,
    need_dx: bool,
) -> Result<StepGrads<T>> {
    let b = cache.h.rows();
    let h = layer.hidden_dim();
    let n = layer.input_dim();
    for m in [dh, dc] {
        if m.shape() != (b, h) {
            return Err(Error::Shape {
                op: "lstm backward",
                left: m.shape(),
                right: (b, h),
            });
        }
    }
    if grads.w_x.shape() != layer.w_x.shape() || grads.w_h.shape() != layer.w_h.shape() {
        return Err(Error::Shape {
            op: "lstm gradient buffer",
            left: grads.w_x.shape(),
            right: layer.w_x.shape(),
        });
    }
    let peep = layer.peepholes;
    let (wci, wcf, wco) = (layer.peep_i.data(), layer.peep_f.data(), layer.peep_o.data());

    let mut da = vec![T::zero(); b * 4 * h];
    let mut dc_prev = Matrix::zeros(b, h);
    let mut d_peep_i = vec![T::zero(); h];
    let mut d_peep_f = vec![T::zero(); h];
    let mut d_peep_o = vec![T::zero(); h];
    let one = T::one();

    for r in 0..b {
        let row = &mut da[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            let k = r * h + j;
            let ig = cache.i.data()[k];
            let fg = cache.f.data()[k];
            let gg = cache.g.data()[k];
            let og = cache.o.data()[k];
            let c = cache.c.data()[k];
            let tc = cache.tanh_c.data()[k];
            let cp = cache.c_prev.data()[k];
            let dhk = dh.data()[k];

            let d_ao = dhk * tc * og * (one - og);
            let mut dct = dc.data()[k] + dhk * og * (one - tc * tc);
            if peep {
                dct += d_ao * wco[j];
                d_peep_o[j] += d_ao * c;
            }
            let d_ai = dct * gg * ig * (one - ig);
            let d_ag = dct * ig * (one - gg * gg);
            let d_af = dct * cp * fg * (one - fg);
            let mut dcp = dct * fg;
            if peep {
                dcp += d_ai * wci[j] + d_af * wcf[j];
                d_peep_i[j] += d_ai * cp;
                d_peep_f[j] += d_af * cp;
            }
            row[j] = d_ai;
            row[h + j] = d_af;
            row[2 * h + j] = d_ag;
            row[3 * h + j] = d_ao;
            dc_prev.data_mut()[k] = dcp;
        }
    }

    if !cache.x_is_zero {
        gemm_tn_acc(&da, b, 4 * h, cache.x.data(), n, grads.w_x.data_mut());
    }
    gemm_tn_acc(&da, b, 4 * h, cache.h_prev.data(), h, grads.w_h.data_mut());
    {
        let gb = grads.bias.data_mut();
        for r in 0..b {
            for (acc, &v) in gb.iter_mut().zip(&da[r * 4 * h..(r + 1) * 4 * h]) {
                *acc += v;
            }
        }
    }
    if peep {
        for (acc, v) in grads.peep_i.data_mut().iter_mut().zip(d_peep_i) {
            *acc += v;
        }
        for (acc, v) in grads.peep_f.data_mut().iter_mut().zip(d_peep_f) {
            *acc += v;
        }
        for (acc, v) in grads.peep_o.data_mut().iter_mut().zip(d_peep_o) {
            *acc += v;
        }
    }

    let dx = if need_dx {
        let mut dx = Matrix::zeros(b, n);
        gemm_nn_acc(&da, b, 4 * h, layer.w_x.data(), n, dx.data_mut());
        Some(dx)
    } else {
        None
    };
    let mut dh_prev = Matrix::zeros(b, h);
    gemm_nn_acc(&da, b, 4 * h, layer.w_h.data(), h, dh_prev.data_mut());

    Ok(StepGrads {
        dx,
        dh_prev,
        dc_prev,
    })
}

/// Single-sequence forward step.
pub fn cell_forward<T: Real>(
    layer: &LstmLayer<T>,
    state: &LstmState<T>,
    x: &Vector<T>,
) -> Result<(LstmState<T>, StepCache<T>)> {
    let xm = Matrix::from_vec(1, x.len(), x.data().to_vec())?;
    cell_forward_batch(layer, state, &xm, false)
}

/// Single-sequence backward step returning fresh parameter gradients.
pub fn cell_backward<T: Real>(
    layer: &LstmLayer<T>,
    cache: &StepCache<T>,
    dh: &Vector<T>,
    dc: &Vector<T>,
) -> Result<(LstmLayer<T>, Vector<T>, LstmState<T>)> {
    let mut grads = layer.zeros_like();
    let dhm = Matrix::from_vec(1, dh.len(), dh.data().to_vec())?;
    let dcm = Matrix::from_vec(1, dc.len(), dc.data().to_vec())?;
    let out = cell_backward_batch(layer, cache, &dhm, &dcm, &mut grads, true)?;
    let dx = Vector::from_vec(out.dx.expect("requested").into_vec());
    Ok((
        grads,
        dx,
        LstmState {
            h: out.dh_prev,
            c: out.dc_prev,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout on the connections between stacked layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: Mode,
}

impl DropoutSpec {
    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            mode: Mode::Eval,
        }
    }

    pub fn train(rate: f64) -> Self {
        Self {
            rate,
            mode: Mode::Train,
        }
    }

    pub fn is_active(&self) -> bool {
        self.mode == Mode::Train && self.rate > 0.0
    }

    /// One mask per stacked layer; entry `l` masks the input of layer `l`.
    /// Layer 0 (fed by data) is never masked. Row `b` is drawn from `rngs[b]`,
    /// so each sequence's mask depends only on its own stream.
    pub fn sample_masks<T: Real>(
        &self,
        layers: &[LstmLayer<T>],
        rngs: &mut [Rng],
    ) -> Vec<Option<Matrix<T>>> {
        let batch = rngs.len();
        let mut masks: Vec<Option<Matrix<T>>> = layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (l > 0 && self.is_active()).then(|| Matrix::zeros(batch, layer.input_dim()))
            })
            .collect();
        if !self.is_active() {
            return masks;
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        for (r, rng) in rngs.iter_mut().enumerate() {
            for mask in masks.iter_mut().flatten() {
                for v in mask.row_mut(r) {
                    *v = if rng.uniform() < self.rate {
                        T::zero()
                    } else {
                        keep
                    };
                }
            }
        }
        masks
    }
}

/// Forward record of a layer stack over a sequence.
#[derive(Debug, Clone)]
pub struct StackForward<T> {
    /// `caches[l][t]`.
    pub caches: Vec<Vec<StepCache<T>>>,
    pub masks: Vec<Option<Matrix<T>>>,
    pub final_states: Vec<LstmState<T>>,
}

impl<T: Real> StackForward<T> {
    /// Top-layer hidden output at step `t`.
    pub fn top_h(&self, t: usize) -> &Matrix<T> {
        &self.caches.last().expect("non-empty stack")[t].h
    }

    pub fn steps(&self) -> usize {
        self.caches.first().map_or(0, |c| c.len())
    }

    pub fn layer_outputs(&self, l: usize) -> Vec<&Matrix<T>> {
        self.caches[l].iter().map(|c| &c.h).collect()
    }
}

fn check_chain<T: Real>(layers: &[LstmLayer<T>]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("layer stack is empty".into()));
    }
    for w in layers.windows(2) {
        if w[1].input_dim() != w[0].hidden_dim() {
            return Err(Error::Shape {
                op: "layer chain",
                left: (w[0].hidden_dim(), w[0].input_dim()),
                right: (w[1].hidden_dim(), w[1].input_dim()),
            });
        }
    }
    Ok(())
}

/// Runs a layer stack over `steps` inputs. When `inputs` is `None` every step
/// input to layer 0 is the zero vector. `init` defaults to zero states.
pub fn stack_forward<T: Real>(
    layers: &[LstmLayer<T>],
    masks: Vec<Option<Matrix<T>>>,
    inputs: Option<&[Matrix<T>]>,
    steps: usize,
    batch: usize,
    init: Option<&[LstmState<T>]>,
) -> Result<StackForward<T>> {
    check_chain(layers)?;
    if let Some(xs) = inputs {
        if xs.len() != steps {
            return Err(Error::Shape {
                op: "sequence length",
                left: (xs.len(), 0),
                right: (steps, 0),
            });
        }
    }
    if let Some(init) = init {
        if init.len() != layers.len() {
            return Err(Error::Shape {
                op: "initial states",
                left: (init.len(), 0),
                right: (layers.len(), 0),
            });
        }
    }
    let zero_input = Matrix::zeros(batch, layers[0].input_dim());
    let mut caches: Vec<Vec<StepCache<T>>> = Vec::with_capacity(layers.len());
    let mut final_states = Vec::with_capacity(layers.len());

    for (l, layer) in layers.iter().enumerate() {
        let mut state = match init {
            Some(s) => s[l].clone(),
            None => LstmState::zeros(batch, layer.hidden_dim()),
        };
        let mut layer_caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let (x, zero) = if l == 0 {
                match inputs {
                    Some(xs) => (xs[t].clone(), false),
                    None => (zero_input.clone(), true),
                }
            } else {
                let below = &caches[l - 1][t].h;
                match &masks[l] {
                    Some(mask) => {
                        let mut x = below.clone();
                        for (v, &m) in x.data_mut().iter_mut().zip(mask.data()) {
                            *v *= m;
                        }
                        (x, false)
                    }
                    None => (below.clone(), false),
                }
            };
            let (next, cache) = cell_forward_batch(layer, &state, &x, zero)?;
            state = next;
            layer_caches.push(cache);
        }
        final_states.push(state);
        caches.push(layer_caches);
    }
    Ok(StackForward {
        caches,
        masks,
        final_states,
    })
}

#[derive(Debug, Clone)]
pub struct StackBackward<T> {
    /// Gradient with respect to each layer-0 input, when requested.
    pub d_inputs: Option<Vec<Matrix<T>>>,
    /// Gradient with respect to each layer's initial state.
    pub d_init: Vec<LstmState<T>>,
}

/// Backpropagation through time over a whole stack.
///
/// `d_top[t]` is the loss gradient on the top layer's `h` at step `t` (`None`
/// when step `t` feeds no loss); `d_final[l]` the gradient on layer `l`'s
/// final state.
pub fn stack_backward<T: Real>(
    layers: &[LstmLayer<T>],
    fwd: &StackForward<T>,
    d_top: &[Option<Matrix<T>>],
    d_final: Option<&[LstmState<T>]>,
    grads: &mut [LstmLayer<T>],
    need_input_grad: bool,
) -> Result<StackBackward<T>> {
    let steps = fwd.steps();
    if d_top.len() != steps || grads.len() != layers.len() {
        return Err(Error::Shape {
            op: "stack backward",
            left: (d_top.len(), grads.len()),
            right: (steps, layers.len()),
        });
    }
    let batch = fwd.final_states[0].batch();
    let mut d_init = vec![None; layers.len()];
    let mut external: Vec<Option<Matrix<T>>> = d_top.to_vec();
    let mut d_inputs = None;

    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let h = layer.hidden_dim();
        let (mut dh_next, mut dc_next) = match d_final {
            Some(df) => (df[l].h.clone(), df[l].c.clone()),
            None => (Matrix::zeros(batch, h), Matrix::zeros(batch, h)),
        };
        let want_dx = l > 0 || need_input_grad;
        let mut below: Vec<Option<Matrix<T>>> = vec![None; steps];
        for t in (0..steps).rev() {
            let mut dh = dh_next;
            if let Some(ext) = &external[t] {
                for (a, &b) in dh.data_mut().iter_mut().zip(ext.data()) {
                    *a += b;
                }
            }
            let cache = &fwd.caches[l][t];
            let out = cell_backward_batch(layer, cache, &dh, &dc_next, &mut grads[l], want_dx)?;
            if let Some(mut dx) = out.dx {
                if l > 0 {
                    if let Some(mask) = &fwd.masks[l] {
                        for (v, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                            *v *= m;
                        }
                    }
                }
                below[t] = Some(dx);
            }
            dh_next = out.dh_prev;
            dc_next = out.dc_prev;
        }
        d_init[l] = Some(LstmState {
            h: dh_next,
            c: dc_next,
        });
        if l > 0 {
            external = below;
        } else if need_input_grad {
            d_inputs = Some(below.into_iter().map(|d| d.expect("dx")).collect());
        }
    }
    Ok(StackBackward {
        d_inputs,
        d_init: d_init.into_iter().map(|s| s.expect("state")).collect(),
    })
}

/// Builds a stack `input_dim → hidden × layers`.
pub fn init_stack<T: Real>(
    rng: &mut Rng,
    input_dim: usize,
    hidden_dim: usize,
    layers: usize,
    peepholes: bool,
) -> Vec<LstmLayer<T>> {
    (0..layers)
        .map(|l| {
            let n = if l == 0 { input_dim } else { hidden_dim };
            LstmLayer::init(rng, n, hidden_dim, peepholes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(peep_f: f64) -> LstmLayer<f64> {
        let mut l = LstmLayer::zeros(1, 1, true);
        l.peep_f.data_mut()[0] = peep_f;
        l
    }

    #[test]
    fn zero_params_zero_state_give_zero_output() {
        let l = LstmLayer::<f64>::zeros(3, 2, true);
        let s = LstmState::zeros(1, 2);
        let (next, _) = cell_forward(&l, &s, &Vector::from_f64(&[0.3, -2.0, 5.0])).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_trace_with_unit_cell_state() {
        let l = scalar_layer(0.0);
        let s = LstmState::single(&Vector::from_f64(&[0.0]), &Vector::from_f64(&[1.0]));
        let (next, cache) = cell_forward(&l, &s, &Vector::from_f64(&[0.0])).unwrap();
        assert_eq!(cache.i.data()[0], 0.5);
        assert_eq!(cache.f.data()[0], 0.5);
        assert_eq!(cache.o.data()[0], 0.5);
        assert_eq!(next.c.data()[0], 0.5);
        let expected = 0.5 * 0.5f64.tanh();
        assert!((next.h.data()[0] - expected).abs() < 1e-15);
        assert!((next.h.data()[0] - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn forget_peephole_reads_previous_cell_state() {
        let l = scalar_layer(10.0);
        let s = LstmState::single(&Vector::from_f64(&[0.0]), &Vector::from_f64(&[1.0]));
        let (next, cache) = cell_forward(&l, &s, &Vector::from_f64(&[0.0])).unwrap();
        let f = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((cache.f.data()[0] - f).abs() < 1e-15);
        assert!((next.c.data()[0] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn output_peephole_reads_new_cell_state() {
        let mut l = LstmLayer::<f64>::zeros(1, 1, true);
        l.peep_o.data_mut()[0] = 2.0;
        let s = LstmState::single(&Vector::from_f64(&[0.0]), &Vector::from_f64(&[1.0]));
        let (next, cache) = cell_forward(&l, &s, &Vector::from_f64(&[0.0])).unwrap();
        // c_t = 0.5, so o = σ(2 · 0.5) rather than σ(2 · 1).
        assert!((cache.o.data()[0] - sigmoid(1.0)).abs() < 1e-15);
        assert!((next.h.data()[0] - sigmoid(1.0) * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn disabled_peepholes_ignore_peephole_weights() {
        let mut l = scalar_layer(10.0);
        l.peepholes = false;
        let s = LstmState::single(&Vector::from_f64(&[0.0]), &Vector::from_f64(&[1.0]));
        let (next, _) = cell_forward(&l, &s, &Vector::from_f64(&[0.0])).unwrap();
        assert_eq!(next.c.data()[0], 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let l = LstmLayer::<f64>::zeros(3, 2, true);
        let s = LstmState::zeros(1, 2);
        assert!(cell_forward(&l, &s, &Vector::from_f64(&[1.0])).is_err());
        let bad_state = LstmState::zeros(1, 5);
        assert!(cell_forward(&l, &bad_state, &Vector::from_f64(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let l = LstmLayer::<f64>::init(&mut rng, 3, 4, true);
        let s = LstmState::single(&Vector::from_f64(&[0.1, 0.2, -0.3, 0.4]), &Vector::from_f64(&[0.5, -0.5, 0.2, 0.0]));
        let (_, cache) = cell_forward(&l, &s, &Vector::from_f64(&[1.0, -1.0, 0.5])).unwrap();
        let (g, dx, ds) = cell_backward(&l, &cache, &Vector::zeros(4), &Vector::zeros(4)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(ds.h.data().iter().chain(ds.c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_stack_matches_repeated_cell_forward() {
        let mut rng = Rng::new(8);
        let layers = init_stack::<f64>(&mut rng, 3, 5, 1, true);
        let xs: Vec<Matrix<f64>> = (0..4).map(|_| uniform_init(&mut rng, 1, 3, 1.0)).collect();
        let fwd = stack_forward(&layers, vec![None], Some(&xs), 4, 1, None).unwrap();
        let mut s = LstmState::zeros(1, 5);
        for (t, x) in xs.iter().enumerate() {
            let (next, _) = cell_forward(&layers[0], &s, &Vector::from_vec(x.data().to_vec())).unwrap();
            assert_eq!(&next.h, fwd.top_h(t));
            s = next;
        }
        assert_eq!(s, fwd.final_states[0]);
    }

    #[test]
    fn rows_of_a_batch_are_independent() {
        let mut rng = Rng::new(12);
        let layers = init_stack::<f32>(&mut rng, 6, 8, 2, true);
        let xs: Vec<Matrix<f32>> = (0..5).map(|_| uniform_init(&mut rng, 3, 6, 1.0)).collect();
        let full = stack_forward(&layers, vec![None, None], Some(&xs), 5, 3, None).unwrap();
        let single: Vec<Matrix<f32>> = xs.iter().map(|x| gather_rows(x, &[1])).collect();
        let one = stack_forward(&layers, vec![None, None], Some(&single), 5, 1, None).unwrap();
        for t in 0..5 {
            assert_eq!(gather_rows(full.top_h(t), &[1]), *one.top_h(t));
        }
    }

    #[test]
    fn heavy_dropout_starves_upper_layer_only() {
        let mut rng = Rng::new(21);
        let layers = init_stack::<f64>(&mut rng, 4, 6, 2, true);
        let xs: Vec<Matrix<f64>> = (0..6).map(|_| uniform_init(&mut rng, 1, 4, 1.0)).collect();
        let clean = stack_forward(&layers, vec![None, None], Some(&xs), 6, 1, None).unwrap();
        let spec = DropoutSpec::train(0.999_999);
        let masks = spec.sample_masks(&layers, &mut [Rng::new(1)]);
        let dropped = stack_forward(&layers, masks, Some(&xs), 6, 1, None).unwrap();
        for t in 0..6 {
            assert_eq!(clean.caches[0][t].h, dropped.caches[0][t].h);
            assert!(dropped.caches[1][t].x.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dropout_masks_are_deterministic_and_constant_over_time() {
        let mut rng = Rng::new(2);
        let layers = init_stack::<f32>(&mut rng, 4, 16, 3, true);
        let spec = DropoutSpec::train(0.5);
        let a = spec.sample_masks(&layers, &mut [Rng::new(5), Rng::new(6)]);
        let b = spec.sample_masks(&layers, &mut [Rng::new(5), Rng::new(6)]);
        assert_eq!(a, b);
        assert!(a[0].is_none());
        let m = a[1].as_ref().unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));

        let xs: Vec<Matrix<f32>> = (0..3).map(|_| uniform_init(&mut rng, 2, 4, 1.0)).collect();
        let f1 = stack_forward(&layers, a.clone(), Some(&xs), 3, 2, None).unwrap();
        let f2 = stack_forward(&layers, b, Some(&xs), 3, 2, None).unwrap();
        for t in 0..3 {
            assert_eq!(f1.top_h(t), f2.top_h(t));
            // Same mask at every step: zeroed units stay zeroed.
            for (v, &mk) in f1.caches[1][t].x.data().iter().zip(m.data()) {
                if mk == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        assert!(DropoutSpec::eval().sample_masks(&layers, &mut [Rng::new(1)]).iter().all(Option::is_none));
    }

    #[test]
    fn broken_layer_chain_is_rejected() {
        let mut rng = Rng::new(1);
        let layers = vec![
            LstmLayer::<f64>::init(&mut rng, 2, 3, true),
            LstmLayer::<f64>::init(&mut rng, 4, 3, true),
        ];
        let xs = vec![Matrix::zeros(1, 2)];
        assert!(stack_forward(&layers, vec![None, None], Some(&xs), 1, 1, None).is_err());
    }

    #[test]
    fn hidden_state_stays_inside_unit_interval() {
        let mut rng = Rng::new(77);
        let mut layers = init_stack::<f64>(&mut rng, 3, 4, 2, true);
        for l in &mut layers {
            l.scale(200.0);
        }
        let xs: Vec<Matrix<f64>> = (0..10).map(|_| uniform_init(&mut rng, 2, 3, 5.0)).collect();
        let fwd = stack_forward(&layers, vec![None, None], Some(&xs), 10, 2, None).unwrap();
        for l in 0..2 {
            for h in fwd.layer_outputs(l) {
                assert!(h.data().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }
}
