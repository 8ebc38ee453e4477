//! Three-layer perceptron with batch normalization that predicts which
//! ensemble member will forecast a window best.
//!
//! `input → fc → bn → relu → fc → bn → relu → fc → softmax`

use crate::error::{Error, Result};
use crate::numerics::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, uniform_init, Matrix, Rng};
use crate::optim::{sgd_momentum_update, IdlePolicy, OptimizerConfig};
use crate::params::Params;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: Matrix<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(rng: &mut Rng, input: usize, output: usize) -> Self {
        // Uniform Glorot.
        let scale = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: uniform_init(rng, output, input, scale),
            bias: vec![0.0; output],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, x: &Matrix<f64>) -> Matrix<f64> {
        let (b, out) = (x.rows(), self.weight.rows());
        let mut z = Matrix::zeros(b, out);
        for r in 0..b {
            z.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm_nt_acc(x.data(), b, x.cols(), self.weight.data(), out, z.data_mut());
        z
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    fn backward(&self, x: &Matrix<f64>, dz: &Matrix<f64>, grads: &mut Dense) -> Matrix<f64> {
        let (b, out, input) = (x.rows(), self.weight.rows(), self.weight.cols());
        gemm_tn_acc(dz.data(), b, out, x.data(), input, grads.weight.data_mut());
        for r in 0..b {
            for (g, &d) in grads.bias.iter_mut().zip(dz.row(r)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(b, input);
        gemm_nn_acc(dz.data(), b, out, self.weight.data(), input, dx.data_mut());
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Always positive: starts at 1 and is a convex mix with batch variances.
    pub running_var: Vec<f64>,
    /// Weight of the old running estimate in each update.
    pub decay: f64,
}

struct BnCache {
    xhat: Matrix<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    fn new(features: usize, decay: f64) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            decay,
        }
    }

    fn zeros_like(&self) -> Self {
        let f = self.gamma.len();
        Self {
            gamma: vec![0.0; f],
            beta: vec![0.0; f],
            running_mean: vec![0.0; f],
            running_var: vec![1.0; f],
            decay: self.decay,
        }
    }

    fn forward_infer(&self, x: &Matrix<f64>) -> Matrix<f64> {
        let mut y = x.clone();
        for r in 0..y.rows() {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                let xhat = (*v - self.running_mean[j]) / (self.running_var[j] + BN_EPS).sqrt();
                *v = self.gamma[j] * xhat + self.beta[j];
            }
        }
        y
    }

    /// Normalizes with batch statistics; updates the running estimates when
    /// `update_running` is set.
    fn forward_train(&mut self, x: &Matrix<f64>, update_running: bool) -> (Matrix<f64>, BnCache) {
        let (b, f) = x.shape();
        let mut mean = vec![0.0; f];
        for r in 0..b {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; f];
        for r in 0..b {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(b, f);
        let mut y = Matrix::zeros(b, f);
        for r in 0..b {
            for j in 0..f {
                let h = (x.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                y.set(r, j, self.gamma[j] * h + self.beta[j]);
            }
        }
        if update_running {
            for j in 0..f {
                self.running_mean[j] = self.decay * self.running_mean[j] + (1.0 - self.decay) * mean[j];
                self.running_var[j] = self.decay * self.running_var[j] + (1.0 - self.decay) * var[j];
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &BnCache, dy: &Matrix<f64>, grads: &mut BatchNorm) -> Matrix<f64> {
        let (b, f) = dy.shape();
        let n = b as f64;
        let mut dx = Matrix::zeros(b, f);
        for j in 0..f {
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for r in 0..b {
                let d = dy.get(r, j);
                let h = cache.xhat.get(r, j);
                grads.gamma[j] += d * h;
                grads.beta[j] += d;
                let dh = d * self.gamma[j];
                sum_d += dh;
                sum_dx += dh * h;
            }
            for r in 0..b {
                let dh = dy.get(r, j) * self.gamma[j];
                let h = cache.xhat.get(r, j);
                dx.set(r, j, cache.inv_std[j] / n * (n * dh - sum_d - h * sum_dx));
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
    pub fc3: Dense,
}

impl Params<f64> for Dense {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

impl Params<f64> for BatchNorm {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.gamma, &self.beta]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl Params<f64> for MlpClassifier {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.fc1.tensors();
        t.extend(self.bn1.tensors());
        t.extend(self.fc2.tensors());
        t.extend(self.bn2.tensors());
        t.extend(self.fc3.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.fc1.tensors_mut();
        t.extend(self.bn1.tensors_mut());
        t.extend(self.fc2.tensors_mut());
        t.extend(self.bn2.tensors_mut());
        t.extend(self.fc3.tensors_mut());
        t
    }
}

struct Trace {
    x: Matrix<f64>,
    z1: Matrix<f64>,
    c1: BnCache,
    a1: Matrix<f64>,
    z2: Matrix<f64>,
    c2: BnCache,
    a2: Matrix<f64>,
    probs: Matrix<f64>,
}

fn relu(mut m: Matrix<f64>) -> Matrix<f64> {
    m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    m
}

fn relu_backward(pre: &Matrix<f64>, mut d: Matrix<f64>) -> Matrix<f64> {
    for (g, &p) in d.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// Row-wise normalized exponential.
pub fn softmax_rows(logits: &Matrix<f64>) -> Matrix<f64> {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

impl MlpClassifier {
    pub fn init(rng: &mut Rng, input: usize, hidden: (usize, usize), classes: usize, bn_decay: f64) -> Self {
        Self {
            fc1: Dense::init(rng, input, hidden.0),
            bn1: BatchNorm::new(hidden.0, bn_decay),
            fc2: Dense::init(rng, hidden.0, hidden.1),
            bn2: BatchNorm::new(hidden.1, bn_decay),
            fc3: Dense::init(rng, hidden.1, classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            bn1: self.bn1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            bn2: self.bn2.zeros_like(),
            fc3: self.fc3.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.weight.cols()
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.fc1.weight.rows(), self.fc2.weight.rows())
    }

    pub fn classes(&self) -> usize {
        self.fc3.weight.rows()
    }

    fn check_input(&self, x: &Matrix<f64>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "classifier features",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// Pre-softmax scores using the running batch-norm statistics.
    pub fn logits(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.check_input(x)?;
        let a1 = relu(self.bn1.forward_infer(&self.fc1.forward(x)));
        let a2 = relu(self.bn2.forward_infer(&self.fc2.forward(&a1)));
        Ok(self.fc3.forward(&a2))
    }

    /// Class probabilities; each row sums to 1.
    pub fn predict_proba(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    pub fn predict(&self, x: &Matrix<f64>) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows()).map(|r| crate::selection::argmax(p.row(r))).collect())
    }

    fn forward_train(&mut self, x: &Matrix<f64>, update_running: bool) -> Trace {
        let z1 = self.fc1.forward(x);
        let (y1, c1) = self.bn1.forward_train(&z1, update_running);
        let a1 = relu(y1.clone());
        let z2 = self.fc2.forward(&a1);
        let (y2, c2) = self.bn2.forward_train(&z2, update_running);
        let a2 = relu(y2.clone());
        let probs = softmax_rows(&self.fc3.forward(&a2));
        // ReLU masks are taken from the normalized values.
        Trace {
            x: x.clone(),
            z1: y1,
            c1,
            a1,
            z2: y2,
            c2,
            a2,
            probs,
        }
    }

    fn backward(&self, t: &Trace, labels: &[usize], grads: &mut MlpClassifier) {
        let b = labels.len();
        let mut d = t.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            let row = d.row_mut(r);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v /= b as f64);
        }
        let da2 = self.fc3.backward(&t.a2, &d, &mut grads.fc3);
        let dy2 = relu_backward(&t.z2, da2);
        let dz2 = self.bn2.backward(&t.c2, &dy2, &mut grads.bn2);
        let da1 = self.fc2.backward(&t.a1, &dz2, &mut grads.fc2);
        let dy1 = relu_backward(&t.z1, da1);
        let dz1 = self.bn1.backward(&t.c1, &dy1, &mut grads.bn1);
        self.fc1.backward(&t.x, &dz1, &mut grads.fc1);
    }

    /// Mean cross-entropy on a batch in training mode (batch statistics),
    /// without touching the running estimates.
    pub fn train_loss(&self, x: &Matrix<f64>, labels: &[usize]) -> Result<f64> {
        self.check_input(x)?;
        let t = self.clone().forward_train(x, false);
        Ok(cross_entropy(&t.probs, labels))
    }

    /// Gradient of [`Self::train_loss`].
    pub fn train_gradient(&self, x: &Matrix<f64>, labels: &[usize]) -> Result<MlpClassifier> {
        self.check_input(x)?;
        let t = self.clone().forward_train(x, false);
        let mut g = self.zeros_like();
        self.backward(&t, labels, &mut g);
        Ok(g)
    }
}

fn cross_entropy(probs: &Matrix<f64>, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(1e-300).ln())
        .sum::<f64>()
        / labels.len() as f64
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: (usize, usize),
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-accuracy improvement before stopping.
    pub patience: usize,
    pub bn_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: (256, 64),
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            bn_decay: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

fn gather(x: &Matrix<f64>, rows: &[usize]) -> Matrix<f64> {
    let mut out = Matrix::zeros(rows.len(), x.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    out
}

/// Minimizes cross-entropy with momentum SGD; returns the snapshot with the
/// best validation accuracy.
pub fn train_classifier(
    x: &Matrix<f64>,
    labels: &[usize],
    x_val: &Matrix<f64>,
    labels_val: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<(MlpClassifier, Vec<ClassifierEpoch>)> {
    if x.rows() < 2 || x.rows() != labels.len() {
        return Err(Error::EmptyDataset("classifier training set"));
    }
    if x_val.rows() == 0 || x_val.rows() != labels_val.len() {
        return Err(Error::EmptyDataset("classifier validation set"));
    }
    if x_val.cols() != x.cols() {
        return Err(Error::Shape {
            op: "validation features",
            left: x_val.shape(),
            right: (x_val.rows(), x.cols()),
        });
    }
    if classes == 0 || labels.iter().chain(labels_val).any(|&l| l >= classes) {
        return Err(Error::Data(format!("labels must lie in 0..{classes}")));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        log::warn!("every training label is class {first}; the classifier will be degenerate");
    }
    let opt = OptimizerConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        clip_norm: f64::INFINITY,
        batch_size: cfg.batch_size,
        idle: IdlePolicy::Decay,
    };
    opt.validate()?;
    let root = Rng::new(cfg.seed);
    let mut model = MlpClassifier::init(&mut root.split(0), x.cols(), cfg.hidden, classes, cfg.bn_decay);
    let mut velocity = model.zeros_like();
    let mut best = (model.predict(x_val).map(|p| accuracy(&p, labels_val))?, model.clone());
    let mut since = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..x.rows()).collect();
        root.split(epoch as u64).shuffle(&mut order);
        let mut loss = 0.0;
        let mut seen = 0;
        for idx in order.chunks(cfg.batch_size) {
            // Batch statistics of a single row are meaningless.
            if idx.len() < 2 {
                continue;
            }
            let xb = gather(x, idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let t = model.forward_train(&xb, true);
            loss += cross_entropy(&t.probs, &yb) * idx.len() as f64;
            seen += idx.len();
            let mut g = model.zeros_like();
            model.backward(&t, &yb, &mut g);
            sgd_momentum_update(&mut model, &g, &mut velocity, &opt)?;
        }
        let train_accuracy = accuracy(&model.predict(x)?, labels);
        let val_accuracy = accuracy(&model.predict(x_val)?, labels_val);
        log.push(ClassifierEpoch {
            epoch,
            train_loss: loss / seen.max(1) as f64,
            train_accuracy,
            val_accuracy,
        });
        log::info!(
            "classifier epoch {epoch} loss {:.4} train acc {train_accuracy:.3} val acc {val_accuracy:.3}",
            loss / seen.max(1) as f64
        );
        if val_accuracy > best.0 {
            best = (val_accuracy, model.clone());
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, dim: usize, classes: usize, seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut x = Matrix::zeros(n, dim);
        let mut y = Vec::with_capacity(n);
        for r in 0..n {
            let c = r % classes;
            y.push(c);
            for j in 0..dim {
                let centre = if j % classes == c { 2.0 } else { 0.0 };
                x.set(r, j, centre + rng.uniform_range(-0.5, 0.5));
            }
        }
        (x, y)
    }

    #[test]
    fn probabilities_sum_to_one() {
        let clf = MlpClassifier::init(&mut Rng::new(3), 6, (8, 5), 3, 0.9);
        let (x, _) = toy(10, 6, 3, 1);
        let p = clf.predict_proba(&x).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = Matrix::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[&[100.3, 99.0, 102.0]]).unwrap();
        let (pa, pb) = (softmax_rows(&a), softmax_rows(&b));
        for j in 0..3 {
            assert!((pa.get(0, j) - pb.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut clf = MlpClassifier::init(&mut Rng::new(5), 5, (7, 4), 3, 0.9);
        // Non-trivial batch-norm parameters.
        for (j, g) in clf.bn1.gamma.iter_mut().enumerate() {
            *g = 0.5 + 0.1 * j as f64;
        }
        clf.bn2.beta.iter_mut().for_each(|b| *b = 0.3);
        let (x, y) = toy(9, 5, 3, 2);
        let g = clf.train_gradient(&x, &y).unwrap();
        let analytic = g.flatten();
        let base = clf.flatten();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut plus = clf.clone();
            let mut minus = clf.clone();
            if let Some(v) = plus.tensors_mut().into_iter().flat_map(|t| t.iter_mut()).nth(i) {
                *v += eps;
            }
            if let Some(v) = minus.tensors_mut().into_iter().flat_map(|t| t.iter_mut()).nth(i) {
                *v -= eps;
            }
            let fd = (plus.train_loss(&x, &y).unwrap() - minus.train_loss(&x, &y).unwrap()) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!((analytic[i] - fd).abs() / denom < 1e-5, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let (x, y) = toy(300, 8, 4, 7);
        let (xv, yv) = toy(80, 8, 4, 8);
        let (clf, log) = train_classifier(&x, &y, &xv, &yv, 4, &ClassifierConfig::default()).unwrap();
        let acc = accuracy(&clf.predict(&x).unwrap(), &y);
        assert!(acc >= 0.99, "accuracy {acc}, log {log:?}");
    }

    #[test]
    fn running_variance_stays_positive() {
        let mut clf = MlpClassifier::init(&mut Rng::new(1), 3, (4, 4), 2, 0.9);
        let x = Matrix::from_rows(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]).unwrap();
        for _ in 0..50 {
            clf.forward_train(&x, true);
        }
        assert!(clf.bn1.running_var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bad_labels_are_rejected() {
        let (x, _) = toy(10, 4, 2, 1);
        assert!(train_classifier(&x, &[5; 10], &x, &[0; 10], 2, &ClassifierConfig::default()).is_err());
    }
}
