//! Item-space autoencoder (AutoRec) over sparse ±1 rating vectors.
//!
//! ```text
//! h      = sigmoid(W1 · r + b1)      W1: d×N, b1: d
//! scores = W2 · h + b2               W2: N×d, b2: N
//! loss   = mean over observed (score_i − r_i)² + λ(‖W1‖² + ‖W2‖²)
//! ```
//!
//! Parameters are held in f64 so gradient checks are meaningful; persisted
//! weights are f32.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::tensor::{Tensor, WeightsFile};

use super::sentiment::RatingVector;
use super::RecError;

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoRecParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl AutoRecParams {
    pub fn zeros(n: usize, d: usize) -> Self {
        AutoRecParams {
            w1: Array2::zeros((d, n)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((n, d)),
            b2: Array1::zeros(n),
        }
    }

    /// Uniform init in `[-scale, scale]` for the weight matrices; zero biases.
    pub fn random(n: usize, d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(n, d);
        p.w1.mapv_inplace(|_| rng.random_range(-scale..=scale));
        p.w2.mapv_inplace(|_| rng.random_range(-scale..=scale));
        p
    }

    pub fn n(&self) -> usize {
        self.b2.len()
    }

    pub fn d(&self) -> usize {
        self.b1.len()
    }

    pub fn validate(&self) -> Result<(), RecError> {
        let (n, d) = (self.n(), self.d());
        if self.w1.dim() != (d, n) || self.w2.dim() != (n, d) {
            return Err(RecError::ShapeMismatch(format!(
                "W1 {:?}, W2 {:?} inconsistent with N={n}, d={d}",
                self.w1.dim(),
                self.w2.dim()
            )));
        }
        let all_finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|x| x.is_finite());
        if !all_finite {
            return Err(RecError::NonFiniteParams);
        }
        Ok(())
    }

    /// Rounds every entry through f32, the persisted precision.
    pub fn quantized(&self) -> Self {
        let q = |x: &f64| *x as f32 as f64;
        AutoRecParams {
            w1: self.w1.map(q),
            b1: self.b1.map(q),
            w2: self.w2.map(q),
            b2: self.b2.map(q),
        }
    }

    pub fn to_weights(&self) -> WeightsFile {
        let t = |shape: Vec<usize>, it: &mut dyn Iterator<Item = &f64>| {
            Tensor::new(shape, it.map(|&x| x as f32).collect()).expect("shape matches")
        };
        let mut w = WeightsFile::new();
        let (n, d) = (self.n(), self.d());
        w.insert("W1", t(vec![d, n], &mut self.w1.iter())).unwrap();
        w.insert("b1", t(vec![d], &mut self.b1.iter())).unwrap();
        w.insert("W2", t(vec![n, d], &mut self.w2.iter())).unwrap();
        w.insert("b2", t(vec![n], &mut self.b2.iter())).unwrap();
        w
    }

    pub fn from_weights(w: &WeightsFile) -> Result<Self, RecError> {
        let get = |name: &str| {
            w.get(name)
                .ok_or_else(|| RecError::ShapeMismatch(format!("missing tensor {name}")))
        };
        let mat = |name: &str| -> Result<Array2<f64>, RecError> {
            let t = get(name)?;
            let &[r, c] = t.shape() else {
                return Err(RecError::ShapeMismatch(format!("{name} must be rank 2")));
            };
            Ok(Array2::from_shape_vec((r, c), t.data().iter().map(|&x| x as f64).collect())
                .expect("element count checked by Tensor"))
        };
        let vec = |name: &str| -> Result<Array1<f64>, RecError> {
            let t = get(name)?;
            if t.shape().len() != 1 {
                return Err(RecError::ShapeMismatch(format!("{name} must be rank 1")));
            }
            Ok(t.data().iter().map(|&x| x as f64).collect())
        };
        let p = AutoRecParams {
            w1: mat("W1")?,
            b1: vec("b1")?,
            w2: mat("W2")?,
            b2: vec("b2")?,
        };
        p.validate()?;
        Ok(p)
    }

    fn hidden(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.w1.dot(&x) + &self.b1).mapv(sigmoid)
    }

    /// Scores for a dense input vector.
    pub fn forward_dense(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, RecError> {
        if x.len() != self.n() {
            return Err(RecError::ShapeMismatch(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.n()
            )));
        }
        let h = self.hidden(x);
        Ok(self.w2.dot(&h) + &self.b2)
    }
}

pub fn autorec_forward(p: &AutoRecParams, r: &RatingVector) -> Result<Array1<f64>, RecError> {
    p.validate().and_then(|_| {
        if r.n() != p.n() {
            return Err(RecError::ShapeMismatch(format!(
                "rating vector over {} items, model has {}",
                r.n(),
                p.n()
            )));
        }
        p.forward_dense(Array1::from(r.dense()).view())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Masked squared error plus L2 on both weight matrices, with analytic
/// gradients for all four parameter blocks.
pub fn autorec_loss_grad(
    p: &AutoRecParams,
    batch: &[RatingVector],
    lambda: f64,
) -> Result<(f64, Gradients), RecError> {
    if batch.is_empty() {
        return Err(RecError::EmptyBatch);
    }
    p.validate()?;
    let n = p.n();
    if let Some(bad) = batch.iter().find(|r| r.n() != n) {
        return Err(RecError::ShapeMismatch(format!(
            "rating vector over {} items, model has {n}",
            bad.n()
        )));
    }
    let observed: usize = batch.iter().map(RatingVector::len).sum();
    // Batched form: rows of X are users, M masks observed entries.
    let mut x = Array2::<f64>::zeros((batch.len(), n));
    let mut mask = Array2::<f64>::zeros((batch.len(), n));
    for (row, r) in batch.iter().enumerate() {
        for (id, rating) in r.iter() {
            x[[row, id as usize]] = rating as f64;
            mask[[row, id as usize]] = 1.0;
        }
    }
    let h = (x.dot(&p.w1.t()) + &p.b1).mapv(sigmoid);
    let s = h.dot(&p.w2.t()) + &p.b2;
    let err = (s - &x) * &mask;
    let sq_err = err.mapv(|e| e * e).sum();
    let scale = if observed > 0 { 2.0 / observed as f64 } else { 0.0 };
    let ds = err * scale;
    let dh = ds.dot(&p.w2);
    let da = dh * h.mapv(|v| v * (1.0 - v));
    let mut g = Gradients {
        w1: da.t().dot(&x),
        b1: da.sum_axis(Axis(0)),
        w2: ds.t().dot(&h),
        b2: ds.sum_axis(Axis(0)),
    };
    let data_loss = if observed > 0 { sq_err / observed as f64 } else { 0.0 };
    let reg = lambda * (p.w1.mapv(|x| x * x).sum() + p.w2.mapv(|x| x * x).sum());
    g.w1.scaled_add(2.0 * lambda, &p.w1);
    g.w2.scaled_add(2.0 * lambda, &p.w2);
    Ok((data_loss + reg, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.05,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: AutoRecParams,
    /// Loss at the start of each epoch, before that epoch's update.
    pub epoch_losses: Vec<f64>,
    /// Loss of the returned parameters.
    pub final_loss: f64,
}

/// Full-batch gradient descent.
pub fn train(p: &AutoRecParams, data: &[RatingVector], cfg: TrainConfig) -> Result<TrainReport, RecError> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(RecError::InvalidLearningRate(cfg.lr));
    }
    let mut params = p.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, g) = loss_or_diverge(&params, data, cfg.lambda, epoch)?;
        epoch_losses.push(loss);
        params.w1.scaled_add(-cfg.lr, &g.w1);
        params.b1.scaled_add(-cfg.lr, &g.b1);
        params.w2.scaled_add(-cfg.lr, &g.w2);
        params.b2.scaled_add(-cfg.lr, &g.b2);
    }
    let (final_loss, _) = loss_or_diverge(&params, data, cfg.lambda, cfg.epochs)?;
    Ok(TrainReport {
        params,
        epoch_losses,
        final_loss,
    })
}

fn loss_or_diverge(
    p: &AutoRecParams,
    data: &[RatingVector],
    lambda: f64,
    epoch: usize,
) -> Result<(f64, Gradients), RecError> {
    match autorec_loss_grad(p, data, lambda) {
        Ok((loss, _)) if !loss.is_finite() => Err(RecError::DivergenceDetected { epoch }),
        Err(RecError::NonFiniteParams) => Err(RecError::DivergenceDetected { epoch }),
        other => other,
    }
}
