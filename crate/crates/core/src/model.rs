//! The reference encoder/classifier pair and its optimizer.
//!
//! The encoder is an affine projection `z = W x + b` over fixed sentence
//! embeddings; the classifier is one fully connected layer followed by a
//! softmax.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `hidden x input`
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
    /// `classes x hidden`
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        let enc_w = glorot(hidden_dim, input_dim);
        let cls_w = glorot(num_classes, hidden_dim);
        ModelParams {
            enc_w,
            enc_b: Array1::zeros(hidden_dim),
            cls_w,
            cls_b: Array1::zeros(num_classes),
        }
    }

    /// Identity encoder (`hidden_dim == input_dim`) with a zero classifier.
    pub fn identity(dim: usize, num_classes: usize) -> Self {
        ModelParams {
            enc_w: Array2::eye(dim),
            enc_b: Array1::zeros(dim),
            cls_w: Array2::zeros((num_classes, dim)),
            cls_b: Array1::zeros(num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            enc_w: Array2::zeros(self.enc_w.dim()),
            enc_b: Array1::zeros(self.enc_b.len()),
            cls_w: Array2::zeros(self.cls_w.dim()),
            cls_b: Array1::zeros(self.cls_b.len()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.enc_w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_w.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.enc_w.len() + self.enc_b.len() + self.cls_w.len() + self.cls_b.len()
    }

    /// Row-major `enc_w`, `enc_b`, `cls_w`, `cls_b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.enc_w.iter());
        out.extend(self.enc_b.iter());
        out.extend(self.cls_w.iter());
        out.extend(self.cls_b.iter());
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat). Panics if the length is wrong.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut it = flat.iter().copied();
        for x in self
            .enc_w
            .iter_mut()
            .chain(self.enc_b.iter_mut())
            .chain(self.cls_w.iter_mut())
            .chain(self.cls_b.iter_mut())
        {
            *x = it.next().unwrap();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    fn check_consistent(&self) -> Result<()> {
        if self.enc_b.len() != self.hidden_dim()
            || self.cls_w.ncols() != self.hidden_dim()
            || self.cls_b.len() != self.num_classes()
        {
            return Err(Error::Shape("model parameter shapes are inconsistent".into()));
        }
        Ok(())
    }

    /// Encodes a batch of row vectors: `Z = X W^T + b`.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_consistent()?;
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has dimension {}, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(x.dot(&self.enc_w.t()) + &self.enc_b)
    }

    /// Classifier logits for a batch of representations.
    pub fn logits_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_consistent()?;
        if z.ncols() != self.hidden_dim() {
            return Err(Error::Shape(format!(
                "representation has dimension {}, classifier expects {}",
                z.ncols(),
                self.hidden_dim()
            )));
        }
        Ok(z.dot(&self.cls_w.t()) + &self.cls_b)
    }

    /// Class probabilities for a batch of raw inputs.
    pub fn predict_proba_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.encode_batch(x)?;
        let mut logits = self.logits_batch(z.view())?;
        for mut row in logits.axis_iter_mut(Axis(0)) {
            let p = softmax(row.as_slice().unwrap());
            row.assign(&Array1::from(p));
        }
        Ok(logits)
    }

    /// Argmax labels (lowest class on exact ties).
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<u8>> {
        let probs = self.predict_proba_batch(x)?;
        Ok(probs
            .axis_iter(Axis(0))
            .map(|r| argmax(r.iter().copied()) as u8)
            .collect())
    }
}

/// Encoder forward pass for one embedding.
pub fn encode(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(params.encode_batch(view)?.into_raw_vec_and_offset().0)
}

/// Softmax over the classifier logits of one representation.
pub fn classify(params: &ModelParams, z: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Shape(e.to_string()))?;
    let logits = params.logits_batch(view)?;
    Ok(softmax(logits.as_slice().unwrap()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Adaptive-moment optimizer over flattened parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let mut flat = params.to_flat();
        let g = grads.to_flat();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..flat.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            flat[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.set_from_flat(&flat);
    }
}
