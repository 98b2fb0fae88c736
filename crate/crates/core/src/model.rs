//! Residual MLP risk model: forward pass, weighted cross-entropy and exact gradients.
//!
//! Architecture (all affine maps are `y = W x + b`, `W` stored row-major):
//!
//! ```text
//! h0  = W_in x + b_in                              input_dim -> hidden
//! h'  = relu(h + W2 relu(W1 h + b1) + b2)          x n_blocks
//! g   = relu(W3 h + b3)                            head
//! p   = softmax(W4 g + b4)                         2 logits
//! ```
//!
//! Parameters live in one flat vector in declaration order (`W` then `b` for
//! each layer); that order is also the checkpoint order.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NormStats;
use crate::schema::N_FEATURES;

/// Lower clamp applied to `p[y]` before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: N_FEATURES,
            hidden_dim: 64,
            n_blocks: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim < 2 || self.n_blocks == 0 {
            return Err(Error::InvalidConfig(format!(
                "model needs input_dim >= 1, hidden_dim >= 2, n_blocks >= 1 (got {}, {}, {})",
                self.input_dim, self.hidden_dim, self.n_blocks
            )));
        }
        Ok(())
    }
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: usize,
    pub b: usize,
}

impl Affine {
    pub fn n_params(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Dims {
    /// Layers in declaration order: input projection, block pairs, two head layers.
    pub fn layers(&self) -> Vec<Affine> {
        let mut shapes = vec![(self.hidden, self.input)];
        for _ in 0..self.blocks {
            shapes.push((self.hidden, self.hidden));
            shapes.push((self.hidden, self.hidden));
        }
        shapes.push((self.hidden, self.hidden));
        shapes.push((2, self.hidden));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(out_dim, in_dim)| {
                let l = Affine {
                    out_dim,
                    in_dim,
                    w: offset,
                    b: offset + out_dim * in_dim,
                };
                offset += l.n_params();
                l
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(Affine::n_params).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p: [f64; 2],
}

impl Prediction {
    pub fn risk(&self) -> f64 {
        self.p[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { w0: 1.0, w1: 1.0 }
    }

    pub fn of(&self, y: u8) -> f64 {
        if y == 0 {
            self.w0
        } else {
            self.w1
        }
    }
}

/// Per-disease risk model with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    dims: Dims,
    layers: Vec<Affine>,
    pub params: Vec<f64>,
    pub norm: NormStats,
    pub schema_hash: u64,
    pub disease: String,
}

/// Draw fan-in/fan-out scaled uniform weights with zero biases.
pub fn init_model(config: &ModelConfig) -> Result<RiskModel> {
    config.validate()?;
    let dims = Dims {
        input: config.input_dim,
        hidden: config.hidden_dim,
        blocks: config.n_blocks,
    };
    let layers = dims.layers();
    let mut params = vec![0.0; dims.n_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for l in &layers {
        let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut params[l.w..l.b] {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(RiskModel {
        dims,
        layers,
        params,
        norm: NormStats::identity(config.input_dim),
        schema_hash: 0,
        disease: String::new(),
    })
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    input: Array2<f64>,
    block_in: Vec<Array2<f64>>,
    block_pre: Vec<Array2<f64>>,
    block_sum: Vec<Array2<f64>>,
    head_in: Array2<f64>,
    head_pre: Array2<f64>,
    probs: Array2<f64>,
}

fn relu(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl RiskModel {
    pub fn from_parts(dims: Dims, params: Vec<f64>, norm: NormStats, schema_hash: u64, disease: String) -> Result<Self> {
        let expected = dims.n_params();
        if params.len() != expected {
            return Err(Error::ShapeMismatch { expected, got: params.len() });
        }
        if norm.dim() != dims.input {
            return Err(Error::DimensionMismatch { expected: dims.input, got: norm.dim() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("model parameters must be finite".into()));
        }
        Ok(RiskModel {
            layers: dims.layers(),
            dims,
            params,
            norm,
            schema_hash,
            disease,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims.input
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn weight(&self, l: &Affine) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.out_dim, l.in_dim), &self.params[l.w..l.b]).expect("layout")
    }

    pub fn bias(&self, l: &Affine) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[l.b..l.b + l.out_dim])
    }

    fn affine(&self, l: &Affine, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weight(l).t());
        out += &self.bias(l);
        out
    }

    fn run(&self, x: ArrayView2<f64>, keep: bool) -> (Array2<f64>, Option<Trace>) {
        let n_blocks = self.dims.blocks;
        let mut h = self.affine(&self.layers[0], &x);
        let mut block_in = Vec::new();
        let mut block_pre = Vec::new();
        let mut block_sum = Vec::new();
        for b in 0..n_blocks {
            let (l1, l2) = (&self.layers[1 + 2 * b], &self.layers[2 + 2 * b]);
            let pre = self.affine(l1, &h.view());
            let mut u = pre.clone();
            relu(&mut u);
            let mut s = self.affine(l2, &u.view());
            s += &h;
            let mut next = s.clone();
            relu(&mut next);
            if keep {
                block_in.push(h);
                block_pre.push(pre);
                block_sum.push(s);
            }
            h = next;
        }
        let head_pre = self.affine(&self.layers[1 + 2 * n_blocks], &h.view());
        let mut g = head_pre.clone();
        relu(&mut g);
        let logits = self.affine(&self.layers[2 + 2 * n_blocks], &g.view());
        let probs = softmax_rows(&logits);
        let trace = keep.then(|| Trace {
            input: x.to_owned(),
            block_in,
            block_pre,
            block_sum,
            head_in: h,
            head_pre,
            probs: probs.clone(),
        });
        (probs, trace)
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.dims.input {
            return Err(Error::DimensionMismatch { expected: self.dims.input, got });
        }
        Ok(())
    }

    /// Class probabilities for a batch of normalized inputs (rows).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(x.ncols())?;
        Ok(self.run(x, false).0)
    }

    /// Risk (`p[1]`) for each normalized row.
    pub fn risk_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x)?.column(1).to_vec())
    }

    /// Forward pass on one normalized input.
    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        self.check_width(x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let probs = self.run(view, false).0;
        Ok(Prediction { p: [probs[[0, 0]], probs[[0, 1]]] })
    }

    /// Normalize a cleaned 38-vector with the model's statistics, then forward.
    pub fn predict_clean(&self, x: &[f64]) -> Result<Prediction> {
        self.check_width(x.len())?;
        self.forward(&self.norm.apply(x))
    }

    /// Mean weighted cross-entropy of a batch and its exact gradient.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, y: &[u8], w: &ClassWeights) -> Result<(f64, Vec<f64>)> {
        self.check_width(x.ncols())?;
        if x.nrows() != y.len() {
            return Err(Error::LengthMismatch { left: x.nrows(), right: y.len() });
        }
        if y.is_empty() {
            return Err(Error::TooFewRecords { min: 1, got: 0 });
        }
        let n = y.len() as f64;
        let (_, trace) = self.run(x, true);
        let t = trace.expect("trace kept");

        let mut loss = 0.0;
        let mut dlogits = Array2::<f64>::zeros((y.len(), 2));
        for (i, &yi) in y.iter().enumerate() {
            let k = usize::from(yi != 0);
            let py = t.probs[[i, k]];
            let wy = w.of(yi);
            loss += wy * -floor_prob(py).ln();
            if py >= PROB_FLOOR {
                for c in 0..2 {
                    let onehot = if c == k { 1.0 } else { 0.0 };
                    dlogits[[i, c]] = wy * (t.probs[[i, c]] - onehot) / n;
                }
            }
        }
        loss /= n;

        let mut grads = vec![0.0; self.params.len()];
        let nb = self.dims.blocks;
        let head2 = self.layers[2 + 2 * nb];
        let head1 = self.layers[1 + 2 * nb];

        let mut g = t.head_pre.clone();
        relu(&mut g);
        self.accumulate(&mut grads, &head2, &dlogits, &g);
        let mut dg = dlogits.dot(&self.weight(&head2));
        relu_mask(&mut dg, &t.head_pre);
        self.accumulate(&mut grads, &head1, &dg, &t.head_in);
        let mut dh = dg.dot(&self.weight(&head1));

        for b in (0..nb).rev() {
            let (l1, l2) = (self.layers[1 + 2 * b], self.layers[2 + 2 * b]);
            relu_mask(&mut dh, &t.block_sum[b]);
            let mut u = t.block_pre[b].clone();
            relu(&mut u);
            self.accumulate(&mut grads, &l2, &dh, &u);
            let mut du = dh.dot(&self.weight(&l2));
            relu_mask(&mut du, &t.block_pre[b]);
            self.accumulate(&mut grads, &l1, &du, &t.block_in[b]);
            dh = dh + du.dot(&self.weight(&l1));
        }
        self.accumulate(&mut grads, &self.layers[0], &dh, &t.input);
        Ok((loss, grads))
    }

    fn accumulate(&self, grads: &mut [f64], l: &Affine, dout: &Array2<f64>, input: &Array2<f64>) {
        let gw = dout.t().dot(input);
        for (dst, src) in grads[l.w..l.b].iter_mut().zip(gw.iter()) {
            *dst = *src;
        }
        let gb: Array1<f64> = dout.sum_axis(Axis(0));
        grads[l.b..l.b + l.out_dim].copy_from_slice(gb.as_slice().expect("contiguous"));
    }

    /// Mean weighted cross-entropy without gradients.
    pub fn batch_loss(&self, x: ArrayView2<f64>, y: &[u8], w: &ClassWeights) -> Result<f64> {
        let probs = self.forward_batch(x)?;
        if probs.nrows() != y.len() {
            return Err(Error::LengthMismatch { left: probs.nrows(), right: y.len() });
        }
        let total: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &yi)| {
                let p = Prediction { p: [probs[[i, 0]], probs[[i, 1]]] };
                loss_weighted_ce(&p, yi, w)
            })
            .sum();
        Ok(total / y.len() as f64)
    }
}

// `f64::max` would swallow a NaN; a diverged model must surface as a NaN loss.
fn floor_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(PROB_FLOOR)
    }
}

/// `w_y * -ln(max(p[y], 1e-12))`; NaN probabilities give a NaN loss.
pub fn loss_weighted_ce(p: &Prediction, y: u8, w: &ClassWeights) -> f64 {
    w.of(y) * -floor_prob(p.p[usize::from(y != 0)]).ln()
}

/// Argmax of the two class scores; an exact tie predicts the disease class.
pub fn classify(p: &Prediction) -> u8 {
    u8::from(p.p[1] >= p.p[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when there are no positive labels.
    pub recall: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn recall_display(&self) -> String {
        match self.recall {
            Some(r) => format!("{:.2}%", 100.0 * r),
            None => "undefined".into(),
        }
    }
}

pub fn metrics(preds: &[u8], labels: &[u8]) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: labels.len() });
    }
    if preds.is_empty() {
        return Err(Error::TooFewRecords { min: 1, got: 0 });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / preds.len() as f64,
        recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
        tp,
        fp,
        tn,
        fn_,
    })
}
