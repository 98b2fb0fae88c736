//! Training loop: class weighting, Adam, plateau halving, best-test-loss selection.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{fit_normalizer, split_dataset, CleanRecord, NormStats, SplitIndices};
use crate::model::{classify, init_model, metrics, ClassWeights, Metrics, ModelConfig, Prediction, RiskModel};
use crate::schema::FeatureSchema;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Inverse-frequency class weights; `false` trains with unit weights.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            lr0: 0.001,
            plateau_patience: 3,
            lr_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.epochs > 0
            && self.lr0 > 0.0
            && self.plateau_patience > 0
            && self.lr_factor > 0.0
            && self.lr_factor < 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

/// `w_c = N / (2 n_c)`, so both classes carry total weight `N / 2`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let n1 = labels.iter().filter(|&&y| y != 0).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass(String::new()));
    }
    let n = labels.len() as f64;
    Ok(ClassWeights {
        w0: n / (2.0 * n0 as f64),
        w1: n / (2.0 * n1 as f64),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let n = params.len();
    for got in [grads.len(), state.m.len(), state.v.len()] {
        if got != n {
            return Err(Error::ShapeMismatch { expected: n, got });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement of the best train loss, then resets the counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    factor: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr,
            best: f64::INFINITY,
            stale: 0,
            patience,
            factor,
        }
    }

    /// Record an epoch's train loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, train_loss: f64) -> f64 {
        if train_loss < self.best {
            self.best = train_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after the last epoch of `history`, given the rate in force during it.
pub fn lr_schedule(history: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
    let mut sched = PlateauScheduler::new(current_lr, cfg.plateau_patience, cfg.lr_factor);
    let mut halved_last = false;
    for &loss in history {
        let before = sched.lr;
        sched.step(loss);
        halved_last = sched.lr < before;
    }
    if halved_last {
        current_lr * cfg.lr_factor
    } else {
        current_lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub disease: String,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    /// Learning rate in force during each epoch.
    pub lr: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_test_loss: f64,
    pub weights: ClassWeights,
    pub n_train: usize,
    pub n_test: usize,
    pub test_metrics: Metrics,
}

/// Normalized design matrix plus label vector for one disease.
pub struct Design {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
}

impl Design {
    pub fn new(records: &[CleanRecord], label: usize, norm: &NormStats) -> Self {
        let dim = norm.dim();
        let mut x = Array2::zeros((records.len(), dim));
        for (mut row, r) in x.rows_mut().into_iter().zip(records) {
            for (j, v) in norm.apply(&r.x).into_iter().enumerate() {
                row[j] = v;
            }
        }
        Design {
            x,
            y: records.iter().map(|r| r.y[label]).collect(),
        }
    }

    fn gather(&self, idx: &[usize]) -> (Array2<f64>, Vec<u8>) {
        (
            self.x.select(ndarray::Axis(0), idx),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

const EVAL_CHUNK: usize = 4096;

fn mean_loss(model: &RiskModel, design: &Design, idx: &[usize], w: &ClassWeights) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = design.gather(chunk);
        total += model.batch_loss(x.view(), &y, w)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Predictions for the rows in `idx`.
pub fn predict_rows(model: &RiskModel, design: &Design, idx: &[usize]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = design.gather(chunk);
        let probs = model.forward_batch(x.view())?;
        out.extend(probs.rows().into_iter().map(|r| Prediction { p: [r[0], r[1]] }));
    }
    Ok(out)
}

pub fn evaluate(model: &RiskModel, design: &Design, idx: &[usize]) -> Result<Metrics> {
    let preds: Vec<u8> = predict_rows(model, design, idx)?.iter().map(classify).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| design.y[i]).collect();
    metrics(&preds, &labels)
}

/// Split 80/20 (stratified on `disease`, seeded by `train_cfg.seed`) and train.
pub fn train(
    records: &[CleanRecord],
    schema: &FeatureSchema,
    disease: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(RiskModel, TrainReport)> {
    let label = schema.require_label(disease)?;
    let labels: Vec<u8> = records.iter().map(|r| r.y[label]).collect();
    let split = split_dataset(records.len(), &labels, train_cfg.seed)?;
    let (mut model, report) = train_on_split(records, label, disease, &split, model_cfg, train_cfg)?;
    model.schema_hash = schema.hash();
    Ok((model, report))
}

/// Train on explicit train/test index sets.
pub fn train_on_split(
    records: &[CleanRecord],
    label: usize,
    disease: &str,
    split: &SplitIndices,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(RiskModel, TrainReport)> {
    cfg.validate()?;
    if split.test.is_empty() {
        return Err(Error::EmptySplit);
    }
    if let Some(r) = records.first() {
        if r.x.len() != model_cfg.input_dim {
            return Err(Error::DimensionMismatch { expected: model_cfg.input_dim, got: r.x.len() });
        }
    }
    let norm = fit_normalizer(records, split)?;
    let design = Design::new(records, label, &norm);
    let train_labels: Vec<u8> = split.train.iter().map(|&i| design.y[i]).collect();
    let balanced = class_weights(&train_labels).map_err(|_| Error::SingleClass(disease.to_string()))?;
    let weights = if cfg.class_weighting { balanced } else { ClassWeights::uniform() };

    let mut model = init_model(model_cfg)?;
    model.norm = norm;
    model.disease = disease.to_string();

    let mut adam = AdamState::new(model.n_params());
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau_patience, cfg.lr_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = split.train.clone();
    let mut lr = cfg.lr0;

    let mut report_train = Vec::with_capacity(cfg.epochs);
    let mut report_test = Vec::with_capacity(cfg.epochs);
    let mut report_lr = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = design.gather(batch);
            let (loss, grads) = model.loss_and_gradient(x.view(), &y, &weights)?;
            adam_step(&mut model.params, &grads, &mut adam, lr, cfg)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let test_loss = mean_loss(&model, &design, &split.test, &weights)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, train_loss, lr });
        }
        report_train.push(train_loss);
        report_test.push(test_loss);
        report_lr.push(lr);
        if test_loss < best.0 {
            best = (test_loss, epoch, model.params.clone());
        }
        lr = sched.step(train_loss);
    }

    let (best_test_loss, best_epoch, params) = best;
    model.params = params;
    let test_metrics = evaluate(&model, &design, &split.test)?;
    let report = TrainReport {
        disease: disease.to_string(),
        train_loss: report_train,
        test_loss: report_test,
        lr: report_lr,
        best_epoch,
        best_test_loss,
        weights,
        n_train: split.train.len(),
        n_test: split.test.len(),
        test_metrics,
    };
    Ok((model, report))
}
