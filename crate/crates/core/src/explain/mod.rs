//! Feature attribution: background summarization, Kernel SHAP, exact Shapley
//! enumeration and global importance rankings.
//!
//! Attributions are computed in the model's normalized input space and
//! reported per original feature. "Absent" features are filled from a
//! weighted background set, so the value of a coalition `S` is
//! `v(S) = sum_k w_k * f(z_k)` with `z_k = x` on `S` and centroid `k` elsewhere.

mod importance;
mod kmeans;
mod shap;

pub use importance::{
    global_importance, read_importance_csv, top_k, write_importance_csv, GlobalImportance, ImportanceOptions,
    ImportanceRow,
};
pub use kmeans::{kmeans, KMeans, MAX_LLOYD_ITERATIONS};
pub use shap::{
    exact_shapley, exact_shapley_game, kernel_shap, kernel_shap_game, kernel_weight, value_function, Attribution,
    KernelShapOptions, ShapMode, DEFAULT_BUDGET, MAX_EXACT_FEATURES,
};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::RiskModel;

/// Anything that maps a batch of input rows to risk scores.
pub trait RiskFunction: Sync {
    fn n_features(&self) -> usize;
    fn risk_rows(&self, rows: ArrayView2<f64>) -> Vec<f64>;
}

impl RiskFunction for RiskModel {
    fn n_features(&self) -> usize {
        self.input_dim()
    }

    fn risk_rows(&self, rows: ArrayView2<f64>) -> Vec<f64> {
        self.risk_batch(rows).expect("row width checked by caller")
    }
}

/// Wraps a per-row closure, e.g. an additive test model.
pub struct FnModel<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> RiskFunction for FnModel<F> {
    fn n_features(&self) -> usize {
        self.dim
    }

    fn risk_rows(&self, rows: ArrayView2<f64>) -> Vec<f64> {
        rows.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => (self.f)(s),
                None => (self.f)(&r.to_vec()),
            })
            .collect()
    }
}

/// Weighted reference points used to marginalize absent features.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub centroids: Array2<f64>,
    pub weights: Vec<f64>,
}

impl Background {
    pub fn new(centroids: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.nrows() != weights.len() {
            return Err(Error::LengthMismatch { left: centroids.nrows(), right: weights.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig("background weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("background weights sum to {total}, not 1")));
        }
        Ok(Background { centroids, weights })
    }

    /// One reference point with weight 1.
    pub fn single(point: &[f64]) -> Self {
        Background {
            centroids: Array2::from_shape_vec((1, point.len()), point.to_vec()).expect("row"),
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }
}
