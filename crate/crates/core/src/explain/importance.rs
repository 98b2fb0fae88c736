use std::collections::HashSet;
use std::io::{Read, Write};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shap::{kernel_shap, KernelShapOptions, ShapMode, DEFAULT_BUDGET};
use super::{Background, RiskFunction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceOptions {
    pub sample_size: usize,
    pub seed: u64,
    pub budget: usize,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        ImportanceOptions { sample_size: 500, seed: 0, budget: DEFAULT_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    pub disease: String,
    pub feature_ids: Vec<String>,
    /// Mean |phi| per feature: the ranking score.
    pub mean_abs: Vec<f64>,
    pub mean_signed: Vec<f64>,
    /// Row indices (into the candidate rows) that were explained.
    pub explained: Vec<usize>,
}

fn point_seed(seed: u64, row: usize) -> u64 {
    // SplitMix64 finalizer keeps neighbouring rows' coalition draws unrelated.
    let mut z = seed ^ (row as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Explain `sample_size` rows drawn (seeded) from `rows` and average the
/// attributions. Rows are in the model's normalized space.
pub fn global_importance<F: RiskFunction + ?Sized>(
    f: &F,
    rows: ArrayView2<f64>,
    bg: &Background,
    feature_ids: &[String],
    disease: &str,
    opts: &ImportanceOptions,
) -> Result<GlobalImportance> {
    let m = f.n_features();
    if feature_ids.len() != m || rows.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, got: rows.ncols().min(feature_ids.len()) });
    }
    if rows.nrows() == 0 || opts.sample_size == 0 {
        return Err(Error::EmptySplit);
    }
    let explained: Vec<usize> = if rows.nrows() <= opts.sample_size {
        (0..rows.nrows()).collect()
    } else {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = rand::seq::index::sample(&mut rng, rows.nrows(), opts.sample_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let attributions: Vec<Vec<f64>> = explained
        .par_iter()
        .map(|&r| {
            let x = rows.row(r).to_vec();
            let shap = KernelShapOptions { budget: opts.budget, seed: point_seed(opts.seed, r), mode: ShapMode::Auto };
            kernel_shap(f, &x, bg, &shap).map(|a| a.phi)
        })
        .collect::<Result<_>>()?;
    let n = attributions.len() as f64;
    let mut mean_abs = vec![0.0; m];
    let mut mean_signed = vec![0.0; m];
    for phi in &attributions {
        for j in 0..m {
            mean_abs[j] += phi[j].abs() / n;
            mean_signed[j] += phi[j] / n;
        }
    }
    Ok(GlobalImportance {
        disease: disease.to_string(),
        feature_ids: feature_ids.to_vec(),
        mean_abs,
        mean_signed,
        explained,
    })
}

fn ranked(gi: &GlobalImportance, exclude: &[&str]) -> Result<Vec<usize>> {
    for id in exclude {
        if !gi.feature_ids.iter().any(|f| f == id) {
            return Err(Error::UnknownFeature(id.to_string()));
        }
    }
    let excluded: HashSet<&str> = exclude.iter().copied().collect();
    let mut order: Vec<usize> = (0..gi.feature_ids.len())
        .filter(|&i| !excluded.contains(gi.feature_ids[i].as_str()))
        .collect();
    // Stable sort: equal scores keep declaration order.
    order.sort_by(|&a, &b| gi.mean_abs[b].total_cmp(&gi.mean_abs[a]));
    Ok(order)
}

/// The `k` highest-scoring feature ids after dropping `exclude`.
pub fn top_k(gi: &GlobalImportance, k: usize, exclude: &[&str]) -> Result<Vec<String>> {
    let order = ranked(gi, exclude)?;
    if k > order.len() {
        return Err(Error::KTooLarge { k, available: order.len() });
    }
    Ok(order[..k].iter().map(|&i| gi.feature_ids[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub disease: String,
    pub feature_id: String,
    pub mean_abs_shap: f64,
    pub mean_signed_shap: f64,
    /// Empty for excluded features.
    pub rank: Option<usize>,
}

/// Ranked rows first, then excluded features in declaration order.
pub fn write_importance_csv<W: Write>(out: W, gi: &GlobalImportance, exclude: &[&str]) -> Result<()> {
    let order = ranked(gi, exclude)?;
    let mut w = csv::Writer::from_writer(out);
    let mut emit = |i: usize, rank: Option<usize>| {
        w.serialize(ImportanceRow {
            disease: gi.disease.clone(),
            feature_id: gi.feature_ids[i].clone(),
            mean_abs_shap: gi.mean_abs[i],
            mean_signed_shap: gi.mean_signed[i],
            rank,
        })
    };
    for (r, &i) in order.iter().enumerate() {
        emit(i, Some(r + 1))?;
    }
    for i in 0..gi.feature_ids.len() {
        if !order.contains(&i) {
            emit(i, None)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_importance_csv<R: Read>(input: R) -> Result<Vec<ImportanceRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
