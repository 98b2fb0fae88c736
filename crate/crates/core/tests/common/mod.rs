//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use cdrisk::explain::Background;
use cdrisk::ingest::NormStats;
use cdrisk::model::{init_model, ClassWeights, ModelConfig, RiskModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Xavier-initialized model with every parameter then jittered, so biases are nonzero.
pub fn random_model(input: usize, hidden: usize, blocks: usize, seed: u64) -> RiskModel {
    let mut m = init_model(&ModelConfig { input_dim: input, hidden_dim: hidden, n_blocks: blocks, seed }).unwrap();
    let mut r = rng(seed ^ 0xA5A5);
    for p in &mut m.params {
        *p += r.random_range(-0.2..0.2);
    }
    m.norm = NormStats::identity(input);
    m
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

pub fn random_background(k: usize, m: usize, r: &mut ChaCha8Rng) -> Background {
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Background::new(random_matrix(k, m, 1.5, r), raw.iter().map(|w| w / total).collect()).unwrap()
}

/// Scalar forward pass written straight from the architecture: input
/// projection, residual blocks `relu(h + W2 relu(W1 h + b1) + b2)`, a relu
/// hidden head layer, two logits and a softmax. Also returns the sign pattern
/// of every relu input, so callers can tell when a perturbation crosses a kink.
pub fn oracle_forward(model: &RiskModel, params: &[f64], x: &[f64]) -> ([f64; 2], Vec<bool>) {
    let layers = model.layers();
    let affine = |l: usize, v: &[f64]| -> Vec<f64> {
        let a = layers[l];
        (0..a.out_dim)
            .map(|o| params[a.b + o] + (0..a.in_dim).map(|i| params[a.w + o * a.in_dim + i] * v[i]).sum::<f64>())
            .collect()
    };
    let mut pattern = Vec::new();
    let mut relu = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .map(|z| {
                pattern.push(z > 0.0);
                z.max(0.0)
            })
            .collect()
    };
    let blocks = model.dims().blocks;
    let mut h = affine(0, x);
    for b in 0..blocks {
        let u = relu(affine(1 + 2 * b, &h));
        let s: Vec<f64> = affine(2 + 2 * b, &u).iter().zip(&h).map(|(a, b)| a + b).collect();
        h = relu(s);
    }
    let g = relu(affine(1 + 2 * blocks, &h));
    let z = affine(2 + 2 * blocks, &g);
    let mx = z[0].max(z[1]);
    let e = [(z[0] - mx).exp(), (z[1] - mx).exp()];
    let sum = e[0] + e[1];
    ([e[0] / sum, e[1] / sum], pattern)
}

/// Mean weighted cross-entropy over rows, using [`oracle_forward`].
pub fn oracle_loss(model: &RiskModel, params: &[f64], x: &Array2<f64>, y: &[u8], w: &ClassWeights) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for (row, &yi) in x.rows().into_iter().zip(y) {
        let (p, pat) = oracle_forward(model, params, row.as_slice().unwrap());
        let wy = if yi == 1 { w.w1 } else { w.w0 };
        total += wy * -p[usize::from(yi)].max(1e-12).ln();
        pattern.extend(pat);
    }
    (total / y.len() as f64, pattern)
}

pub struct FdReport {
    pub max_rel: f64,
    pub worst: usize,
    pub checked: usize,
    /// Parameters whose +-h perturbation flipped a relu; FD is meaningless there.
    pub skipped: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` of every parameter's analytic
/// gradient against a central difference of the oracle loss.
pub fn fd_check(model: &RiskModel, x: &Array2<f64>, y: &[u8], w: &ClassWeights, h: f64, floor: f64) -> FdReport {
    let (_, analytic) = model.loss_and_gradient(x.view(), y, w).unwrap();
    let (_, base_pattern) = oracle_loss(model, &model.params, x, y, w);
    let mut params = model.params.clone();
    let mut report = FdReport { max_rel: 0.0, worst: 0, checked: 0, skipped: 0 };
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let (up, pu) = oracle_loss(model, &params, x, y, w);
        params[i] = orig - h;
        let (down, pd) = oracle_loss(model, &params, x, y, w);
        params[i] = orig;
        if pu != base_pattern || pd != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = i;
        }
    }
    report
}

/// Shapley values by averaging marginal contributions over all m! orderings.
pub fn permutation_shapley(m: usize, v: impl Fn(u64) -> f64) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..m).collect();
    let mut phi = vec![0.0; m];
    let mut count = 0usize;
    // Heap's algorithm.
    let mut c = vec![0usize; m];
    let visit = |perm: &[usize], phi: &mut [f64]| {
        let mut s = 0u64;
        let mut prev = v(0);
        for &j in perm {
            s |= 1 << j;
            let cur = v(s);
            phi[j] += cur - prev;
            prev = cur;
        }
    };
    visit(&perm, &mut phi);
    count += 1;
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm, &mut phi);
            count += 1;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    phi.iter().map(|p| p / count as f64).collect()
}

/// Background-weighted value of coalition `s`, evaluated row by row with the model's own forward.
pub fn oracle_value(model: &RiskModel, x: &[f64], bg: &Background, s: u64) -> f64 {
    bg.centroids
        .rows()
        .into_iter()
        .zip(&bg.weights)
        .map(|(c, w)| {
            let z: Vec<f64> = (0..x.len()).map(|j| if s >> j & 1 == 1 { x[j] } else { c[j] }).collect();
            w * model.forward(&z).unwrap().p[1]
        })
        .sum()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Shapley values from the subset formula, with weights `|S|!(m-|S|-1)!/m!`
/// built from factorials in f64.
pub fn subset_shapley(m: usize, v: impl Fn(u64) -> f64) -> Vec<f64> {
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    }).collect();
    let table: Vec<f64> = (0..1u64 << m).map(&v).collect();
    (0..m)
        .map(|i| {
            (0..1u64 << m)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| {
                    let k = s.count_ones() as usize;
                    fact[k] * fact[m - k - 1] / fact[m] * (table[(s | 1 << i) as usize] - table[s as usize])
                })
                .sum()
        })
        .collect()
}

/// A directory holding one random full-size checkpoint per disease plus an
/// importance table for each, normalized against synthetic data.
pub fn model_dir(dir: &std::path::Path) -> Vec<cdrisk::ingest::CleanRecord> {
    use cdrisk::explain::{write_importance_csv, GlobalImportance};
    use cdrisk::ingest::{fit_normalizer, SplitIndices};
    use cdrisk::schema::FeatureSchema;
    use cdrisk::service::{checkpoint_path, importance_path};

    let schema = FeatureSchema::builtin();
    let records = cdrisk::synth::generate(&schema, 500, &[], 77).unwrap();
    let split = SplitIndices { train: (0..records.len()).collect(), test: vec![], seed: 0 };
    let norm = fit_normalizer(&records, &split).unwrap();
    let ids: Vec<String> = schema.feature_ids().into_iter().map(String::from).collect();
    for (i, label) in schema.label_ids().into_iter().enumerate() {
        let mut m = random_model(38, 64, 3, 500 + i as u64);
        m.norm = norm.clone();
        m.disease = label.to_string();
        m.schema_hash = schema.hash();
        cdrisk::checkpoint::save_checkpoint(&m, checkpoint_path(dir, label)).unwrap();
        let gi = GlobalImportance {
            disease: label.to_string(),
            feature_ids: ids.clone(),
            mean_abs: (0..38).map(|j| ((j * 7 + i) % 38) as f64 / 100.0).collect(),
            mean_signed: vec![0.0; 38],
            explained: vec![0],
        };
        let file = std::fs::File::create(importance_path(dir, label)).unwrap();
        write_importance_csv(file, &gi, &["general_health", "physical_health", "poor_health_days"]).unwrap();
    }
    records
}

/// Raw answers for a clean record, as the JSON object the API accepts.
pub fn answers_json(record: &cdrisk::ingest::CleanRecord) -> serde_json::Value {
    let schema = cdrisk::schema::FeatureSchema::builtin();
    let raw = record.to_raw(&schema);
    let ids = schema.feature_ids();
    serde_json::Value::Object(raw.into_iter().filter(|(k, _)| ids.contains(&k.as_str())).map(|(k, v)| (k, v.map_or(serde_json::Value::Null, Into::into))).collect())
}
