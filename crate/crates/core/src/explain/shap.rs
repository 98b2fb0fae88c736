use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Background, RiskFunction};
use crate::error::{Error, Result};

/// Largest feature count for which all 2^M coalitions are enumerated.
pub const MAX_EXACT_FEATURES: usize = 14;
pub const DEFAULT_BUDGET: usize = 2 * 38 + 2048;

// Hybrid rows per model call; bounds memory for large backgrounds.
const ROWS_PER_CHUNK: usize = 8192;
const MAX_MASK_FEATURES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapMode {
    /// Exact when M <= 14 and the budget covers every proper coalition.
    Auto,
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelShapOptions {
    pub budget: usize,
    pub seed: u64,
    pub mode: ShapMode,
}

impl Default for KernelShapOptions {
    fn default() -> Self {
        KernelShapOptions { budget: DEFAULT_BUDGET, seed: 0, mode: ShapMode::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub phi: Vec<f64>,
    /// v(empty set): expected risk over the background.
    pub base: f64,
    /// v(all features): the model's risk at x.
    pub fx: f64,
    pub exact: bool,
    /// The regression system was rank deficient; `phi` is the least-norm solution.
    pub singular: bool,
    pub n_coalitions: usize,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of size `s` among `m` features.
/// Infinite for the empty and full coalitions, which enter as constraints.
pub fn kernel_weight(m: usize, s: usize) -> f64 {
    if s == 0 || s >= m {
        return f64::INFINITY;
    }
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

fn full_mask(m: usize) -> u64 {
    if m == 64 {
        u64::MAX
    } else {
        (1u64 << m) - 1
    }
}

fn check_inputs<F: RiskFunction + ?Sized>(f: &F, x: &[f64], bg: &Background) -> Result<usize> {
    let m = f.n_features();
    if x.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: x.len() });
    }
    if bg.dim() != m {
        return Err(Error::DimensionMismatch { expected: m, got: bg.dim() });
    }
    if m > MAX_MASK_FEATURES {
        return Err(Error::TooManyFeatures { max: MAX_MASK_FEATURES, got: m });
    }
    Ok(m)
}

/// Background-weighted risk for each coalition mask (bit j set = feature j taken from x).
pub(crate) fn coalition_values<F: RiskFunction + ?Sized>(f: &F, x: &[f64], masks: &[u64], bg: &Background) -> Vec<f64> {
    let m = x.len();
    let k = bg.len();
    let per_chunk = (ROWS_PER_CHUNK / k).max(1);
    let mut out = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(per_chunk) {
        let mut rows = Array2::<f64>::zeros((chunk.len() * k, m));
        for (ci, &mask) in chunk.iter().enumerate() {
            for (bi, centroid) in bg.centroids.rows().into_iter().enumerate() {
                let mut row = rows.row_mut(ci * k + bi);
                for j in 0..m {
                    row[j] = if mask >> j & 1 == 1 { x[j] } else { centroid[j] };
                }
            }
        }
        let risk = f.risk_rows(rows.view());
        for ci in 0..chunk.len() {
            out.push((0..k).map(|bi| bg.weights[bi] * risk[ci * k + bi]).sum());
        }
    }
    out
}

/// v(S) for the coalition marked `true` in `present`.
pub fn value_function<F: RiskFunction + ?Sized>(f: &F, x: &[f64], present: &[bool], bg: &Background) -> Result<f64> {
    let m = check_inputs(f, x, bg)?;
    if present.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: present.len() });
    }
    let mask = present.iter().enumerate().fold(0u64, |acc, (j, &p)| acc | (u64::from(p) << j));
    Ok(coalition_values(f, x, &[mask], bg)[0])
}

/// Shapley values of an arbitrary game by full enumeration. `v` is indexed by bitmask.
pub fn exact_shapley_game(m: usize, v: impl Fn(u64) -> f64) -> Result<Vec<f64>> {
    if m > MAX_EXACT_FEATURES {
        return Err(Error::TooManyFeatures { max: MAX_EXACT_FEATURES, got: m });
    }
    let values: Vec<f64> = (0..=full_mask(m)).map(v).collect();
    Ok(shapley_from_table(m, &values))
}

fn shapley_from_table(m: usize, values: &[f64]) -> Vec<f64> {
    // s!(m-s-1)!/m! = 1 / (m * C(m-1, s))
    let weight: Vec<f64> = (0..m).map(|s| 1.0 / (m as f64 * binomial(m - 1, s))).collect();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for s in 0..=full_mask(m) {
            if s & bit == 0 {
                *p += weight[s.count_ones() as usize] * (values[(s | bit) as usize] - values[s as usize]);
            }
        }
    }
    phi
}

/// Brute-force Shapley values of the background value function. M <= 14.
pub fn exact_shapley<F: RiskFunction + ?Sized>(f: &F, x: &[f64], bg: &Background) -> Result<Attribution> {
    let m = check_inputs(f, x, bg)?;
    if m > MAX_EXACT_FEATURES {
        return Err(Error::TooManyFeatures { max: MAX_EXACT_FEATURES, got: m });
    }
    let masks: Vec<u64> = (0..=full_mask(m)).collect();
    let values = coalition_values(f, x, &masks, bg);
    Ok(Attribution {
        phi: shapley_from_table(m, &values),
        base: values[0],
        fx: values[masks.len() - 1],
        exact: true,
        singular: false,
        n_coalitions: masks.len(),
    })
}

/// Weighted coalitions to regress on, and whether they are the full enumeration.
fn draw_coalitions(m: usize, opts: &KernelShapOptions) -> Result<(Vec<(u64, f64)>, bool)> {
    let proper = if m >= 63 { u64::MAX } else { (1u64 << m) - 2 };
    let exact = match opts.mode {
        ShapMode::Exact => {
            if m > MAX_EXACT_FEATURES {
                return Err(Error::TooManyFeatures { max: MAX_EXACT_FEATURES, got: m });
            }
            true
        }
        ShapMode::Auto => m <= MAX_EXACT_FEATURES && opts.budget as u64 >= proper,
        ShapMode::Sampled => false,
    };
    if exact {
        let coalitions = (1..full_mask(m))
            .map(|s| (s, kernel_weight(m, s.count_ones() as usize)))
            .collect();
        return Ok((coalitions, true));
    }
    if opts.budget < 2 * m {
        return Err(Error::InvalidConfig(format!(
            "coalition budget {} is below the minimum of {} for {m} features",
            opts.budget,
            2 * m
        )));
    }
    // Size s is drawn with probability proportional to 1/(s(m-s)); a uniform
    // subset of that size then has probability proportional to the kernel weight,
    // so sample counts serve directly as regression weights.
    let size_mass: Vec<f64> = (1..m).map(|s| 1.0 / (s * (m - s)) as f64).collect();
    let sizes = WeightedIndex::new(&size_mass).expect("positive masses");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let all = full_mask(m);
    let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
    for _ in 0..opts.budget / 2 {
        let s = sizes.sample(&mut rng) + 1;
        let mask = rand::seq::index::sample(&mut rng, m, s).iter().fold(0u64, |acc, j| acc | 1 << j);
        *counts.entry(mask).or_default() += 1.0;
        *counts.entry(all ^ mask).or_default() += 1.0;
    }
    Ok((counts.into_iter().collect(), false))
}

/// Constrained weighted least squares. The last feature is eliminated using
/// sum(phi) = fx - base, leaving an (m-1)-dimensional unconstrained problem.
fn solve(m: usize, coalitions: &[(u64, f64)], values: &[f64], base: f64, fx: f64) -> (Vec<f64>, bool) {
    let delta = fx - base;
    if m == 1 {
        return (vec![delta], false);
    }
    let p = m - 1;
    let last = 1u64 << p;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for (&(mask, w), &v) in coalitions.iter().zip(values) {
        let z_last = f64::from(u8::from(mask & last != 0));
        for (j, r) in row.iter_mut().enumerate() {
            *r = f64::from(u8::from(mask >> j & 1 == 1)) - z_last;
        }
        let target = v - base - z_last * delta;
        for i in 0..p {
            if row[i] == 0.0 {
                continue;
            }
            let wi = w * row[i];
            b[i] += wi * target;
            for j in 0..p {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * 1e-12;
    let singular = max_sv == 0.0 || svd.singular_values.min() <= tol;
    let sol = svd.solve(&b, tol).unwrap_or_else(|_| DVector::zeros(p));
    let mut phi: Vec<f64> = sol.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    (phi, singular)
}

fn kernel_core(m: usize, opts: &KernelShapOptions, eval: impl Fn(&[u64]) -> Vec<f64>) -> Result<Attribution> {
    if m == 0 {
        return Err(Error::InvalidConfig("no features to attribute".into()));
    }
    if m > MAX_MASK_FEATURES {
        return Err(Error::TooManyFeatures { max: MAX_MASK_FEATURES, got: m });
    }
    let (coalitions, exact) = if m == 1 { (Vec::new(), true) } else { draw_coalitions(m, opts)? };
    let mut masks: Vec<u64> = coalitions.iter().map(|c| c.0).collect();
    masks.push(0);
    masks.push(full_mask(m));
    let mut values = eval(&masks);
    let fx = values.pop().expect("full");
    let base = values.pop().expect("empty");
    let (phi, singular) = solve(m, &coalitions, &values, base, fx);
    Ok(Attribution { phi, base, fx, exact, singular, n_coalitions: coalitions.len() })
}

/// Kernel SHAP for an arbitrary game `v` indexed by bitmask.
pub fn kernel_shap_game(m: usize, v: impl Fn(u64) -> f64, opts: &KernelShapOptions) -> Result<Attribution> {
    kernel_core(m, opts, |masks| masks.iter().map(|&s| v(s)).collect())
}

/// Kernel SHAP attribution of `f` at `x` against the background.
pub fn kernel_shap<F: RiskFunction + ?Sized>(
    f: &F,
    x: &[f64],
    bg: &Background,
    opts: &KernelShapOptions,
) -> Result<Attribution> {
    let m = check_inputs(f, x, bg)?;
    kernel_core(m, opts, |masks| coalition_values(f, x, masks, bg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::FnModel;

    fn hand_game(s: u64) -> f64 {
        [0.0, 1.0, 2.0, 4.0][(s & 3) as usize]
    }

    #[test]
    fn kernel_weights() {
        assert_eq!(kernel_weight(4, 0), f64::INFINITY);
        assert_eq!(kernel_weight(4, 4), f64::INFINITY);
        // (4-1) / (C(4,1) * 1 * 3) = 3/12
        assert!((kernel_weight(4, 1) - 0.25).abs() < 1e-15);
        // 3 / (6 * 2 * 2) = 1/8
        assert!((kernel_weight(4, 2) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn hand_worked_three_player_game() {
        let phi = exact_shapley_game(3, hand_game).unwrap();
        for (a, b) in phi.iter().zip([1.5, 2.5, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{phi:?}");
        }
        let k = kernel_shap_game(3, hand_game, &KernelShapOptions::default()).unwrap();
        assert!(k.exact);
        for (a, b) in k.phi.iter().zip([1.5, 2.5, 0.0]) {
            assert!((a - b).abs() < 1e-9, "{:?}", k.phi);
        }
    }

    #[test]
    fn additive_model_closed_form() {
        let a = [0.3, -1.2, 2.0, 0.0, 0.7];
        let f = FnModel { dim: 5, f: move |x: &[f64]| x.iter().zip(&a).map(|(x, a)| x * a).sum() };
        let x = [1.0, 2.0, -1.0, 4.0, 0.5];
        let b = [0.5, -0.5, 0.0, 1.0, 2.0];
        let bg = Background::single(&b);
        let at = kernel_shap(&f, &x, &bg, &KernelShapOptions::default()).unwrap();
        assert!(at.exact && !at.singular);
        for i in 0..5 {
            assert!((at.phi[i] - a[i] * (x[i] - b[i])).abs() < 1e-9, "{:?}", at.phi);
        }
        assert!(at.phi[3].abs() < 1e-9);
    }

    #[test]
    fn value_function_endpoints() {
        let f = FnModel { dim: 3, f: |x: &[f64]| x[0] * x[1] + x[2] };
        let bg = Background::new(
            Array2::from_shape_vec((2, 3), vec![0.0, 1.0, 2.0, 1.0, 1.0, 1.0]).unwrap(),
            vec![0.25, 0.75],
        )
        .unwrap();
        let x = [2.0, 3.0, 4.0];
        assert_eq!(value_function(&f, &x, &[true; 3], &bg).unwrap(), 10.0);
        // 0.25 * (0 + 2) + 0.75 * (1 + 1)
        assert_eq!(value_function(&f, &x, &[false; 3], &bg).unwrap(), 2.0);
        // x on {0, 1}: 0.25 * (6 + 2) + 0.75 * (6 + 1)
        assert_eq!(value_function(&f, &x, &[true, true, false], &bg).unwrap(), 7.25);
    }

    #[test]
    fn sampled_mode_keeps_local_accuracy() {
        let f = FnModel { dim: 20, f: |x: &[f64]| (x[0] * x[1]).tanh() + x[5] - 0.3 * x[7] * x[7] };
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        let bg = Background::single(&[0.0; 20]);
        let opts = KernelShapOptions { budget: 200, seed: 4, mode: ShapMode::Auto };
        let at = kernel_shap(&f, &x, &bg, &opts).unwrap();
        assert!(!at.exact);
        let total: f64 = at.phi.iter().sum();
        assert!((at.base + total - at.fx).abs() < 1e-9);
        let again = kernel_shap(&f, &x, &bg, &opts).unwrap();
        assert_eq!(at, again);
    }

    #[test]
    fn budget_and_size_guards() {
        let f = FnModel { dim: 20, f: |x: &[f64]| x[0] };
        let bg = Background::single(&[0.0; 20]);
        let x = [1.0; 20];
        let opts = KernelShapOptions { budget: 39, seed: 0, mode: ShapMode::Sampled };
        assert!(matches!(kernel_shap(&f, &x, &bg, &opts), Err(Error::InvalidConfig(_))));
        assert!(matches!(exact_shapley(&f, &x, &bg), Err(Error::TooManyFeatures { max: 14, got: 20 })));
        let exact = KernelShapOptions { mode: ShapMode::Exact, ..Default::default() };
        assert!(matches!(kernel_shap(&f, &x, &bg, &exact), Err(Error::TooManyFeatures { .. })));
        assert!(matches!(kernel_shap(&f, &x[..3], &bg, &opts), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_feature() {
        let at = kernel_shap_game(1, |s| s as f64 * 3.0, &KernelShapOptions::default()).unwrap();
        assert_eq!(at.phi, vec![3.0]);
    }

    #[test]
    fn minimum_budget_keeps_efficiency() {
        let opts = KernelShapOptions { budget: 24, seed: 1, mode: ShapMode::Sampled };
        let at = kernel_shap_game(12, |s| s.count_ones() as f64, &opts).unwrap();
        let total: f64 = at.phi.iter().sum();
        assert!((total - 12.0).abs() < 1e-9);
        let at2 = kernel_shap_game(12, |s| s.count_ones() as f64, &KernelShapOptions { budget: 4094, seed: 1, mode: ShapMode::Auto }).unwrap();
        assert!(at2.exact);
        assert!(!at2.singular);
    }
}
