//! Synthetic survey records with known ("planted") feature effects.
//!
//! Every feature is drawn independently inside its valid range: continuous
//! features from a normal centred on the range midpoint with sd = range/6,
//! truncated to the range; code-valued features uniformly over their codes.
//! For a planted disease the label is
//! `Bernoulli(sigmoid(logit(base_rate) + sum_j coef_j * z_j + e))`, where
//! `z_j` standardizes feature j with its sampling distribution's exact moments
//! and `e ~ N(0, noise_sd)`. Diseases without a plant are Bernoulli(0.1).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::ingest::CleanRecord;
use crate::schema::{FeatureSchema, FeatureSpec};

pub const MIN_RECORDS: usize = 100;
pub const UNPLANTED_BASE_RATE: f64 = 0.1;

// Truncation half-width in standard deviations.
const TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub feature: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub disease: String,
    pub planted: Vec<Plant>,
    pub noise_sd: f64,
    pub base_rate: f64,
}

impl PlantSpec {
    pub fn new(disease: &str, planted: &[(&str, f64)], noise_sd: f64, base_rate: f64) -> Result<Self> {
        let spec = PlantSpec {
            disease: disease.to_string(),
            planted: planted.iter().map(|&(f, c)| Plant { feature: f.to_string(), coef: c }).collect(),
            noise_sd,
            base_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.planted.is_empty() {
            return Err(Error::InvalidPlant(format!("{}: no planted features", self.disease)));
        }
        if let Some(p) = self.planted.iter().find(|p| !p.coef.is_finite() || p.coef == 0.0) {
            return Err(Error::InvalidPlant(format!("{}: coefficient on {} must be finite and nonzero", self.disease, p.feature)));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidPlant(format!("{}: noise_sd must be >= 0", self.disease)));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(Error::InvalidPlant(format!("{}: base_rate must lie in (0, 1)", self.disease)));
        }
        Ok(())
    }

    pub fn feature_ids(&self) -> Vec<&str> {
        self.planted.iter().map(|p| p.feature.as_str()).collect()
    }
}

/// Read a JSON array of plant specs.
pub fn load_plants(path: impl AsRef<Path>) -> Result<Vec<PlantSpec>> {
    let plants: Vec<PlantSpec> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for p in &plants {
        p.validate()?;
    }
    Ok(plants)
}

/// Exact mean and standard deviation of the generator's distribution for a feature.
pub fn feature_moments(spec: &FeatureSpec) -> (f64, f64) {
    if spec.kind.is_code() {
        let codes = spec.code_values();
        let n = codes.len() as f64;
        let mean = codes.iter().sum::<f64>() / n;
        let var = codes.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        return (mean, var.sqrt());
    }
    let [lo, hi] = spec.valid_range;
    let sigma = (hi - lo) / (2.0 * TRUNCATION);
    let mid = 0.5 * (lo + hi);
    if sigma == 0.0 {
        return (mid, 0.0);
    }
    // Symmetric truncation at +-a: Var = sigma^2 * (1 - 2a*pdf(a) / (cdf(a) - cdf(-a))).
    let n = StdNormal::standard();
    let a = TRUNCATION;
    let var = sigma * sigma * (1.0 - 2.0 * a * n.pdf(a) / (n.cdf(a) - n.cdf(-a)));
    (mid, var.sqrt())
}

struct Resolved {
    label: usize,
    base_logit: f64,
    terms: Vec<(usize, f64)>,
    noise: Option<Normal<f64>>,
}

fn resolve(schema: &FeatureSchema, plants: &[PlantSpec], moments: &[(f64, f64)]) -> Result<Vec<Resolved>> {
    let mut out: Vec<Resolved> = Vec::new();
    for p in plants {
        p.validate()?;
        let label = schema.require_label(&p.disease)?;
        if out.iter().any(|r| r.label == label) {
            return Err(Error::InvalidPlant(format!("{}: planted twice", p.disease)));
        }
        let mut terms = Vec::new();
        for plant in &p.planted {
            let j = schema.feature_index(&plant.feature).ok_or_else(|| Error::UnknownFeature(plant.feature.clone()))?;
            if moments[j].1 == 0.0 {
                return Err(Error::InvalidPlant(format!("{} has no variation to plant on", plant.feature)));
            }
            terms.push((j, plant.coef));
        }
        out.push(Resolved {
            label,
            base_logit: (p.base_rate / (1.0 - p.base_rate)).ln(),
            terms,
            noise: (p.noise_sd > 0.0).then(|| Normal::new(0.0, p.noise_sd).expect("validated sd")),
        });
    }
    Ok(out)
}

fn sample_feature(spec: &FeatureSpec, rng: &mut ChaCha8Rng) -> f64 {
    if spec.kind.is_code() {
        let codes = spec.code_values();
        return codes[rng.random_range(0..codes.len())];
    }
    let [lo, hi] = spec.valid_range;
    let sigma = (hi - lo) / (2.0 * TRUNCATION);
    if sigma == 0.0 {
        return lo;
    }
    let normal = Normal::new(0.5 * (lo + hi), sigma).expect("positive sd");
    loop {
        let v = normal.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

/// `n` records; record `i` depends only on `(seed, i)`.
pub fn generate(schema: &FeatureSchema, n: usize, plants: &[PlantSpec], seed: u64) -> Result<Vec<CleanRecord>> {
    if n < MIN_RECORDS {
        return Err(Error::TooFewRecords { min: MIN_RECORDS, got: n });
    }
    let moments: Vec<(f64, f64)> = schema.features.iter().map(feature_moments).collect();
    let resolved = resolve(schema, plants, &moments)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let x: Vec<f64> = schema.features.iter().map(|f| sample_feature(f, &mut rng)).collect();
        let mut y = vec![0u8; schema.labels.len()];
        for (d, slot) in y.iter_mut().enumerate() {
            let p = match resolved.iter().find(|r| r.label == d) {
                Some(r) => {
                    let mut eta = r.base_logit;
                    for &(j, c) in &r.terms {
                        eta += c * (x[j] - moments[j].0) / moments[j].1;
                    }
                    if let Some(noise) = &r.noise {
                        eta += noise.sample(&mut rng);
                    }
                    1.0 / (1.0 + (-eta).exp())
                }
                None => UNPLANTED_BASE_RATE,
            };
            *slot = u8::from(rng.random::<f64>() < p);
        }
        records.push(CleanRecord { x, y });
    }
    Ok(records)
}
