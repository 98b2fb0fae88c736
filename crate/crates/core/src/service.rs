//! Loaded models plus everything needed to score and explain one raw answer
//! sheet. The CLI and the HTTP server both go through [`Engine`], so a record
//! gets the same risks on either path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint_for;
use crate::error::{Error, Result};
use crate::explain::{
    global_importance, kernel_shap, kmeans, Background, GlobalImportance, ImportanceOptions, ImportanceRow,
    KernelShapOptions, ShapMode,
};
use crate::ingest::{
    fit_normalizer, read_clean_csv, split_dataset, validate_features, CleanRecord, RawRecord, Rejection, SplitIndices,
};
use crate::model::RiskModel;
use crate::schema::FeatureSchema;

pub const DISCLAIMER: &str =
    "Risk scores are relative model outputs for self-reflection, not probabilities of disease and not a diagnosis. \
     Consult a clinician about your health.";
pub const CHECKPOINT_EXT: &str = "cdrp";
pub const IMPORTANCE_SUFFIX: &str = ".importance.csv";
pub const DEFAULT_EXPLAIN_BUDGET: usize = 512;
pub const DEFAULT_CLUSTERS: usize = 100;
// Rows fed to k-means when building the serving background.
const BACKGROUND_SAMPLE: usize = 20_000;

pub fn checkpoint_path(dir: &Path, disease: &str) -> PathBuf {
    dir.join(format!("{disease}.{CHECKPOINT_EXT}"))
}

pub fn importance_path(dir: &Path, disease: &str) -> PathBuf {
    dir.join(format!("{disease}{IMPORTANCE_SUFFIX}"))
}

/// Reference records for marginalizing absent features, in clean units.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanBackground {
    pub centroids: Array2<f64>,
    pub weights: Vec<f64>,
}

impl CleanBackground {
    /// Cluster (a seeded sample of) clean records into `k` weighted centroids.
    /// Clustering runs on standardized columns so no unit dominates the distance.
    pub fn from_records(records: &[CleanRecord], k: usize, seed: u64) -> Result<Self> {
        let all: Vec<usize> = (0..records.len()).collect();
        let rows: Vec<usize> = if records.len() > BACKGROUND_SAMPLE {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, records.len(), BACKGROUND_SAMPLE).into_vec();
            idx.sort_unstable();
            idx
        } else {
            all
        };
        let split = SplitIndices { train: rows.clone(), test: Vec::new(), seed };
        let norm = fit_normalizer(records, &split)?;
        let dim = norm.dim();
        let mut z = Array2::zeros((rows.len(), dim));
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in norm.apply(&records[i].x).into_iter().enumerate() {
                z[[r, j]] = v;
            }
        }
        let km = kmeans(z.view(), k, seed)?;
        let mut centroids = km.background.centroids;
        for mut row in centroids.rows_mut() {
            let clean = norm.invert(row.as_slice().expect("contiguous"));
            row.assign(&ndarray::ArrayView1::from(&clean));
        }
        Ok(CleanBackground { centroids, weights: km.background.weights })
    }

    /// The background in a model's normalized input space.
    pub fn for_model(&self, model: &RiskModel) -> Background {
        let mut c = self.centroids.clone();
        for mut row in c.rows_mut() {
            let z = model.norm.apply(row.as_slice().expect("contiguous"));
            row.assign(&ndarray::ArrayView1::from(&z));
        }
        Background { centroids: c, weights: self.weights.clone() }
    }
}

fn normalized_rows(model: &RiskModel, records: &[CleanRecord], idx: &[usize]) -> Array2<f64> {
    let mut z = Array2::zeros((idx.len(), model.input_dim()));
    for (r, &i) in idx.iter().enumerate() {
        for (j, v) in model.norm.apply(&records[i].x).into_iter().enumerate() {
            z[[r, j]] = v;
        }
    }
    z
}

/// Global importance for a trained model. Records are split exactly as in
/// training with `opts.seed`; the background is k-means over (a sample of) the
/// training rows and the explained points are drawn from the test rows.
pub fn model_importance(
    model: &RiskModel,
    records: &[CleanRecord],
    schema: &FeatureSchema,
    clusters: usize,
    opts: &ImportanceOptions,
) -> Result<GlobalImportance> {
    let label = schema.require_label(&model.disease)?;
    let labels: Vec<u8> = records.iter().map(|r| r.y[label]).collect();
    let split = split_dataset(records.len(), &labels, opts.seed)?;
    let mut train = split.train.clone();
    if train.len() > BACKGROUND_SAMPLE {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let picked = rand::seq::index::sample(&mut rng, train.len(), BACKGROUND_SAMPLE).into_vec();
        let mut sub: Vec<usize> = picked.into_iter().map(|i| train[i]).collect();
        sub.sort_unstable();
        train = sub;
    }
    let bg = kmeans(normalized_rows(model, records, &train).view(), clusters, opts.seed)?.background;
    let test = normalized_rows(model, records, &split.test);
    let ids: Vec<String> = schema.feature_ids().into_iter().map(String::from).collect();
    global_importance(model, test.view(), &bg, &ids, &model.disease, opts)
}

struct Loaded {
    model: RiskModel,
    background: Background,
    importance: Option<Vec<ImportanceRow>>,
}

pub struct Engine {
    schema: FeatureSchema,
    models: Vec<Loaded>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureContribution {
    pub feature_id: String,
    pub abs_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub disease: String,
    pub base: f64,
    pub fx: f64,
    pub phi: BTreeMap<String, f64>,
    /// Every feature, largest |phi| first; ties keep declaration order.
    pub top: Vec<FeatureContribution>,
    pub exact: bool,
    pub singular: bool,
    pub budget: usize,
}

/// Why a request could not be scored.
#[derive(Debug)]
pub enum RequestError {
    Rejected(Vec<Rejection>),
    UnknownDisease(String),
    Invalid(String),
    Internal(Error),
}

impl From<Error> for RequestError {
    fn from(e: Error) -> Self {
        RequestError::Internal(e)
    }
}

impl Engine {
    /// Models in schema label order. `background` defaults to each model's training mean.
    pub fn new(schema: FeatureSchema, models: Vec<RiskModel>, background: Option<&CleanBackground>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::MissingCheckpoint(PathBuf::new()));
        }
        let mut loaded = Vec::with_capacity(models.len());
        for model in models {
            schema.require_label(&model.disease)?;
            if model.input_dim() != schema.n_features() {
                return Err(Error::DimensionMismatch { expected: schema.n_features(), got: model.input_dim() });
            }
            let background = match background {
                Some(bg) => bg.for_model(&model),
                None => Background::single(&vec![0.0; model.input_dim()]),
            };
            loaded.push(Loaded { model, background, importance: None });
        }
        loaded.sort_by_key(|l| schema.label_index(&l.model.disease));
        if loaded.windows(2).any(|w| w[0].model.disease == w[1].model.disease) {
            return Err(Error::InvalidConfig("two checkpoints for the same disease".into()));
        }
        Ok(Engine { schema, models: loaded })
    }

    /// Load every `<DISEASE>.cdrp` in `dir`, plus `<DISEASE>.importance.csv` where present.
    pub fn load_dir(dir: &Path, schema: FeatureSchema, background: Option<&CleanBackground>) -> Result<Self> {
        let mut models = Vec::new();
        if dir.is_dir() {
            for label in schema.label_ids() {
                let path = checkpoint_path(dir, label);
                if path.is_file() {
                    models.push(load_checkpoint_for(&path, &schema)?);
                }
            }
        }
        if models.is_empty() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let mut engine = Engine::new(schema, models, background)?;
        for l in &mut engine.models {
            let path = importance_path(dir, &l.model.disease);
            if path.is_file() {
                let rows = crate::explain::read_importance_csv(std::fs::File::open(&path)?)?;
                l.importance = Some(rows);
            }
        }
        Ok(engine)
    }

    /// Build the serving background from a clean CSV.
    pub fn background_from_csv(path: &Path, schema: &FeatureSchema, k: usize, seed: u64) -> Result<CleanBackground> {
        let records = read_clean_csv(std::fs::File::open(path)?, schema)?;
        CleanBackground::from_records(&records, k, seed)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn diseases(&self) -> Vec<&str> {
        self.models.iter().map(|l| l.model.disease.as_str()).collect()
    }

    fn find(&self, disease: &str) -> std::result::Result<&Loaded, RequestError> {
        self.models
            .iter()
            .find(|l| l.model.disease == disease)
            .ok_or_else(|| RequestError::UnknownDisease(disease.to_string()))
    }

    pub fn model(&self, disease: &str) -> Option<&RiskModel> {
        self.find(disease).ok().map(|l| &l.model)
    }

    /// Clean a raw answer sheet, reporting every failing field.
    pub fn clean(&self, raw: &RawRecord) -> std::result::Result<Vec<f64>, RequestError> {
        let unknown: Vec<&String> = raw.keys().filter(|k| self.schema.feature_index(k).is_none()).collect();
        if !unknown.is_empty() {
            let mut names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            names.sort_unstable();
            return Err(RequestError::Invalid(format!("unknown feature ids: {}", names.join(", "))));
        }
        validate_features(raw, &self.schema).map_err(RequestError::Rejected)
    }

    /// Risk per loaded disease, in schema label order.
    pub fn predict(&self, raw: &RawRecord) -> std::result::Result<Vec<(String, f64)>, RequestError> {
        let x = self.clean(raw)?;
        self.predict_clean(&x).map_err(RequestError::Internal)
    }

    pub fn predict_clean(&self, x: &[f64]) -> Result<Vec<(String, f64)>> {
        self.models
            .iter()
            .map(|l| Ok((l.model.disease.clone(), l.model.predict_clean(x)?.risk())))
            .collect()
    }

    pub fn explain(&self, raw: &RawRecord, disease: &str, budget: usize) -> std::result::Result<Explanation, RequestError> {
        let loaded = self.find(disease)?;
        let min = 2 * self.schema.n_features();
        if budget < min {
            return Err(RequestError::Invalid(format!("budget must be at least {min}")));
        }
        let x = self.clean(raw)?;
        Ok(self.explain_clean(loaded, &x, budget)?)
    }

    fn explain_clean(&self, loaded: &Loaded, x: &[f64], budget: usize) -> Result<Explanation> {
        let z = loaded.model.norm.apply(x);
        let opts = KernelShapOptions { budget, seed: 0, mode: ShapMode::Auto };
        let at = kernel_shap(&loaded.model, &z, &loaded.background, &opts)?;
        let ids = self.schema.feature_ids();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| at.phi[b].abs().total_cmp(&at.phi[a].abs()));
        Ok(Explanation {
            disease: loaded.model.disease.clone(),
            base: at.base,
            fx: at.fx,
            phi: ids.iter().zip(&at.phi).map(|(id, p)| (id.to_string(), *p)).collect(),
            top: order
                .into_iter()
                .map(|i| FeatureContribution { feature_id: ids[i].to_string(), abs_phi: at.phi[i].abs() })
                .collect(),
            exact: at.exact,
            singular: at.singular,
            budget,
        })
    }

    /// The `k` best-ranked rows of the stored importance table.
    pub fn importance(&self, disease: &str, k: usize) -> std::result::Result<Vec<ImportanceRow>, RequestError> {
        let loaded = self.find(disease)?;
        let rows = loaded
            .importance
            .as_ref()
            .ok_or_else(|| RequestError::UnknownDisease(format!("{disease} (no importance table)")))?;
        let mut ranked: Vec<ImportanceRow> = rows.iter().filter(|r| r.rank.is_some()).cloned().collect();
        if k > ranked.len() {
            return Err(RequestError::Invalid(format!("k = {k} exceeds the {} ranked features", ranked.len())));
        }
        ranked.sort_by_key(|r| r.rank);
        ranked.truncate(k);
        Ok(ranked)
    }
}
