//! Survey cleaning, normalization statistics, stratified splits and cohort tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureKind, FeatureSchema, FeatureSpec, SpecialValue};

/// Raw answers keyed by feature or label id; `None` is an empty field.
pub type RawRecord = HashMap<String, Option<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Missing,
    RefusedCode,
    OutOfRange,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Missing => "missing",
            RejectReason::RefusedCode => "refused_code",
            RejectReason::OutOfRange => "out_of_range",
        })
    }
}

/// Filter outcome for a row that cannot be used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub feature_id: String,
    pub reason: RejectReason,
}

/// Parse a CSV cell. Empty or non-numeric cells are empty answers.
pub fn parse_cell(cell: &str) -> Option<f64> {
    let t = cell.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn implied_applies(spec: &FeatureSpec, raw: &dyn Fn(usize) -> Option<f64>) -> bool {
    spec.implied_value.is_some()
        && (spec.implied_when.is_empty()
            || spec.implied_when.iter().any(|clause| {
                clause
                    .iter()
                    .all(|g| matches!(raw(g.index), Some(v) if g.codes.contains(&v)))
            }))
}

/// Skip-pattern fill, special-code remap, unit harmonization, range check.
fn clean_value(
    spec: &FeatureSpec,
    value: Option<f64>,
    raw: &dyn Fn(usize) -> Option<f64>,
) -> std::result::Result<f64, RejectReason> {
    let mut v = match value {
        Some(v) => v,
        None if implied_applies(spec, raw) => spec.implied_value.unwrap_or_default(),
        None => return Err(RejectReason::Missing),
    };
    if let Some((_, special)) = spec.special_codes().iter().find(|(code, _)| *code == v) {
        match special {
            SpecialValue::Value(r) => v = *r,
            SpecialValue::Missing => return Err(RejectReason::RefusedCode),
        }
    }
    if let Some(rule) = spec.unit_rules.iter().find(|r| r.contains(v)) {
        v = rule.apply(v);
    }
    if spec.admits(v) {
        Ok(v)
    } else {
        Err(RejectReason::OutOfRange)
    }
}

fn clean_label(positive: &[f64], negative: &[f64], value: Option<f64>) -> std::result::Result<u8, RejectReason> {
    match value {
        None => Err(RejectReason::Missing),
        Some(v) if positive.contains(&v) => Ok(1),
        Some(v) if negative.contains(&v) => Ok(0),
        Some(_) => Err(RejectReason::RefusedCode),
    }
}

fn clean_features_with(
    schema: &FeatureSchema,
    raw: &dyn Fn(usize) -> Option<f64>,
) -> std::result::Result<Vec<f64>, Rejection> {
    schema
        .features
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            clean_value(spec, raw(i), raw).map_err(|reason| Rejection {
                feature_id: spec.id.clone(),
                reason,
            })
        })
        .collect()
}

fn clean_labels_with(
    schema: &FeatureSchema,
    raw: &dyn Fn(usize) -> Option<f64>,
) -> std::result::Result<Vec<u8>, Rejection> {
    schema
        .labels
        .iter()
        .enumerate()
        .map(|(j, l)| {
            clean_label(&l.positive, &l.negative, raw(j)).map_err(|reason| Rejection {
                feature_id: l.id.clone(),
                reason,
            })
        })
        .collect()
}

fn lookup<'a>(raw: &'a RawRecord, schema: &'a FeatureSchema) -> impl Fn(usize) -> Option<f64> + 'a {
    move |i| raw.get(&schema.features[i].id).copied().flatten()
}

/// Clean one survey row (features and labels). The first failing field wins.
pub fn clean_record(raw: &RawRecord, schema: &FeatureSchema) -> std::result::Result<CleanRecord, Rejection> {
    let x = clean_features(raw, schema)?;
    let y = clean_labels_with(schema, &|j| raw.get(&schema.labels[j].id).copied().flatten())?;
    Ok(CleanRecord { x, y })
}

/// Clean the 38 feature answers only (labels are not needed for scoring).
pub fn clean_features(raw: &RawRecord, schema: &FeatureSchema) -> std::result::Result<Vec<f64>, Rejection> {
    clean_features_with(schema, &lookup(raw, schema))
}

/// Like [`clean_features`] but reports every failing field.
pub fn validate_features(raw: &RawRecord, schema: &FeatureSchema) -> std::result::Result<Vec<f64>, Vec<Rejection>> {
    let get = lookup(raw, schema);
    let mut out = Vec::with_capacity(schema.n_features());
    let mut failures = Vec::new();
    for (i, spec) in schema.features.iter().enumerate() {
        match clean_value(spec, get(i), &get) {
            Ok(v) => out.push(v),
            Err(reason) => failures.push(Rejection {
                feature_id: spec.id.clone(),
                reason,
            }),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(failures)
    }
}

impl CleanRecord {
    /// Re-encode as raw answers that clean back to this record.
    pub fn to_raw(&self, schema: &FeatureSchema) -> RawRecord {
        let mut raw = RawRecord::new();
        for (spec, &x) in schema.features.iter().zip(&self.x) {
            raw.insert(spec.id.clone(), Some(encode_value(spec, x)));
        }
        for (label, &y) in schema.labels.iter().zip(&self.y) {
            let code = if y == 1 { label.positive[0] } else { label.negative[0] };
            raw.insert(label.id.clone(), Some(code));
        }
        raw
    }
}

fn encode_value(spec: &FeatureSpec, x: f64) -> f64 {
    let no_gates = |_: usize| None;
    let candidates = std::iter::once(x)
        .chain(
            spec.special_codes()
                .iter()
                .filter(|(_, s)| *s == SpecialValue::Value(x))
                .map(|(c, _)| *c),
        )
        .chain(spec.unit_rules.iter().map(|r| r.invert(x)));
    for raw in candidates {
        if let Ok(v) = clean_value(spec, Some(raw), &no_gates) {
            if (v - x).abs() <= 1e-9 * x.abs().max(1.0) {
                return raw;
            }
        }
    }
    x
}

/// Row counts of a cleaning pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub total_in: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    pub rejected_by_field: BTreeMap<String, usize>,
}

impl CleanReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Clean a raw survey CSV. Output order follows input order.
pub fn clean_dataset<R: Read>(input: R, schema: &FeatureSchema) -> Result<(Vec<CleanRecord>, CleanReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::HeaderMismatch(name.to_string()))
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| position(f.column()))
        .collect::<Result<Vec<_>>>()?;
    let label_cols = schema
        .labels
        .iter()
        .map(|l| position(&l.id))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut report = CleanReport::default();
    let mut row = csv::StringRecord::new();
    let mut features = vec![None; feature_cols.len()];
    let mut labels = vec![None; label_cols.len()];
    while reader.read_record(&mut row)? {
        report.total_in += 1;
        for (slot, &c) in features.iter_mut().zip(&feature_cols) {
            *slot = row.get(c).and_then(parse_cell);
        }
        for (slot, &c) in labels.iter_mut().zip(&label_cols) {
            *slot = row.get(c).and_then(parse_cell);
        }
        let outcome = clean_features_with(schema, &|i| features[i]).and_then(|x| {
            clean_labels_with(schema, &|j| labels[j]).map(|y| CleanRecord { x, y })
        });
        match outcome {
            Ok(rec) => {
                report.accepted += 1;
                records.push(rec);
            }
            Err(rej) => {
                *report.rejected.entry(rej.reason).or_default() += 1;
                *report.rejected_by_field.entry(rej.feature_id).or_default() += 1;
            }
        }
    }
    Ok((records, report))
}

/// Write clean records as CSV: 38 feature columns then 13 label columns.
pub fn write_clean_csv<W: Write>(out: W, schema: &FeatureSchema, records: &[CleanRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(schema.feature_ids().into_iter().chain(schema.label_ids()))?;
    let mut fields = Vec::with_capacity(schema.n_features() + schema.labels.len());
    for r in records {
        fields.clear();
        fields.extend(r.x.iter().map(|v| v.to_string()));
        fields.extend(r.y.iter().map(|v| v.to_string()));
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a clean CSV (as written by [`write_clean_csv`]); columns may appear in any order.
pub fn read_clean_csv<R: Read>(input: R, schema: &FeatureSchema) -> Result<Vec<CleanRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::HeaderMismatch(name.to_string()))
    };
    let fcols = schema
        .features
        .iter()
        .map(|f| position(&f.id))
        .collect::<Result<Vec<_>>>()?;
    let lcols = schema
        .labels
        .iter()
        .map(|l| position(&l.id))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::InvalidRecord {
            row: n + 1,
            message: what.to_string(),
        };
        let mut x = Vec::with_capacity(fcols.len());
        for (spec, &c) in schema.features.iter().zip(&fcols) {
            let v = row
                .get(c)
                .and_then(parse_cell)
                .ok_or_else(|| bad(&format!("`{}` is not a number", spec.id)))?;
            if !spec.admits(v) {
                return Err(bad(&format!("`{}` = {v} is outside its valid range", spec.id)));
            }
            x.push(v);
        }
        let mut y = Vec::with_capacity(lcols.len());
        for (label, &c) in schema.labels.iter().zip(&lcols) {
            match row.get(c).map(str::trim) {
                Some("0") => y.push(0),
                Some("1") => y.push(1),
                _ => return Err(bad(&format!("label `{}` must be 0 or 1", label.id))),
            }
        }
        out.push(CleanRecord { x, y });
    }
    Ok(out)
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Fit mean and population std on the training rows only. Constant columns get std 1.
pub fn fit_normalizer(records: &[CleanRecord], split: &SplitIndices) -> Result<NormStats> {
    let rows: Vec<&[f64]> = split.train.iter().map(|&i| records[i].x.as_slice()).collect();
    fit_rows(&rows)
}

pub(crate) fn fit_rows(rows: &[&[f64]]) -> Result<NormStats> {
    let first = rows.first().ok_or(Error::EmptySplit)?;
    let dim = first.len();
    let n = rows.len() as f64;
    let mut stats = NormStats::identity(dim);
    for j in 0..dim {
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        if lo == hi {
            stats.mean[j] = lo;
            continue;
        }
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        stats.mean[j] = mean;
        stats.std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    Ok(stats)
}

/// Convenience wrapper over [`NormStats::apply`].
pub fn apply_normalizer(x: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.apply(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub const TEST_FRACTION: f64 = 0.2;

/// Seeded 80/20 split stratified on one binary label.
pub fn split_dataset(n: usize, labels: &[u8], seed: u64) -> Result<SplitIndices> {
    if n < 10 {
        return Err(Error::TooFewRecords { min: 10, got: n });
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        classes[usize::from(y != 0)].push(i);
    }
    // Largest-remainder allocation of the test quota across classes.
    let exact: Vec<f64> = classes
        .iter()
        .map(|c| c.len() as f64 * n_test as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n_test - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < classes[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (members, q) in classes.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..q]);
        train.extend_from_slice(&members[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub group: f64,
    pub group_label: Option<String>,
    pub members: usize,
    pub positives: usize,
    pub percent: f64,
}

/// Disease prevalence (%) within each observed value of a categorical feature.
pub fn cohort_prevalence(
    records: &[CleanRecord],
    schema: &FeatureSchema,
    group_feature: &str,
    label: &str,
) -> Result<Vec<CohortRow>> {
    let fi = schema
        .feature_index(group_feature)
        .ok_or_else(|| Error::UnknownFeature(group_feature.to_string()))?;
    let spec = &schema.features[fi];
    if spec.kind != FeatureKind::CategoricalCode {
        return Err(Error::NotCategorical(group_feature.to_string()));
    }
    let li = schema.require_label(label)?;
    let mut groups: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = groups.entry(r.x[fi] as i64).or_default();
        entry.0 += 1;
        entry.1 += usize::from(r.y[li] == 1);
    }
    Ok(groups
        .into_iter()
        .map(|(g, (members, positives))| CohortRow {
            group: g as f64,
            group_label: spec.code_labels.get(&g.to_string()).cloned(),
            members,
            positives,
            percent: 100.0 * positives as f64 / members as f64,
        })
        .collect())
}
