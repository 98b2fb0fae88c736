//! Declarative codebook describing the 38 model inputs and 13 disease labels.
//!
//! A codebook is a single JSON document. Each feature carries its raw-code
//! conventions (special values such as `88 = none` or `99 = refused`), the
//! unit harmonization rules for fields recorded in more than one unit, the
//! skip-pattern gates that imply a value for unasked questions, and the valid
//! range of the cleaned value.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 38;
pub const N_LABELS: usize = 13;

const BUILTIN_CODEBOOK: &str = include_str!("../assets/brfss2023_codebook.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    OrdinalCode,
    CategoricalCode,
    Binary,
}

impl FeatureKind {
    /// Code-valued kinds only accept integral values.
    pub fn is_code(self) -> bool {
        !matches!(self, FeatureKind::Continuous)
    }
}

/// Replacement for a special raw code: either a numeric value or "treat as missing".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpecialValue {
    Value(f64),
    Missing,
}

impl Serialize for SpecialValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SpecialValue::Value(v) => s.serialize_f64(*v),
            SpecialValue::Missing => s.serialize_str("MISSING"),
        }
    }
}

impl<'de> Deserialize<'de> for SpecialValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(SpecialValue::Value(v)),
            Repr::Str(s) if s == "MISSING" => Ok(SpecialValue::Missing),
            Repr::Str(s) => Err(de::Error::custom(format!(
                "special value must be a number or \"MISSING\", got {s:?}"
            ))),
        }
    }
}

/// Converts raw codes inside `range` to the feature's canonical unit.
///
/// The raw value first has `offset` subtracted. With `compound = Some(f)` the
/// result is read as a two-part number `AABB` (hours:minutes, feet:inches)
/// and becomes `AA * f + BB`. Finally it is scaled by `multiplier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRule {
    pub range: [f64; 2],
    #[serde(default, skip_serializing_if = "is_zero")]
    pub offset: f64,
    pub multiplier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compound: Option<f64>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl UnitRule {
    pub fn contains(&self, raw: f64) -> bool {
        raw >= self.range[0] && raw <= self.range[1]
    }

    pub fn apply(&self, raw: f64) -> f64 {
        let shifted = raw - self.offset;
        let base = match self.compound {
            Some(factor) => {
                let major = (shifted / 100.0).floor();
                let minor = shifted - major * 100.0;
                major * factor + minor
            }
            None => shifted,
        };
        base * self.multiplier
    }

    /// A raw value that this rule maps back onto `value`.
    pub fn invert(&self, value: f64) -> f64 {
        let base = value / self.multiplier;
        let shifted = match self.compound {
            Some(factor) => {
                let major = (base / factor).floor();
                let minor = base - major * factor;
                major * 100.0 + minor
            }
            None => base,
        };
        shifted + self.offset
    }
}

/// One condition of a skip-pattern gate: the raw answer to `feature` is one of `codes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub feature: String,
    pub codes: Vec<f64>,
    #[serde(skip)]
    pub(crate) index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: String,
    /// Raw CSV column name, when it differs from `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub kind: FeatureKind,
    pub valid_range: [f64; 2],
    #[serde(default)]
    pub display: String,
    #[serde(default)]
    pub special_map: BTreeMap<String, SpecialValue>,
    /// Value assumed when the field is empty because a gating answer skipped it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implied_value: Option<f64>,
    /// Disjunction of conjunctions; empty means the implied value applies to any empty field.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub implied_when: Vec<Vec<Gate>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unit_rules: Vec<UnitRule>,
    /// Explicit list of admissible codes; defaults to every integer in `valid_range`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub code_labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip)]
    pub(crate) special: Vec<(f64, SpecialValue)>,
}

impl FeatureSpec {
    pub fn column(&self) -> &str {
        self.source.as_deref().unwrap_or(&self.id)
    }

    pub fn special_codes(&self) -> &[(f64, SpecialValue)] {
        &self.special
    }

    pub fn in_range(&self, v: f64) -> bool {
        v >= self.valid_range[0] && v <= self.valid_range[1]
    }

    /// Range and code-set check on a cleaned value.
    pub fn admits(&self, v: f64) -> bool {
        if !v.is_finite() || !self.in_range(v) {
            return false;
        }
        if self.kind.is_code() {
            if v.fract() != 0.0 {
                return false;
            }
            if let Some(codes) = &self.codes {
                return codes.contains(&v);
            }
        }
        true
    }

    /// Admissible codes of a code-valued feature, in ascending order.
    pub fn code_values(&self) -> Vec<f64> {
        match &self.codes {
            Some(codes) => {
                let mut c = codes.clone();
                c.sort_by(f64::total_cmp);
                c
            }
            None => {
                let lo = self.valid_range[0].ceil() as i64;
                let hi = self.valid_range[1].floor() as i64;
                (lo..=hi).map(|c| c as f64).collect()
            }
        }
    }

    fn validate(&mut self) -> Result<()> {
        let [lo, hi] = self.valid_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(malformed(&self.id, "valid_range must be finite with lo <= hi"));
        }
        self.special.clear();
        for (key, value) in &self.special_map {
            let code: f64 = key
                .trim()
                .parse()
                .map_err(|_| malformed(&self.id, &format!("special code {key:?} is not numeric")))?;
            if self.in_range(code) {
                return Err(malformed(
                    &self.id,
                    &format!("special code {key} overlaps valid_range"),
                ));
            }
            if let SpecialValue::Value(v) = value {
                if !self.in_range(*v) {
                    return Err(malformed(
                        &self.id,
                        &format!("special code {key} maps outside valid_range"),
                    ));
                }
            }
            self.special.push((code, *value));
        }
        for rule in &self.unit_rules {
            if !(rule.multiplier.is_finite() && rule.multiplier > 0.0) {
                return Err(malformed(&self.id, "unit rule multiplier must be positive"));
            }
            if let Some(f) = rule.compound {
                if !(f > 0.0 && f <= 100.0) {
                    return Err(malformed(&self.id, "unit rule compound factor must be in (0, 100]"));
                }
            }
            if !(rule.range[0] <= rule.range[1]) {
                return Err(malformed(&self.id, "unit rule range must have lo <= hi"));
            }
        }
        if let Some(codes) = &self.codes {
            if !self.kind.is_code() {
                return Err(malformed(&self.id, "codes are only allowed on code-valued features"));
            }
            if codes.iter().any(|c| !self.in_range(*c) || c.fract() != 0.0) {
                return Err(malformed(&self.id, "codes must be integers inside valid_range"));
            }
        }
        if !self.implied_when.is_empty() && self.implied_value.is_none() {
            return Err(malformed(&self.id, "implied_when requires implied_value"));
        }
        Ok(())
    }
}

fn malformed(id: &str, msg: &str) -> Error {
    Error::MalformedCodebook(format!("feature `{id}`: {msg}"))
}

/// A disease label and the raw codes that mean "has it" / "does not have it".
/// Any other non-empty code (don't know, refused) is treated as missing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSpec {
    pub id: String,
    pub display: String,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl<'de> Deserialize<'de> for LabelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Full {
            id: String,
            #[serde(default)]
            display: String,
            #[serde(default = "default_positive")]
            positive: Vec<f64>,
            #[serde(default = "default_negative")]
            negative: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Id(String),
            Full(Full),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Id(id) => LabelSpec {
                id,
                display: String::new(),
                positive: default_positive(),
                negative: default_negative(),
            },
            Repr::Full(f) => LabelSpec {
                id: f.id,
                display: f.display,
                positive: f.positive,
                negative: f.negative,
            },
        })
    }
}

fn default_positive() -> Vec<f64> {
    vec![1.0]
}

fn default_negative() -> Vec<f64> {
    vec![2.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub features: Vec<FeatureSpec>,
    pub labels: Vec<LabelSpec>,
    #[serde(skip)]
    feature_index: HashMap<String, usize>,
    #[serde(skip)]
    label_index: HashMap<String, usize>,
}

impl FeatureSchema {
    /// The shipped BRFSS 2023 codebook.
    pub fn builtin() -> Self {
        Self::from_json_str(BUILTIN_CODEBOOK).expect("builtin codebook is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let schema: FeatureSchema =
            serde_json::from_str(text).map_err(|e| Error::MalformedCodebook(e.to_string()))?;
        schema.validated()
    }

    fn validated(mut self) -> Result<Self> {
        if self.features.len() != N_FEATURES || self.labels.len() != N_LABELS {
            return Err(Error::SchemaArity {
                features: self.features.len(),
                labels: self.labels.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in self.features.iter().map(|f| &f.id).chain(self.labels.iter().map(|l| &l.id)) {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut columns = HashSet::new();
        for f in &self.features {
            if !columns.insert(f.column().to_string()) {
                return Err(Error::DuplicateId(f.column().to_string()));
            }
        }
        self.feature_index = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.id.clone(), i))
            .collect();
        self.label_index = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();
        for i in 0..self.features.len() {
            self.features[i].validate()?;
            let own_id = self.features[i].id.clone();
            for clause in &mut self.features[i].implied_when {
                for gate in clause {
                    match self.feature_index.get(&gate.feature) {
                        Some(&j) if gate.feature != own_id => gate.index = j,
                        _ => {
                            return Err(malformed(
                                &own_id,
                                &format!("gate refers to unknown feature `{}`", gate.feature),
                            ))
                        }
                    }
                }
            }
        }
        for l in &self.labels {
            if l.positive.is_empty() || l.negative.is_empty() {
                return Err(Error::MalformedCodebook(format!(
                    "label `{}` needs positive and negative codes",
                    l.id
                )));
            }
            if l.positive.iter().any(|p| l.negative.contains(p)) {
                return Err(Error::MalformedCodebook(format!(
                    "label `{}` has a code that is both positive and negative",
                    l.id
                )));
            }
        }
        Ok(self)
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, id: &str) -> Option<usize> {
        self.feature_index.get(id).copied()
    }

    pub fn label_index(&self, id: &str) -> Option<usize> {
        self.label_index.get(id).copied()
    }

    pub fn feature(&self, id: &str) -> Result<&FeatureSpec> {
        self.feature_index(id)
            .map(|i| &self.features[i])
            .ok_or_else(|| Error::UnknownFeature(id.to_string()))
    }

    pub fn require_label(&self, id: &str) -> Result<usize> {
        self.label_index(id).ok_or_else(|| Error::UnknownLabel(id.to_string()))
    }

    pub fn feature_ids(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.id.as_str()).collect()
    }

    pub fn label_ids(&self) -> Vec<&str> {
        self.labels.iter().map(|l| l.id.as_str()).collect()
    }

    /// Compact JSON of the validated schema; stable key order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    /// 64-bit FNV-1a of the canonical codebook, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}

/// Parse and validate a codebook file.
pub fn load_codebook(path: impl AsRef<Path>) -> Result<FeatureSchema> {
    let text = std::fs::read_to_string(path)?;
    FeatureSchema::from_json_str(&text)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureKind::Continuous => "continuous",
            FeatureKind::OrdinalCode => "ordinal-code",
            FeatureKind::CategoricalCode => "categorical-code",
            FeatureKind::Binary => "binary",
        };
        f.write_str(s)
    }
}
