//! Dataset schemas, CSV ingestion and vignette rendering.
//!
//! A dataset is described by a TOML manifest declaring the disease, the
//! feature list (in vignette order) and the label column. Records are loaded
//! from an RFC-4180 CSV file; rows with any missing feature are dropped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{BeliefError, CostMode, CostModel};

pub const VALUE_PLACEHOLDER: &str = "{value}";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("csv is missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("no complete records in dataset")]
    Empty,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{feature}`: {reason}")]
    InvalidValue { feature: String, reason: String },
    #[error("record has no value for `{0}`")]
    MissingValue(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    Cost(#[from] BeliefError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

/// How numeric values are printed in vignettes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberFormat {
    /// Source CSV text when known, shortest round-trip decimal otherwise.
    #[default]
    Source,
    /// Rounded to a whole number: `63`.
    Integer,
    /// Shortest round-trip with at least one fractional digit: `3.0`, `1.01`.
    Float,
}

/// A single observed or hypothetical test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Category(String),
}

impl Value {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            Value::Category(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v}"),
            Value::Category(c) => f.write_str(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub categories: Vec<String>,
    /// Sentence with a single `{value}` placeholder.
    pub template: String,
    /// Plausible-range description handed to sampling prompts.
    #[serde(default)]
    pub ref_info: String,
    #[serde(default)]
    pub known_at_start: bool,
    /// Raw acquisition cost `c*`; absent means uniform costs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default)]
    pub format: NumberFormat,
    /// Category → text substituted for the placeholder.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub phrases: BTreeMap<String, String>,
}

impl FeatureSpec {
    pub fn numeric(name: &str, template: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
            unit: String::new(),
            categories: Vec::new(),
            template: template.to_string(),
            ref_info: String::new(),
            known_at_start: false,
            cost: None,
            format: NumberFormat::Source,
            phrases: BTreeMap::new(),
        }
    }

    pub fn categorical(name: &str, template: &str, categories: &[&str]) -> Self {
        Self {
            kind: FeatureKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            ..Self::numeric(name, template)
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let placeholders = self.template.matches(VALUE_PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(DataError::Schema(format!(
                "template of `{}` must contain exactly one {VALUE_PLACEHOLDER}, found {placeholders}",
                self.name
            )));
        }
        match self.kind {
            FeatureKind::Categorical if self.categories.is_empty() => Err(DataError::Schema(
                format!("categorical feature `{}` declares no categories", self.name),
            )),
            FeatureKind::Numeric if !self.categories.is_empty() => Err(DataError::Schema(
                format!("numeric feature `{}` declares categories", self.name),
            )),
            _ => Ok(()),
        }
    }

    /// Canonical category matching `raw` case-insensitively.
    pub fn match_category(&self, raw: &str) -> Option<&str> {
        let raw = raw.trim();
        self.categories
            .iter()
            .find(|c| c.eq_ignore_ascii_case(raw))
            .map(String::as_str)
    }

    /// Parses a CSV cell or user input into a value of this feature's kind.
    pub fn parse_value(&self, raw: &str) -> Result<Value, DataError> {
        match self.kind {
            FeatureKind::Numeric => {
                let v: f64 = raw.trim().parse().map_err(|_| DataError::InvalidValue {
                    feature: self.name.clone(),
                    reason: format!("`{raw}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::InvalidValue {
                        feature: self.name.clone(),
                        reason: format!("`{raw}` is not finite"),
                    });
                }
                Ok(Value::Number(v))
            }
            FeatureKind::Categorical => self
                .match_category(raw)
                .map(|c| Value::Category(c.to_string()))
                .ok_or_else(|| DataError::InvalidValue {
                    feature: self.name.clone(),
                    reason: format!("`{raw}` is not one of {:?}", self.categories),
                }),
        }
    }

    /// Checks an already-typed value, canonicalizing category spelling.
    pub fn check_value(&self, value: &Value) -> Result<Value, DataError> {
        match (self.kind, value) {
            (FeatureKind::Numeric, Value::Number(v)) if v.is_finite() => Ok(value.clone()),
            (FeatureKind::Numeric, Value::Category(raw)) => self.parse_value(raw),
            (FeatureKind::Categorical, Value::Category(raw)) => self.parse_value(raw),
            (FeatureKind::Categorical, Value::Number(v)) => self.parse_value(&v.to_string()),
            _ => Err(DataError::InvalidValue {
                feature: self.name.clone(),
                reason: "value is not finite".into(),
            }),
        }
    }

    pub fn render(&self, value: &Value, source_text: Option<&str>) -> String {
        let text = match value {
            Value::Number(v) => {
                let mut text = format_number(*v, self.format, source_text);
                if !self.unit.is_empty() {
                    text.push(' ');
                    text.push_str(&self.unit);
                }
                text
            }
            Value::Category(c) => self.phrases.get(c).cloned().unwrap_or_else(|| c.clone()),
        };
        self.template.replacen(VALUE_PLACEHOLDER, &text, 1)
    }
}

pub fn format_number(v: f64, format: NumberFormat, source_text: Option<&str>) -> String {
    match format {
        NumberFormat::Source => match source_text {
            Some(text) => text.trim().to_string(),
            None => format!("{v}"),
        },
        NumberFormat::Integer => format!("{:.0}", v.round()),
        NumberFormat::Float => {
            let text = format!("{v}");
            if text.contains(['.', 'e', 'E', 'N', 'i']) {
                text
            } else {
                format!("{text}.0")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub disease_name: String,
    #[serde(default)]
    pub context_preamble: String,
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    /// Per-record disease column (OSCE-style case/diagnosis pairs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease_column: Option<String>,
    /// Label spellings coerced to 1 in addition to `1`/`true`/`yes`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positive_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative_labels: Vec<String>,
    /// Prompt family for remote surrogates (`ckd`, `hepatitis`, `diabetes`, `osce`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_family: Option<String>,
    /// Specialist role used by generic prompts, e.g. "nephrologist".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialist: Option<String>,
    pub features: Vec<FeatureSpec>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for feature in &self.features {
            feature.validate()?;
            if !seen.insert(feature.name.as_str()) {
                return Err(DataError::Schema(format!(
                    "duplicate feature `{}`",
                    feature.name
                )));
            }
        }
        if seen.contains(self.label_column.as_str()) {
            return Err(DataError::Schema(format!(
                "label column `{}` is also a feature",
                self.label_column
            )));
        }
        if self.features.iter().all(|f| f.known_at_start) {
            return Err(DataError::Schema(
                "every feature is known at start; nothing to select".into(),
            ));
        }
        self.cost_model()?;
        Ok(())
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Splits features into (known at start, selectable), both in schema order.
    pub fn partition(&self) -> (Vec<String>, Vec<String>) {
        let (known, unknown): (Vec<_>, Vec<_>) =
            self.features.iter().partition(|f| f.known_at_start);
        (
            known.into_iter().map(|f| f.name.clone()).collect(),
            unknown.into_iter().map(|f| f.name.clone()).collect(),
        )
    }

    /// Per-feature costs when any feature declares one, uniform otherwise.
    pub fn cost_model(&self) -> Result<CostModel, DataError> {
        if self.features.iter().all(|f| f.cost.is_none()) {
            return Ok(CostModel::uniform());
        }
        let mut raw_costs = BTreeMap::new();
        for feature in self.features.iter().filter(|f| !f.known_at_start) {
            let cost = feature.cost.ok_or_else(|| {
                DataError::Schema(format!(
                    "feature `{}` has no cost while others do",
                    feature.name
                ))
            })?;
            raw_costs.insert(feature.name.clone(), cost);
        }
        let model = CostModel {
            mode: CostMode::PerFeature,
            raw_costs,
            lambda: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    fn coerce_label(&self, raw: &str) -> Option<u8> {
        let raw = raw.trim();
        if self.positive_labels.iter().any(|l| l.eq_ignore_ascii_case(raw)) {
            return Some(1);
        }
        if self.negative_labels.iter().any(|l| l.eq_ignore_ascii_case(raw)) {
            return Some(0);
        }
        match raw.to_ascii_lowercase().as_str() {
            "1" | "1.0" | "true" | "yes" => Some(1),
            "0" | "0.0" | "false" | "no" => Some(0),
            _ => None,
        }
    }
}

/// Known feature values for one patient, plus the CSV text they came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    values: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    source_text: BTreeMap<String, String>,
}

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, feature: &str, value: Value, source_text: Option<String>) {
        self.values.insert(feature.to_string(), value);
        match source_text {
            Some(text) => {
                self.source_text.insert(feature.to_string(), text);
            }
            None => {
                self.source_text.remove(feature);
            }
        }
    }

    pub fn with(&self, feature: &str, value: Value) -> Self {
        let mut extended = self.clone();
        extended.insert(feature, value, None);
        extended
    }

    pub fn get(&self, feature: &str) -> Option<&Value> {
        self.values.get(feature)
    }

    pub fn contains(&self, feature: &str) -> bool {
        self.values.contains_key(feature)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Sorted `name=value` pairs joined by `;`, or `-` when empty.
    pub fn canonical_key(&self) -> String {
        if self.values.is_empty() {
            return "-".to_string();
        }
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// One sentence per known feature in schema order, space separated.
    pub fn render(&self, schema: &DatasetSchema) -> String {
        schema
            .features
            .iter()
            .filter_map(|f| {
                self.values.get(&f.name).map(|v| {
                    f.render(v, self.source_text.get(&f.name).map(String::as_str))
                })
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub values: IndexMap<String, Value>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease: Option<String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub source_text: IndexMap<String, String>,
}

impl PatientRecord {
    /// Evidence restricted to `known`.
    pub fn evidence<'a>(
        &self,
        known: impl IntoIterator<Item = &'a str>,
    ) -> Result<Evidence, DataError> {
        let mut evidence = Evidence::new();
        for name in known {
            let value = self
                .values
                .get(name)
                .ok_or_else(|| DataError::MissingValue(name.to_string()))?;
            evidence.insert(name, value.clone(), self.source_text.get(name).cloned());
        }
        Ok(evidence)
    }

    pub fn validate(&self, schema: &DatasetSchema) -> Result<(), DataError> {
        if self.values.len() != schema.features.len() {
            return Err(DataError::Schema(format!(
                "record `{}` has {} values for {} features",
                self.id,
                self.values.len(),
                schema.features.len()
            )));
        }
        for feature in &schema.features {
            let value = self
                .values
                .get(&feature.name)
                .ok_or_else(|| DataError::MissingValue(feature.name.clone()))?;
            feature.check_value(value)?;
        }
        if self.label > 1 {
            return Err(DataError::Schema(format!("label {} is not binary", self.label)));
        }
        Ok(())
    }
}

/// Renders the known features of `record` into a clinical vignette.
pub fn render_vignette(
    record: &PatientRecord,
    known: &BTreeSet<String>,
    schema: &DatasetSchema,
) -> Result<String, DataError> {
    for name in known {
        if schema.feature(name).is_none() {
            return Err(DataError::UnknownFeature(name.clone()));
        }
    }
    Ok(record.evidence(known.iter().map(String::as_str))?.render(schema))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowDrop {
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub records: Vec<PatientRecord>,
    pub dropped: Vec<RowDrop>,
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "?" | "na" | "n/a" | "nan" | "null"
    )
}

/// Reads CSV records, dropping incomplete or unparseable rows.
pub fn load_dataset<R: Read>(source: R, schema: &DatasetSchema) -> Result<LoadReport, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_columns = schema
        .features
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>, _>>()?;
    let label_column = column(&schema.label_column)?;
    let id_column = schema.id_column.as_deref().map(column).transpose()?;
    let disease_column = schema.disease_column.as_deref().map(column).transpose()?;

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for (index, row) in reader.records().enumerate() {
        let row_number = index + 1;
        let row = match row {
            Ok(row) => row,
            Err(err) => {
                dropped.push(RowDrop {
                    row: row_number,
                    reason: err.to_string(),
                });
                continue;
            }
        };
        match parse_row(
            schema,
            &row,
            &feature_columns,
            label_column,
            id_column,
            disease_column,
            index,
        ) {
            Ok(record) => records.push(record),
            Err(reason) => dropped.push(RowDrop {
                row: row_number,
                reason,
            }),
        }
    }
    for drop in &dropped {
        tracing::warn!(row = drop.row, reason = %drop.reason, "dropped dataset row");
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(LoadReport { records, dropped })
}

fn parse_row(
    schema: &DatasetSchema,
    row: &csv::StringRecord,
    feature_columns: &[usize],
    label_column: usize,
    id_column: Option<usize>,
    disease_column: Option<usize>,
    index: usize,
) -> Result<PatientRecord, String> {
    let cell = |col: usize| row.get(col).unwrap_or("");
    let mut values = IndexMap::new();
    let mut source_text = IndexMap::new();
    for (feature, &col) in schema.features.iter().zip(feature_columns) {
        let raw = cell(col);
        if is_missing(raw) {
            return Err(format!("missing value for `{}`", feature.name));
        }
        let value = feature.parse_value(raw).map_err(|e| e.to_string())?;
        if feature.kind == FeatureKind::Numeric {
            source_text.insert(feature.name.clone(), raw.trim().to_string());
        }
        values.insert(feature.name.clone(), value);
    }
    let raw_label = cell(label_column);
    let label = schema
        .coerce_label(raw_label)
        .ok_or_else(|| format!("label `{raw_label}` is not binary"))?;
    let id = match id_column {
        Some(col) if !cell(col).is_empty() => cell(col).to_string(),
        _ => index.to_string(),
    };
    let disease = disease_column
        .map(|col| cell(col).to_string())
        .filter(|d| !d.is_empty());
    Ok(PatientRecord {
        id,
        values,
        label,
        disease,
        source_text,
    })
}

/// Writes records back in the layout [`load_dataset`] reads.
pub fn write_dataset<W: Write>(
    sink: W,
    schema: &DatasetSchema,
    records: &[PatientRecord],
) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_writer(sink);
    let mut header: Vec<&str> = Vec::new();
    if let Some(id) = &schema.id_column {
        header.push(id);
    }
    header.extend(schema.features.iter().map(|f| f.name.as_str()));
    header.push(&schema.label_column);
    if let Some(disease) = &schema.disease_column {
        header.push(disease);
    }
    writer.write_record(&header)?;
    for record in records {
        let mut row: Vec<String> = Vec::new();
        if schema.id_column.is_some() {
            row.push(record.id.clone());
        }
        for feature in &schema.features {
            let value = record
                .values
                .get(&feature.name)
                .ok_or_else(|| DataError::MissingValue(feature.name.clone()))?;
            let text = match value {
                Value::Number(v) => record
                    .source_text
                    .get(&feature.name)
                    .cloned()
                    .unwrap_or_else(|| format!("{v}")),
                Value::Category(c) => c.clone(),
            };
            row.push(text);
        }
        row.push(record.label.to_string());
        if schema.disease_column.is_some() {
            row.push(record.disease.clone().unwrap_or_default());
        }
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|source| DataError::Io {
        path: PathBuf::from("<csv sink>"),
        source,
    })?;
    Ok(())
}

/// On-disk manifest: a schema plus the CSV it describes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// CSV path, relative to the manifest file.
    pub csv: PathBuf,
    #[serde(flatten)]
    pub schema: DatasetSchema,
}

/// A loaded, immutable dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub schema: DatasetSchema,
    pub records: Vec<PatientRecord>,
    pub dropped: Vec<RowDrop>,
}

impl Dataset {
    pub fn from_manifest(path: &Path) -> Result<Self, DataError> {
        let manifest = read_manifest(path)?;
        let csv_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.csv);
        let file = std::fs::File::open(&csv_path).map_err(|source| DataError::Io {
            path: csv_path.clone(),
            source,
        })?;
        let report = load_dataset(file, &manifest.schema)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| manifest.schema.disease_name.clone());
        Ok(Self {
            name,
            schema: manifest.schema,
            records: report.records,
            dropped: report.dropped,
        })
    }

    pub fn record(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|source| DataError::Manifest {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.schema.validate()?;
    Ok(manifest)
}
