//! Table-driven surrogate.
//!
//! Outcome samples are keyed by `(patient_id, feature, sample_index)` and risk
//! estimates by `(patient_id, evidence_key, draw)`, where `evidence_key` is
//! [`Evidence::canonical_key`]. The patient id `*` matches every patient and
//! the evidence key `*` matches any evidence set of that patient.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::belief::{expected_kl, Belief};
use crate::dataset::{DatasetSchema, Evidence, FeatureSpec};

use super::{Context, OutcomeSample, QueryCounter, Surrogate, SurrogateError};

pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedTables {
    samples: BTreeMap<(String, String), BTreeMap<usize, String>>,
    risks: BTreeMap<(String, String), BTreeMap<usize, f64>>,
    global: Vec<String>,
}

impl ScriptedTables {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sample(&mut self, patient: &str, feature: &str, value: impl ToString) -> &mut Self {
        let entry = self
            .samples
            .entry((patient.to_string(), feature.to_string()))
            .or_default();
        let index = entry.len();
        entry.insert(index, value.to_string());
        self
    }

    pub fn add_risk(&mut self, patient: &str, evidence_key: &str, p: f64) -> &mut Self {
        let entry = self
            .risks
            .entry((patient.to_string(), evidence_key.to_string()))
            .or_default();
        let draw = entry.len();
        entry.insert(draw, p);
        self
    }

    pub fn set_global(&mut self, ranking: Vec<String>) -> &mut Self {
        self.global = ranking;
        self
    }

    fn samples_for(&self, patient: &str, feature: &str) -> Option<&BTreeMap<usize, String>> {
        self.samples
            .get(&(patient.to_string(), feature.to_string()))
            .or_else(|| self.samples.get(&(WILDCARD.to_string(), feature.to_string())))
    }

    fn risks_for(&self, patient: &str, key: &str) -> Option<&BTreeMap<usize, f64>> {
        [(patient, key), (patient, WILDCARD), (WILDCARD, key), (WILDCARD, WILDCARD)]
            .into_iter()
            .find_map(|(p, k)| self.risks.get(&(p.to_string(), k.to_string())))
    }

    /// Reads `samples.tsv`, `risks.tsv` and the optional `global.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, SurrogateError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| {
                SurrogateError::Config(format!("{}: {e}", dir.join(name).display()))
            })
        };
        let mut tables = Self::new();
        for (line_no, fields) in tsv_rows(&read("samples.tsv")?) {
            let [patient, feature, index, value] = fields[..] else {
                return Err(bad_row("samples.tsv", line_no));
            };
            let index: usize = index.parse().map_err(|_| bad_row("samples.tsv", line_no))?;
            tables
                .samples
                .entry((patient.to_string(), feature.to_string()))
                .or_default()
                .insert(index, value.to_string());
        }
        for (line_no, fields) in tsv_rows(&read("risks.tsv")?) {
            let [patient, key, draw, p] = fields[..] else {
                return Err(bad_row("risks.tsv", line_no));
            };
            let draw: usize = draw.parse().map_err(|_| bad_row("risks.tsv", line_no))?;
            let p: f64 = p.parse().map_err(|_| bad_row("risks.tsv", line_no))?;
            tables
                .risks
                .entry((patient.to_string(), key.to_string()))
                .or_default()
                .insert(draw, p);
        }
        if dir.join("global.txt").exists() {
            tables.global = read("global.txt")?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect();
        }
        Ok(tables)
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut samples = String::from("patient_id\tfeature\tsample_index\tvalue\n");
        for ((patient, feature), values) in &self.samples {
            for (index, value) in values {
                let _ = writeln!(samples, "{patient}\t{feature}\t{index}\t{value}");
            }
        }
        std::fs::write(dir.join("samples.tsv"), samples)?;
        let mut risks = String::from("patient_id\tevidence\tdraw\tprobability\n");
        for ((patient, key), draws) in &self.risks {
            for (draw, p) in draws {
                let _ = writeln!(risks, "{patient}\t{key}\t{draw}\t{p}");
            }
        }
        std::fs::write(dir.join("risks.tsv"), risks)?;
        if !self.global.is_empty() {
            std::fs::write(dir.join("global.txt"), self.global.join("\n") + "\n")?;
        }
        Ok(())
    }
}

fn bad_row(file: &str, line: usize) -> SurrogateError {
    SurrogateError::Config(format!("{file}: malformed line {line}"))
}

/// Non-empty, non-comment data rows after the header, with 1-based line numbers.
fn tsv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').map(str::trim).collect()))
}

pub struct ScriptedSurrogate {
    tables: ScriptedTables,
    schema: DatasetSchema,
    m: usize,
    counter: QueryCounter,
}

impl ScriptedSurrogate {
    /// `m` is the sample count used when scoring candidates for
    /// [`Surrogate::implicit_select`].
    pub fn new(tables: ScriptedTables, schema: DatasetSchema, m: usize) -> Self {
        Self {
            tables,
            schema,
            m: m.max(1),
            counter: QueryCounter::default(),
        }
    }

    pub fn tables(&self) -> &ScriptedTables {
        &self.tables
    }

    fn lookup_samples(
        &self,
        patient: &str,
        feature: &FeatureSpec,
        m: usize,
    ) -> Result<Vec<OutcomeSample>, SurrogateError> {
        let table = self
            .tables
            .samples_for(patient, &feature.name)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| {
                SurrogateError::MissingEntry(format!("samples of `{}` for `{patient}`", feature.name))
            })?;
        let cells: Vec<&String> = table.values().collect();
        (0..m)
            .map(|j| {
                let raw = cells[j % cells.len()];
                let value =
                    feature
                        .parse_value(raw)
                        .map_err(|_| SurrogateError::UnparseableSample {
                            feature: feature.name.clone(),
                            raw: raw.clone(),
                        })?;
                Ok(OutcomeSample::new(&feature.name, value, raw.clone()))
            })
            .collect()
    }

    fn lookup_risk(&self, patient: &str, evidence: &Evidence, draw: usize) -> Result<f64, SurrogateError> {
        let key = evidence.canonical_key();
        let draws = self
            .tables
            .risks_for(patient, &key)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| SurrogateError::MissingEntry(format!("risk of `{patient}` given `{key}`")))?;
        let values: Vec<f64> = draws.values().copied().collect();
        Ok(values[draw % values.len()].clamp(0.0, 1.0))
    }

    fn table_expected_kl(&self, ctx: &Context<'_>, feature: &FeatureSpec) -> Result<f64, SurrogateError> {
        let prior = Belief::saturating(self.lookup_risk(ctx.patient_id, ctx.evidence, 0)?);
        let samples = self.lookup_samples(ctx.patient_id, feature, self.m)?;
        let posteriors = samples
            .iter()
            .enumerate()
            .map(|(j, s)| self.lookup_risk(ctx.patient_id, &ctx.evidence.with(&feature.name, s.value.clone()), j))
            .collect::<Result<Vec<_>, _>>()?;
        expected_kl(&posteriors, prior).map_err(|e| SurrogateError::Config(e.to_string()))
    }
}

impl Surrogate for ScriptedSurrogate {
    fn sample_outcomes(
        &self,
        ctx: &Context<'_>,
        feature: &FeatureSpec,
        m: usize,
        _seed: u64,
    ) -> Result<Vec<OutcomeSample>, SurrogateError> {
        self.counter.add_outcome(m as u64);
        self.lookup_samples(ctx.patient_id, feature, m)
    }

    fn estimate_risk(&self, ctx: &Context<'_>, draw: usize) -> Result<f64, SurrogateError> {
        self.counter.add_risk(1);
        self.lookup_risk(ctx.patient_id, ctx.evidence, draw)
    }

    fn implicit_select(&self, ctx: &Context<'_>, unknown: &[String]) -> Result<String, SurrogateError> {
        self.counter.add_selection(1);
        let mut best: Option<(&String, f64)> = None;
        for name in unknown {
            let feature = self
                .schema
                .feature(name)
                .ok_or_else(|| SurrogateError::UnknownFeature(name.clone()))?;
            let score = self.table_expected_kl(ctx, feature)?;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((name, score));
            }
        }
        best.map(|(n, _)| n.clone())
            .ok_or_else(|| SurrogateError::InvalidSelection { raw: String::new() })
    }

    /// Uses the table's `global.txt` ranking when present, otherwise the
    /// first `n` candidates.
    fn global_select(&self, all: &[String], n: usize) -> Result<Vec<String>, SurrogateError> {
        self.counter.add_selection(1);
        if n > all.len() {
            return Err(SurrogateError::MalformedList {
                raw: format!("asked for {n} of {} features", all.len()),
            });
        }
        let mut chosen: Vec<String> = self
            .tables
            .global
            .iter()
            .filter(|g| all.contains(g))
            .take(n)
            .cloned()
            .collect();
        for name in all {
            if chosen.len() == n {
                break;
            }
            if !chosen.contains(name) {
                chosen.push(name.clone());
            }
        }
        Ok(chosen)
    }

    fn counter(&self) -> &QueryCounter {
        &self.counter
    }
}
