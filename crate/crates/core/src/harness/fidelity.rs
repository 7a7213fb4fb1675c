//! How closely surrogate samples match the real per-feature distributions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind};
use crate::engine::{mix_seed, SessionState};
use crate::surrogate::Surrogate;

use super::metrics::{best_of_k_mae, energy_distance_1d, normalize_feature, wasserstein_1d};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub feature: String,
    pub patients: usize,
    pub failures: usize,
    /// Distances between pooled samples and true values, both min-max
    /// scaled by the true range.
    pub wasserstein: f64,
    pub energy: f64,
    /// Best-of-M absolute error per patient, as percent of the true range,
    /// averaged over patients.
    pub best_mae_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeByK {
    pub feature: String,
    pub k: usize,
    pub mae_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub m: usize,
    pub rows: Vec<FidelityRow>,
    pub by_k: Vec<MaeByK>,
    /// Simple mean over features.
    pub mean_wasserstein: f64,
    pub mean_energy: f64,
}

/// Samples every unknown numeric feature for each patient, conditioned on
/// the patient's starting evidence, and compares against the dataset.
pub fn sample_fidelity(
    dataset: &Dataset,
    surrogate: &dyn Surrogate,
    m: usize,
    seed: u64,
    max_patients: Option<usize>,
) -> Result<FidelityReport, HarnessError> {
    if m == 0 {
        return Err(HarnessError::Config("m must be >= 1".into()));
    }
    let schema = &dataset.schema;
    let records = &dataset.records[..max_patients.unwrap_or(usize::MAX).min(dataset.records.len())];
    let mut rows = Vec::new();
    let mut by_k = Vec::new();
    for (fi, spec) in schema.features.iter().enumerate() {
        if spec.known_at_start || spec.kind != FeatureKind::Numeric {
            continue;
        }
        let truth: Vec<f64> = records
            .iter()
            .filter_map(|r| r.values.get(&spec.name).and_then(|v| v.as_number()))
            .collect();
        let (min, max) = truth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(max > min) {
            tracing::warn!(feature = %spec.name, "skipping constant feature");
            continue;
        }
        let range = max - min;
        let mut pooled = Vec::new();
        let mut mae_sum = vec![0.0; m];
        let mut patients = 0;
        let mut failures = 0;
        for (i, record) in records.iter().enumerate() {
            let Some(true_value) = record.values.get(&spec.name).and_then(|v| v.as_number()) else {
                continue;
            };
            let session = SessionState::from_record(schema, record)?;
            let vignette = session.evidence.render(schema);
            let samples = match surrogate.sample_outcomes(
                &session.context(&vignette),
                spec,
                m,
                mix_seed(seed, i, fi),
            ) {
                Ok(s) => s,
                Err(e) => {
                    tracing::warn!(patient = %record.id, feature = %spec.name, error = %e, "sampling failed");
                    failures += 1;
                    continue;
                }
            };
            let values: Vec<f64> = samples.iter().filter_map(|s| s.value.as_number()).collect();
            if values.len() < m {
                failures += 1;
                continue;
            }
            for (k, acc) in mae_sum.iter_mut().enumerate() {
                *acc += best_of_k_mae(&values, true_value, k + 1)? / range * 100.0;
            }
            pooled.extend(values);
            patients += 1;
        }
        if patients == 0 {
            continue;
        }
        let a = normalize_feature(&pooled, min, max)?;
        let b = normalize_feature(&truth, min, max)?;
        for (k, acc) in mae_sum.iter().enumerate() {
            by_k.push(MaeByK {
                feature: spec.name.clone(),
                k: k + 1,
                mae_pct: acc / patients as f64,
            });
        }
        rows.push(FidelityRow {
            feature: spec.name.clone(),
            patients,
            failures,
            wasserstein: wasserstein_1d(&a, &b)?,
            energy: energy_distance_1d(&a, &b)?,
            best_mae_pct: mae_sum[m - 1] / patients as f64,
        });
    }
    if rows.is_empty() {
        return Err(HarnessError::Config(format!(
            "`{}` has no selectable numeric feature with a usable range to compare",
            dataset.name
        )));
    }
    let mean = |f: fn(&FidelityRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(FidelityReport {
        m,
        mean_wasserstein: mean(|r| r.wasserstein),
        mean_energy: mean(|r| r.energy),
        rows,
        by_k,
    })
}

/// Writes `fidelity.csv` and `mae_by_k.csv`.
pub fn write_fidelity(dir: &Path, report: &FidelityReport) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let write = |name: &str, f: &dyn Fn(&mut csv::Writer<std::fs::File>) -> csv::Result<()>| {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        f(&mut w)
            .and_then(|()| w.flush().map_err(csv::Error::from))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    };
    write("fidelity.csv", &|w| report.rows.iter().try_for_each(|r| w.serialize(r)))?;
    write("mae_by_k.csv", &|w| report.by_k.iter().try_for_each(|r| w.serialize(r)))
}
