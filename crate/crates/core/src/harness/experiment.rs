//! Batch experiments: config, episode fan-out, aggregation, report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::StoppingPolicy;
use crate::dataset::Dataset;
use crate::engine::{run_episode, Criterion, Engine, EpisodeRecord, EpisodeSpec, Method};
use crate::surrogate::{Surrogate, SurrogateConfig};

use super::metrics::{
    bayesian_bootstrap, compute_classification_metrics, mean_std, BootstrapSummary, MeanStd,
};
use super::HarnessError;

fn default_methods() -> Vec<Method> {
    vec![Method::Actmed, Method::Random, Method::Global, Method::Implicit, Method::AllFeatures]
}
fn default_budget() -> usize {
    3
}
fn default_gammas() -> Vec<f64> {
    vec![0.3, 0.5, 0.7]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_m() -> usize {
    10
}
fn default_theta() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_bootstrap_draws() -> usize {
    2000
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest.
    pub dataset: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Criterion for `actmed`; `entropy` makes it equivalent to
    /// `actmed-entropy`.
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_true")]
    pub early_stop: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_patients: Option<usize>,
    /// Episode worker threads; defaults to the number of CPUs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_bootstrap_draws")]
    pub bootstrap_draws: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub surrogate: SurrogateConfig,
}

impl ExperimentConfig {
    /// Reads a TOML config; dataset, output and surrogate paths are taken
    /// relative to the config file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for path in [&mut config.dataset, &mut config.output_dir] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        config.surrogate.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.budget == 0 {
            return bad("budget must be >= 1");
        }
        if self.m == 0 {
            return bad("m must be >= 1");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return bad("gammas must be a non-empty list in [0, 1]");
        }
        StoppingPolicy::new(self.theta, self.gammas[0])?;
        self.surrogate.validate()?;
        Ok(())
    }

    fn resolve_method(&self, m: Method) -> Method {
        if m == Method::Actmed && self.criterion == Criterion::Entropy {
            Method::ActmedEntropy
        } else {
            m
        }
    }

    /// (method, gamma) pairs; gamma only varies for actmed with stopping.
    pub fn arms(&self) -> Vec<(Method, Option<f64>)> {
        let mut arms = Vec::new();
        for &m in &self.methods {
            let m = self.resolve_method(m);
            if m.is_actmed() && self.early_stop {
                arms.extend(self.gammas.iter().map(|&g| (m, Some(g))));
            } else {
                arms.push((m, None));
            }
        }
        arms.dedup();
        arms
    }
}

/// Groups episodes the way the report does.
fn arm_of(e: &EpisodeRecord) -> (Method, Option<f64>) {
    (e.method, (e.method.is_actmed() && e.early_stop).then_some(e.gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: Method,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub episodes: usize,
    pub failures: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub mean_tests: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub gamma: Option<f64>,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    /// Over seeds with a defined AUC.
    pub auc: Option<MeanStd>,
    pub tests_per_patient: MeanStd,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub method: Method,
    pub gamma: Option<f64>,
    pub feature: String,
    /// Fraction of episodes acquiring the feature, averaged over seeds.
    pub rate_mean: f64,
    pub rate_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub method: Method,
    pub gamma: Option<f64>,
    /// Share of acquisitions that belong to the seed's global-best set.
    pub overlap_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub method: Method,
    pub gamma: Option<f64>,
    pub label: u8,
    pub risk: BootstrapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub theta: f64,
    pub runs: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
    pub frequencies: Vec<FrequencyRow>,
    pub overlap: Vec<OverlapRow>,
    pub bootstrap: Vec<BootstrapRow>,
    pub failures: usize,
}

pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs every (seed, method, gamma) arm over the dataset.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    surrogate: &dyn Surrogate,
) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let records = match config.max_patients {
        Some(n) => &dataset.records[..n.min(dataset.records.len())],
        None => &dataset.records[..],
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let (_, selectable) = dataset.schema.partition();
    let mut episodes = Vec::new();
    for &seed in &config.seeds {
        let global = if config.methods.contains(&Method::Global) {
            Some(surrogate.global_select(&selectable, config.budget)?)
        } else {
            None
        };
        for (method, gamma) in config.arms() {
            let policy = StoppingPolicy::new(config.theta, gamma.unwrap_or(config.gammas[0]))?;
            let engine = Engine::new(dataset.schema.clone(), policy, method.criterion(), config.m)?;
            tracing::info!(seed, %method, ?gamma, patients = records.len(), "running arm");
            let batch = pool.install(|| {
                records
                    .par_iter()
                    .enumerate()
                    .map(|(i, record)| {
                        let spec = EpisodeSpec {
                            method,
                            budget: config.budget,
                            early_stop: config.early_stop,
                            seed,
                            stream: i,
                            global_features: global.clone(),
                        };
                        run_episode(&engine, record, &spec, surrogate)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })?;
            episodes.extend(batch);
        }
    }
    let report = build_report(config.theta, config.bootstrap_draws, &episodes)?;
    Ok(ExperimentOutput { report, episodes })
}

/// Aggregates episodes into the report. Failed episodes are counted and
/// otherwise excluded.
pub fn build_report(
    theta: f64,
    bootstrap_draws: usize,
    episodes: &[EpisodeRecord],
) -> Result<MetricsReport, HarnessError> {
    type Key = (Method, Option<u64>);
    let key = |m: Method, g: Option<f64>| -> Key { (m, g.map(f64::to_bits)) };
    let mut arms: Vec<(Method, Option<f64>)> = Vec::new();
    let mut by_run: BTreeMap<(Key, u64), Vec<&EpisodeRecord>> = BTreeMap::new();
    for e in episodes {
        let (m, g) = arm_of(e);
        if !arms.contains(&(m, g)) {
            arms.push((m, g));
        }
        by_run.entry((key(m, g), e.seed)).or_default().push(e);
    }
    arms.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.unwrap_or(-1.0).total_cmp(&b.1.unwrap_or(-1.0))));

    // global-best set per seed, read off the global episodes
    let mut global: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for e in episodes.iter().filter(|e| e.method == Method::Global && !e.is_failed()) {
        global.entry(e.seed).or_insert_with(|| e.acquired.iter().cloned().collect());
    }

    let mut report = MetricsReport {
        theta,
        runs: Vec::new(),
        aggregates: Vec::new(),
        frequencies: Vec::new(),
        overlap: Vec::new(),
        bootstrap: Vec::new(),
        failures: episodes.iter().filter(|e| e.is_failed()).count(),
    };
    for &(method, gamma) in &arms {
        let runs: Vec<(u64, &Vec<&EpisodeRecord>)> = by_run
            .iter()
            .filter(|((k, _), _)| *k == key(method, gamma))
            .map(|((_, seed), eps)| (*seed, eps))
            .collect();
        let mut rows = Vec::new();
        let mut feature_rates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut overlap = (0usize, 0usize);
        let mut risks_by_label: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (seed, eps) in &runs {
            let ok: Vec<&&EpisodeRecord> = eps.iter().filter(|e| !e.is_failed()).collect();
            let failures = eps.len() - ok.len();
            if ok.is_empty() {
                rows.push(RunRow {
                    method,
                    gamma,
                    seed: *seed,
                    episodes: eps.len(),
                    failures,
                    accuracy: f64::NAN,
                    precision: f64::NAN,
                    recall: f64::NAN,
                    f1: f64::NAN,
                    auc: None,
                    mean_tests: f64::NAN,
                });
                continue;
            }
            let labels: Vec<u8> = ok.iter().map(|e| e.label).collect();
            let risks: Vec<f64> = ok.iter().map(|e| e.final_risk.unwrap_or(f64::NAN)).collect();
            let cm = compute_classification_metrics(&labels, &risks, theta)?;
            let tests: Vec<f64> = ok.iter().map(|e| e.acquired.len() as f64).collect();
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &ok {
                for f in &e.acquired {
                    *counts.entry(f).or_default() += 1;
                }
                if let Some(g) = global.get(seed) {
                    overlap.0 += e.acquired.iter().filter(|f| g.contains(*f)).count();
                    overlap.1 += e.acquired.len();
                }
                risks_by_label[usize::from(e.label)].push(e.final_risk.unwrap_or(f64::NAN));
            }
            let all_features: BTreeSet<&str> = ok
                .iter()
                .flat_map(|e| e.steps.iter().flat_map(|s| s.evaluations.iter().map(|v| v.feature.as_str())))
                .chain(counts.keys().copied())
                .collect();
            for f in all_features {
                feature_rates
                    .entry(f.to_string())
                    .or_default()
                    .push(*counts.get(f).unwrap_or(&0) as f64 / ok.len() as f64);
            }
            rows.push(RunRow {
                method,
                gamma,
                seed: *seed,
                episodes: eps.len(),
                failures,
                accuracy: cm.accuracy,
                precision: cm.precision,
                recall: cm.recall,
                f1: cm.f1,
                auc: cm.auc,
                mean_tests: tests.iter().sum::<f64>() / tests.len() as f64,
            });
        }
        let defined: Vec<&RunRow> = rows.iter().filter(|r| !r.accuracy.is_nan()).collect();
        let col = |f: fn(&RunRow) -> f64| -> Vec<f64> { defined.iter().map(|r| f(r)).collect() };
        if let Some(accuracy) = mean_std(&col(|r| r.accuracy)) {
            report.aggregates.push(AggregateRow {
                method,
                gamma,
                accuracy,
                precision: mean_std(&col(|r| r.precision)).expect("non-empty"),
                recall: mean_std(&col(|r| r.recall)).expect("non-empty"),
                f1: mean_std(&col(|r| r.f1)).expect("non-empty"),
                auc: mean_std(&defined.iter().filter_map(|r| r.auc).collect::<Vec<_>>()),
                tests_per_patient: mean_std(&col(|r| r.mean_tests)).expect("non-empty"),
                failures: rows.iter().map(|r| r.failures).sum(),
            });
        }
        let n_seeds = defined.len();
        for (feature, mut rates) in feature_rates {
            // seeds where the feature never came up count as zero
            rates.resize(n_seeds.max(rates.len()), 0.0);
            if let Some(ms) = mean_std(&rates) {
                report.frequencies.push(FrequencyRow {
                    method,
                    gamma,
                    feature,
                    rate_mean: ms.mean,
                    rate_std: ms.std,
                });
            }
        }
        if overlap.1 > 0 && method != Method::Global {
            report.overlap.push(OverlapRow {
                method,
                gamma,
                overlap_rate: overlap.0 as f64 / overlap.1 as f64,
            });
        }
        for (label, risks) in risks_by_label.iter().enumerate() {
            if !risks.is_empty() && bootstrap_draws > 0 {
                report.bootstrap.push(BootstrapRow {
                    method,
                    gamma,
                    label: label as u8,
                    risk: bayesian_bootstrap(risks, bootstrap_draws, label as u64)?,
                });
            }
        }
        report.runs.extend(rows);
    }
    Ok(report)
}

fn gamma_cell(g: Option<f64>) -> String {
    g.map(|g| g.to_string()).unwrap_or_default()
}

fn arm_label(method: Method, gamma: Option<f64>) -> String {
    match gamma {
        Some(g) => format!("{method} (gamma {g})"),
        None => method.to_string(),
    }
}

fn trajectory_file(e: &EpisodeRecord) -> String {
    let id: String = e
        .patient_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    match arm_of(e).1 {
        Some(g) => format!("{}_g{g}_s{}_{id}.json", e.method, e.seed),
        None => format!("{}_s{}_{id}.json", e.method, e.seed),
    }
}

/// Human-readable aggregate summary.
pub fn render_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    let pm = |m: &MeanStd| format!("{:.3} ± {:.3}", m.mean, m.std);
    let _ = writeln!(out, "decision threshold {}", report.theta);
    let _ = writeln!(out, "failed episodes {}\n", report.failures);
    let _ = writeln!(
        out,
        "{:<28} {:>15} {:>15} {:>15} {:>15} {:>15} {:>15}",
        "method", "accuracy", "precision", "recall", "f1", "auc", "tests"
    );
    for a in &report.aggregates {
        let _ = writeln!(
            out,
            "{:<28} {:>15} {:>15} {:>15} {:>15} {:>15} {:>15}",
            arm_label(a.method, a.gamma),
            pm(&a.accuracy),
            pm(&a.precision),
            pm(&a.recall),
            pm(&a.f1),
            a.auc.as_ref().map(pm).unwrap_or_else(|| "undefined".into()),
            pm(&a.tests_per_patient),
        );
    }
    if !report.overlap.is_empty() {
        let _ = writeln!(out, "\noverlap with global-best set");
        for o in &report.overlap {
            let _ = writeln!(out, "  {:<26} {:.3}", arm_label(o.method, o.gamma), o.overlap_rate);
        }
    }
    if !report.bootstrap.is_empty() {
        let _ = writeln!(out, "\nfinal risk by true label (Bayesian bootstrap, 95% interval)");
        for b in &report.bootstrap {
            let _ = writeln!(
                out,
                "  {:<26} label {}  mean {:.3}  std {:.4}  [{:.3}, {:.3}]",
                arm_label(b.method, b.gamma),
                b.label,
                b.risk.mean,
                b.risk.std,
                b.risk.lower,
                b.risk.upper
            );
        }
    }
    out
}

/// Writes `report.csv`, `report.txt`, `report.json`, `frequencies.csv`,
/// `bootstrap.csv` and, when given, `trajectories/*.json`.
pub fn write_report(
    dir: &Path,
    report: &MetricsReport,
    episodes: Option<&[EpisodeRecord]>,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| HarnessError::Config(format!("{}: {e}", p.display()))
    };

    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record([
        "method", "gamma", "seed", "episodes", "failures", "accuracy", "precision", "recall", "f1", "auc",
        "mean_tests",
    ])
    .map_err(csv_err(&path))?;
    for r in &report.runs {
        w.write_record([
            r.method.to_string(),
            gamma_cell(r.gamma),
            r.seed.to_string(),
            r.episodes.to_string(),
            r.failures.to_string(),
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.auc.map(|a| a.to_string()).unwrap_or_default(),
            r.mean_tests.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join("frequencies.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["method", "gamma", "feature", "rate_mean", "rate_std"])
        .map_err(csv_err(&path))?;
    for f in &report.frequencies {
        w.write_record([
            f.method.to_string(),
            gamma_cell(f.gamma),
            f.feature.clone(),
            f.rate_mean.to_string(),
            f.rate_std.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join("bootstrap.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["method", "gamma", "label", "mean", "std", "lower", "upper", "draws"])
        .map_err(csv_err(&path))?;
    for b in &report.bootstrap {
        w.write_record([
            b.method.to_string(),
            gamma_cell(b.gamma),
            b.label.to_string(),
            b.risk.mean.to_string(),
            b.risk.std.to_string(),
            b.risk.lower.to_string(),
            b.risk.upper.to_string(),
            b.risk.draws.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join("report.txt");
    std::fs::write(&path, render_text(report)).map_err(|e| HarnessError::io(&path, e))?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;

    if let Some(episodes) = episodes {
        let tdir = dir.join("trajectories");
        std::fs::create_dir_all(&tdir).map_err(|e| HarnessError::io(&tdir, e))?;
        for e in episodes {
            let path = tdir.join(trajectory_file(e));
            let json = serde_json::to_string_pretty(e).map_err(|e| HarnessError::Config(e.to_string()))?;
            std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    Ok(())
}

/// Loads every `*.json` episode in a trajectory archive, sorted by file name.
pub fn read_trajectories(dir: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}
