use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{evaluate, EvalMode, MetricsReport};
use crate::error::{Error, Result};
use crate::inference::CachedModel;
use crate::model::{ModelConfig, Vocabulary};
use crate::seed;
use crate::taskgen::{generate_dataset, AnswerType, DataConfig, Dataset};
use crate::trainer::{AblationMode, StepMetrics, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub mode: AblationMode,
    pub lambda_ans: f64,
    pub lambda_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_eval: usize,
}

impl AblationSpec {
    /// Every ablation mode, each with the given term weights.
    pub fn standard(seeds: Vec<u64>, n_train: usize, n_eval: usize, lambda_ans: f64, lambda_final: f64) -> Self {
        let variants = AblationMode::ALL
            .iter()
            .map(|&mode| VariantSpec {
                name: mode.name().to_string(),
                mode,
                lambda_ans,
                lambda_final,
            })
            .collect();
        Self {
            variants,
            seeds,
            n_train,
            n_eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one variant and one seed".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("ablation variant names must be unique".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub direct_report: Option<MetricsReport>,
    pub last_step: Option<StepMetrics>,
    pub wallclock_ms: u64,
    pub error: Option<String>,
}

/// Mean and sample standard deviation.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub overall_mean: f64,
    pub overall_sd: f64,
    pub direct_mean: f64,
    pub by_depth_mean: BTreeMap<usize, f64>,
    pub by_depth_sd: BTreeMap<usize, f64>,
    pub by_type_mean: BTreeMap<AnswerType, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub spec: AblationSpec,
    pub cells: Vec<AblationCell>,
    pub summaries: Vec<VariantSummary>,
}

fn summarize(variant: &str, cells: &[&AblationCell]) -> VariantSummary {
    let reports: Vec<&MetricsReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
    let overall: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
    let direct: Vec<f64> = cells
        .iter()
        .filter_map(|c| c.direct_report.as_ref())
        .map(|r| r.overall_accuracy)
        .collect();
    let mut by_depth: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut by_type: BTreeMap<AnswerType, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        for (&d, &a) in &r.by_depth {
            by_depth.entry(d).or_default().push(a);
        }
        for (&t, &a) in &r.by_answer_type {
            by_type.entry(t).or_default().push(a);
        }
    }
    let (overall_mean, overall_sd) = mean_sd(&overall);
    VariantSummary {
        variant: variant.to_string(),
        runs: reports.len(),
        failures: cells.len() - reports.len(),
        overall_mean,
        overall_sd,
        direct_mean: mean_sd(&direct).0,
        by_depth_mean: by_depth.iter().map(|(&d, xs)| (d, mean_sd(xs).0)).collect(),
        by_depth_sd: by_depth.iter().map(|(&d, xs)| (d, mean_sd(xs).1)).collect(),
        by_type_mean: by_type.iter().map(|(&t, xs)| (t, mean_sd(xs).0)).collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTable {
    spec: AblationSpec,
    cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Orders cells by (variant, seed) as listed in `spec` and summarizes each variant.
    pub fn from_cells(spec: AblationSpec, mut cells: Vec<AblationCell>) -> Self {
        let v_rank = |name: &str| spec.variants.iter().position(|v| v.name == name).unwrap_or(usize::MAX);
        let s_rank = |seed: u64| spec.seeds.iter().position(|&s| s == seed).unwrap_or(usize::MAX);
        cells.sort_by_key(|c| (v_rank(&c.variant), s_rank(c.seed)));
        let summaries = spec
            .variants
            .iter()
            .map(|v| {
                summarize(
                    &v.name,
                    &cells.iter().filter(|c| c.variant == v.name).collect::<Vec<_>>(),
                )
            })
            .collect();
        Self { spec, cells, summaries }
    }

    /// Spec and cells as JSON; summaries are recomputed on load.
    pub fn to_json(&self) -> String {
        let stored = StoredTable {
            spec: self.spec.clone(),
            cells: self.cells.clone(),
        };
        serde_json::to_string_pretty(&stored).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredTable =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("bad ablation table: {e}")))?;
        stored.spec.validate()?;
        Ok(Self::from_cells(stored.spec, stored.cells))
    }

    pub fn summary(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn report(&self, variant: &str, seed: u64) -> Option<&MetricsReport> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed)
            .and_then(|c| c.report.as_ref())
    }

    /// `metric(a) − metric(b)` for every seed where both runs succeeded.
    pub fn paired_gaps(&self, a: &str, b: &str, metric: impl Fn(&MetricsReport) -> f64) -> Vec<(u64, f64)> {
        self.spec
            .seeds
            .iter()
            .filter_map(|&s| Some((s, metric(self.report(a, s)?) - metric(self.report(b, s)?))))
            .collect()
    }

    /// One JSON object per successful cell.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let record = match &c.report {
                Some(r) => json!({
                    "variant": c.variant,
                    "seed": c.seed,
                    "overall": r.overall_accuracy,
                    "by_depth": r.by_depth,
                    "by_answer_type": r.by_answer_type,
                    "direct_overall": c.direct_report.as_ref().map(|d| d.overall_accuracy),
                }),
                None => json!({ "variant": c.variant, "seed": c.seed, "error": c.error }),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text summary.
    pub fn render_text(&self) -> String {
        let depths: Vec<usize> = {
            let mut d: Vec<usize> = self
                .summaries
                .iter()
                .flat_map(|s| s.by_depth_mean.keys().copied())
                .collect();
            d.sort_unstable();
            d.dedup();
            d
        };
        let mut out = String::new();
        let _ = write!(out, "{:<24} {:>5} {:>16}", "variant", "runs", "overall");
        for d in &depths {
            let _ = write!(out, " {:>16}", format!("K={d}"));
        }
        let _ = writeln!(out, " {:>8}", "direct");
        for s in &self.summaries {
            let _ = write!(
                out,
                "{:<24} {:>5} {:>16}",
                s.variant,
                s.runs,
                pm(s.overall_mean, s.overall_sd)
            );
            for d in &depths {
                let cell = match (s.by_depth_mean.get(d), s.by_depth_sd.get(d)) {
                    (Some(&m), Some(&sd)) => pm(m, sd),
                    _ => "-".into(),
                };
                let _ = write!(out, " {cell:>16}");
            }
            let _ = writeln!(out, " {:>8}", pct(s.direct_mean));
        }
        out
    }
}

pub(crate) fn pct(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{:.1}", 100.0 * x)
    }
}

pub(crate) fn pm(mean: f64, sd: f64) -> String {
    if mean.is_nan() {
        "-".into()
    } else {
        format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * sd)
    }
}

struct SeedData {
    train: Dataset,
    eval: Dataset,
}

fn seed_data(data_config: &DataConfig, spec: &AblationSpec, root: u64) -> Result<SeedData> {
    let train_cfg = DataConfig {
        n_examples: spec.n_train,
        id_prefix: "train".into(),
        ..data_config.clone()
    };
    let eval_cfg = DataConfig {
        n_examples: spec.n_eval,
        id_prefix: "eval".into(),
        ..data_config.clone()
    };
    Ok(SeedData {
        train: generate_dataset(&train_cfg, seed::derive(root, "train-data"))?,
        eval: generate_dataset(&eval_cfg, seed::derive(root, "eval-data"))?,
    })
}

fn run_cell(
    variant: &VariantSpec,
    root: u64,
    data: &SeedData,
    model_config: &ModelConfig,
    train_base: &TrainConfig,
    vocab: &Vocabulary,
    k_max: usize,
) -> Result<(MetricsReport, MetricsReport, Option<StepMetrics>)> {
    let train_config = TrainConfig {
        seed: seed::derive(root, "trainer"),
        ablation_mode: variant.mode,
        lambda_ans: variant.lambda_ans,
        lambda_final: variant.lambda_final,
        ..train_base.clone()
    };
    let model_config = ModelConfig {
        seed: seed::derive(root, "model"),
        ..model_config.clone()
    };
    let strict = train_config.strict_conditioning;
    let mut trainer = Trainer::new(train_config, &model_config, &data.train, vocab)?;
    let mut last = None;
    trainer.run(|_, m| {
        last = Some(m.clone());
        Ok(std::ops::ControlFlow::Continue(()))
    })?;
    let model = CachedModel {
        params: trainer.params(),
        strict,
    };
    let sq = evaluate(&model, vocab, &data.eval, EvalMode::SelfQuestion, k_max, 1, root)?.report;
    let direct = evaluate(&model, vocab, &data.eval, EvalMode::Direct, k_max, 1, root)?.report;
    Ok((sq, direct, last))
}

/// Trains and evaluates every (variant, seed) pair on shared per-seed data.
///
/// A failing run is recorded in its cell; the table is still produced.
pub fn run_ablation(
    spec: &AblationSpec,
    model_config: &ModelConfig,
    train_base: &TrainConfig,
    data_config: &DataConfig,
    k_max: usize,
    workers: usize,
    progress: &(dyn Fn(&AblationCell) + Sync),
) -> Result<AblationTable> {
    spec.validate()?;
    model_config.validate()?;
    train_base.validate()?;
    data_config.validate()?;
    let vocab = Vocabulary::default();
    let data: Vec<SeedData> = spec
        .seeds
        .iter()
        .map(|&s| seed_data(data_config, spec, s))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..spec.variants.len())
        .flat_map(|v| (0..spec.seeds.len()).map(move |s| (v, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let cells = Mutex::new(Vec::with_capacity(jobs.len()));
    let work = || loop {
        let j = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(v, s)) = jobs.get(j) else { break };
        let variant = &spec.variants[v];
        let root = spec.seeds[s];
        let started = Instant::now();
        let outcome = run_cell(variant, root, &data[s], model_config, train_base, &vocab, k_max);
        let wallclock_ms = started.elapsed().as_millis() as u64;
        let cell = match outcome {
            Ok((report, direct, last)) => AblationCell {
                variant: variant.name.clone(),
                mode: variant.mode,
                seed: root,
                report: Some(report),
                direct_report: Some(direct),
                last_step: last,
                wallclock_ms,
                error: None,
            },
            Err(e) => AblationCell {
                variant: variant.name.clone(),
                mode: variant.mode,
                seed: root,
                report: None,
                direct_report: None,
                last_step: None,
                wallclock_ms,
                error: Some(e.to_string()),
            },
        };
        progress(&cell);
        cells.lock().expect("cell list lock").push(cell);
    };
    if workers <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers.min(jobs.len()) {
                s.spawn(work);
            }
        });
    }
    Ok(AblationTable::from_cells(
        spec.clone(),
        cells.into_inner().expect("cell list lock"),
    ))
}
