use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::ablation::{pct, pm, AblationTable};
use super::MetricsReport;
use crate::error::{Error, Result};
use crate::taskgen::AnswerType;

/// Reasoning-depth bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Shallow,
    Medium,
    Deep,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Shallow, Band::Medium, Band::Deep];

    pub fn of(depth: usize) -> Band {
        match depth {
            0 | 1 => Band::Shallow,
            2 | 3 => Band::Medium,
            _ => Band::Deep,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Band::Shallow => "K=1",
            Band::Medium => "K=2-3",
            Band::Deep => "K=4",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Count-weighted accuracy over the depths accepted by `keep`, or `None` if none are present.
pub fn accuracy_over_depths(report: &MetricsReport, keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut hits, mut n) = (0.0, 0usize);
    for (&d, &c) in report.depth_counts.iter().filter(|(&d, _)| keep(d)) {
        hits += report.by_depth.get(&d).copied().unwrap_or(0.0) * c as f64;
        n += c;
    }
    (n > 0).then(|| hits / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTables {
    pub variants: Vec<String>,
    pub band_counts: BTreeMap<Band, usize>,
    pub by_band: BTreeMap<String, BTreeMap<Band, f64>>,
    pub type_counts: BTreeMap<AnswerType, usize>,
    pub by_type: BTreeMap<String, BTreeMap<AnswerType, f64>>,
    /// `full − variant` per band, for every other variant.
    pub band_gaps: BTreeMap<String, BTreeMap<Band, f64>>,
}

/// Per-band and per-type accuracy for reports over one shared eval set.
pub fn depth_and_type_report(reports: &[(String, MetricsReport)], full: &str) -> Result<ComparisonTables> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::EmptyEval);
    };
    for (name, r) in reports {
        if r.n_examples != first.n_examples
            || r.depth_counts != first.depth_counts
            || r.type_counts != first.type_counts
        {
            return Err(Error::Validation(format!(
                "report for {name} covers a different eval set"
            )));
        }
    }
    let full_report = reports
        .iter()
        .find(|(n, _)| n == full)
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Validation(format!("no report for reference variant {full}")))?;

    let mut band_counts: BTreeMap<Band, usize> = BTreeMap::new();
    for (&d, &c) in &first.depth_counts {
        *band_counts.entry(Band::of(d)).or_default() += c;
    }
    let bands_of = |r: &MetricsReport| -> BTreeMap<Band, f64> {
        Band::ALL
            .iter()
            .filter_map(|&b| Some((b, accuracy_over_depths(r, |d| Band::of(d) == b)?)))
            .collect()
    };
    let full_bands = bands_of(full_report);
    let mut by_band = BTreeMap::new();
    let mut band_gaps = BTreeMap::new();
    for (name, r) in reports {
        let bands = bands_of(r);
        if name != full {
            let gaps = bands.iter().map(|(&b, &a)| (b, full_bands[&b] - a)).collect();
            band_gaps.insert(name.clone(), gaps);
        }
        by_band.insert(name.clone(), bands);
    }
    Ok(ComparisonTables {
        variants: reports.iter().map(|(n, _)| n.clone()).collect(),
        band_counts,
        by_band,
        type_counts: first.type_counts.clone(),
        by_type: reports
            .iter()
            .map(|(n, r)| (n.clone(), r.by_answer_type.clone()))
            .collect(),
        band_gaps,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn signed(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{:+.1}", 100.0 * x)
    }
}

fn sign_count(gaps: &[f64]) -> String {
    let pos = gaps.iter().filter(|&&g| g > 0.0).count();
    format!("{pos}/{} positive", gaps.len())
}

/// Markdown summary of an ablation table: baseline comparison, ablation rows,
/// depth-band gaps and answer-type accuracy. `full` names the reference
/// variant, `baseline` the chain-free fine-tuning analog.
pub fn render_markdown_report(table: &AblationTable, full: &str, baseline: &str) -> Result<String> {
    let mut per_seed = Vec::new();
    for &seed in &table.spec.seeds {
        let reports: Vec<(String, MetricsReport)> = table
            .spec
            .variants
            .iter()
            .filter_map(|v| Some((v.name.clone(), table.report(&v.name, seed)?.clone())))
            .collect();
        if reports.iter().any(|(n, _)| n == full) {
            per_seed.push((seed, depth_and_type_report(&reports, full)?));
        }
    }
    let names: Vec<&str> = table.spec.variants.iter().map(|v| v.name.as_str()).collect();
    let mut out = String::new();
    let w = &mut out;

    let _ = writeln!(w, "# Ablation summary\n");
    let _ = writeln!(
        w,
        "Seeds: {:?}. Train examples per seed: {}. Eval examples per seed: {}. Accuracies in percent, mean ± sample sd over seeds.\n",
        table.spec.seeds, table.spec.n_train, table.spec.n_eval
    );

    let _ = writeln!(w, "## Baseline comparison\n");
    let _ = writeln!(w, "| system | overall |\n|---|---|");
    if let Some(s) = table.summary(full) {
        let _ = writeln!(w, "| {full}, answered directly | {} |", pct(s.direct_mean));
    }
    for name in [baseline, full] {
        if let Some(s) = table.summary(name) {
            let _ = writeln!(w, "| {name}, self-questioning | {} |", pm(s.overall_mean, s.overall_sd));
        }
    }

    let _ = writeln!(w, "\n## Ablation\n");
    let depths: Vec<usize> = {
        let mut d: Vec<usize> = table
            .summaries
            .iter()
            .flat_map(|s| s.by_depth_mean.keys().copied())
            .collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let _ = write!(w, "| variant | runs | overall |");
    for d in &depths {
        let _ = write!(w, " K={d} |");
    }
    let _ = writeln!(w, "\n|---|---|---|{}", "---|".repeat(depths.len()));
    for s in &table.summaries {
        let _ = write!(
            w,
            "| {} | {} | {} |",
            s.variant,
            s.runs,
            pm(s.overall_mean, s.overall_sd)
        );
        for d in &depths {
            let cell = match (s.by_depth_mean.get(d), s.by_depth_sd.get(d)) {
                (Some(&m), Some(&sd)) => pm(m, sd),
                _ => "-".into(),
            };
            let _ = write!(w, " {cell} |");
        }
        let _ = writeln!(w);
    }
    let _ = writeln!(w, "\nPaired overall gaps against {full}:\n");
    let _ = writeln!(w, "| variant | mean gap | per seed | signs |\n|---|---|---|---|");
    for &name in names.iter().filter(|&&n| n != full) {
        let gaps: Vec<f64> = table
            .paired_gaps(full, name, |r| r.overall_accuracy)
            .into_iter()
            .map(|(_, g)| g)
            .collect();
        let per: Vec<String> = gaps.iter().map(|&g| signed(g)).collect();
        let _ = writeln!(
            w,
            "| {name} | {} | {} | {} |",
            signed(mean(&gaps)),
            per.join(" "),
            sign_count(&gaps)
        );
    }
    let failed: Vec<String> = table
        .cells
        .iter()
        .filter_map(|c| {
            c.error
                .as_ref()
                .map(|e| format!("- {} seed {}: {e}", c.variant, c.seed))
        })
        .collect();
    if !failed.is_empty() {
        let _ = writeln!(w, "\nFailed runs:\n\n{}", failed.join("\n"));
    }

    let _ = writeln!(w, "\n## Accuracy by depth band\n");
    let _ = write!(w, "| variant |");
    for b in Band::ALL {
        let _ = write!(w, " {b} |");
    }
    let _ = writeln!(w, "\n|---|---|---|---|");
    for &name in &names {
        let _ = write!(w, "| {name} |");
        for b in Band::ALL {
            let xs: Vec<f64> = per_seed
                .iter()
                .filter_map(|(_, t)| t.by_band.get(name)?.get(&b).copied())
                .collect();
            let _ = write!(w, " {} |", pct(mean(&xs)));
        }
        let _ = writeln!(w);
    }
    let _ = writeln!(
        w,
        "\nGap {full} minus variant, by band (mean over seeds, positive seeds):\n"
    );
    let _ = write!(w, "| variant |");
    for b in Band::ALL {
        let _ = write!(w, " {b} |");
    }
    let _ = writeln!(w, "\n|---|---|---|---|");
    for &name in names.iter().filter(|&&n| n != full) {
        let _ = write!(w, "| {name} |");
        for b in Band::ALL {
            let xs: Vec<f64> = per_seed
                .iter()
                .filter_map(|(_, t)| t.band_gaps.get(name)?.get(&b).copied())
                .collect();
            let pos = xs.iter().filter(|&&g| g > 0.0).count();
            let _ = write!(w, " {} ({pos}/{}) |", signed(mean(&xs)), xs.len());
        }
        let _ = writeln!(w);
    }

    let _ = writeln!(w, "\n## Accuracy by answer type\n");
    let _ = write!(w, "| variant |");
    for t in AnswerType::ALL {
        let _ = write!(w, " {} |", t.name());
    }
    let _ = writeln!(w, "\n|---|---|---|---|");
    for &name in &names {
        let _ = write!(w, "| {name} |");
        for t in AnswerType::ALL {
            let xs: Vec<f64> = per_seed
                .iter()
                .filter_map(|(_, c)| c.by_type.get(name)?.get(&t).copied())
                .collect();
            let _ = write!(w, " {} |", pct(mean(&xs)));
        }
        let _ = writeln!(w);
    }
    if let Some((_, t)) = per_seed.first() {
        let counts: Vec<String> = t.type_counts.iter().map(|(k, c)| format!("{} {c}", k.name())).collect();
        let bands: Vec<String> = t.band_counts.iter().map(|(b, c)| format!("{b} {c}")).collect();
        let _ = writeln!(
            w,
            "\nEval set composition (per seed): {}; {}.",
            counts.join(", "),
            bands.join(", ")
        );
    }
    Ok(out)
}
