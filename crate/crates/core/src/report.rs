//! Cross-run reports. Metrics are recomputed from the confusion counts in
//! each result file and written in percentage points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Attribute, TaskSequence};
use crate::error::{Error, Result};
use crate::experiment::{write_json, RunRecord, RESULTS_DIR};
use crate::fairmetrics::{
    aab, aggregate, bc, dto, fped, wilcoxon_signed_rank, BiasMeasure, FairnessReport, Performance,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PERCENT: f64 = 100.0;

/// Raw-rate metrics of one run, plus the per-stage bias history.
pub fn run_metrics(record: &RunRecord, measure: BiasMeasure) -> Result<(FairnessReport, Vec<BTreeMap<Attribute, f64>>)> {
    let last = record
        .stages
        .last()
        .ok_or_else(|| Error::Input(format!("{} has no stages", record.file_name())))?;
    let perf = Performance::from_confusion(&last.overall)?;
    let fpeds = last
        .by_attribute
        .values()
        .map(|c| Ok((c.attribute, fped(c)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let history = record
        .stages
        .iter()
        .map(|s| {
            s.by_attribute
                .values()
                .map(|c| Ok((c.attribute, measure.measure(c)?)))
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let bias_change = match &record.sequence {
        Some(seq) if seq.len() >= 2 => Some(bc(&history, &TaskSequence::new(seq.clone())?)?),
        _ => None,
    };
    Ok((
        FairnessReport {
            accuracy: perf.accuracy,
            f1_macro: perf.f1_macro,
            aab: aab(&fpeds)?,
            fped: fpeds,
            bc: bias_change,
            dto: None,
        },
        history,
    ))
}

fn scaled(r: &FairnessReport) -> FairnessReport {
    FairnessReport {
        accuracy: r.accuracy * PERCENT,
        f1_macro: r.f1_macro * PERCENT,
        fped: r.fped.iter().map(|(a, v)| (*a, v * PERCENT)).collect(),
        aab: r.aab * PERCENT,
        bc: r.bc.map(|v| v * PERCENT),
        dto: r.dto,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub debiaser: String,
    pub ablation: String,
    pub runs: usize,
    pub mean: FairnessReport,
    pub variance: FairnessReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    /// Runs present in both groups, matched by `(sequence, seed)`.
    pub pairs: usize,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub exact: Option<bool>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub units: String,
    pub variance: String,
    pub bias_measure: BiasMeasure,
    pub rows: Vec<ReportRow>,
    pub significance: Vec<Comparison>,
}

type Label = (String, String, String);

fn label_name(l: &Label) -> String {
    if l.2 == "none" {
        format!("{}+{}", l.0, l.1)
    } else {
        format!("{}+{}-no{}", l.0, l.1, l.2)
    }
}

pub fn build_report(records: &[RunRecord], measure: BiasMeasure) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Input("no result records".into()));
    }
    let mut groups: BTreeMap<Label, BTreeMap<(String, u64), FairnessReport>> = BTreeMap::new();
    for r in records {
        let (metrics, _) = run_metrics(r, measure)?;
        let previous = groups
            .entry(r.label())
            .or_default()
            .insert(r.pairing_key(), scaled(&metrics));
        if previous.is_some() {
            return Err(Error::Input(format!("duplicate result for {}", r.file_name())));
        }
    }

    let mut rows = Vec::new();
    for (label, runs) in &groups {
        let reports: Vec<FairnessReport> = runs.values().cloned().collect();
        let agg = aggregate(&reports).map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("{}: {m}", label_name(label))),
            other => other,
        })?;
        rows.push(ReportRow {
            method: label.0.clone(),
            debiaser: label.1.clone(),
            ablation: label.2.clone(),
            runs: agg.count,
            mean: agg.mean,
            variance: agg.variance,
        });
    }
    if rows.len() >= 2 {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.mean.f1_macro, r.mean.aab)).collect();
        for (row, d) in rows.iter_mut().zip(dto(&points)?) {
            row.mean.dto = Some(d);
        }
    }

    let labels: Vec<&Label> = groups.keys().collect();
    let mut significance = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            for metric in ["aab", "f1_macro"] {
                significance.push(compare(a, &groups[*a], b, &groups[*b], metric));
            }
        }
    }

    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        units: "percentage points".into(),
        variance: "population".into(),
        bias_measure: measure,
        rows,
        significance,
    })
}

fn compare(
    a: &Label,
    ra: &BTreeMap<(String, u64), FairnessReport>,
    b: &Label,
    rb: &BTreeMap<(String, u64), FairnessReport>,
    metric: &str,
) -> Comparison {
    let pick = |r: &FairnessReport| if metric == "aab" { r.aab } else { r.f1_macro };
    let (xa, xb): (Vec<f64>, Vec<f64>) = ra
        .iter()
        .filter_map(|(k, v)| rb.get(k).map(|w| (pick(v), pick(w))))
        .unzip();
    let mut c = Comparison {
        a: label_name(a),
        b: label_name(b),
        metric: metric.into(),
        pairs: xa.len(),
        statistic: None,
        p_value: None,
        exact: None,
        note: None,
    };
    match wilcoxon_signed_rank(&xa, &xb) {
        Ok(w) => {
            c.statistic = Some(w.statistic);
            c.p_value = Some(w.p_value);
            c.exact = Some(w.exact);
        }
        Err(e) => c.note = Some(e.to_string()),
    }
    c
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.4}"))
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "method",
    "debiaser",
    "acc",
    "f1_macro",
    "fped_gender",
    "fped_age",
    "fped_country",
    "fped_ethnicity",
    "aab",
    "bc",
    "dto",
];

fn metric_cells(r: &FairnessReport, with_dto: bool) -> Vec<String> {
    let f = |a: Attribute| cell(r.fped.get(&a).copied());
    let mut out = vec![
        cell(Some(r.accuracy)),
        cell(Some(r.f1_macro)),
        f(Attribute::Gender),
        f(Attribute::Age),
        f(Attribute::Country),
        f(Attribute::Ethnicity),
        cell(Some(r.aab)),
        cell(r.bc),
    ];
    if with_dto {
        out.push(cell(r.dto));
    }
    out
}

/// Per-group summary: means, then `*_var` columns, then the ablation and
/// run count.
pub fn summary_csv(report: &Report) -> String {
    let mut out = SUMMARY_COLUMNS.join(",");
    for c in &SUMMARY_COLUMNS[2..10] {
        write!(out, ",{c}_var").unwrap();
    }
    out.push_str(",ablation,runs\n");
    for row in &report.rows {
        let mut cells = vec![row.method.clone(), row.debiaser.clone()];
        cells.extend(metric_cells(&row.mean, true));
        cells.extend(metric_cells(&row.variance, false));
        cells.push(row.ablation.clone());
        cells.push(row.runs.to_string());
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Bias-change table: one line per group with at least two stages.
pub fn bc_csv(report: &Report) -> String {
    let mut out = String::from("method,debiaser,ablation,bc,bc_var,runs\n");
    for row in report.rows.iter().filter(|r| r.mean.bc.is_some()) {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.method,
            row.debiaser,
            row.ablation,
            cell(row.mean.bc),
            cell(row.variance.bc),
            row.runs
        )
        .unwrap();
    }
    out
}

/// Reads every result file under `dir/results` (or `dir` itself when it has
/// no such subdirectory), sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let nested = dir.join(RESULTS_DIR);
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.to_string_lossy().ends_with(".ckpt.json")
                && p.file_name().is_some_and(|n| n != "manifest.json" && n != "report.json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no result files in {}", root.display())));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: e.line(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `report.json`, `summary.csv` and `bc.csv` into `out`.
pub fn write_report(report: &Report, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("report.json");
    write_json(&json, report)?;
    let summary = out.join("summary.csv");
    fs::write(&summary, summary_csv(report)).map_err(|e| Error::io(&summary, e))?;
    let bc_path = out.join("bc.csv");
    fs::write(&bc_path, bc_csv(report)).map_err(|e| Error::io(&bc_path, e))?;
    Ok(vec![json, summary, bc_path])
}
