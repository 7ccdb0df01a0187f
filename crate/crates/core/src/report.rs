//! Report files: a results table, delimiter-separated plot data and a full
//! JSON dump.
//!
//! Column names of every CSV file are fixed:
//!
//! | file | columns |
//! |---|---|
//! | `summary.csv` | view, group, technique, accuracy, mean_tokens, n, usage, accuracy_significant, cost_significant |
//! | `curves.csv` | view, group, technique, concern, c, epi |
//! | `slopes.csv` | view, group, technique, slope |
//! | `rankings.csv` | view, group, concern, c, rank, technique |
//! | `crossovers.csv` | view, group, first, second, kind, c, highlighted |
//! | `significance.csv` | view, group, test, first, second, tie_broken, model, statistic, p_value, significant, note |
//! | `cells.csv` | technique, dataset, model, accuracy, mean_tokens, n, usage |
//!
//! `cells.csv` holds per-cell summaries at full precision and is the input
//! format for analysis without records.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::{AnalysisReport, GroupAnalysis, PairTest};
use crate::epi::{Crossover, TechniqueSummary};
use crate::grading::{CellKey, CellSummary, UsageMix};
use crate::scalar::Scalar;
use crate::technique::{COT, S2A, SELF_CONSISTENCY, STANDARD, THOT, TOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// `summary_table.txt` only.
    Table,
    /// Every CSV file.
    Csv,
    /// Table, CSV files and `report.json`.
    Full,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "full" => Ok(Self::Full),
            other => Err(format!(
                "unknown report format {other:?} (table, csv, full)"
            )),
        }
    }
}

pub const SUMMARY_TABLE: &str = "summary_table.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const SLOPES_CSV: &str = "slopes.csv";
pub const RANKINGS_CSV: &str = "rankings.csv";
pub const CROSSOVERS_CSV: &str = "crossovers.csv";
pub const SIGNIFICANCE_CSV: &str = "significance.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CELLS_CSV: &str = "cells.csv";

const CELL_COLUMNS: [&str; 7] = [
    "technique",
    "dataset",
    "model",
    "accuracy",
    "mean_tokens",
    "n",
    "usage",
];

pub fn technique_name(id: &str) -> &str {
    match id {
        COT => "Chain-of-Thought",
        SELF_CONSISTENCY => "Self-Consistency",
        TOT => "Tree-of-Thoughts",
        THOT => "Thread-of-Thought",
        STANDARD => "Standard",
        S2A => "System 2 Attention",
        other => other,
    }
}

fn group_title(group: &str) -> String {
    group
        .parse::<crate::dataset::DatasetKind>()
        .map(|k| k.display_name().to_owned())
        .unwrap_or_else(|_| group.to_owned())
}

fn star(on: bool) -> &'static str {
    if on {
        "*"
    } else {
        ""
    }
}

/// Techniques down, groups across, accuracy and mean tokens per group.
/// A `*` marks a value whose lead over the runner-up is significant on
/// every model.
pub fn summary_table<S: Scalar>(report: &AnalysisReport<S>) -> String {
    let mut techniques: Vec<&str> = Vec::new();
    for g in &report.groups {
        for r in &g.techniques {
            if !techniques.contains(&r.technique.as_str()) {
                techniques.push(&r.technique);
            }
        }
    }
    techniques.sort_by_key(|t| crate::analysis::technique_rank(t));

    const CELL: usize = 18;
    let name_w = techniques
        .iter()
        .map(|t| technique_name(t).len())
        .max()
        .unwrap_or(0)
        .max("Technique".len());
    let mut out = String::new();
    let _ = write!(out, "{:name_w$}", "Technique");
    for g in &report.groups {
        let _ = write!(out, "  {:<CELL$}", group_title(&g.group));
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "");
    for _ in &report.groups {
        let _ = write!(out, "  {:<8} {:<9}", "Acc", "Tokens");
    }
    out.push('\n');
    for t in techniques {
        let _ = write!(out, "{:name_w$}", technique_name(t));
        for g in &report.groups {
            match g.row(t) {
                Some(r) => {
                    let acc = format!("{:.2}{}", r.accuracy, star(g.accuracy_star(t)));
                    let tok = format!("{:.2}{}", r.mean_tokens, star(g.cost_star(t)));
                    let _ = write!(out, "  {acc:<8} {tok:<9}");
                }
                None => {
                    let _ = write!(out, "  {:<8} {:<9}", "-", "-");
                }
            }
        }
        let trimmed = out.trim_end_matches(' ').len();
        out.truncate(trimmed);
        out.push('\n');
    }
    out
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn each_group<S, F>(report: &AnalysisReport<S>, mut f: F) -> Vec<Vec<String>>
where
    F: FnMut(&GroupAnalysis<S>, &mut dyn FnMut(Vec<String>)),
{
    let mut rows = Vec::new();
    let view = report.view.as_str();
    for g in &report.groups {
        f(g, &mut |mut cols: Vec<String>| {
            cols.insert(0, g.group.clone());
            cols.insert(0, view.to_owned());
            rows.push(cols);
        });
    }
    rows
}

pub fn summary_csv<S: Scalar>(report: &AnalysisReport<S>) -> Vec<u8> {
    let rows = each_group(report, |g, push| {
        for r in &g.techniques {
            push(vec![
                r.technique.clone(),
                format!("{:.2}", r.accuracy),
                format!("{:.2}", r.mean_tokens),
                r.n.to_string(),
                r.usage.map(|u| u.as_str().to_owned()).unwrap_or_default(),
                g.accuracy_star(&r.technique).to_string(),
                g.cost_star(&r.technique).to_string(),
            ]);
        }
    });
    csv_bytes(
        &[
            "view",
            "group",
            "technique",
            "accuracy",
            "mean_tokens",
            "n",
            "usage",
            "accuracy_significant",
            "cost_significant",
        ],
        rows,
    )
}

pub fn curves_csv<S: Scalar>(report: &AnalysisReport<S>) -> Vec<u8> {
    let rows = each_group(report, |g, push| {
        for r in &g.techniques {
            for p in &r.epi {
                push(vec![
                    r.technique.clone(),
                    p.concern.as_str().to_owned(),
                    format!("{:e}", p.c),
                    format!("{:.4}", p.epi),
                ]);
            }
        }
    });
    csv_bytes(&["view", "group", "technique", "concern", "c", "epi"], rows)
}

pub fn slopes_csv<S: Scalar>(report: &AnalysisReport<S>) -> Vec<u8> {
    let rows = each_group(report, |g, push| {
        for r in &g.techniques {
            push(vec![r.technique.clone(), format!("{:.4}", r.slope)]);
        }
    });
    csv_bytes(&["view", "group", "technique", "slope"], rows)
}

pub fn rankings_csv<S: Scalar>(report: &AnalysisReport<S>) -> Vec<u8> {
    let rows = each_group(report, |g, push| {
        for k in &g.rankings {
            for (i, t) in k.order.iter().enumerate() {
                push(vec![
                    k.concern.as_str().to_owned(),
                    format!("{:e}", k.c),
                    (i + 1).to_string(),
                    t.clone(),
                ]);
            }
        }
    });
    csv_bytes(
        &["view", "group", "concern", "c", "rank", "technique"],
        rows,
    )
}

pub fn crossovers_csv<S: Scalar>(report: &AnalysisReport<S>) -> Vec<u8> {
    let rows = each_group(report, |g, push| {
        for x in &g.crossovers {
            let (kind, c) = match x.crossover {
                Crossover::At(c) => ("at", format!("{c:.4e}")),
                Crossover::Origin => ("origin", "0e0".to_owned()),
                Crossover::Never => ("never", String::new()),
            };
            push(vec![
                x.first.clone(),
                x.second.clone(),
                kind.to_owned(),
                c,
                x.highlighted.to_string(),
            ]);
        }
    });
    csv_bytes(
        &[
            "view",
            "group",
            "first",
            "second",
            "kind",
            "c",
            "highlighted",
        ],
        rows,
    )
}

pub fn significance_csv<S: Scalar>(report: &AnalysisReport<S>) -> Vec<u8> {
    fn push_pair(test: &str, p: &PairTest, push: &mut dyn FnMut(Vec<String>)) {
        let base = |model: &str| {
            vec![
                test.to_owned(),
                p.first.clone(),
                p.second.clone(),
                p.tie_broken.to_string(),
                model.to_owned(),
            ]
        };
        for m in &p.per_model {
            let mut row = base(&m.model);
            match m.result {
                Some(r) => row.extend([
                    format!("{:.6}", r.statistic),
                    format!("{:.6e}", r.p_value),
                    r.significant.to_string(),
                ]),
                None => row.extend([String::new(), String::new(), "false".to_owned()]),
            }
            row.push(m.note.clone().unwrap_or_default());
            push(row);
        }
        let mut row = base("all");
        row.extend([
            String::new(),
            String::new(),
            p.significant.to_string(),
            String::new(),
        ]);
        push(row);
    }
    let rows = each_group(report, |g, push| {
        if let Some(s) = &g.significance {
            if let Some(p) = &s.accuracy {
                push_pair("accuracy", p, push);
            }
            if let Some(p) = &s.cost {
                push_pair("cost", p, push);
            }
        }
    });
    csv_bytes(
        &[
            "view",
            "group",
            "test",
            "first",
            "second",
            "tie_broken",
            "model",
            "statistic",
            "p_value",
            "significant",
            "note",
        ],
        rows,
    )
}

/// Per-cell summaries; numbers use the shortest round-trip form.
pub fn cells_csv(cells: &[CellSummary]) -> Vec<u8> {
    let rows = cells
        .iter()
        .map(|c| {
            vec![
                c.key.technique.clone(),
                c.key.dataset.as_str().to_owned(),
                c.key.model.clone(),
                c.summary.accuracy().to_string(),
                c.summary.mean_tokens().to_string(),
                c.summary.n().to_string(),
                c.usage.as_str().to_owned(),
            ]
        })
        .collect();
    csv_bytes(&CELL_COLUMNS, rows)
}

pub fn read_cells_csv<R: io::Read>(reader: R) -> io::Result<Vec<CellSummary>> {
    let invalid = |line: u64, msg: String| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"))
    };
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| invalid(1, e.to_string()))?.clone();
    if header.iter().ne(CELL_COLUMNS) {
        return Err(invalid(
            1,
            format!("expected columns {}", CELL_COLUMNS.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| invalid(line, e.to_string()))?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> io::Result<f64> {
            field(j).parse().map_err(|_| {
                invalid(
                    line,
                    format!("{} is not a number: {:?}", CELL_COLUMNS[j], field(j)),
                )
            })
        };
        let dataset = field(1)
            .parse()
            .map_err(|e: crate::dataset::DatasetError| invalid(line, e.to_string()))?;
        let n = field(5)
            .parse()
            .map_err(|_| invalid(line, format!("n is not a count: {:?}", field(5))))?;
        let summary =
            TechniqueSummary::new(num(3)?, num(4)?, n).map_err(|e| invalid(line, e.to_string()))?;
        let usage = match field(6) {
            "reported" => UsageMix::Reported,
            "counted" => UsageMix::Counted,
            "mixed" => UsageMix::Mixed,
            other => return Err(invalid(line, format!("unknown usage {other:?}"))),
        };
        out.push(CellSummary {
            key: CellKey {
                technique: field(0).to_owned(),
                dataset,
                model: field(2).to_owned(),
            },
            summary,
            usage,
        });
    }
    Ok(out)
}

/// Full-precision JSON.
pub fn report_json<S: Scalar + Serialize>(report: &AnalysisReport<S>) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
    v.push(b'\n');
    v
}

/// Renders the files for `format` as `(file name, bytes)` pairs.
pub fn render<S: Scalar + Serialize>(
    report: &AnalysisReport<S>,
    format: ReportFormat,
) -> Vec<(&'static str, Vec<u8>)> {
    let mut files = Vec::new();
    if matches!(format, ReportFormat::Table | ReportFormat::Full) {
        files.push((SUMMARY_TABLE, summary_table(report).into_bytes()));
    }
    if matches!(format, ReportFormat::Csv | ReportFormat::Full) {
        files.push((SUMMARY_CSV, summary_csv(report)));
        files.push((CURVES_CSV, curves_csv(report)));
        files.push((SLOPES_CSV, slopes_csv(report)));
        files.push((RANKINGS_CSV, rankings_csv(report)));
        files.push((CROSSOVERS_CSV, crossovers_csv(report)));
        files.push((SIGNIFICANCE_CSV, significance_csv(report)));
    }
    if format == ReportFormat::Full {
        files.push((REPORT_JSON, report_json(report)));
    }
    files
}

/// Writes the files for `format` into `dir`, creating it if needed.
pub fn emit<S: Scalar + Serialize>(
    report: &AnalysisReport<S>,
    format: ReportFormat,
    dir: impl AsRef<Path>,
) -> io::Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    render(report, format)
        .into_iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, ModelTest, Significance, Table, View};
    use crate::epi::TechniqueSummary;
    use crate::stats::TestResult;

    fn gsm8k() -> AnalysisReport<f64> {
        let rows = [
            ("cot", 0.89, 257.03),
            ("self_consistency", 0.95, 773.03),
            ("tot", 0.79, 375.44),
            ("thot", 0.89, 348.68),
            ("standard", 0.86, 217.95),
            ("s2a", 0.68, 353.76),
        ];
        let mut t = Table::new();
        t.insert(
            "gsm8k".into(),
            rows.iter()
                .map(|&(id, a, tk)| (id.to_owned(), TechniqueSummary::new(a, tk, 200).unwrap()))
                .collect(),
        );
        analyze(View::ModelAgnostic, &t, &[]).unwrap()
    }

    fn with_cost_star(mut r: AnalysisReport<f64>) -> AnalysisReport<f64> {
        let result = TestResult {
            statistic: 12.0,
            p_value: 1e-9,
            alpha: 0.05,
            significant: true,
        };
        r.groups[0].significance = Some(Significance {
            accuracy: None,
            cost: Some(PairTest {
                first: "self_consistency".into(),
                second: "tot".into(),
                tie_broken: false,
                per_model: vec![ModelTest {
                    model: "m".into(),
                    result: Some(result),
                    note: None,
                }],
                significant: true,
            }),
        });
        r
    }

    #[test]
    fn five_curve_rows_per_technique() {
        let text = String::from_utf8(curves_csv(&gsm8k())).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("view,group,technique,concern,c,epi"));
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), 30);
        for t in ["cot", "self_consistency", "tot", "thot", "standard", "s2a"] {
            let n = body
                .iter()
                .filter(|l| l.split(',').nth(2) == Some(t))
                .count();
            assert_eq!(n, 5, "{t}");
        }
        assert!(body.contains(&"model_agnostic,gsm8k,self_consistency,slight,2.5e-4,0.7831"));
        assert!(body.contains(&"model_agnostic,gsm8k,cot,major,2e-3,0.5323"));
    }

    #[test]
    fn significant_cost_cell_is_starred() {
        let r = with_cost_star(gsm8k());
        let table = summary_table(&r);
        let sc = table
            .lines()
            .find(|l| l.starts_with("Self-Consistency"))
            .unwrap();
        assert!(sc.contains("773.03*"), "{sc}");
        assert!(!sc.contains("0.95*"));
        let cot = table
            .lines()
            .find(|l| l.starts_with("Chain-of-Thought"))
            .unwrap();
        assert!(!cot.contains('*'));
        let csv = String::from_utf8(summary_csv(&r)).unwrap();
        assert!(csv.contains("self_consistency,0.95,773.03,200,,false,true"));
        let sig = String::from_utf8(significance_csv(&r)).unwrap();
        assert!(sig.contains("cost,self_consistency,tot,false,all,,,true,"));
    }

    #[test]
    fn emission_is_byte_stable() {
        let r = with_cost_star(gsm8k());
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = emit(&r, ReportFormat::Full, a.path()).unwrap();
        let pb = emit(&r, ReportFormat::Full, b.path()).unwrap();
        assert_eq!(pa.len(), 8);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(
                fs::read(x).unwrap(),
                fs::read(y).unwrap(),
                "{}",
                x.display()
            );
        }
        assert_eq!(emit(&r, ReportFormat::Table, a.path()).unwrap().len(), 1);
        assert_eq!(emit(&r, ReportFormat::Csv, a.path()).unwrap().len(), 6);
    }

    #[test]
    fn json_round_trips_at_full_precision() {
        let r = gsm8k();
        let back: AnalysisReport<f64> = serde_json::from_slice(&report_json(&r)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn cells_round_trip_exactly() {
        let cells = vec![CellSummary {
            key: CellKey {
                technique: "cot".into(),
                dataset: crate::dataset::DatasetKind::Mmlu,
                model: "m, with comma".into(),
            },
            summary: TechniqueSummary::new(0.1 + 0.2, 1.0 / 3.0, 228).unwrap(),
            usage: UsageMix::Mixed,
        }];
        let bytes = cells_csv(&cells);
        assert_eq!(read_cells_csv(bytes.as_slice()).unwrap(), cells);
        assert!(read_cells_csv("a,b\n1,2\n".as_bytes()).is_err());
        let bad =
            "technique,dataset,model,accuracy,mean_tokens,n,usage\ncot,csqa,m,1.5,1,1,reported\n";
        assert!(read_cells_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn format_names() {
        assert_eq!("csv".parse::<ReportFormat>(), Ok(ReportFormat::Csv));
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
