//! Plain-text, JSON and CSV rendering of metric reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::eval::{LevelReport, MetricsReport, Prf};

const METRIC_HEADS: [&str; 3] = ["Rec.", "Prec.", "F1"];

fn cells(p: &Prf) -> [String; 3] {
    [
        format!("{:.3}", p.recall),
        format!("{:.3}", p.precision),
        format!("{:.3}", p.f1),
    ]
}

/// Renders rows under a two-level header: Micro and Macro, each over
/// Rec./Prec./F1.
fn micro_macro_table(label_head: &str, rows: &[(String, Prf, Prf, Option<usize>)]) -> String {
    let with_dropped = rows.iter().any(|r| r.3.is_some());
    let label_w = rows
        .iter()
        .map(|r| r.0.len())
        .chain([label_head.len()])
        .max()
        .unwrap_or(0);
    let col_w = 6;
    let group_w = col_w * 3 + 2;

    let mut out = String::new();
    let _ = write!(out, "{:label_w$}  {:^group_w$}  {:^group_w$}", "", "Micro", "Macro");
    if with_dropped {
        let _ = write!(out, "  {:>7}", "");
    }
    out.push('\n');
    let _ = write!(out, "{label_head:<label_w$}");
    for _ in 0..2 {
        out.push(' ');
        for head in METRIC_HEADS {
            let _ = write!(out, " {head:>col_w$}");
        }
    }
    if with_dropped {
        let _ = write!(out, "  {:>7}", "Dropped");
    }
    out.push('\n');
    for (label, micro, macro_avg, dropped) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for prf in [micro, macro_avg] {
            out.push(' ');
            for cell in cells(prf) {
                let _ = write!(out, " {cell:>col_w$}");
            }
        }
        if let Some(d) = dropped {
            let _ = write!(out, "  {d:>7}");
        }
        out.push('\n');
    }
    out
}

/// One-row table in the overall results layout, labelled by run name.
pub fn metrics_table(run_label: &str, report: &MetricsReport) -> String {
    micro_macro_table(
        "Method",
        &[(run_label.to_string(), report.micro, report.macro_avg, None)],
    )
}

pub fn levels_table(report: &LevelReport) -> String {
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| (r.level_name.clone(), r.micro, r.macro_avg, Some(r.dropped_gold)))
        .collect();
    micro_macro_table("Level", &rows)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn csv_prf(p: &Prf) -> String {
    format!("{},{},{}", p.recall, p.precision, p.f1)
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    format!(
        "micro_recall,micro_precision,micro_f1,macro_recall,macro_precision,macro_f1\n{},{}\n",
        csv_prf(&report.micro),
        csv_prf(&report.macro_avg)
    )
}

pub fn levels_csv(report: &LevelReport) -> String {
    let mut out = String::from(
        "level,level_name,micro_recall,micro_precision,micro_f1,macro_recall,macro_precision,macro_f1,dropped_gold\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.level.0,
            r.level_name,
            csv_prf(&r.micro),
            csv_prf(&r.macro_avg),
            r.dropped_gold
        );
    }
    out
}
