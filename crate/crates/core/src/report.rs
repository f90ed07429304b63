//! CSV and SVG emission for metrics, loss traces, dataset summaries,
//! Kaplan-Meier curves, and embedding exports.
//!
//! Float cells use Rust's shortest round-trip formatting, so identical inputs
//! produce byte-identical files.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::survival::KmCurve;
use crate::synthdata::DatasetSummary;
use crate::trainer::{AdaptEpoch, EvalReport};

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics in long format: `metric,split,value,seed`.
pub fn write_metrics_csv(
    path: &Path,
    entries: &[(&str, &str, f64)],
    seed: u64,
) -> Result<()> {
    let mut lines = vec!["metric,split,value,seed".to_string()];
    for (metric, split, value) in entries {
        lines.push(format!("{metric},{split},{value},{seed}"));
    }
    write_lines(path, &lines)
}

/// Rows an [`EvalReport`] contributes to the metrics file.
pub fn eval_metric_rows<'a>(report: &EvalReport, split: &'a str) -> Vec<(&'static str, &'a str, f64)> {
    let mut rows = vec![
        ("c_index", split, report.c_index),
        ("n_graphs", split, report.n_graphs as f64),
        ("median_risk", split, report.median_risk),
    ];
    if let Some((stat, p)) = report.logrank {
        rows.push(("logrank_chi2", split, stat));
        rows.push(("logrank_p", split, p));
    }
    rows
}

/// Loss traces in long format: `stage,epoch,loss,value`.
pub fn write_trace_csv(
    path: &Path,
    pretrain: &[f64],
    adapt: &[AdaptEpoch],
) -> Result<()> {
    let mut lines = vec!["stage,epoch,loss,value".to_string()];
    for (i, v) in pretrain.iter().enumerate() {
        lines.push(format!("pretrain,{i},l_surv,{v}"));
    }
    for (i, e) in adapt.iter().enumerate() {
        lines.push(format!("adapt,{i},l_surv,{}", e.l_surv));
        lines.push(format!("adapt,{i},l1,{}", e.l1));
        lines.push(format!("adapt,{i},l2,{}", e.l2));
        lines.push(format!("adapt,{i},l_ap,{}", e.l_ap));
    }
    write_lines(path, &lines)
}

/// Dataset summary rows: `kind,index,value`.
pub fn write_summary_csv(path: &Path, summary: &DatasetSummary) -> Result<()> {
    let mut lines = vec!["kind,index,value".to_string()];
    lines.push(format!("n_graphs,0,{}", summary.n_graphs));
    for (i, c) in summary.bin_counts.iter().enumerate() {
        lines.push(format!("bin_count,{},{c}", i + 1));
    }
    for (i, m) in summary.feature_mean.iter().enumerate() {
        lines.push(format!("feature_mean,{i},{m}"));
    }
    for (i, v) in summary.feature_var.iter().enumerate() {
        lines.push(format!("feature_var,{i},{v}"));
    }
    write_lines(path, &lines)
}

/// Kaplan-Meier step curves: `time,survival,group`.
pub fn write_km_csv(path: &Path, low: &KmCurve, high: &KmCurve) -> Result<()> {
    let mut lines = vec!["time,survival,group".to_string()];
    for (group, curve) in [("low", low), ("high", high)] {
        lines.push(format!("0,1,{group}"));
        for (t, s) in &curve.points {
            lines.push(format!("{t},{s},{group}"));
        }
    }
    write_lines(path, &lines)
}

/// Embedding export: `domain,predicted_bin,e0..e{k-1}` per graph.
pub fn write_embeddings_csv(
    path: &Path,
    rows: &[(String, usize, Vec<f64>)],
) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.2.len());
    let mut header = String::from("domain,predicted_bin");
    for i in 0..width {
        header.push_str(&format!(",e{i}"));
    }
    let mut lines = vec![header];
    for (domain, bin, emb) in rows {
        let mut line = format!("{domain},{bin}");
        for v in emb {
            line.push_str(&format!(",{v}"));
        }
        lines.push(line);
    }
    write_lines(path, &lines)
}

/// Minimal step-line SVG of the two Kaplan-Meier curves with the log-rank
/// p-value in the caption.
pub fn write_km_svg(
    path: &Path,
    low: &KmCurve,
    high: &KmCurve,
    logrank_p: Option<f64>,
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 30.0;
    const MB: f64 = 50.0;
    let t_max = low
        .points
        .iter()
        .chain(&high.points)
        .map(|p| p.0)
        .fold(1.0f64, f64::max);
    let x = |t: f64| ML + (t / t_max) * (W - ML - MR);
    let y = |s: f64| MT + (1.0 - s) * (H - MT - MB);

    let step_path = |curve: &KmCurve| -> String {
        let mut d = format!("M {} {}", x(0.0), y(1.0));
        let mut s_prev = 1.0;
        for &(t, s) in &curve.points {
            d.push_str(&format!(" L {} {}", x(t), y(s_prev)));
            d.push_str(&format!(" L {} {}", x(t), y(s)));
            s_prev = s;
        }
        d.push_str(&format!(" L {} {}", x(t_max), y(s_prev)));
        d
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for tick in 0..=4 {
        let s = tick as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{s}</text>\n",
            ML - 6.0,
            y(s) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
        step_path(low)
    ));
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>\n",
        step_path(high)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-size=\"13\" fill=\"#1f77b4\">low risk</text>\n",
        ML + 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-size=\"13\" fill=\"#d62728\">high risk</text>\n",
        ML + 90.0
    ));
    if let Some(p) = logrank_p {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"13\">log-rank p = {p:.6}</text>\n",
            ML + 10.0,
            H - 15.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">time bin</text>\n",
        (ML + W - MR) / 2.0,
        H - MB + 30.0
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
