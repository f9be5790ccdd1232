//! Deterministic report files: metrics.csv, pareto.svg, phases.txt.

use std::fmt::Write as _;
use std::path::Path;

use super::pareto::{pareto_frontier, pareto_frontier_by_strategy};
use super::phases::segment_phases;
use super::{MetricPoint, DEFAULT_PATIENCE, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::train::Trajectory;

/// Fixed palette; strategies take colors in order of first appearance.
const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const CSV_HEADER: &str = "strategy,lr,epoch,train_ppl,val_ppl,mia_recall,exposure";

fn points_of(trajectories: &[Trajectory]) -> Vec<MetricPoint> {
    trajectories
        .iter()
        .flat_map(|t| {
            t.records.iter().map(|r| MetricPoint {
                strategy: t.strategy.clone(),
                lr: t.lr,
                epoch: r.epoch,
                train_ppl: r.train_ppl,
                val_ppl: r.val_ppl,
                mia_recall: r.mia_recall,
                exposure: r.exposure,
            })
        })
        .collect()
}

/// Render points as CSV (UTF-8, LF, '.' decimals; recall as a percentage).
pub fn metrics_csv(points: &[MetricPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        let recall = p
            .mia_recall
            .map(|r| format!("{}", r * 100.0))
            .unwrap_or_default();
        let exposure = p.exposure.map(|e| format!("{e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.strategy, p.lr, p.epoch, p.train_ppl, p.val_ppl, recall, exposure
        )
        .expect("string write");
    }
    out
}

/// Parse the metrics.csv format back into points.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "metrics csv: bad header {other:?} (expected {CSV_HEADER})"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "metrics csv line {}: expected 7 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("metrics csv line {}: bad {what} {s:?}", i + 2)))
        };
        out.push(MetricPoint {
            strategy: fields[0].to_string(),
            lr: num(fields[1], "lr")?,
            epoch: num(fields[2], "epoch")? as u32,
            train_ppl: num(fields[3], "train_ppl")?,
            val_ppl: num(fields[4], "val_ppl")?,
            mia_recall: if fields[5].is_empty() {
                None
            } else {
                Some(num(fields[5], "mia_recall")? / 100.0)
            },
            exposure: if fields[6].is_empty() {
                None
            } else {
                Some(num(fields[6], "exposure")?)
            },
        });
    }
    Ok(out)
}

pub fn write_metrics_csv(points: &[MetricPoint], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(points)).map_err(|e| Error::io(path, e))
}

/// Hand-emitted scatter of (val_ppl, recall%) with the global frontier as a
/// solid polyline and per-strategy frontiers dashed. Fixed 800×600 viewport.
pub fn pareto_svg(points: &[MetricPoint]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 600.0;
    const M: f64 = 60.0; // margin

    let usable: Vec<&MetricPoint> = points.iter().filter(|p| p.mia_recall.is_some()).collect();
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();

    // Strategy color order: first appearance in the input.
    let mut order: Vec<&str> = Vec::new();
    for p in points {
        if !order.contains(&p.strategy.as_str()) {
            order.push(&p.strategy);
        }
    }
    let color = |s: &str| {
        let idx = order.iter().position(|o| *o == s).unwrap_or(0);
        PALETTE[idx % PALETTE.len()]
    };

    if !usable.is_empty() {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &usable {
            x0 = x0.min(p.val_ppl);
            x1 = x1.max(p.val_ppl);
            let r = p.mia_recall.unwrap() * 100.0;
            y0 = y0.min(r);
            y1 = y1.max(r);
        }
        if (x1 - x0).abs() < 1e-9 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if (y1 - y0).abs() < 1e-9 {
            y0 -= 1.0;
            y1 += 1.0;
        }
        let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
        let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);

        // axes
        writeln!(
            svg,
            r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            H - M,
            W - M,
            H - M
        )
        .unwrap();
        writeln!(
            svg,
            r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
            H - M
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">validation perplexity</text>"#,
            W / 2.0,
            H - 15.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="18" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {})">attack recall (%)</text>"#,
            H / 2.0,
            H / 2.0
        )
        .unwrap();
        for (v, x) in [(x0, M), (x1, W - M)] {
            writeln!(
                svg,
                r#"<text x="{x}" y="{}" font-size="11" text-anchor="middle">{v:.2}</text>"#,
                H - M + 18.0
            )
            .unwrap();
        }
        for (v, y) in [(y0, H - M), (y1, M)] {
            writeln!(
                svg,
                r#"<text x="{}" y="{y:.1}" font-size="11" text-anchor="end">{v:.1}</text>"#,
                M - 6.0
            )
            .unwrap();
        }

        // per-strategy frontiers (dashed, in strategy color)
        for (label, frontier) in pareto_frontier_by_strategy(points) {
            if frontier.len() >= 2 {
                let pts: Vec<String> = frontier
                    .iter()
                    .map(|p| {
                        format!(
                            "{:.2},{:.2}",
                            sx(p.val_ppl),
                            sy(p.mia_recall.unwrap() * 100.0)
                        )
                    })
                    .collect();
                writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1" stroke-dasharray="5,4" opacity="0.7"/>"#,
                    pts.join(" "),
                    color(&label)
                )
                .unwrap();
            }
        }

        // global frontier (solid)
        let frontier = pareto_frontier(points);
        if frontier.len() >= 2 {
            let pts: Vec<String> = frontier
                .iter()
                .map(|p| {
                    format!(
                        "{:.2},{:.2}",
                        sx(p.val_ppl),
                        sy(p.mia_recall.unwrap() * 100.0)
                    )
                })
                .collect();
            writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }

        // scatter
        for p in &usable {
            writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" opacity="0.8"/>"#,
                sx(p.val_ppl),
                sy(p.mia_recall.unwrap() * 100.0),
                color(&p.strategy)
            )
            .unwrap();
        }

        // legend
        for (i, label) in order.iter().enumerate() {
            let y = M + 16.0 * i as f64;
            writeln!(
                svg,
                r#"<circle cx="{}" cy="{y:.1}" r="4" fill="{}"/>"#,
                W - M - 130.0,
                color(label)
            )
            .unwrap();
            writeln!(
                svg,
                r#"<text x="{}" y="{:.1}" font-size="12">{label}</text>"#,
                W - M - 120.0,
                y + 4.0
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write metrics.csv, pareto.svg, and phases.txt into `out_dir`.
/// Byte output is deterministic for fixed input.
pub fn emit_report(trajectories: &[Trajectory], out_dir: &Path) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::contract("emit_report: no trajectories"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let points = points_of(trajectories);
    write_metrics_csv(&points, &out_dir.join("metrics.csv"))?;

    let svg_path = out_dir.join("pareto.svg");
    std::fs::write(&svg_path, pareto_svg(&points)).map_err(|e| Error::io(&svg_path, e))?;

    let mut phases = String::new();
    for t in trajectories {
        if t.records.len() < 3 {
            writeln!(
                phases,
                "# {} lr={}: trajectory too short to segment",
                t.strategy, t.lr
            )
            .expect("string write");
            continue;
        }
        let seg = segment_phases(t, DEFAULT_THETA, DEFAULT_PATIENCE)?;
        writeln!(
            phases,
            "{} lr={} a={} b={} theta={} k={}",
            t.strategy, t.lr, seg.boundary_a, seg.boundary_b, seg.theta, seg.k
        )
        .expect("string write");
    }
    let phases_path = out_dir.join("phases.txt");
    std::fs::write(&phases_path, phases).map_err(|e| Error::io(&phases_path, e))?;
    Ok(())
}
