//! Static SVG line charts of training metrics.

use std::fmt::Write;
use std::path::Path;

use cpd_core::{Error, Result};

/// Plotted columns and their chart titles.
pub const METRICS: [(&str, &str); 3] = [
    ("train_loss", "training loss"),
    ("recall1", "validation recall@1"),
    ("recall5", "validation recall@5"),
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub epoch: f64,
    pub stage: String,
    pub train_loss: f64,
    pub recall1: f64,
    pub recall5: f64,
}

impl Row {
    fn get(&self, metric: &str) -> f64 {
        match metric {
            "train_loss" => self.train_loss,
            "recall1" => self.recall1,
            _ => self.recall5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub objective: String,
    pub rows: Vec<Row>,
}

impl Run {
    /// First epoch recorded in stage 2, if the run got there.
    pub fn transition_epoch(&self) -> Option<f64> {
        self.rows
            .windows(2)
            .find(|w| w[0].stage != w[1].stage)
            .map(|w| w[1].epoch)
    }
}

fn field(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<&str> {
    rec.get(idx).ok_or_else(|| Error::Schema {
        line,
        message: format!("missing column {idx}"),
    })
}

fn number(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("'{s}' is not a number"),
    })
}

pub fn read_run(path: &Path) -> Result<Run> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?
        .clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let (epoch, stage, objective) = (col("epoch")?, col("stage")?, col("objective")?);
    let (loss, r1, r5) = (col("train_loss")?, col("recall1")?, col("recall5")?);
    let mut run = Run {
        objective: String::new(),
        rows: Vec::new(),
    };
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if run.objective.is_empty() {
            run.objective = field(&rec, objective, line)?.to_string();
        }
        run.rows.push(Row {
            epoch: number(field(&rec, epoch, line)?, line)?,
            stage: field(&rec, stage, line)?.to_string(),
            train_loss: number(field(&rec, loss, line)?, line)?,
            recall1: number(field(&rec, r1, line)?, line)?,
            recall5: number(field(&rec, r5, line)?, line)?,
        });
    }
    Ok(run)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Legend labels keyed by objective, numbered when an objective repeats.
fn labels(runs: &[Run]) -> Vec<String> {
    runs.iter()
        .enumerate()
        .map(|(i, r)| {
            let before = runs[..i].iter().filter(|o| o.objective == r.objective).count();
            let total = runs.iter().filter(|o| o.objective == r.objective).count();
            if total > 1 {
                format!("{} #{}", r.objective, before + 1)
            } else {
                r.objective.clone()
            }
        })
        .collect()
}

/// One chart of `metric` against epoch with every run overlaid.
pub fn render(runs: &[Run], metric: &str, title: &str) -> String {
    let all = || runs.iter().flat_map(|r| r.rows.iter());
    let (x0, x1) = bounds(all().map(|r| r.epoch));
    let (y0, y1) = bounds(all().map(|r| r.get(metric)));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (bx, by) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path class="axes" d="M{bx} {MARGIN} L{bx} {by} L{} {by}" stroke="black" fill="none"/>"#,
        WIDTH - MARGIN
    );
    for (v, x, y, anchor) in [(x0, sx(x0), by + 18.0, "middle"), (x1, sx(x1), by + 18.0, "middle")] {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="11">{v}</text>"#
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{v:.3}</text>"#,
            bx - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">epoch</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0
    );

    let names = labels(runs);
    for (i, (run, name)) in runs.iter().zip(&names).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let name = escape(name);
        let points: Vec<String> = run
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.epoch), sy(r.get(metric))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-series="{name}" points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        for r in &run.rows {
            let _ = writeln!(
                svg,
                r#"<circle class="point" data-series="{name}" cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                sx(r.epoch),
                sy(r.get(metric))
            );
        }
        if let Some(e) = run.transition_epoch() {
            let x = sx(e);
            let _ = writeln!(
                svg,
                r#"<line class="stage-transition" data-series="{name}" data-epoch="{e}" x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{by}" stroke="{color}" stroke-dasharray="4 3"/>"#
            );
        }
    }

    if runs.len() > 1 {
        let _ = writeln!(svg, r#"<g class="legend">"#);
        for (i, name) in names.iter().enumerate() {
            let y = MARGIN + 8.0 + 16.0 * i as f64;
            let x = WIDTH - MARGIN - 120.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                y - 9.0,
                COLORS[i % COLORS.len()],
                x + 14.0,
                y,
                escape(name)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(objective: &str, stages: &[&str]) -> Run {
        Run {
            objective: objective.into(),
            rows: stages
                .iter()
                .enumerate()
                .map(|(i, s)| Row {
                    epoch: (i + 1) as f64,
                    stage: s.to_string(),
                    train_loss: 1.0 / (i + 1) as f64,
                    recall1: 0.1 * i as f64,
                    recall5: 0.2 * i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn one_point_per_row() {
        let svg = render(&[run("cpd_nce", &["stage1", "stage1", "stage1"])], "recall1", "r");
        assert_eq!(svg.matches(r#"class="point""#).count(), 3);
        assert!(!svg.contains("stage-transition"));
        assert!(!svg.contains("legend"));
    }

    #[test]
    fn transition_marker_sits_at_first_stage2_epoch() {
        let r = run("cpd_nce", &["stage1", "stage1", "stage2", "stage2"]);
        assert_eq!(r.transition_epoch(), Some(3.0));
        assert!(render(&[r], "train_loss", "loss").contains(r#"data-epoch="3""#));
    }

    #[test]
    fn repeated_objectives_get_numbered_labels() {
        let runs = [
            run("mmid", &["stage1"]),
            run("mmid", &["stage1"]),
            run("ranking", &["stage1"]),
        ];
        assert_eq!(labels(&runs), ["mmid #1", "mmid #2", "ranking"]);
    }

    #[test]
    fn flat_series_does_not_divide_by_zero() {
        let mut r = run("cpd_exact", &["stage1", "stage1"]);
        for row in &mut r.rows {
            row.recall1 = 0.5;
        }
        assert!(!render(&[r], "recall1", "r").contains("NaN"));
    }
}
