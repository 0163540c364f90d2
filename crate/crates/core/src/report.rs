//! CSV, JSON and SVG renderings of experiment results.
//!
//! Floats are written in Rust's shortest round-trip form so that parsing a
//! CSV back yields the exact in-memory values.

use std::fmt::Write as _;
use std::path::Path;

use crate::evaluation::{AblationTrace, AtlasReport, TransferMatrix};
use crate::restoration::CandidateSet;
use crate::{Error, Result};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn csv_string(records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in records {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Rows are attacks, columns are models, followed by the two row averages.
pub fn matrix_csv(m: &TransferMatrix) -> Result<String> {
    let mut header = vec!["attack".to_string()];
    header.extend(m.columns.iter().map(|c| c.id.clone()));
    header.extend(["average".to_string(), "unlearned_average".to_string()]);
    let rows = m.rows.iter().map(|r| {
        let mut rec = vec![r.id.clone()];
        rec.extend(r.cells.iter().map(|c| c.accuracy.to_string()));
        rec.push(r.average.to_string());
        rec.push(opt(r.unlearned_average));
        rec
    });
    csv_string(std::iter::once(header).chain(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub id: String,
    pub accuracy: Vec<f64>,
    pub average: f64,
    pub unlearned_average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<ParsedRow>,
}

impl ParsedMatrix {
    pub fn matches(&self, m: &TransferMatrix) -> bool {
        self.columns.iter().eq(m.columns.iter().map(|c| &c.id))
            && self.rows.len() == m.rows.len()
            && self.rows.iter().zip(&m.rows).all(|(p, r)| {
                p.id == r.id
                    && p.accuracy.iter().copied().eq(r.cells.iter().map(|c| c.accuracy))
                    && p.average == r.average
                    && p.unlearned_average == r.unlearned_average
            })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Config(format!("not a number: `{s}`")))
}

pub fn parse_matrix_csv(text: &str) -> Result<ParsedMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Config("empty matrix csv".into()))??;
    let width = header.len();
    if width < 3 || &header[0] != "attack" {
        return Err(Error::Config("unexpected matrix csv header".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).take(width - 3).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Config(format!("matrix row has {} fields, expected {width}", rec.len())));
        }
        rows.push(ParsedRow {
            id: rec[0].to_string(),
            accuracy: (1..width - 2).map(|i| parse_f64(&rec[i])).collect::<Result<_>>()?,
            average: parse_f64(&rec[width - 2])?,
            unlearned_average: match &rec[width - 1] {
                "" => None,
                s => Some(parse_f64(s)?),
            },
        });
    }
    Ok(ParsedMatrix { columns, rows })
}

pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn atlas_csv(a: &AtlasReport) -> Result<String> {
    let header = vec!["label".to_string(), "x".into(), "y".into()];
    let rows = a.points.iter().map(|p| vec![p.label.clone(), p.x.to_string(), p.y.to_string()]);
    csv_string(std::iter::once(header).chain(rows))
}

/// One row per (variant, recorded epoch, model).
pub fn ablation_csv(t: &AblationTrace) -> Result<String> {
    let header = ["variant", "epoch", "model", "accuracy", "mean_prob"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (variant, trace) in [("with_search", &t.with_search), ("without_search", &t.without_search)] {
        for p in trace {
            for (m, id) in t.models.iter().enumerate() {
                rows.push(vec![
                    variant.to_string(),
                    p.epoch.to_string(),
                    id.clone(),
                    p.accuracy[m].to_string(),
                    p.mean_prob[m].to_string(),
                ]);
            }
        }
    }
    csv_string(std::iter::once(header).chain(rows))
}

/// One row per candidate: epoch, loss and the embedding components.
pub fn candidates_csv(set: &CandidateSet) -> Result<String> {
    let d = set.entries.first().map_or(0, |c| c.embedding.len());
    let mut header = vec!["epoch".to_string(), "loss".into()];
    header.extend((0..d).map(|i| format!("v{i}")));
    let rows = set.entries.iter().map(|c| {
        let mut rec = vec![c.epoch.to_string(), c.loss.to_string()];
        rec.extend(c.embedding.iter().map(f64::to_string));
        rec
    });
    csv_string(std::iter::once(header).chain(rows))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 50.0;
const LEGEND: f64 = 160.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - LEGEND - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn svg_open(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        (W - LEGEND) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        W - LEGEND - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (W - LEGEND) / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn legend_entry(out: &mut String, i: usize, color: &str, label: &str, dashed: bool) {
    let y = MARGIN + 18.0 * i as f64;
    let x = W - LEGEND + 10.0;
    let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(
        out,
        "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"3\"{dash}/>",
        x + 16.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
        x + 22.0,
        y + 4.0,
        escape(label)
    );
}

/// Scatter of the projected embeddings, one `<circle>` per point and one
/// color per label.
pub fn atlas_svg(a: &AtlasReport) -> String {
    let frame = Frame::fit(a.points.iter().map(|p| p.x), a.points.iter().map(|p| p.y));
    let mut out = String::new();
    svg_open(&mut out, "Embedding atlas", "PC 1", "PC 2");
    let labels: Vec<&str> = a.labels.iter().map(|l| l.label.as_str()).collect();
    for p in &a.points {
        let i = labels.iter().position(|l| *l == p.label).unwrap_or(0);
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            frame.px(p.x),
            frame.py(p.y),
            PALETTE[i % PALETTE.len()]
        );
    }
    for (i, l) in labels.iter().enumerate() {
        legend_entry(&mut out, i, PALETTE[i % PALETTE.len()], l, false);
    }
    out.push_str("</svg>\n");
    out
}

/// Accuracy against epoch; solid lines with search, dashed without.
pub fn ablation_svg(t: &AblationTrace) -> String {
    let epochs = t.with_search.iter().chain(&t.without_search).map(|p| p.epoch as f64);
    let frame = Frame {
        y0: -0.02,
        y1: 1.02,
        ..Frame::fit(epochs, std::iter::empty())
    };
    let mut out = String::new();
    svg_open(&mut out, "Restoration accuracy during search", "epoch", "accuracy");
    let mut legend = 0;
    for (m, id) in t.models.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        for (trace, dashed, suffix) in [(&t.with_search, false, "with search"), (&t.without_search, true, "without search")] {
            let pts: Vec<String> = trace
                .iter()
                .map(|p| format!("{:.2},{:.2}", frame.px(p.epoch as f64), frame.py(p.accuracy[m])))
                .collect();
            let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
                pts.join(" ")
            );
            legend_entry(&mut out, legend, color, &format!("{id} {suffix}"), dashed);
            legend += 1;
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `content` to `path`, mapping failures to an error naming the file.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{AccuracyCell, AtlasPoint, AttackRow, LabelStats, ModelColumn, TracePoint};

    fn matrix() -> TransferMatrix {
        let cell = |a: f64| AccuracyCell {
            accuracy: a,
            n: 3,
            mean_target_prob: a,
        };
        TransferMatrix {
            target: 1,
            n: 3,
            columns: vec![
                ModelColumn { id: "base".into(), unlearned: false },
                ModelColumn { id: "esd,\"c1\"".into(), unlearned: true },
            ],
            rows: vec![
                AttackRow {
                    id: "literal".into(),
                    cells: vec![cell(1.0 / 3.0), cell(0.1 + 0.2)],
                    average: (1.0 / 3.0 + 0.1 + 0.2) / 2.0,
                    unlearned_average: Some(0.1 + 0.2),
                },
                AttackRow {
                    id: "as".into(),
                    cells: vec![cell(2.0 / 3.0), cell(1.0)],
                    average: 5.0 / 6.0,
                    unlearned_average: None,
                },
            ],
        }
    }

    #[test]
    fn matrix_csv_round_trips_exactly() {
        let m = matrix();
        let text = matrix_csv(&m).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
        let parsed = parse_matrix_csv(&text).unwrap();
        assert!(parsed.matches(&m), "{text}");
        assert_eq!(parsed.rows[0].accuracy[1], 0.1 + 0.2);
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = TransferMatrix {
            target: 0,
            n: 0,
            columns: Vec::new(),
            rows: Vec::new(),
        };
        let text = matrix_csv(&m).unwrap();
        assert_eq!(text, "attack,average,unlearned_average\n");
        assert!(parse_matrix_csv(&text).unwrap().matches(&m));
    }

    #[test]
    fn scatter_has_one_circle_per_point() {
        let points: Vec<AtlasPoint> = (0..7)
            .map(|i| AtlasPoint {
                label: if i < 3 { "a<b" } else { "c" }.into(),
                x: i as f64,
                y: (i * i) as f64,
            })
            .collect();
        let stats = |l: &str, count| LabelStats {
            label: l.into(),
            count,
            silhouette: None,
            centroid_spread: 0.0,
        };
        let a = AtlasReport {
            points,
            components: [vec![1.0, 0.0], vec![0.0, 1.0]],
            explained_variance: [1.0, 0.5],
            silhouette: None,
            labels: vec![stats("a<b", 3), stats("c", 4)],
        };
        let svg = atlas_svg(&a);
        assert_eq!(svg.matches("<circle").count(), 7);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("<script"));
        assert_eq!(svg.matches("fill=\"#1f77b4\"").count(), 3);
        assert_eq!(atlas_csv(&a).unwrap().lines().count(), 8);
    }

    #[test]
    fn ablation_outputs() {
        let p = |e| TracePoint {
            epoch: e,
            accuracy: vec![0.5, 0.25],
            mean_prob: vec![0.4, 0.2],
        };
        let t = AblationTrace {
            models: vec!["m0".into(), "m1".into()],
            record_every: 5,
            with_search: vec![p(0), p(5)],
            without_search: vec![p(0), p(5)],
        };
        let csv = ablation_csv(&t).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
        assert!(csv.starts_with("variant,epoch,model,accuracy,mean_prob\n"));
        assert_eq!(ablation_svg(&t).matches("<polyline").count(), 4);
    }
}
