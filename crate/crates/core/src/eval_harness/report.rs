//! CSV tables and SVG overlays for trials and experiment reports.

use std::fmt::Write as _;
use std::path::Path;

use super::analysis::BendingAnalysis;
use super::experiments::{ExperimentReport, SummaryRow, TrialRow};
use super::{ErrorSample, TrialResult};
use crate::geometry::{Centerline, Vec2};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed {file}: {reason}")]
    Malformed { file: String, reason: String },
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields")
}

pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial",
        "condition",
        "mode",
        "init_id",
        "target_id",
        "stiffness_scale",
        "length",
        "mu",
        "obs_noise_std",
        "seed",
        "initial_e_mean",
        "final_e_mean",
        "final_e_max",
        "target_bend_energy",
        "converged",
        "failure",
    ])
    .expect("in-memory write");
    for r in rows {
        let t = &r.result;
        w.write_record([
            r.trial.to_string(),
            r.condition.clone(),
            t.mode.as_str().to_string(),
            t.init_id.to_string(),
            t.target_id.to_string(),
            t.deploy.stiffness_scale.to_string(),
            t.deploy.length.to_string(),
            t.deploy.surface.mu.to_string(),
            t.deploy.obs_noise_std.to_string(),
            t.seed.to_string(),
            t.initial_e_mean().to_string(),
            t.final_e_mean.to_string(),
            t.final_e_max.to_string(),
            t.target_bend_energy.to_string(),
            t.converged.to_string(),
            t.failure.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition",
        "trials",
        "failures",
        "mean_e_mean",
        "std_e_mean",
        "median_e_mean",
        "mean_e_max",
        "std_e_max",
        "median_e_max",
    ])
    .expect("in-memory write");
    for s in summary {
        w.write_record([
            s.condition.clone(),
            s.trials.to_string(),
            s.failures.to_string(),
            s.mean_e_mean.to_string(),
            s.std_e_mean.to_string(),
            s.median_e_mean.to_string(),
            s.mean_e_max.to_string(),
            s.std_e_max.to_string(),
            s.median_e_max.to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn series_csv(rows: &[TrialRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "t", "e_mean", "e_max"]).expect("in-memory write");
    for r in rows {
        for s in &r.result.series {
            w.write_record([r.trial.to_string(), s.t.to_string(), s.e_mean.to_string(), s.e_max.to_string()])
                .expect("in-memory write");
        }
    }
    finish(w)
}

/// One row per (trial, kind) with flat `x0 y0 x1 y1 ...` coordinates.
pub fn shapes_csv(rows: &[TrialRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "kind", "coords"]).expect("in-memory write");
    for r in rows {
        let t = &r.result;
        for (kind, line) in [
            ("init", &t.init_centerline),
            ("target", &t.target_centerline),
            ("final", &t.final_centerline),
        ] {
            let coords = line
                .to_flat()
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([r.trial.to_string(), kind.to_string(), coords])
                .expect("in-memory write");
        }
    }
    finish(w)
}

pub fn bending_scatter_csv(a: &BendingAnalysis) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "target_bend_energy", "final_e_mean"]).expect("in-memory write");
    for (i, (e, m)) in a.pairs.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string(), m.to_string()])
            .expect("in-memory write");
    }
    finish(w)
}

pub fn bending_distribution_csv(a: &BendingAnalysis) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["source", "bend_energy"]).expect("in-memory write");
    for e in &a.dataset_energies {
        w.write_record(["dataset".to_string(), e.to_string()]).expect("in-memory write");
    }
    for e in &a.target_energies {
        w.write_record(["targets".to_string(), e.to_string()]).expect("in-memory write");
    }
    finish(w)
}

pub fn spearman_line(a: &BendingAnalysis) -> String {
    match a.spearman {
        Some(r) => format!("spearman,{r}\n"),
        None => "spearman,not-applicable\n".to_string(),
    }
}

/// Writes `trials.csv`, `summary.csv`, `series.csv`, `shapes.csv` and
/// `trials.svg` into `dir`.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trials.csv"), trials_csv(&report.rows))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&report.summary))?;
    std::fs::write(dir.join("series.csv"), series_csv(&report.rows))?;
    std::fs::write(dir.join("shapes.csv"), shapes_csv(&report.rows))?;
    let panels: Vec<TrialPanel> = report.rows.iter().map(TrialPanel::from_row).collect();
    std::fs::write(dir.join("trials.svg"), render_svg(&panels))?;
    Ok(())
}

/// Data needed to draw one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPanel {
    pub title: String,
    pub init: Vec<Vec2>,
    pub target: Vec<Vec2>,
    pub final_: Vec<Vec2>,
    pub series: Vec<ErrorSample>,
}

impl TrialPanel {
    pub fn from_row(r: &TrialRow) -> Self {
        Self::from_trial(format!("trial {} ({})", r.trial, r.condition), &r.result)
    }

    pub fn from_trial(title: String, t: &TrialResult) -> Self {
        Self {
            title,
            init: t.init_centerline.points().to_vec(),
            target: t.target_centerline.points().to_vec(),
            final_: t.final_centerline.points().to_vec(),
            series: t.series.clone(),
        }
    }
}

fn parse_points(s: &str) -> Option<Vec<Vec2>> {
    let v: Result<Vec<f64>, _> = s.split_whitespace().map(str::parse).collect();
    let v = v.ok()?;
    Centerline::from_flat(&v).ok().map(|c| c.points().to_vec())
}

/// Rebuilds panels from `shapes.csv` and `series.csv` written by
/// [`write_report`].
pub fn read_panels(dir: &Path) -> Result<Vec<TrialPanel>, ReportError> {
    let bad = |file: &str, reason: String| ReportError::Malformed {
        file: file.to_string(),
        reason,
    };
    let mut panels: Vec<TrialPanel> = Vec::new();
    let mut rd = csv::Reader::from_path(dir.join("shapes.csv"))?;
    for rec in rd.records() {
        let rec = rec?;
        let trial = rec[0].to_string();
        let pts = parse_points(&rec[2]).ok_or_else(|| bad("shapes.csv", format!("trial {trial}: bad coordinates")))?;
        let title = format!("trial {trial}");
        if panels.last().map(|p| p.title != title).unwrap_or(true) {
            panels.push(TrialPanel {
                title,
                init: Vec::new(),
                target: Vec::new(),
                final_: Vec::new(),
                series: Vec::new(),
            });
        }
        let p = panels.last_mut().expect("pushed above");
        match &rec[1] {
            "init" => p.init = pts,
            "target" => p.target = pts,
            "final" => p.final_ = pts,
            k => return Err(bad("shapes.csv", format!("unknown kind {k}"))),
        }
    }
    let series_path = dir.join("series.csv");
    if series_path.exists() {
        let mut rd = csv::Reader::from_path(series_path)?;
        for rec in rd.records() {
            let rec = rec?;
            let title = format!("trial {}", &rec[0]);
            let num = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| bad("series.csv", format!("bad number {:?}", &rec[i])))
            };
            let s = ErrorSample {
                t: num(1)?,
                e_mean: num(2)?,
                e_max: num(3)?,
            };
            if let Some(p) = panels.iter_mut().find(|p| p.title == title) {
                p.series.push(s);
            }
        }
    }
    Ok(panels)
}

const PANEL_W: f64 = 320.0;
const SHAPE_H: f64 = 170.0;
const CURVE_H: f64 = 90.0;
const PANEL_H: f64 = SHAPE_H + CURVE_H + 40.0;
const COLS: usize = 3;

fn polyline(out: &mut String, pts: &[Vec2], map: &dyn Fn(Vec2) -> (f64, f64), style: &str) {
    let coords: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = map(*p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, coords.join(" "));
}

fn panel(out: &mut String, p: &TrialPanel, ox: f64, oy: f64) {
    let _ = writeln!(out, r#"<g transform="translate({ox:.1},{oy:.1})">"#);
    let _ = writeln!(out, r#"<text x="8" y="14" font-size="11">{}</text>"#, xml_escape(&p.title));
    let _ = writeln!(
        out,
        r#"<rect x="8" y="20" width="{:.1}" height="{SHAPE_H:.1}" fill="none" stroke="black" stroke-width="0.5"/>"#,
        PANEL_W - 16.0
    );
    let all: Vec<Vec2> = p.init.iter().chain(&p.target).chain(&p.final_).copied().collect();
    let (mut lo, mut hi) = (Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0));
    if let Some(first) = all.first() {
        lo = *first;
        hi = *first;
        for q in &all {
            lo = lo.inf(q);
            hi = hi.sup(q);
        }
    }
    let span = (hi - lo).max().max(1e-9) * 1.1;
    let c = (lo + hi) * 0.5;
    let scale = (PANEL_W - 24.0).min(SHAPE_H - 8.0) / span;
    let (cx, cy) = (PANEL_W / 2.0, 20.0 + SHAPE_H / 2.0);
    let map = move |q: Vec2| (cx + (q.x - c.x) * scale, cy - (q.y - c.y) * scale);
    polyline(out, &p.init, &map, r##"stroke="#888888" stroke-dasharray="4 2""##);
    polyline(out, &p.target, &map, r##"stroke="#2a9d2a" stroke-width="2""##);
    polyline(out, &p.final_, &map, r##"stroke="#1f4fd1""##);

    // error curves below the shapes
    let top = 20.0 + SHAPE_H + 10.0;
    let _ = writeln!(
        out,
        r#"<rect x="8" y="{top:.1}" width="{:.1}" height="{CURVE_H:.1}" fill="none" stroke="black" stroke-width="0.5"/>"#,
        PANEL_W - 16.0
    );
    if p.series.len() >= 2 {
        let t_max = p.series.last().map_or(1.0, |s| s.t).max(1e-9);
        let e_top = p.series.iter().map(|s| s.e_max).fold(0.0, f64::max).max(1e-9);
        let to = |t: f64, e: f64| (8.0 + (PANEL_W - 16.0) * t / t_max, top + CURVE_H * (1.0 - e / e_top));
        for (f, color) in [
            (&(|s: &ErrorSample| s.e_mean) as &dyn Fn(&ErrorSample) -> f64, "#1f4fd1"),
            (&|s: &ErrorSample| s.e_max, "#d1441f"),
        ] {
            let mut d = String::new();
            for (i, s) in p.series.iter().enumerate() {
                let (x, y) = to(s.t, f(s));
                let _ = write!(d, "{}{x:.3},{y:.3}", if i == 0 { "M" } else { " L" });
            }
            let _ = writeln!(out, r#"<path fill="none" stroke="{color}" d="{d}"/>"#);
        }
    }
    out.push_str("</g>\n");
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grid of trial panels: init (dashed grey), target (green), final (blue)
/// centerlines over e_mean/e_max curves. Output depends only on the input.
pub fn render_svg(panels: &[TrialPanel]) -> String {
    let rows = panels.len().div_ceil(COLS).max(1);
    let cols = panels.len().clamp(1, COLS);
    let (w, h) = (cols as f64 * PANEL_W, rows as f64 * PANEL_H);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    if panels.is_empty() {
        let _ = writeln!(
            out,
            r#"<rect x="8" y="20" width="{:.1}" height="{SHAPE_H:.1}" fill="none" stroke="black" stroke-width="0.5"/>"#,
            PANEL_W - 16.0
        );
        out.push_str("<text x=\"16\" y=\"40\" font-size=\"11\">no trials</text>\n");
    }
    for (i, p) in panels.iter().enumerate() {
        let ox = (i % COLS) as f64 * PANEL_W;
        let oy = (i / COLS) as f64 * PANEL_H;
        panel(&mut out, p, ox, oy);
    }
    out.push_str("</svg>\n");
    out
}
