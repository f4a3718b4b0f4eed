//! Summary tables and plots, regenerated from persisted CSVs only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel_sim::EnvId;
use crate::error::{Error, Result};
use crate::transfer::{percent_increase, EvalReport, TransferMode, EVAL_REPORT_COLUMNS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceScheme {
    Separate,
    Joint,
}

impl SourceScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceScheme::Separate => "separate",
            SourceScheme::Joint => "joint",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(SourceScheme::Separate),
            "joint" => Ok(SourceScheme::Joint),
            other => Err(Error::Report(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Test ME of one source environment under one training scheme and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEvalRow {
    pub env_id: EnvId,
    pub scheme: SourceScheme,
    pub seed: u64,
    pub me_m: f64,
}

pub const SOURCE_EVAL_COLUMNS: [&str; 4] = ["env_id", "scheme", "seed", "me_m"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceEval {
    pub rows: Vec<SourceEvalRow>,
}

impl SourceEval {
    pub fn new(mut rows: Vec<SourceEvalRow>) -> Self {
        rows.sort_by(|a, b| (a.env_id, a.scheme, a.seed).cmp(&(b.env_id, b.scheme, b.seed)));
        Self { rows }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SOURCE_EVAL_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.env_id.to_string(),
                r.scheme.as_str().to_string(),
                r.seed.to_string(),
                r.me_m.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Report(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        check_header(rdr.headers()?, &SOURCE_EVAL_COLUMNS)?;
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Report(format!("row {}: bad {what}", line + 1));
            let field = |i: usize| rec.get(i).unwrap_or("");
            rows.push(SourceEvalRow {
                env_id: EnvId(field(0).parse().map_err(|_| bad("env_id"))?),
                scheme: SourceScheme::parse(field(1))?,
                seed: field(2).parse().map_err(|_| bad("seed"))?,
                me_m: field(3).parse().map_err(|_| bad("me_m"))?,
            });
        }
        Ok(Self::new(rows))
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::Report(format!(
            "expected columns {}, found {}",
            expected.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

/// Fixed formatting shared by tidy CSVs and plot labels.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Seed-mean ME per source environment and scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub env_id: EnvId,
    pub scheme: SourceScheme,
    pub me_m: f64,
    pub n_seeds: usize,
}

/// One separate and one joint row per source environment.
pub fn source_summary(eval: &SourceEval) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(EnvId, SourceScheme), Vec<f64>> = BTreeMap::new();
    for r in &eval.rows {
        groups.entry((r.env_id, r.scheme)).or_default().push(r.me_m);
    }
    let envs: Vec<EnvId> = {
        let mut e: Vec<EnvId> = groups.keys().map(|(e, _)| *e).collect();
        e.dedup();
        e
    };
    let mut out = Vec::new();
    for env in envs {
        for scheme in [SourceScheme::Separate, SourceScheme::Joint] {
            let mes = groups.get(&(env, scheme)).ok_or_else(|| {
                Error::Report(format!(
                    "environment {env} has no {} results",
                    scheme.as_str()
                ))
            })?;
            out.push(SummaryRow {
                env_id: env,
                scheme,
                me_m: mean(mes),
                n_seeds: mes.len(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub constrained: bool,
    pub mode: TransferMode,
    pub n_sources: usize,
    pub target_samples: usize,
    pub me_m: f64,
    pub n_seeds: usize,
}

/// Seed means of every `(constrained, mode, N, k)` cell.
pub fn curve_points(report: &EvalReport) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(bool, TransferMode, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        groups
            .entry((r.constrained, r.mode, r.n_sources, r.target_samples))
            .or_default()
            .push(r.me_m);
    }
    groups
        .into_iter()
        .map(|((constrained, mode, n_sources, target_samples), mes)| CurvePoint {
            constrained,
            mode,
            n_sources,
            target_samples,
            me_m: mean(&mes),
            n_seeds: mes.len(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PercentPoint {
    pub constrained: bool,
    pub target_samples: usize,
    pub n_sources: usize,
    pub percent: f64,
}

/// Percent increase of the seed-mean frozen ME over the seed-mean fine-tuned
/// ME, for every cell holding both modes.
pub fn percent_points(points: &[CurvePoint]) -> Result<Vec<PercentPoint>> {
    let lookup: BTreeMap<_, f64> = points
        .iter()
        .map(|p| ((p.constrained, p.mode, p.n_sources, p.target_samples), p.me_m))
        .collect();
    let mut out = Vec::new();
    for p in points.iter().filter(|p| p.mode == TransferMode::Freeze) {
        if let Some(&fine) = lookup.get(&(p.constrained, TransferMode::Finetune, p.n_sources, p.target_samples)) {
            out.push(PercentPoint {
                constrained: p.constrained,
                target_samples: p.target_samples,
                n_sources: p.n_sources,
                percent: percent_increase(p.me_m, fine)?,
            });
        }
    }
    out.sort_by_key(|p| (p.constrained, p.target_samples, p.n_sources));
    Ok(out)
}

/// A polyline series for [`line_plot`]; points are `(x, y)` with `y` drawn
/// from the formatted label so plots and tidy CSVs agree exactly.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, String)>,
    pub dashed: bool,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG line chart. Each data point carries its formatted value
/// in a `data-value` attribute.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 55.0);
    let tx = |x: f64| if log_x { x.max(1e-12).ln() } else { x };
    let parsed: Vec<Vec<(f64, f64, &str)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .map(|(x, label)| (tx(*x), label.parse::<f64>().unwrap_or(f64::NAN), label.as_str()))
                .collect()
        })
        .collect();
    let finite = || parsed.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (mut y0, mut y1) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let (ax0, ax1, ay0, ay1) = (left, w - right, top, h - bottom);
    let _ = writeln!(
        s,
        "<path d=\"M{ax0} {ay0} L{ax0} {ay1} L{ax1} {ay1}\" stroke=\"black\" fill=\"none\"/>"
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            ax0 - 6.0,
            py(y) + 4.0,
            y
        );
    }
    let mut ticks: Vec<(f64, String)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|(x, _)| (*x, format!("{x}"))))
        .collect();
    ticks.sort_by(|a, b| a.0.total_cmp(&b.0));
    ticks.dedup_by(|a, b| a.0 == b.0);
    for (x, label) in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(tx(x)),
            ay1 + 16.0,
            label
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (ax0 + ax1) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        xml_escape(y_label)
    );
    for (i, (ser, pts)) in series.iter().zip(&parsed).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            path.join(" ")
        );
        for p in pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-series="{}" data-value="{}"/>"#,
                px(p.0),
                py(p.1),
                xml_escape(&ser.name),
                p.2
            );
        }
        let ly = top + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            ax1 + 10.0,
            ax1 + 30.0,
            ax1 + 36.0,
            ly + 4.0,
            xml_escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Report inputs, classified by CSV header.
#[derive(Debug, Default)]
pub struct ReportInputs {
    pub source: SourceEval,
    pub curves: EvalReport,
}

impl ReportInputs {
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut source_rows = Vec::new();
        let mut curve_rows = Vec::new();
        for p in paths {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let header = csv::Reader::from_reader(bytes.as_slice()).headers()?.clone();
            if header.iter().eq(SOURCE_EVAL_COLUMNS) {
                source_rows.extend(SourceEval::read_csv(bytes.as_slice())?.rows);
            } else if header.iter().eq(EVAL_REPORT_COLUMNS) {
                curve_rows.extend(EvalReport::read_csv(bytes.as_slice())?.rows);
            } else {
                return Err(Error::Report(format!(
                    "{}: unrecognized columns {}",
                    p.display(),
                    header.iter().collect::<Vec<_>>().join(",")
                )));
            }
        }
        Ok(Self {
            source: SourceEval::new(source_rows),
            curves: EvalReport { rows: curve_rows },
        })
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows.is_empty() && self.curves.rows.is_empty()
    }
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

/// Writes the summary table, learning-curve and percent-increase plots and
/// their tidy CSVs into `out`.
pub fn write_report(inputs: &ReportInputs, out: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::Report("no data: the input CSVs hold no rows".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();

    if !inputs.source.rows.is_empty() {
        let summary = source_summary(&inputs.source)?;
        let rows = summary.iter().map(|r| {
            vec![
                r.env_id.to_string(),
                r.scheme.as_str().to_string(),
                fmt_value(r.me_m),
                r.n_seeds.to_string(),
            ]
        });
        write(
            out.join("source_summary.csv"),
            &csv_bytes(&["env_id", "scheme", "me_m", "n_seeds"], rows)?,
            &mut written,
        )?;
        let mut md = String::from("| environment | separate ME (m) | joint ME (m) |\n|---|---|---|\n");
        for pair in summary.chunks(2) {
            let _ = writeln!(md, "| {} | {} | {} |", pair[0].env_id, fmt_value(pair[0].me_m), fmt_value(pair[1].me_m));
        }
        write(out.join("source_summary.md"), md.as_bytes(), &mut written)?;
    }

    if !inputs.curves.rows.is_empty() {
        let points = curve_points(&inputs.curves);
        let rows = points.iter().map(|p| {
            vec![
                p.constrained.to_string(),
                p.mode.to_string(),
                p.n_sources.to_string(),
                p.target_samples.to_string(),
                fmt_value(p.me_m),
                p.n_seeds.to_string(),
            ]
        });
        write(
            out.join("curve_points.csv"),
            &csv_bytes(
                &["constrained", "mode", "n_sources", "target_samples", "me_m", "n_seeds"],
                rows,
            )?,
            &mut written,
        )?;
        for constrained in [false, true] {
            let suffix = if constrained { "_constrained" } else { "" };
            for mode in [TransferMode::Finetune, TransferMode::Freeze] {
                let mut series: Vec<Series> = Vec::new();
                let mut by_n: BTreeMap<usize, Vec<(f64, String)>> = BTreeMap::new();
                for p in points.iter().filter(|p| p.constrained == constrained && p.mode == mode) {
                    by_n.entry(p.n_sources)
                        .or_default()
                        .push((p.target_samples as f64, fmt_value(p.me_m)));
                }
                if by_n.is_empty() {
                    continue;
                }
                for (n, pts) in by_n {
                    series.push(Series {
                        name: format!("N={n}"),
                        points: pts,
                        dashed: false,
                    });
                }
                // Scratch does not depend on N; draw it once.
                let mut scratch: BTreeMap<usize, String> = BTreeMap::new();
                for p in points
                    .iter()
                    .filter(|p| p.constrained == constrained && p.mode == TransferMode::Scratch)
                {
                    scratch.entry(p.target_samples).or_insert_with(|| fmt_value(p.me_m));
                }
                if !scratch.is_empty() {
                    series.push(Series {
                        name: "scratch".into(),
                        points: scratch.into_iter().map(|(k, v)| (k as f64, v)).collect(),
                        dashed: true,
                    });
                }
                let title = format!("Target ME, {mode} trunk{}", if constrained { " (constrained sources)" } else { "" });
                let svg = line_plot(&title, "target training samples", "mean error (m)", &series, true);
                write(out.join(format!("curves_{mode}{suffix}.svg")), svg.as_bytes(), &mut written)?;
            }
            let pct: Vec<PercentPoint> = percent_points(&points)?
                .into_iter()
                .filter(|p| p.constrained == constrained)
                .collect();
            if pct.is_empty() {
                continue;
            }
            let rows = pct.iter().map(|p| {
                vec![
                    p.target_samples.to_string(),
                    p.n_sources.to_string(),
                    fmt_value(p.percent),
                ]
            });
            write(
                out.join(format!("percent_increase{suffix}.csv")),
                &csv_bytes(&["target_samples", "n_sources", "percent_increase"], rows)?,
                &mut written,
            )?;
            let mut by_k: BTreeMap<usize, Vec<(f64, String)>> = BTreeMap::new();
            for p in &pct {
                by_k.entry(p.target_samples)
                    .or_default()
                    .push((p.n_sources as f64, fmt_value(p.percent)));
            }
            let series: Vec<Series> = by_k
                .into_iter()
                .map(|(k, pts)| Series {
                    name: format!("k={k}"),
                    points: pts,
                    dashed: false,
                })
                .collect();
            let svg = line_plot(
                "ME increase from freezing the trunk",
                "source environments N",
                "percent increase (%)",
                &series,
                false,
            );
            write(out.join(format!("percent_increase{suffix}.svg")), svg.as_bytes(), &mut written)?;
        }
    }
    Ok(written)
}
