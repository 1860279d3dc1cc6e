//! Human-readable artifacts: per-layer MAC distribution charts, pass
//! trajectory tables and local micro-timings of the reference kernels.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analyzer::{layer_macs, CostReport};
use crate::error::{MofaError, Result};
use crate::interpreter::{run_layer, Weights};
use crate::ir::{ConvSpec, LayerKind, LayerNode, NetGraph, Portion, Role, Stage};
use crate::passes::PassTrace;
use crate::tensor::{Dims4, Tensor};

pub const GENERATOR_VERSION: &str = concat!("mofa ", env!("CARGO_PKG_VERSION"));

pub const BENCH_LABEL: &str = "reference kernels, not comparable to published runtimes";

pub const MIN_ITERATIONS: usize = 30;

/// Published figures shown with `--published-reference`, `(pass, G, M)`.
/// The decoupling pass has no row of its own in the published ablation.
const PUBLISHED_TRAJECTORY: [(&str, Option<(f64, f64)>); 6] = [
    ("baseline", Some((1.11, 1.03))),
    ("P1_pconv", Some((2.12, 2.84))),
    ("P2_middle", Some((3.25, 3.86))),
    ("P3_cheap", Some((3.69, 4.44))),
    ("P4_updown", None),
    ("P5_pdw", Some((1.11, 0.97))),
];

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn stage_colour(stage: Stage) -> &'static str {
    if stage.is_encoder() {
        "#3b6ea8"
    } else if stage.is_decoder() {
        "#d9822b"
    } else {
        match stage {
            Stage::Middle => "#4f9a5a",
            Stage::UpDown => "#8c8c8c",
            _ => "#333333",
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Aggregate `(encoder, decoder + middle)` MAC shares.
pub fn encoder_vs_cheap_share(report: &CostReport) -> (f64, f64) {
    (
        report.stage_share(|s| s.is_encoder()),
        report.stage_share(|s| s.is_decoder() || s == Stage::Middle),
    )
}

/// SVG bar chart, one bar per layer in report order, bar height = `mac_share`.
pub fn render_distribution_chart(report: &CostReport) -> Result<String> {
    if report.per_layer.is_empty() {
        return Err(MofaError::EmptyReport);
    }
    const BAR: f64 = 8.0;
    const PLOT_H: f64 = 300.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 60.0;
    let n = report.per_layer.len() as f64;
    let width = LEFT + n * BAR + 20.0;
    let height = TOP + PLOT_H + 40.0;
    let max_share = report
        .per_layer
        .iter()
        .map(|l| l.mac_share)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let (enc, cheap) = encoder_vs_cheap_share(report);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="18">MAC share per layer ({}, {}), input {}</text>"#,
        xml_escape(&report.unit),
        report.convention,
        report.input_shape
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="34">encoders {enc:.4}, decoders+middle {cheap:.4}; total {} MACs, {} params</text>"#,
        report.totals.macs, report.totals.params
    );
    let base = TOP + PLOT_H;
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{base}" x2="{:.1}" y2="{base}" stroke="#000"/>"##,
        width - 20.0
    );
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="#000"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.1}">{max_share:.3}</text>"#,
        TOP + 4.0
    );
    let _ = writeln!(s, r#"<text x="4" y="{base:.1}">0</text>"#);
    for (i, l) in report.per_layer.iter().enumerate() {
        let h = l.mac_share / max_share * PLOT_H;
        let x = LEFT + i as f64 * BAR;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.3}" width="{:.1}" height="{h:.3}" fill="{}"><title>{} {} {:.6}</title></rect>"#,
            base - h,
            BAR - 1.0,
            stage_colour(l.stage),
            xml_escape(&l.id),
            l.stage,
            l.mac_share
        );
    }
    let legend = [
        ("encoder", Stage::Enc1),
        ("middle", Stage::Middle),
        ("decoder", Stage::Dec1),
        ("up/down", Stage::UpDown),
        ("io", Stage::Input),
    ];
    for (i, (name, st)) in legend.iter().enumerate() {
        let x = LEFT + i as f64 * 90.0;
        let y = base + 16.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            stage_colour(*st),
            x + 14.0,
            y + 9.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_distribution_chart(report: &CostReport, path: &Path) -> Result<()> {
    write_file(path, &render_distribution_chart(report)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = MofaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(MofaError::Parse(format!("unknown table format {other:?}"))),
        }
    }
}

const TRAJECTORY_COLUMNS: [&str; 8] = [
    "pass",
    "layers_rewritten",
    "params_before",
    "params_after",
    "params_delta",
    "macs_before",
    "macs_after",
    "macs_delta",
];

fn trajectory_records(trace: &PassTrace) -> Vec<[String; 8]> {
    trace
        .rows
        .iter()
        .map(|r| {
            [
                r.pass.clone(),
                r.layers_rewritten.to_string(),
                r.params_before.to_string(),
                r.params_after.to_string(),
                r.params_delta().to_string(),
                r.macs_before.to_string(),
                r.macs_after.to_string(),
                r.macs_delta().to_string(),
            ]
        })
        .collect()
}

fn published_reference_markdown(out: &mut String) {
    out.push_str(
        "\nPublished reference values (citation only, measured on the original network; not reproduced here):\n\n",
    );
    out.push_str("| stage | FLOPs (G) | params (M) |\n|---|---|---|\n");
    for (name, v) in PUBLISHED_TRAJECTORY {
        match v {
            Some((g, m)) => {
                let _ = writeln!(out, "| {name} | {g:.2} | {m:.2} |");
            }
            None => {
                let _ = writeln!(out, "| {name} | n/a | n/a |");
            }
        }
    }
}

/// Renders a pass trace. With `published_reference` the published numbers are
/// appended in a separately labelled block, never mixed into the rows.
pub fn render_trajectory_table(
    trace: &PassTrace,
    format: TableFormat,
    published_reference: bool,
) -> Result<String> {
    if trace.rows.is_empty() {
        return Err(MofaError::EmptyReport);
    }
    let records = trajectory_records(trace);
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<&str> = TRAJECTORY_COLUMNS.to_vec();
            header.push("unit");
            w.write_record(&header)?;
            for r in &records {
                let mut row: Vec<&str> = r.iter().map(String::as_str).collect();
                row.push(&trace.unit);
                w.write_record(&row)?;
            }
            let bytes = w.into_inner().map_err(|e| MofaError::Io(e.into_error()))?;
            let mut s = String::from_utf8(bytes).expect("csv output is utf-8");
            if published_reference {
                for (name, v) in PUBLISHED_TRAJECTORY {
                    if let Some((g, m)) = v {
                        let _ = writeln!(s, "# published reference (citation): {name} {g:.2} G {m:.2} M");
                    }
                }
            }
            Ok(s)
        }
        TableFormat::Json => {
            let mut v = serde_json::to_value(trace)?;
            let obj = v.as_object_mut().expect("trace serializes to an object");
            obj.insert("generator_version".into(), GENERATOR_VERSION.into());
            if published_reference {
                let refs: Vec<serde_json::Value> = PUBLISHED_TRAJECTORY
                    .iter()
                    .map(|(name, v)| {
                        serde_json::json!({
                            "stage": name,
                            "flops_g": v.map(|x| x.0),
                            "params_m": v.map(|x| x.1),
                        })
                    })
                    .collect();
                obj.insert(
                    "published_reference".into(),
                    serde_json::json!({ "label": "citation only, not reproduced", "rows": refs }),
                );
            }
            Ok(serde_json::to_string_pretty(&v)? + "\n")
        }
        TableFormat::Markdown => {
            let mut s = format!(
                "Pass trajectory, input {}, unit: {}\n\n",
                trace.input_shape, trace.unit
            );
            let _ = writeln!(s, "| {} |", TRAJECTORY_COLUMNS.join(" | "));
            let _ = writeln!(s, "|{}", "---|".repeat(TRAJECTORY_COLUMNS.len()));
            for r in &records {
                let _ = writeln!(s, "| {} |", r.join(" | "));
            }
            if published_reference {
                published_reference_markdown(&mut s);
            }
            Ok(s)
        }
    }
}

pub fn emit_trajectory_table(
    trace: &PassTrace,
    format: TableFormat,
    published_reference: bool,
    path: &Path,
) -> Result<()> {
    write_file(path, &render_trajectory_table(trace, format, published_reference)?)
}

/// Cells of the first pipe table in `text`, header and separator skipped.
pub fn parse_markdown_table(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(str::trim)
        .skip_while(|l| !l.starts_with('|'))
        .take_while(|l| l.starts_with('|'))
        .skip(2)
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub kind: String,
    pub shape: Dims4,
    pub iterations: usize,
    pub median_ns: u64,
    /// Median absolute deviation of the per-iteration times.
    pub mad_ns: u64,
    pub min_ns: u64,
    pub multiplies: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub label: String,
    pub environment: String,
    pub entries: Vec<BenchEntry>,
}

impl BenchResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "shape", "iterations", "median_ns", "mad_ns", "min_ns", "multiplies", "label"])?;
        for e in &self.entries {
            w.write_record([
                e.kind.clone(),
                e.shape.to_string(),
                e.iterations.to_string(),
                e.median_ns.to_string(),
                e.mad_ns.to_string(),
                e.min_ns.to_string(),
                e.multiplies.to_string(),
                self.label.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| MofaError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Layer for a short op name at `channels`, 3×3 kernels, portion 1/4.
pub fn bench_kind(name: &str, channels: usize) -> Result<LayerKind> {
    let c = ConvSpec::new(channels, channels, 3, 1, true);
    Ok(match name {
        "vanilla" => LayerKind::VanillaConv(c),
        "dw" => LayerKind::DepthwiseConv(c),
        "pw" => LayerKind::PointwiseConv(ConvSpec::new(channels, channels, 1, 1, true)),
        "sep" => LayerKind::SeparableConv {
            depthwise: ConvSpec::new(channels, channels, 3, 1, false),
            pointwise: ConvSpec::new(channels, channels, 1, 1, true),
        },
        "pconv" => LayerKind::PConv { conv: c, portion: Portion::QUARTER },
        "pdw" => LayerKind::PdwConv { conv: c, portion: Portion::QUARTER },
        "deconv" => LayerKind::Deconv(ConvSpec::new(channels, channels, 3, 2, true)),
        other => return Err(MofaError::Parse(format!("unknown op {other:?}"))),
    })
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// Times each `(kind, shape)` case on the calling thread. Every case gets
/// at least [`MIN_ITERATIONS`] runs and keeps going until its share of
/// `budget` is spent.
pub fn microbench(cases: &[(LayerKind, Dims4)], budget: Duration) -> Result<BenchResult> {
    if budget.is_zero() {
        return Err(MofaError::Config("bench budget must be positive".into()));
    }
    let per_case = budget / cases.len().max(1) as u32;
    let mut entries = Vec::with_capacity(cases.len());
    for (kind, shape) in cases {
        let node = LayerNode::new("bench", *kind, Stage::Enc1, Role::Body, vec!["x".into()]);
        let g = NetGraph { nodes: vec![node.clone()], skips: vec![] };
        let w = Weights::init(&g, 0);
        let x = Tensor::from_seed(*shape, 0)?;
        let expected = layer_macs(kind, *shape)?;
        let mut times = Vec::new();
        let mut multiplies = 0;
        let start = Instant::now();
        while times.len() < MIN_ITERATIONS || start.elapsed() < per_case {
            let t = Instant::now();
            let (y, muls) = run_layer(&node, w.get("bench"), &[&x])?;
            times.push(t.elapsed().as_nanos() as u64);
            std::hint::black_box(y);
            multiplies = muls;
        }
        debug_assert_eq!(multiplies, expected);
        times.sort_unstable();
        let med = median(&times);
        let mut dev: Vec<u64> = times.iter().map(|t| t.abs_diff(med)).collect();
        dev.sort_unstable();
        entries.push(BenchEntry {
            kind: kind.name().to_string(),
            shape: *shape,
            iterations: times.len(),
            median_ns: med,
            mad_ns: median(&dev),
            min_ns: times[0],
            multiplies,
        });
    }
    Ok(BenchResult {
        label: BENCH_LABEL.to_string(),
        environment: format!(
            "{}-{}, single thread, debug_assertions={}",
            std::env::consts::OS,
            std::env::consts::ARCH,
            cfg!(debug_assertions)
        ),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{analyze, Convention};
    use crate::builders::{build_pmrid_like, ModelConfig};
    use crate::passes::{run_roadmap, PassId, PassPlan};

    fn baseline_report() -> CostReport {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        analyze(&g, Dims4::new(1, 3, 256, 256), Convention::AllVanillaEstimate).unwrap()
    }

    #[test]
    fn chart_is_deterministic_and_labelled() {
        let r = baseline_report();
        let (enc, cheap) = encoder_vs_cheap_share(&r);
        assert!(enc > cheap);
        let a = render_distribution_chart(&r).unwrap();
        assert_eq!(a, render_distribution_chart(&r).unwrap());
        assert!(a.contains("MACs, bias excluded"));
        assert_eq!(a.matches("<rect").count(), r.per_layer.len() + 5);
    }

    #[test]
    fn empty_report_rejected() {
        let mut r = baseline_report();
        r.per_layer.clear();
        assert!(matches!(render_distribution_chart(&r), Err(MofaError::EmptyReport)));
    }

    #[test]
    fn markdown_round_trips_csv() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        let (_, trace) = run_roadmap(&g, &PassPlan::default()).unwrap();
        let md = render_trajectory_table(&trace, TableFormat::Markdown, true).unwrap();
        let csv_text = render_trajectory_table(&trace, TableFormat::Csv, false).unwrap();
        let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
        let csv_rows: Vec<Vec<String>> = rdr
            .records()
            .map(|r| r.unwrap().iter().take(TRAJECTORY_COLUMNS.len()).map(String::from).collect())
            .collect();
        assert_eq!(csv_rows.len(), 5);
        assert_eq!(parse_markdown_table(&md), csv_rows);
        assert!(md.contains("citation only"));
        assert!(md.contains("MACs, bias excluded"));
    }

    #[test]
    fn json_has_generator_version() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        let (_, trace) = run_roadmap(&g, &PassPlan::only(&[PassId::Pconv])).unwrap();
        let j: serde_json::Value =
            serde_json::from_str(&render_trajectory_table(&trace, TableFormat::Json, false).unwrap()).unwrap();
        assert_eq!(j["generator_version"], GENERATOR_VERSION);
        assert_eq!(j["rows"].as_array().unwrap().len(), 1);
        assert!(j.get("published_reference").is_none());
    }

    #[test]
    fn empty_trace_rejected() {
        let trace = PassTrace { unit: "x".into(), input_shape: Dims4::new(1, 3, 8, 8), rows: vec![] };
        assert!(render_trajectory_table(&trace, TableFormat::Csv, false).is_err());
    }

    #[test]
    fn bench_counts_pdw_vs_pconv() {
        let shape = Dims4::new(1, 256, 32, 32);
        let cases = [(bench_kind("pconv", 256).unwrap(), shape), (bench_kind("pdw", 256).unwrap(), shape)];
        let r = microbench(&cases, Duration::from_millis(1)).unwrap();
        assert_eq!(r.label, BENCH_LABEL);
        assert!(r.entries.iter().all(|e| e.iterations >= MIN_ITERATIONS));
        // c_p = 64
        assert_eq!(r.entries[0].multiplies, 64 * r.entries[1].multiplies);
        assert!(microbench(&[], Duration::from_millis(1)).unwrap().entries.is_empty());
        assert!(microbench(&cases, Duration::ZERO).is_err());
    }
}
