//! Analytical parameter and MAC cost model.
//!
//! One MAC is one multiply–accumulate. Bias additions, activations, pooling,
//! interpolation and skip merges cost zero MACs; bias terms do count as
//! parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MofaError, Result};
use crate::ir::{infer_node_shapes, ConvSpec, LayerKind, NetGraph, Stage};
use crate::tensor::Dims4;

/// Recorded in every report and emitted file.
pub const MAC_UNIT: &str = "MACs, bias excluded";

/// Stage share below which a body stage counts as cheap. Sits between the
/// middle stage (≈2.5%) and the lightest encoder stage (≈13%) of the
/// default config.
pub const DEFAULT_CHEAP_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Costs of the layers as they are.
    Actual,
    /// Every conv costed as a dense conv with the same in/out channels and
    /// kernel; skip-merge layers excluded.
    AllVanillaEstimate,
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Actual => "actual",
            Convention::AllVanillaEstimate => "all-vanilla-estimate",
        })
    }
}

impl std::str::FromStr for Convention {
    type Err = MofaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actual" => Ok(Convention::Actual),
            "vanilla" | "all-vanilla-estimate" => Ok(Convention::AllVanillaEstimate),
            _ => Err(MofaError::Parse(format!("unknown convention `{s}`"))),
        }
    }
}

fn conv_params(c: &ConvSpec, weights: u64) -> u64 {
    weights + if c.bias { c.out_ch as u64 } else { 0 }
}

pub fn layer_params(kind: &LayerKind) -> u64 {
    let k2 = |c: &ConvSpec| (c.kernel * c.kernel) as u64;
    match kind {
        LayerKind::VanillaConv(c) | LayerKind::PointwiseConv(c) | LayerKind::Deconv(c) => {
            conv_params(c, (c.out_ch * c.in_ch) as u64 * k2(c))
        }
        LayerKind::DepthwiseConv(c) => conv_params(c, c.in_ch as u64 * k2(c)),
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => layer_params(&LayerKind::DepthwiseConv(*depthwise))
            + layer_params(&LayerKind::PointwiseConv(*pointwise)),
        LayerKind::PConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch) as u64;
            cp * cp * k2(conv) + if conv.bias { cp } else { 0 }
        }
        LayerKind::PdwConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch) as u64;
            cp * k2(conv) + if conv.bias { cp } else { 0 }
        }
        LayerKind::AvgPool2x2
        | LayerKind::Interp2x { .. }
        | LayerKind::Activation { .. }
        | LayerKind::Add
        | LayerKind::ConcatSkip => 0,
    }
}

fn check_in(kind: &LayerKind, in_shape: Dims4) -> Result<()> {
    in_shape.check()?;
    if let Some((cin, _)) = kind.channels() {
        if cin != in_shape.c {
            return Err(MofaError::mismatch(
                kind.name(),
                format!("expected {cin} input channels, got {}", in_shape.c),
            ));
        }
    }
    Ok(())
}

fn out_area(c: &ConvSpec, s: Dims4) -> u64 {
    (c.out_extent(s.h) * c.out_extent(s.w) * s.n) as u64
}

pub fn layer_macs(kind: &LayerKind, in_shape: Dims4) -> Result<u64> {
    check_in(kind, in_shape)?;
    let k2 = |c: &ConvSpec| (c.kernel * c.kernel) as u64;
    Ok(match kind {
        LayerKind::VanillaConv(c) | LayerKind::PointwiseConv(c) => {
            out_area(c, in_shape) * (c.out_ch * c.in_ch) as u64 * k2(c)
        }
        LayerKind::DepthwiseConv(c) => out_area(c, in_shape) * c.in_ch as u64 * k2(c),
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => {
            let area = out_area(depthwise, in_shape);
            area * depthwise.in_ch as u64 * k2(depthwise)
                + area * (pointwise.in_ch * pointwise.out_ch) as u64
        }
        LayerKind::PConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch) as u64;
            out_area(conv, in_shape) * cp * cp * k2(conv)
        }
        LayerKind::PdwConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch) as u64;
            out_area(conv, in_shape) * cp * k2(conv)
        }
        LayerKind::Deconv(c) => {
            (in_shape.n * in_shape.h * in_shape.w) as u64 * (c.in_ch * c.out_ch) as u64 * k2(c)
        }
        _ => 0,
    })
}

/// Cost of `kind` if it were a dense conv with the same channel counts and
/// spatial kernel. Merge layers report zero.
pub fn layer_macs_vanilla_estimate(kind: &LayerKind, in_shape: Dims4) -> Result<u64> {
    check_in(kind, in_shape)?;
    let dense = |cin: usize, cout: usize, c: &ConvSpec| {
        out_area(c, in_shape) * (cin * cout * c.kernel * c.kernel) as u64
    };
    Ok(match kind {
        LayerKind::VanillaConv(c)
        | LayerKind::PointwiseConv(c)
        | LayerKind::DepthwiseConv(c)
        | LayerKind::PConv { conv: c, .. }
        | LayerKind::PdwConv { conv: c, .. } => dense(c.in_ch, c.out_ch, c),
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => dense(depthwise.in_ch, pointwise.out_ch, depthwise),
        LayerKind::Deconv(_) => layer_macs(kind, in_shape)?,
        _ => 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub stage: Stage,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub mac_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: Convention,
    pub unit: String,
    pub input_shape: Dims4,
    pub per_layer: Vec<LayerCost>,
    pub totals: Totals,
}

impl CostReport {
    /// Aggregate `mac_share` per stage, for stages present in the report.
    pub fn stage_shares(&self) -> BTreeMap<Stage, f64> {
        let mut m = BTreeMap::new();
        for l in &self.per_layer {
            *m.entry(l.stage).or_insert(0.0) += l.mac_share;
        }
        m
    }

    pub fn stage_share(&self, pred: impl Fn(Stage) -> bool) -> f64 {
        self.per_layer
            .iter()
            .filter(|l| pred(l.stage))
            .map(|l| l.mac_share)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per layer.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "stage", "kind", "params", "macs", "mac_share", "convention", "unit"])?;
        for l in &self.per_layer {
            w.write_record([
                l.id.as_str(),
                l.stage.as_str(),
                l.kind.as_str(),
                &l.params.to_string(),
                &l.macs.to_string(),
                &format!("{:.9}", l.mac_share),
                &self.convention.to_string(),
                &self.unit,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| MofaError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn analyze(g: &NetGraph, input: Dims4, convention: Convention) -> Result<CostReport> {
    let shapes = infer_node_shapes(g, input)?;
    let mut per_layer = Vec::with_capacity(shapes.len());
    for s in &shapes {
        let node = &g.nodes[s.index];
        let in_shape = s.inputs[0];
        let macs = match convention {
            Convention::Actual => layer_macs(&node.kind, in_shape),
            Convention::AllVanillaEstimate => layer_macs_vanilla_estimate(&node.kind, in_shape),
        }
        .map_err(|e| match e {
            MofaError::ShapeMismatch { detail, .. } => MofaError::mismatch(&node.id, detail),
            other => other,
        })?;
        per_layer.push(LayerCost {
            id: node.id.clone(),
            stage: node.stage,
            kind: node.kind.name().to_string(),
            params: layer_params(&node.kind),
            macs,
            mac_share: 0.0,
        });
    }
    let totals = Totals {
        params: per_layer.iter().map(|l| l.params).sum(),
        macs: per_layer.iter().map(|l| l.macs).sum(),
    };
    if totals.macs > 0 {
        for l in &mut per_layer {
            l.mac_share = l.macs as f64 / totals.macs as f64;
        }
    }
    Ok(CostReport {
        convention,
        unit: MAC_UNIT.to_string(),
        input_shape: input,
        per_layer,
        totals,
    })
}

/// Body stages (encoders, middle, decoders) whose aggregate MAC share is
/// below `threshold_share`. Meant for reports in the all-vanilla convention.
pub fn cheap_layers(report: &CostReport, threshold_share: f64) -> BTreeSet<Stage> {
    report
        .stage_shares()
        .into_iter()
        .filter(|(st, share)| Stage::BODY.contains(st) && *share < threshold_share)
        .map(|(st, _)| st)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::{build_pmrid_like, ModelConfig};
    use crate::ir::Portion;

    fn spec(i: usize, o: usize, k: usize) -> ConvSpec {
        ConvSpec::new(i, o, k, 1, true)
    }

    // Expected counts below come from enumerating weight tensors:
    // out*in*k*k (+out) and c_p*c_p*k*k (+c_p) etc.
    #[test]
    fn params_by_kind() {
        assert_eq!(layer_params(&LayerKind::VanillaConv(spec(3, 16, 3))), 448);
        let pconv = LayerKind::PConv { conv: spec(64, 64, 3), portion: Portion::QUARTER };
        assert_eq!(layer_params(&pconv), 2320);
        let pdw = LayerKind::PdwConv { conv: spec(64, 64, 3), portion: Portion::QUARTER };
        assert_eq!(layer_params(&pdw), 160);
        assert_eq!(layer_params(&LayerKind::DepthwiseConv(spec(8, 8, 3))), 8 * 9 + 8);
        let sep = LayerKind::SeparableConv {
            depthwise: ConvSpec::new(8, 8, 5, 1, false),
            pointwise: spec(8, 4, 1),
        };
        assert_eq!(layer_params(&sep), 8 * 25 + 8 * 4 + 4);
        assert_eq!(layer_params(&LayerKind::Deconv(ConvSpec::new(8, 4, 3, 2, true))), 8 * 4 * 9 + 4);
        assert_eq!(layer_params(&LayerKind::Add), 0);
    }

    #[test]
    fn macs_by_kind() {
        let v = LayerKind::VanillaConv(spec(3, 16, 3));
        assert_eq!(layer_macs(&v, Dims4::new(1, 3, 256, 256)).unwrap(), 28_311_552);
        let p = LayerKind::PConv { conv: spec(64, 64, 3), portion: Portion::QUARTER };
        assert_eq!(layer_macs(&p, Dims4::new(1, 64, 8, 8)).unwrap(), 147_456);
        let one = LayerKind::VanillaConv(spec(1, 1, 1));
        assert_eq!(layer_macs(&one, Dims4::new(1, 1, 1, 1)).unwrap(), 1);
        let d = LayerKind::Deconv(ConvSpec::new(8, 4, 3, 2, true));
        assert_eq!(layer_macs(&d, Dims4::new(1, 8, 5, 6)).unwrap(), 5 * 6 * 8 * 4 * 9);
        assert_eq!(layer_macs(&LayerKind::Add, Dims4::new(1, 8, 5, 6)).unwrap(), 0);
    }

    #[test]
    fn macs_channel_mismatch() {
        let v = LayerKind::VanillaConv(spec(3, 16, 3));
        assert!(matches!(
            layer_macs(&v, Dims4::new(1, 4, 8, 8)),
            Err(MofaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pconv_ratio_is_portion_squared() {
        for c in [8usize, 16, 64, 128] {
            for (portion, inv_sq) in [(Portion::QUARTER, 16), (Portion::HALF, 4)] {
                let shape = Dims4::new(1, c, 6, 7);
                let p = layer_macs(&LayerKind::PConv { conv: spec(c, c, 3), portion }, shape).unwrap();
                let v = layer_macs(&LayerKind::VanillaConv(spec(c, c, 3)), shape).unwrap();
                assert_eq!(p * inv_sq, v);
            }
        }
    }

    #[test]
    fn totals_and_shares() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        for conv in [Convention::Actual, Convention::AllVanillaEstimate] {
            let r = analyze(&g, Dims4::new(1, 3, 256, 256), conv).unwrap();
            assert_eq!(r.totals.params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
            assert_eq!(r.totals.macs, r.per_layer.iter().map(|l| l.macs).sum::<u64>());
            let s: f64 = r.per_layer.iter().map(|l| l.mac_share).sum();
            assert!((s - 1.0).abs() < 1e-9);
            let order: Vec<&str> = r.per_layer.iter().map(|l| l.id.as_str()).collect();
            let nodes: Vec<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
            assert_eq!(order, nodes);
        }
    }

    #[test]
    fn default_cheap_stages() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        let r = analyze(&g, Dims4::new(1, 3, 256, 256), Convention::AllVanillaEstimate).unwrap();
        let cheap = cheap_layers(&r, DEFAULT_CHEAP_THRESHOLD);
        let want: BTreeSet<Stage> =
            [Stage::Middle, Stage::Dec1, Stage::Dec2, Stage::Dec3, Stage::Dec4].into();
        assert_eq!(cheap, want);
        assert!(cheap_layers(&r, 0.0).is_empty());
        assert_eq!(cheap_layers(&r, 1.0), Stage::BODY.into_iter().collect());
    }

    #[test]
    fn encoders_dominate_estimate() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        let r = analyze(&g, Dims4::new(1, 3, 256, 256), Convention::AllVanillaEstimate).unwrap();
        let enc = r.stage_share(|s| s.is_encoder());
        let rest = r.stage_share(|s| s.is_decoder() || s == Stage::Middle);
        assert!(enc > rest, "{enc} vs {rest}");
    }

    #[test]
    fn csv_has_row_per_layer() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        let r = analyze(&g, Dims4::new(1, 3, 64, 64), Convention::Actual).unwrap();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), r.per_layer.len() + 1);
        assert!(csv.contains(MAC_UNIT));
    }
}
