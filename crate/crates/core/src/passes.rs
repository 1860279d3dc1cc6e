//! The simplification roadmap as ordered graph rewrites:
//!
//! 1. `P1_pconv`: separable/vanilla body convs become partial convs (p = 1/4)
//! 2. `P2_middle`: widen partial convs in one encoder/decoder pair
//! 3. `P3_cheap`: widen partial convs in the stages with small MAC share
//! 4. `P4_updown`: decouple resampling from convolution
//! 5. `P5_pdw`: partial convs with enough active channels become partial
//!    depthwise convs
//!
//! Every pass is a pure `NetGraph -> NetGraph` function and idempotent.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analyzer::{analyze, cheap_layers, Convention, DEFAULT_CHEAP_THRESHOLD, MAC_UNIT};
use crate::error::{MofaError, Result};
use crate::ir::{
    output_shape, validate, ConvSpec, InterpMode, LayerKind, LayerNode, NetGraph, Portion, Role,
    Stage,
};
use crate::tensor::Dims4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PassId {
    #[serde(rename = "P1_pconv")]
    Pconv,
    #[serde(rename = "P2_middle")]
    Middle,
    #[serde(rename = "P3_cheap")]
    Cheap,
    #[serde(rename = "P4_updown")]
    UpDown,
    #[serde(rename = "P5_pdw")]
    Pdw,
}

impl PassId {
    pub const ALL: [PassId; 5] = [
        PassId::Pconv,
        PassId::Middle,
        PassId::Cheap,
        PassId::UpDown,
        PassId::Pdw,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PassId::Pconv => "P1_pconv",
            PassId::Middle => "P2_middle",
            PassId::Cheap => "P3_cheap",
            PassId::UpDown => "P4_updown",
            PassId::Pdw => "P5_pdw",
        }
    }
}

impl fmt::Display for PassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdownScope {
    #[default]
    UpsampleOnly,
    Both,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PassPlan {
    pub enabled: Vec<PassId>,
    pub middle_pair: (Stage, Stage),
    pub widen_portion: Portion,
    /// Partial convs with at least this many active channels become PDWConv.
    pub pdw_threshold: usize,
    /// Require strictly more than `pdw_threshold` active channels.
    pub strict_threshold: bool,
    pub updown_scope: UpdownScope,
    pub cheap_threshold: f64,
    /// `[C, H, W]` used for trace costs and the cheap-stage analysis.
    pub input: [usize; 3],
}

impl Default for PassPlan {
    fn default() -> Self {
        PassPlan {
            enabled: PassId::ALL.to_vec(),
            middle_pair: (Stage::Enc3, Stage::Dec2),
            widen_portion: Portion::HALF,
            pdw_threshold: 32,
            strict_threshold: false,
            updown_scope: UpdownScope::UpsampleOnly,
            cheap_threshold: DEFAULT_CHEAP_THRESHOLD,
            input: [3, 256, 256],
        }
    }
}

impl PassPlan {
    pub fn only(passes: &[PassId]) -> Self {
        PassPlan {
            enabled: passes.to_vec(),
            ..PassPlan::default()
        }
    }

    pub fn parse(text: &[u8]) -> Result<Self> {
        let plan: PassPlan = serde_json::from_slice(text)?;
        plan.check()?;
        Ok(plan)
    }

    pub fn input_shape(&self) -> Dims4 {
        Dims4::new(1, self.input[0], self.input[1], self.input[2])
    }

    pub fn check(&self) -> Result<()> {
        if self.enabled.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MofaError::Config(
                "enabled passes must be unique and in roadmap order".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cheap_threshold) {
            return Err(MofaError::Config("cheap_threshold must lie in [0, 1]".into()));
        }
        self.input_shape().check()
    }
}

/// Layers a partial conv replaces. Resampling and io layers are excluded.
fn p1_candidate(node: &LayerNode) -> Option<(ConvSpec, Option<usize>)> {
    if node.role != Role::Body {
        return None;
    }
    let (spec, out_ch) = match node.kind {
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => (depthwise, pointwise.out_ch),
        LayerKind::VanillaConv(c) => (c, c.out_ch),
        _ => return None,
    };
    if spec.stride != 1 {
        return None;
    }
    let conv = ConvSpec::new(spec.in_ch, spec.in_ch, spec.kernel, 1, true);
    Some((conv, (out_ch != spec.in_ch).then_some(out_ch)))
}

fn p1(g: &NetGraph) -> (NetGraph, usize) {
    let mut out = g.clone();
    let targets: Vec<(String, ConvSpec, Option<usize>)> = g
        .nodes
        .iter()
        .filter_map(|n| p1_candidate(n).map(|(c, o)| (n.id.clone(), c, o)))
        .collect();
    for (id, conv, out_ch) in &targets {
        let pos = out.position(id).expect("target exists");
        out.nodes[pos].kind = LayerKind::PConv {
            conv: *conv,
            portion: Portion::QUARTER,
        };
        // Channel change stays with a pointwise conv after the partial conv.
        if let Some(out_ch) = *out_ch {
            let n = &out.nodes[pos];
            let pw = LayerNode::new(
                format!("{id}.pw"),
                LayerKind::PointwiseConv(ConvSpec::new(conv.in_ch, out_ch, 1, 1, true)),
                n.stage,
                n.role,
                Vec::new(),
            );
            out.insert_after(id, pw).expect("target exists");
        }
    }
    (out, targets.len())
}

fn widen(g: &NetGraph, stages: &BTreeSet<Stage>, portion: Portion) -> (NetGraph, usize) {
    let mut out = g.clone();
    let mut count = 0;
    for n in &mut out.nodes {
        if !stages.contains(&n.stage) {
            continue;
        }
        if let LayerKind::PConv { portion: p, .. } = &mut n.kind {
            if *p != portion {
                *p = portion;
                count += 1;
            }
        }
    }
    (out, count)
}

fn p4(g: &NetGraph, scope: UpdownScope) -> (NetGraph, usize) {
    let mut out = g.clone();
    let mut count = 0;
    if scope == UpdownScope::None {
        return (out, 0);
    }
    let ups: Vec<(String, ConvSpec)> = g
        .nodes
        .iter()
        .filter(|n| n.role == Role::Upsample)
        .filter_map(|n| match n.kind {
            LayerKind::Deconv(c) => Some((n.id.clone(), c)),
            _ => None,
        })
        .collect();
    for (id, c) in ups {
        let pos = out.position(&id).expect("target exists");
        out.nodes[pos].kind = LayerKind::VanillaConv(ConvSpec { stride: 1, ..c });
        let n = &out.nodes[pos];
        let interp = LayerNode::new(
            format!("{id}.interp"),
            LayerKind::Interp2x {
                mode: InterpMode::Nearest,
            },
            n.stage,
            n.role,
            Vec::new(),
        );
        out.insert_after(&id, interp).expect("target exists");
        count += 1;
    }
    if scope == UpdownScope::Both {
        let downs: Vec<String> = g
            .nodes
            .iter()
            .filter(|n| n.role == Role::Downsample)
            .filter(|n| match n.kind {
                LayerKind::SeparableConv { depthwise, .. } => depthwise.stride == 2,
                LayerKind::VanillaConv(c) | LayerKind::DepthwiseConv(c) => c.stride == 2,
                _ => false,
            })
            .map(|n| n.id.clone())
            .collect();
        for id in downs {
            let pos = out.position(&id).expect("target exists");
            let n = &mut out.nodes[pos];
            match &mut n.kind {
                LayerKind::SeparableConv { depthwise, .. } => depthwise.stride = 1,
                LayerKind::VanillaConv(c) | LayerKind::DepthwiseConv(c) => c.stride = 1,
                _ => unreachable!("filtered above"),
            }
            let pool = LayerNode::new(
                format!("{id}.pool"),
                LayerKind::AvgPool2x2,
                n.stage,
                n.role,
                Vec::new(),
            );
            out.insert_before(&id, pool).expect("target exists");
            count += 1;
        }
    }
    (out, count)
}

fn p5(g: &NetGraph, threshold: usize, strict: bool) -> (NetGraph, usize) {
    let mut out = g.clone();
    let mut count = 0;
    for n in &mut out.nodes {
        if let LayerKind::PConv { conv, portion } = n.kind {
            let active = portion.active_channels(conv.in_ch);
            let convert = if strict {
                active > threshold
            } else {
                active >= threshold
            };
            if convert {
                n.kind = LayerKind::PdwConv { conv, portion };
                count += 1;
            }
        }
    }
    (out, count)
}

/// Replaces body separable convs (and non-io vanilla convs) with partial
/// convs at p = 1/4. When a layer changes channel count the partial conv
/// runs at the input width and a pointwise conv performs the change.
pub fn p1_to_pconv(g: &NetGraph) -> NetGraph {
    p1(g).0
}

pub fn p2_widen_middle(g: &NetGraph, pair: (Stage, Stage), portion: Portion) -> Result<NetGraph> {
    for st in [pair.0, pair.1] {
        if !g.has_stage(st) {
            return Err(MofaError::Stage(st.to_string()));
        }
    }
    Ok(widen(g, &[pair.0, pair.1].into(), portion).0)
}

pub fn p3_widen_cheap(g: &NetGraph, cheap: &BTreeSet<Stage>, portion: Portion) -> NetGraph {
    widen(g, cheap, portion).0
}

/// Upsampling deconvs become a stride-1 conv at low resolution followed by
/// 2× interpolation; with [`UpdownScope::Both`], stride-2 downsampling
/// convs become 2×2 average pooling followed by the same conv at stride 1.
pub fn p4_decouple_updown(g: &NetGraph, scope: UpdownScope) -> NetGraph {
    p4(g, scope).0
}

/// Converts partial convs whose active channel count `floor(d·p)` reaches
/// `threshold` (or exceeds it, when `strict`) to partial depthwise convs.
pub fn p5_pconv_to_pdw(g: &NetGraph, threshold: usize, strict: bool) -> NetGraph {
    p5(g, threshold, strict).0
}

/// Applies one pass with the plan's parameters; returns the new graph and
/// how many layers were rewritten.
pub fn apply_pass(g: &NetGraph, pass: PassId, plan: &PassPlan) -> Result<(NetGraph, usize)> {
    Ok(match pass {
        PassId::Pconv => p1(g),
        PassId::Middle => {
            p2_widen_middle(g, plan.middle_pair, plan.widen_portion)?;
            widen(g, &[plan.middle_pair.0, plan.middle_pair.1].into(), plan.widen_portion)
        }
        PassId::Cheap => {
            let report = analyze(g, plan.input_shape(), Convention::AllVanillaEstimate)?;
            let cheap = cheap_layers(&report, plan.cheap_threshold);
            widen(g, &cheap, plan.widen_portion)
        }
        PassId::UpDown => p4(g, plan.updown_scope),
        PassId::Pdw => p5(g, plan.pdw_threshold, plan.strict_threshold),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub pass: String,
    pub layers_rewritten: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
}

impl TraceRow {
    pub fn params_delta(&self) -> i64 {
        self.params_after as i64 - self.params_before as i64
    }

    pub fn macs_delta(&self) -> i64 {
        self.macs_after as i64 - self.macs_before as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassTrace {
    pub unit: String,
    pub input_shape: Dims4,
    pub rows: Vec<TraceRow>,
}

impl PassTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(text)?)
    }
}

fn invalid(v: Vec<crate::ir::Violation>) -> MofaError {
    let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
    MofaError::Graph(msgs.join("; "))
}

/// Runs the enabled passes in order, recording actual-convention costs
/// before and after each one.
pub fn run_roadmap(g: &NetGraph, plan: &PassPlan) -> Result<(NetGraph, PassTrace)> {
    plan.check()?;
    validate(g).map_err(invalid)?;
    let input = plan.input_shape();
    let end_to_end = output_shape(g, input)?;
    if plan.enabled.contains(&PassId::Pdw)
        && !plan.enabled.contains(&PassId::Pconv)
        && !g.contains_kind(|k| matches!(k, LayerKind::PConv { .. }))
    {
        return Err(MofaError::Config("P5_pdw requires P1_pconv".into()));
    }

    let mut current = g.clone();
    let mut before = analyze(&current, input, Convention::Actual)?.totals;
    let mut rows = Vec::with_capacity(plan.enabled.len());
    for &pass in &plan.enabled {
        let (next, rewritten) = apply_pass(&current, pass, plan)?;
        validate(&next).map_err(invalid)?;
        let after = analyze(&next, input, Convention::Actual)?.totals;
        rows.push(TraceRow {
            pass: pass.to_string(),
            layers_rewritten: rewritten,
            params_before: before.params,
            params_after: after.params,
            macs_before: before.macs,
            macs_after: after.macs,
        });
        current = next;
        before = after;
    }
    let final_shape = output_shape(&current, input)?;
    if final_shape != end_to_end {
        return Err(MofaError::mismatch(
            "output",
            format!("roadmap changed end-to-end shape {end_to_end} -> {final_shape}"),
        ));
    }
    Ok((
        current,
        PassTrace {
            unit: MAC_UNIT.to_string(),
            input_shape: input,
            rows,
        },
    ))
}
