//! Typed layer graph for U-Net-style networks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MofaError, Result};
use crate::tensor::Dims4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride,
            bias,
        }
    }

    /// Same-style padding for odd kernels.
    pub fn padding(&self) -> usize {
        self.kernel.saturating_sub(1) / 2
    }

    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

/// Fraction of channels a partial convolution touches. Active channel count
/// is `floor(channels * num / den)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Portion {
    num: u32,
    den: u32,
}

impl Portion {
    pub const QUARTER: Portion = Portion { num: 1, den: 4 };
    pub const HALF: Portion = Portion { num: 1, den: 2 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(MofaError::Parse(format!(
                "portion must lie in (0, 1], got {num}/{den}"
            )));
        }
        Ok(Portion { num, den })
    }

    pub fn active_channels(&self, channels: usize) -> usize {
        channels * self.num as usize / self.den as usize
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

impl fmt::Display for Portion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Portion {
    type Err = MofaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MofaError::Parse(format!("portion must look like `1/4`, got `{s}`"));
        let (a, b) = s.split_once('/').ok_or_else(bad)?;
        let num = a.trim().parse().map_err(|_| bad())?;
        let den = b.trim().parse().map_err(|_| bad())?;
        Portion::new(num, den)
    }
}

impl Serialize for Portion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Portion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMode {
    /// Each output pixel copies the input pixel at `(y / 2, x / 2)`.
    #[default]
    Nearest,
    /// Half-pixel centres with edge clamping.
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    #[default]
    Relu,
    /// Negative slope 1/8.
    LeakyRelu,
}

/// Partial kinds store the full channel width in `conv` (`in_ch == out_ch`);
/// only the first `portion.active_channels(in_ch)` channels are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    VanillaConv(ConvSpec),
    DepthwiseConv(ConvSpec),
    PointwiseConv(ConvSpec),
    SeparableConv {
        depthwise: ConvSpec,
        pointwise: ConvSpec,
    },
    #[serde(rename = "pconv")]
    PConv { conv: ConvSpec, portion: Portion },
    #[serde(rename = "pdwconv")]
    PdwConv { conv: ConvSpec, portion: Portion },
    /// Transposed convolution, stride 2, output exactly twice the input extent.
    Deconv(ConvSpec),
    AvgPool2x2,
    Interp2x { mode: InterpMode },
    Activation { act: ActivationKind },
    Add,
    ConcatSkip,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::VanillaConv(_) => "vanilla_conv",
            LayerKind::DepthwiseConv(_) => "depthwise_conv",
            LayerKind::PointwiseConv(_) => "pointwise_conv",
            LayerKind::SeparableConv { .. } => "separable_conv",
            LayerKind::PConv { .. } => "pconv",
            LayerKind::PdwConv { .. } => "pdwconv",
            LayerKind::Deconv(_) => "deconv",
            LayerKind::AvgPool2x2 => "avg_pool_2x2",
            LayerKind::Interp2x { .. } => "interp_2x",
            LayerKind::Activation { .. } => "activation",
            LayerKind::Add => "add",
            LayerKind::ConcatSkip => "concat_skip",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerKind::VanillaConv(_)
                | LayerKind::DepthwiseConv(_)
                | LayerKind::PointwiseConv(_)
                | LayerKind::SeparableConv { .. }
                | LayerKind::PConv { .. }
                | LayerKind::PdwConv { .. }
                | LayerKind::Deconv(_)
        )
    }

    pub fn is_merge(&self) -> bool {
        matches!(self, LayerKind::Add | LayerKind::ConcatSkip)
    }

    /// `(in_ch, out_ch)` for kinds that fix their channel counts.
    pub fn channels(&self) -> Option<(usize, usize)> {
        match self {
            LayerKind::VanillaConv(c)
            | LayerKind::DepthwiseConv(c)
            | LayerKind::PointwiseConv(c)
            | LayerKind::Deconv(c)
            | LayerKind::PConv { conv: c, .. }
            | LayerKind::PdwConv { conv: c, .. } => Some((c.in_ch, c.out_ch)),
            LayerKind::SeparableConv {
                depthwise,
                pointwise,
            } => Some((depthwise.in_ch, pointwise.out_ch)),
            _ => None,
        }
    }

    /// Spatial kernel of conv kinds (the depthwise kernel for separables).
    pub fn kernel(&self) -> Option<usize> {
        match self {
            LayerKind::VanillaConv(c)
            | LayerKind::DepthwiseConv(c)
            | LayerKind::PointwiseConv(c)
            | LayerKind::Deconv(c)
            | LayerKind::PConv { conv: c, .. }
            | LayerKind::PdwConv { conv: c, .. } => Some(c.kernel),
            LayerKind::SeparableConv { depthwise, .. } => Some(depthwise.kernel),
            _ => None,
        }
    }

    /// Change in spatial scale, as a power of two.
    fn scale_shift(&self) -> i32 {
        match self {
            LayerKind::VanillaConv(c)
            | LayerKind::DepthwiseConv(c)
            | LayerKind::PointwiseConv(c)
            | LayerKind::PConv { conv: c, .. }
            | LayerKind::PdwConv { conv: c, .. } => -((c.stride == 2) as i32),
            LayerKind::SeparableConv { depthwise, .. } => -((depthwise.stride == 2) as i32),
            LayerKind::AvgPool2x2 => -1,
            LayerKind::Deconv(_) | LayerKind::Interp2x { .. } => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Input,
    Enc1,
    Enc2,
    Enc3,
    Enc4,
    Middle,
    Dec1,
    Dec2,
    Dec3,
    Dec4,
    Output,
    UpDown,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Input,
        Stage::Enc1,
        Stage::Enc2,
        Stage::Enc3,
        Stage::Enc4,
        Stage::Middle,
        Stage::Dec1,
        Stage::Dec2,
        Stage::Dec3,
        Stage::Dec4,
        Stage::Output,
        Stage::UpDown,
    ];
    pub const ENCODERS: [Stage; 4] = [Stage::Enc1, Stage::Enc2, Stage::Enc3, Stage::Enc4];
    pub const DECODERS: [Stage; 4] = [Stage::Dec1, Stage::Dec2, Stage::Dec3, Stage::Dec4];
    /// Stages made of repeated body blocks, i.e. the candidates for widening.
    pub const BODY: [Stage; 9] = [
        Stage::Enc1,
        Stage::Enc2,
        Stage::Enc3,
        Stage::Enc4,
        Stage::Middle,
        Stage::Dec1,
        Stage::Dec2,
        Stage::Dec3,
        Stage::Dec4,
    ];

    pub fn encoder(i: usize) -> Option<Stage> {
        Stage::ENCODERS.get(i.checked_sub(1)?).copied()
    }

    pub fn decoder(i: usize) -> Option<Stage> {
        Stage::DECODERS.get(i.checked_sub(1)?).copied()
    }

    pub fn is_encoder(&self) -> bool {
        Stage::ENCODERS.contains(self)
    }

    pub fn is_decoder(&self) -> bool {
        Stage::DECODERS.contains(self)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::Enc1 => "enc1",
            Stage::Enc2 => "enc2",
            Stage::Enc3 => "enc3",
            Stage::Enc4 => "enc4",
            Stage::Middle => "middle",
            Stage::Dec1 => "dec1",
            Stage::Dec2 => "dec2",
            Stage::Dec3 => "dec3",
            Stage::Dec4 => "dec4",
            Stage::Output => "output",
            Stage::UpDown => "updown",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = MofaError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| MofaError::Stage(s.to_string()))
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Io,
    Body,
    Downsample,
    Upsample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub stage: Stage,
    pub role: Role,
    /// Producers, in operand order. Empty only for the input node.
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(
        id: impl Into<String>,
        kind: LayerKind,
        stage: Stage,
        role: Role,
        inputs: Vec<String>,
    ) -> Self {
        LayerNode {
            id: id.into(),
            kind,
            stage,
            role,
            inputs,
        }
    }

    pub fn is_graph_input(&self) -> bool {
        self.stage == Stage::Input && self.role == Role::Io
    }

    pub fn is_graph_output(&self) -> bool {
        self.stage == Stage::Output && self.role == Role::Io
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMerge {
    #[default]
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipLink {
    pub encoder: Stage,
    pub decoder: Stage,
    pub merge: SkipMerge,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetGraph {
    pub nodes: Vec<LayerNode>,
    #[serde(default)]
    pub skips: Vec<SkipLink>,
}

impl NetGraph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input_node(&self) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.is_graph_input())
    }

    pub fn output_node(&self) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.is_graph_output())
    }

    /// Producer→consumer pairs.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |p| (p.as_str(), n.id.as_str())))
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.nodes.iter().any(|n| n.stage == stage)
    }

    pub fn contains_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> bool {
        self.nodes.iter().any(|n| pred(&n.kind))
    }

    /// Node indices in dependency order. Ties keep list order, so a list
    /// that is already topologically sorted comes back unchanged.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for p in &n.inputs {
                let &pi = index.get(p.as_str()).ok_or_else(|| {
                    MofaError::Graph(format!("`{}` reads unknown node `{p}`", n.id))
                })?;
                indegree[i] += 1;
                consumers[pi].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(MofaError::Graph("graph must be acyclic".into()));
        }
        Ok(order)
    }

    /// Inserts `node` directly after `id`: `node` reads `id`, and every
    /// former consumer of `id` reads `node` instead.
    pub fn insert_after(&mut self, id: &str, mut node: LayerNode) -> Result<()> {
        let pos = self
            .position(id)
            .ok_or_else(|| MofaError::Graph(format!("no node `{id}`")))?;
        for n in &mut self.nodes {
            for p in &mut n.inputs {
                if p == id {
                    p.clone_from(&node.id);
                }
            }
        }
        node.inputs = vec![id.to_string()];
        self.nodes.insert(pos + 1, node);
        Ok(())
    }

    /// Inserts `node` directly before `id`: `node` takes over the inputs of
    /// `id`, and `id` reads `node`.
    pub fn insert_before(&mut self, id: &str, mut node: LayerNode) -> Result<()> {
        let pos = self
            .position(id)
            .ok_or_else(|| MofaError::Graph(format!("no node `{id}`")))?;
        node.inputs = std::mem::replace(&mut self.nodes[pos].inputs, vec![node.id.clone()]);
        self.nodes.insert(pos, node);
        Ok(())
    }
}

/// Input and output shape of one node, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeShapes {
    pub index: usize,
    pub inputs: Vec<Dims4>,
    pub output: Dims4,
}

/// Output shape of a single layer given its operand shapes.
pub fn layer_output_shape(node: &LayerNode, inputs: &[Dims4]) -> Result<Dims4> {
    let id = node.id.as_str();
    let first = *inputs
        .first()
        .ok_or_else(|| MofaError::mismatch(id, "layer has no operands"))?;
    let expect_channels = |want: usize| -> Result<()> {
        if first.c != want {
            return Err(MofaError::mismatch(
                id,
                format!("expected {want} input channels, got {}", first.c),
            ));
        }
        Ok(())
    };
    let single = || -> Result<()> {
        if inputs.len() != 1 {
            return Err(MofaError::mismatch(
                id,
                format!("expected 1 operand, got {}", inputs.len()),
            ));
        }
        Ok(())
    };
    let conv_out = |spec: &ConvSpec, from: Dims4| -> Result<Dims4> {
        if from.h + 2 * spec.padding() < spec.kernel || from.w + 2 * spec.padding() < spec.kernel
        {
            return Err(MofaError::mismatch(id, format!("input {from} smaller than kernel")));
        }
        Ok(Dims4::new(
            from.n,
            spec.out_ch,
            spec.out_extent(from.h),
            spec.out_extent(from.w),
        ))
    };
    match &node.kind {
        LayerKind::VanillaConv(c)
        | LayerKind::DepthwiseConv(c)
        | LayerKind::PointwiseConv(c)
        | LayerKind::PConv { conv: c, .. }
        | LayerKind::PdwConv { conv: c, .. } => {
            single()?;
            expect_channels(c.in_ch)?;
            conv_out(c, first)
        }
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => {
            single()?;
            expect_channels(depthwise.in_ch)?;
            let mid = conv_out(depthwise, first)?;
            if pointwise.in_ch != mid.c {
                return Err(MofaError::mismatch(
                    id,
                    "pointwise input channels differ from depthwise output",
                ));
            }
            conv_out(pointwise, mid)
        }
        LayerKind::Deconv(c) => {
            single()?;
            expect_channels(c.in_ch)?;
            Ok(Dims4::new(first.n, c.out_ch, first.h * 2, first.w * 2))
        }
        LayerKind::AvgPool2x2 => {
            single()?;
            Ok(Dims4::new(first.n, first.c, first.h.div_ceil(2), first.w.div_ceil(2)))
        }
        LayerKind::Interp2x { .. } => {
            single()?;
            Ok(Dims4::new(first.n, first.c, first.h * 2, first.w * 2))
        }
        LayerKind::Activation { .. } => {
            single()?;
            Ok(first)
        }
        LayerKind::Add => {
            if inputs.len() < 2 {
                return Err(MofaError::mismatch(id, "add needs at least 2 operands"));
            }
            if let Some(bad) = inputs.iter().find(|s| **s != first) {
                return Err(MofaError::mismatch(id, format!("cannot add {first} and {bad}")));
            }
            Ok(first)
        }
        LayerKind::ConcatSkip => {
            if inputs.len() != 2 {
                return Err(MofaError::mismatch(id, "concat needs exactly 2 operands"));
            }
            let b = inputs[1];
            if (b.n, b.h, b.w) != (first.n, first.h, first.w) {
                return Err(MofaError::mismatch(id, format!("cannot concat {first} and {b}")));
            }
            Ok(first.with_channels(first.c + b.c))
        }
    }
}

/// Per-node shapes in execution order for a given graph input shape.
pub fn infer_node_shapes(g: &NetGraph, input: Dims4) -> Result<Vec<NodeShapes>> {
    input.check()?;
    let order = g.topo_order()?;
    let mut out: Vec<Option<Dims4>> = vec![None; g.nodes.len()];
    let index: HashMap<&str, usize> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut result = Vec::with_capacity(order.len());
    for i in order {
        let node = &g.nodes[i];
        let inputs: Vec<Dims4> = if node.inputs.is_empty() {
            if !node.is_graph_input() {
                return Err(MofaError::Graph(format!("`{}` has no producer", node.id)));
            }
            vec![input]
        } else {
            node.inputs
                .iter()
                .map(|p| out[index[p.as_str()]].expect("producer visited before consumer"))
                .collect()
        };
        let shape = layer_output_shape(node, &inputs)?;
        out[i] = Some(shape);
        result.push(NodeShapes {
            index: i,
            inputs,
            output: shape,
        });
    }
    Ok(result)
}

/// Output shape of every node.
pub fn infer_shapes(g: &NetGraph, input: Dims4) -> Result<BTreeMap<String, Dims4>> {
    let shapes = infer_node_shapes(g, input)?;
    Ok(shapes
        .into_iter()
        .map(|s| (g.nodes[s.index].id.clone(), s.output))
        .collect())
}

/// End-to-end shape: the output node's shape for `input`.
pub fn output_shape(g: &NetGraph, input: Dims4) -> Result<Dims4> {
    let out = g
        .output_node()
        .ok_or_else(|| MofaError::Graph("graph has no output node".into()))?;
    let shapes = infer_shapes(g, input)?;
    Ok(shapes[&out.id])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<String>,
    pub message: String,
}

impl Violation {
    fn at(node: &str, message: impl Into<String>) -> Self {
        Violation {
            node: Some(node.to_string()),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Violation {
            node: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "{n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn check_conv(node: &str, spec: &ConvSpec, out: &mut Vec<Violation>) {
    if spec.kernel == 0 || spec.kernel.is_multiple_of(2) {
        out.push(Violation::at(node, format!("kernel must be odd, got {}", spec.kernel)));
    }
    if spec.stride != 1 && spec.stride != 2 {
        out.push(Violation::at(node, format!("stride must be 1 or 2, got {}", spec.stride)));
    }
    if spec.in_ch == 0 || spec.out_ch == 0 {
        out.push(Violation::at(node, "channel counts must be >= 1"));
    }
}

fn check_kind(node: &LayerNode, out: &mut Vec<Violation>) {
    let id = node.id.as_str();
    match &node.kind {
        LayerKind::VanillaConv(c) => check_conv(id, c, out),
        LayerKind::DepthwiseConv(c) => {
            check_conv(id, c, out);
            if c.in_ch != c.out_ch {
                out.push(Violation::at(id, "depthwise conv must keep channel count"));
            }
        }
        LayerKind::PointwiseConv(c) => {
            check_conv(id, c, out);
            if c.kernel != 1 {
                out.push(Violation::at(id, "pointwise conv must use a 1x1 kernel"));
            }
        }
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => {
            check_conv(id, depthwise, out);
            check_conv(id, pointwise, out);
            if depthwise.in_ch != depthwise.out_ch {
                out.push(Violation::at(id, "depthwise part must keep channel count"));
            }
            if pointwise.kernel != 1 || pointwise.stride != 1 {
                out.push(Violation::at(id, "pointwise part must be 1x1 stride 1"));
            }
            if pointwise.in_ch != depthwise.out_ch {
                out.push(Violation::at(id, "pointwise part must read the depthwise output"));
            }
        }
        LayerKind::PConv { conv, portion } | LayerKind::PdwConv { conv, portion } => {
            check_conv(id, conv, out);
            if conv.in_ch != conv.out_ch {
                out.push(Violation::at(id, "partial conv must keep channel count"));
            }
            if conv.stride != 1 {
                out.push(Violation::at(id, "partial conv must use stride 1"));
            }
            let cp = portion.active_channels(conv.in_ch);
            if cp == 0 {
                out.push(Violation::at(
                    id,
                    format!("portion too small: {portion} of {} channels is 0", conv.in_ch),
                ));
            } else if cp > conv.in_ch {
                out.push(Violation::at(id, "portion too large"));
            }
        }
        LayerKind::Deconv(c) => {
            check_conv(id, c, out);
            if c.stride != 2 {
                out.push(Violation::at(id, "deconv must use stride 2"));
            }
        }
        _ => {}
    }
    let arity = node.inputs.len();
    let arity_ok = match node.kind {
        LayerKind::Add => arity >= 2,
        LayerKind::ConcatSkip => arity == 2,
        _ => arity <= 1,
    };
    if !arity_ok {
        out.push(Violation::at(id, format!("wrong number of operands: {arity}")));
    }
}

/// Checks every structural invariant. Never panics; an empty `Err` is not
/// produced.
pub fn validate(g: &NetGraph) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut seen = HashSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id.as_str()) {
            v.push(Violation::at(&n.id, "duplicate node id"));
        }
    }
    let inputs = g.nodes.iter().filter(|n| n.is_graph_input()).count();
    let outputs = g.nodes.iter().filter(|n| n.is_graph_output()).count();
    if inputs != 1 {
        v.push(Violation::global(format!("expected exactly one input io node, found {inputs}")));
    }
    if outputs != 1 {
        v.push(Violation::global(format!(
            "expected exactly one output io node, found {outputs}"
        )));
    }
    for n in &g.nodes {
        check_kind(n, &mut v);
        if n.is_graph_input() {
            if !n.inputs.is_empty() {
                v.push(Violation::at(&n.id, "input node must not have producers"));
            }
            if !matches!(n.kind, LayerKind::VanillaConv(_)) {
                v.push(Violation::at(&n.id, "input layer must be a vanilla conv"));
            }
        } else if n.inputs.is_empty() {
            v.push(Violation::at(&n.id, "non-input node has no producer"));
        }
        if n.is_graph_output() && !matches!(n.kind, LayerKind::VanillaConv(_)) {
            v.push(Violation::at(&n.id, "output layer must be a vanilla conv"));
        }
        for p in &n.inputs {
            if g.node(p).is_none() {
                v.push(Violation::at(&n.id, format!("reads unknown node `{p}`")));
            }
        }
    }
    for s in &g.skips {
        for st in [s.encoder, s.decoder] {
            if !g.has_stage(st) {
                v.push(Violation::global(format!("skip refers to missing stage {st}")));
            }
        }
    }
    if !v.is_empty() {
        return Err(v);
    }

    let order = match g.topo_order() {
        Ok(o) => o,
        Err(_) => return Err(vec![Violation::global("graph must be acyclic")]),
    };
    if order.iter().enumerate().any(|(pos, &i)| pos != i) {
        v.push(Violation::global("node list is not in topological order"));
    }

    // Static propagation of channel count and log2 spatial scale; catches
    // channel mismatches and skip merges across resolutions without
    // committing to an input size.
    let mut state: HashMap<&str, (usize, i32)> = HashMap::new();
    for &i in &order {
        let n = &g.nodes[i];
        let operands: Vec<(usize, i32)> = if n.inputs.is_empty() {
            let c = n.kind.channels().map(|(i, _)| i).unwrap_or(0);
            vec![(c, 0)]
        } else {
            n.inputs.iter().filter_map(|p| state.get(p.as_str()).copied()).collect()
        };
        let Some(&(c0, s0)) = operands.first() else {
            continue;
        };
        let scale = s0 + n.kind.scale_shift();
        let channels = match &n.kind {
            LayerKind::Add => {
                if operands.iter().any(|&(c, s)| c != c0 || s != s0) {
                    v.push(Violation::at(&n.id, "skip shape mismatch: add operands differ"));
                }
                c0
            }
            LayerKind::ConcatSkip => {
                if operands.iter().any(|&(_, s)| s != s0) {
                    v.push(Violation::at(&n.id, "skip shape mismatch: concat resolutions differ"));
                }
                operands.iter().map(|&(c, _)| c).sum()
            }
            k => match k.channels() {
                Some((cin, cout)) => {
                    if cin != c0 {
                        v.push(Violation::at(
                            &n.id,
                            format!("expects {cin} input channels, producer gives {c0}"),
                        ));
                    }
                    cout
                }
                None => c0,
            },
        };
        state.insert(n.id.as_str(), (channels, scale));
    }
    if let (Some(inp), Some(out)) = (g.input_node(), g.output_node()) {
        let in_c = inp.kind.channels().map(|c| c.0);
        if let Some(&(c, s)) = state.get(out.id.as_str()) {
            if s != 0 {
                v.push(Violation::global("output resolution differs from input resolution"));
            }
            if Some(c) != in_c {
                v.push(Violation::global("output channels differ from input channels"));
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, kind: LayerKind, stage: Stage, role: Role, inputs: &[&str]) -> LayerNode {
        LayerNode::new(id, kind, stage, role, inputs.iter().map(|s| s.to_string()).collect())
    }

    fn tiny() -> NetGraph {
        NetGraph {
            nodes: vec![
                conv("in", LayerKind::VanillaConv(ConvSpec::new(3, 64, 3, 1, true)), Stage::Input, Role::Io, &[]),
                conv(
                    "p",
                    LayerKind::PConv { conv: ConvSpec::new(64, 64, 3, 1, true), portion: Portion::QUARTER },
                    Stage::Enc1,
                    Role::Body,
                    &["in"],
                ),
                conv("add", LayerKind::Add, Stage::Enc1, Role::Body, &["in", "p"]),
                conv("out", LayerKind::VanillaConv(ConvSpec::new(64, 3, 3, 1, true)), Stage::Output, Role::Io, &["add"]),
            ],
            skips: vec![],
        }
    }

    #[test]
    fn vanilla_shape() {
        let n = conv("c", LayerKind::VanillaConv(ConvSpec::new(3, 16, 3, 1, true)), Stage::Input, Role::Io, &[]);
        assert_eq!(
            layer_output_shape(&n, &[Dims4::new(1, 3, 256, 256)]).unwrap(),
            Dims4::new(1, 16, 256, 256)
        );
    }

    #[test]
    fn stride_two_halves() {
        let n = conv("c", LayerKind::VanillaConv(ConvSpec::new(16, 32, 3, 2, true)), Stage::Enc1, Role::Body, &["x"]);
        assert_eq!(
            layer_output_shape(&n, &[Dims4::new(1, 16, 256, 256)]).unwrap(),
            Dims4::new(1, 32, 128, 128)
        );
        // ceiling division on odd extents
        assert_eq!(layer_output_shape(&n, &[Dims4::new(1, 16, 7, 5)]).unwrap(), Dims4::new(1, 32, 4, 3));
        let k5 = conv("d", LayerKind::VanillaConv(ConvSpec::new(16, 32, 5, 2, true)), Stage::Enc1, Role::Body, &["x"]);
        assert_eq!(layer_output_shape(&k5, &[Dims4::new(1, 16, 7, 5)]).unwrap(), Dims4::new(1, 32, 4, 3));
    }

    #[test]
    fn pconv_keeps_channels() {
        let shapes = infer_shapes(&tiny(), Dims4::new(1, 3, 8, 8)).unwrap();
        assert_eq!(shapes["p"], Dims4::new(1, 64, 8, 8));
        assert_eq!(shapes["out"], Dims4::new(1, 3, 8, 8));
    }

    #[test]
    fn channel_mismatch_names_node() {
        let err = infer_shapes(&tiny(), Dims4::new(1, 4, 8, 8)).unwrap_err();
        assert!(matches!(err, MofaError::ShapeMismatch { ref node, .. } if node == "in"));
    }

    #[test]
    fn well_formed_validates() {
        assert_eq!(validate(&tiny()), Ok(()));
    }

    #[test]
    fn zero_portion_flagged() {
        let mut g = tiny();
        g.nodes[1].kind = LayerKind::PConv {
            conv: ConvSpec::new(64, 64, 3, 1, true),
            portion: Portion::new(1, 128).unwrap(),
        };
        let errs = validate(&g).unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("portion too small")));
    }

    #[test]
    fn cycle_flagged() {
        let mut g = tiny();
        g.nodes[1].inputs = vec!["add".into()];
        let errs = validate(&g).unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("acyclic")));
        assert!(infer_shapes(&g, Dims4::new(1, 3, 8, 8)).is_err());
    }

    #[test]
    fn even_kernel_flagged() {
        let mut g = tiny();
        g.nodes[0].kind = LayerKind::VanillaConv(ConvSpec::new(3, 64, 2, 1, true));
        assert!(validate(&g).is_err());
    }

    #[test]
    fn missing_output_flagged() {
        let mut g = tiny();
        g.nodes.pop();
        let errs = validate(&g).unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("output io")));
    }

    #[test]
    fn orphan_flagged() {
        let mut g = tiny();
        g.nodes[1].inputs.clear();
        assert!(validate(&g).is_err());
    }

    #[test]
    fn insert_after_rewires_consumers() {
        let mut g = tiny();
        g.insert_after("p", conv("act", LayerKind::Activation { act: ActivationKind::Relu }, Stage::Enc1, Role::Body, &[]))
            .unwrap();
        assert_eq!(g.node("act").unwrap().inputs, vec!["p".to_string()]);
        assert_eq!(g.node("add").unwrap().inputs, vec!["in".to_string(), "act".to_string()]);
        assert_eq!(validate(&g), Ok(()));
    }

    #[test]
    fn portion_parse() {
        assert_eq!("1/4".parse::<Portion>().unwrap(), Portion::QUARTER);
        assert!("0/4".parse::<Portion>().is_err());
        assert!("3/2".parse::<Portion>().is_err());
        assert_eq!(Portion::QUARTER.active_channels(64), 16);
        assert_eq!(Portion::QUARTER.active_channels(6), 1);
    }

    #[test]
    fn kind_json_shape() {
        let k = LayerKind::PConv { conv: ConvSpec::new(64, 64, 3, 1, true), portion: Portion::QUARTER };
        let s = serde_json::to_string(&k).unwrap();
        assert!(s.contains("\"op\":\"pconv\""));
        assert!(s.contains("\"portion\":\"1/4\""));
        assert_eq!(serde_json::from_str::<LayerKind>(&s).unwrap(), k);
        let v: LayerKind = serde_json::from_str(r#"{"op":"vanilla_conv","in_ch":3,"out_ch":16,"kernel":3,"stride":1,"bias":true}"#).unwrap();
        assert_eq!(v, LayerKind::VanillaConv(ConvSpec::new(3, 16, 3, 1, true)));
    }
}
