//! Naive forward executor with an exact multiply counter.
//!
//! Convolutions accumulate in a fixed order per output element: kernel rows,
//! then kernel columns, then input channels ascending, with bias added last.
//! Padding taps multiply an explicit `0.0` and are counted, so a conv's count
//! is `out_area · in · out · k²`. Only convolution multiplies are counted;
//! pooling, interpolation and activations report zero. No fused
//! multiply-add is used anywhere, so results are bit-reproducible.

use std::collections::{BTreeMap, HashMap};

use crate::error::{MofaError, Result};
use crate::ir::{
    layer_output_shape, validate, ActivationKind, ConvSpec, InterpMode, LayerKind, LayerNode,
    NetGraph,
};
use crate::rng::{stream_seed, Rng};
use crate::tensor::{Dims4, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    fn seeded(rng: &mut Rng, elements: usize, fan_in: usize, bias: usize) -> Self {
        let scale = 1.0 / (fan_in.max(1) as f32).sqrt();
        ConvWeights {
            kernel: (0..elements).map(|_| rng.next_signed_f32() * scale).collect(),
            bias: (0..bias).map(|_| rng.next_signed_f32() * scale).collect(),
        }
    }

    pub fn zeros(elements: usize, bias: usize) -> Self {
        ConvWeights {
            kernel: vec![0.0; elements],
            bias: vec![0.0; bias],
        }
    }
}

/// Kernel layouts: dense and partial convs `[out][in][k][k]`, depthwise
/// kinds `[c][k][k]`, deconv `[in][out][k][k]`. Partial kinds only hold the
/// active `c_p` channels.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeWeights {
    Conv(ConvWeights),
    Separable {
        depthwise: ConvWeights,
        pointwise: ConvWeights,
    },
}

impl NodeWeights {
    pub fn kernel_elements(&self) -> usize {
        match self {
            NodeWeights::Conv(w) => w.kernel.len(),
            NodeWeights::Separable {
                depthwise,
                pointwise,
            } => depthwise.kernel.len() + pointwise.kernel.len(),
        }
    }

    pub fn bias_elements(&self) -> usize {
        match self {
            NodeWeights::Conv(w) => w.bias.len(),
            NodeWeights::Separable {
                depthwise,
                pointwise,
            } => depthwise.bias.len() + pointwise.bias.len(),
        }
    }
}

/// `(kernel elements, fan-in, bias elements)` for a single conv.
fn conv_layout(kind: &LayerKind) -> Option<(usize, usize, usize)> {
    let k2 = |c: &ConvSpec| c.kernel * c.kernel;
    let b = |c: &ConvSpec, n: usize| if c.bias { n } else { 0 };
    Some(match kind {
        LayerKind::VanillaConv(c) | LayerKind::PointwiseConv(c) => {
            (c.out_ch * c.in_ch * k2(c), c.in_ch * k2(c), b(c, c.out_ch))
        }
        LayerKind::Deconv(c) => (c.in_ch * c.out_ch * k2(c), c.in_ch * k2(c), b(c, c.out_ch)),
        LayerKind::DepthwiseConv(c) => (c.in_ch * k2(c), k2(c), b(c, c.in_ch)),
        LayerKind::PConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch);
            (cp * cp * k2(conv), cp * k2(conv), b(conv, cp))
        }
        LayerKind::PdwConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch);
            (cp * k2(conv), k2(conv), b(conv, cp))
        }
        _ => return None,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    by_node: HashMap<String, NodeWeights>,
}

impl Weights {
    /// Values depend only on `(node id, seed)` and the node's kind.
    pub fn init(g: &NetGraph, seed: u64) -> Self {
        let mut by_node = HashMap::new();
        for n in &g.nodes {
            let mut rng = Rng::new(stream_seed(&n.id, seed));
            let w = match &n.kind {
                LayerKind::SeparableConv {
                    depthwise,
                    pointwise,
                } => {
                    let (dk, df, db) = conv_layout(&LayerKind::DepthwiseConv(*depthwise))
                        .expect("depthwise layout");
                    let (pk, pf, pb) = conv_layout(&LayerKind::PointwiseConv(*pointwise))
                        .expect("pointwise layout");
                    NodeWeights::Separable {
                        depthwise: ConvWeights::seeded(&mut rng, dk, df, db),
                        pointwise: ConvWeights::seeded(&mut rng, pk, pf, pb),
                    }
                }
                k => match conv_layout(k) {
                    Some((elems, fan_in, bias)) => {
                        NodeWeights::Conv(ConvWeights::seeded(&mut rng, elems, fan_in, bias))
                    }
                    None => continue,
                },
            };
            by_node.insert(n.id.clone(), w);
        }
        Weights { by_node }
    }

    pub fn get(&self, id: &str) -> Option<&NodeWeights> {
        self.by_node.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, w: NodeWeights) {
        self.by_node.insert(id.into(), w);
    }
}

/// Multiply count and output checksum of one executed node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStat {
    pub id: String,
    pub multiplies: u64,
    /// Wrapping sum of output bit patterns, see [`Tensor::checksum`].
    pub checksum: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// In execution order.
    pub nodes: Vec<NodeStat>,
}

impl ExecStats {
    pub fn total_multiplies(&self) -> u64 {
        self.nodes.iter().map(|n| n.multiplies).sum()
    }

    pub fn multiplies(&self, id: &str) -> Option<u64> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.multiplies)
    }
}

fn check_len(id: &str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(MofaError::mismatch(
            id,
            format!("{what} has {got} elements, expected {want}"),
        ));
    }
    Ok(())
}

/// Dense conv over input channels `[lo, lo + cin)` of `x`.
#[allow(clippy::too_many_arguments)]
fn dense_conv(
    x: &Tensor,
    lo: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    w: &ConvWeights,
    muls: &mut u64,
) -> Tensor {
    let s = x.shape();
    let pad = (k - 1) / 2;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(s.n * cout * oh * ow);
    let data = x.data();
    for n in 0..s.n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w;
                            for ic in 0..cin {
                                let v = if inside {
                                    data[x.index(n, lo + ic, iy as usize, ix as usize)]
                                } else {
                                    0.0
                                };
                                acc += v * w.kernel[((oc * cin + ic) * k + ky) * k + kx];
                                *muls += 1;
                            }
                        }
                    }
                    if let Some(b) = w.bias.get(oc) {
                        acc += *b;
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(Dims4::new(s.n, cout, oh, ow), out).expect("conv output shape")
}

/// Per-channel conv over channels `[lo, lo + c)` of `x`.
fn depthwise_conv(
    x: &Tensor,
    lo: usize,
    c: usize,
    k: usize,
    stride: usize,
    w: &ConvWeights,
    muls: &mut u64,
) -> Tensor {
    let s = x.shape();
    let pad = (k - 1) / 2;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(s.n * c * oh * ow);
    let data = x.data();
    for n in 0..s.n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w;
                            let v = if inside {
                                data[x.index(n, lo + ch, iy as usize, ix as usize)]
                            } else {
                                0.0
                            };
                            acc += v * w.kernel[(ch * k + ky) * k + kx];
                            *muls += 1;
                        }
                    }
                    if let Some(b) = w.bias.get(ch) {
                        acc += *b;
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(Dims4::new(s.n, c, oh, ow), out).expect("conv output shape")
}

/// Transposed conv, stride 2, output `2H × 2W`.
///
/// Computed as zero insertion followed by an ordinary conv: samples sit at
/// every second position of a grid padded by `k - 1` on each side, the
/// flipped kernel is slid over it to give the full `(2H + k - 2)` output,
/// which is then cropped from offset `(k - 1) / 2`. Multiplies by inserted
/// zeros are skipped and not counted, so every input sample meets every
/// kernel tap exactly once: `H · W · in · out · k²`.
fn deconv(x: &Tensor, cout: usize, k: usize, w: &ConvWeights, muls: &mut u64) -> Tensor {
    let s = x.shape();
    let cin = s.c;
    let (fh, fw) = (2 * s.h + k - 2, 2 * s.w + k - 2);
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let crop = (k - 1) / 2;
    let data = x.data();
    // Position `z` of the zero-inserted, padded grid holds sample `(z - (k-1)) / 2`
    // when `z - (k-1)` is even and in range.
    let sample = |z: usize, extent: usize| -> Option<usize> {
        let u = z.checked_sub(k - 1)?;
        (u % 2 == 0 && u / 2 < extent).then_some(u / 2)
    };
    let mut out = Vec::with_capacity(s.n * cout * oh * ow);
    for n in 0..s.n {
        for oc in 0..cout {
            let mut full = vec![0.0f32; fh * fw];
            for fy in 0..fh {
                for fx in 0..fw {
                    let mut acc = 0.0f32;
                    for ty in 0..k {
                        let Some(iy) = sample(fy + ty, s.h) else {
                            continue;
                        };
                        for tx in 0..k {
                            let Some(ix) = sample(fx + tx, s.w) else {
                                continue;
                            };
                            // flipped kernel tap
                            let (ky, kx) = (k - 1 - ty, k - 1 - tx);
                            for ic in 0..cin {
                                acc += data[x.index(n, ic, iy, ix)]
                                    * w.kernel[((ic * cout + oc) * k + ky) * k + kx];
                                *muls += 1;
                            }
                        }
                    }
                    full[fy * fw + fx] = acc;
                }
            }
            let b = w.bias.get(oc).copied();
            for oy in 0..oh {
                for ox in 0..ow {
                    let (fy, fx) = (oy + crop, ox + crop);
                    let mut v = if fy < fh && fx < fw { full[fy * fw + fx] } else { 0.0 };
                    if let Some(b) = b {
                        v += b;
                    }
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(Dims4::new(s.n, cout, oh, ow), out).expect("deconv output shape")
}

fn avg_pool_2x2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0f32;
                    let mut count = 0u32;
                    for y in 2 * oy..(2 * oy + 2).min(s.h) {
                        for xx in 2 * ox..(2 * ox + 2).min(s.w) {
                            sum += x.at(n, c, y, xx);
                            count += 1;
                        }
                    }
                    out.push(sum / count as f32);
                }
            }
        }
    }
    Tensor::from_vec(Dims4::new(s.n, s.c, oh, ow), out).expect("pool output shape")
}

fn interp_2x(x: &Tensor, mode: InterpMode) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let src = |o: usize, extent: usize| -> (usize, usize, f32) {
        let p = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, p - i0 as f32)
    };
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = match mode {
                        InterpMode::Nearest => x.at(n, c, oy / 2, ox / 2),
                        InterpMode::Bilinear => {
                            let (y0, y1, fy) = src(oy, s.h);
                            let (x0, x1, fx) = src(ox, s.w);
                            let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
                            let bot = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
                            top * (1.0 - fy) + bot * fy
                        }
                    };
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(Dims4::new(s.n, s.c, oh, ow), out).expect("interp output shape")
}

fn activation(x: &Tensor, act: ActivationKind) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| match act {
            ActivationKind::Relu => v.max(0.0),
            ActivationKind::LeakyRelu => {
                if v < 0.0 {
                    v * 0.125
                } else {
                    v
                }
            }
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

fn add(id: &str, xs: &[&Tensor]) -> Result<Tensor> {
    let mut out = xs[0].clone();
    for t in &xs[1..] {
        if t.shape() != out.shape() {
            return Err(MofaError::mismatch(id, "add operands differ in shape"));
        }
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += *v;
        }
    }
    Ok(out)
}

fn conv_weights<'a>(id: &str, w: Option<&'a NodeWeights>) -> Result<&'a ConvWeights> {
    match w {
        Some(NodeWeights::Conv(c)) => Ok(c),
        _ => Err(MofaError::MissingWeights(id.to_string())),
    }
}

/// Executes a single layer. Exposed so tests can compose layers by hand.
pub fn run_layer(
    node: &LayerNode,
    weights: Option<&NodeWeights>,
    inputs: &[&Tensor],
) -> Result<(Tensor, u64)> {
    let id = node.id.as_str();
    let shapes: Vec<Dims4> = inputs.iter().map(|t| t.shape()).collect();
    let expected = layer_output_shape(node, &shapes)?;
    if let Some((elems, _, bias)) = conv_layout(&node.kind) {
        let w = conv_weights(id, weights)?;
        check_len(id, "kernel", w.kernel.len(), elems)?;
        check_len(id, "bias", w.bias.len(), bias)?;
    }
    let x = inputs[0];
    let mut muls = 0u64;
    let out = match &node.kind {
        LayerKind::VanillaConv(c) | LayerKind::PointwiseConv(c) => dense_conv(
            x,
            0,
            c.in_ch,
            c.out_ch,
            c.kernel,
            c.stride,
            conv_weights(id, weights)?,
            &mut muls,
        ),
        LayerKind::DepthwiseConv(c) => depthwise_conv(
            x,
            0,
            c.in_ch,
            c.kernel,
            c.stride,
            conv_weights(id, weights)?,
            &mut muls,
        ),
        LayerKind::SeparableConv {
            depthwise,
            pointwise,
        } => {
            let Some(NodeWeights::Separable {
                depthwise: dw,
                pointwise: pw,
            }) = weights
            else {
                return Err(MofaError::MissingWeights(id.to_string()));
            };
            check_len(id, "depthwise kernel", dw.kernel.len(), depthwise.in_ch * depthwise.kernel * depthwise.kernel)?;
            check_len(id, "pointwise kernel", pw.kernel.len(), pointwise.in_ch * pointwise.out_ch)?;
            let mid = depthwise_conv(x, 0, depthwise.in_ch, depthwise.kernel, depthwise.stride, dw, &mut muls);
            dense_conv(&mid, 0, pointwise.in_ch, pointwise.out_ch, 1, 1, pw, &mut muls)
        }
        LayerKind::PConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch);
            let active = dense_conv(x, 0, cp, cp, conv.kernel, 1, conv_weights(id, weights)?, &mut muls);
            pass_through(active, x, cp)?
        }
        LayerKind::PdwConv { conv, portion } => {
            let cp = portion.active_channels(conv.in_ch);
            let active = depthwise_conv(x, 0, cp, conv.kernel, 1, conv_weights(id, weights)?, &mut muls);
            pass_through(active, x, cp)?
        }
        LayerKind::Deconv(c) => deconv(x, c.out_ch, c.kernel, conv_weights(id, weights)?, &mut muls),
        LayerKind::AvgPool2x2 => avg_pool_2x2(x),
        LayerKind::Interp2x { mode } => interp_2x(x, *mode),
        LayerKind::Activation { act } => activation(x, *act),
        LayerKind::Add => add(id, inputs)?,
        LayerKind::ConcatSkip => Tensor::concat_channels(inputs[0], inputs[1])?,
    };
    debug_assert_eq!(out.shape(), expected);
    Ok((out, muls))
}

/// Computed channels followed by the untouched remainder of `x`.
fn pass_through(active: Tensor, x: &Tensor, cp: usize) -> Result<Tensor> {
    if cp == x.shape().c {
        return Ok(active);
    }
    Tensor::concat_channels(&active, &x.channel_slice(cp, x.shape().c)?)
}

/// Runs the whole graph on `x`.
pub fn forward(g: &NetGraph, w: &Weights, x: &Tensor) -> Result<(Tensor, ExecStats)> {
    validate(g).map_err(|v| {
        MofaError::Graph(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
    })?;
    let order = g.topo_order()?;
    let index: HashMap<&str, usize> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut remaining = vec![0usize; g.nodes.len()];
    for n in &g.nodes {
        for p in &n.inputs {
            remaining[index[p.as_str()]] += 1;
        }
    }
    let mut values: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
    let mut stats = ExecStats::default();
    let mut result = None;
    for i in order {
        let node = &g.nodes[i];
        let (out, muls) = {
            let inputs: Vec<&Tensor> = if node.inputs.is_empty() {
                vec![x]
            } else {
                node.inputs
                    .iter()
                    .map(|p| values[index[p.as_str()]].as_ref().expect("producer computed"))
                    .collect()
            };
            run_layer(node, w.get(&node.id), &inputs)?
        };
        if !out.all_finite() {
            return Err(MofaError::NonFinite(node.id.clone()));
        }
        stats.nodes.push(NodeStat {
            id: node.id.clone(),
            multiplies: muls,
            checksum: out.checksum(),
        });
        for p in &node.inputs {
            let pi = index[p.as_str()];
            remaining[pi] -= 1;
            if remaining[pi] == 0 {
                values[pi] = None;
            }
        }
        if node.is_graph_output() {
            result = Some(out.clone());
        }
        if remaining[i] > 0 {
            values[i] = Some(out);
        }
    }
    let out = result.ok_or_else(|| MofaError::Graph("graph has no output node".into()))?;
    Ok((out, stats))
}

/// Exact multiply count of every node.
pub fn count_macs(g: &NetGraph, w: &Weights, x: &Tensor) -> Result<BTreeMap<String, u64>> {
    let (_, stats) = forward(g, w, x)?;
    Ok(stats.nodes.into_iter().map(|n| (n.id, n.multiplies)).collect())
}
