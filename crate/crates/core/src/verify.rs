//! Self-checks shared by the `verify` command and the test suites: the
//! analyzer against the interpreter's multiply counter, partial-conv
//! semantics, and the structural invariants of every pass.

use std::fmt;
use std::time::Instant;

use crate::analyzer::{analyze, layer_macs, Convention};
use crate::error::{MofaError, Result};
use crate::interpreter::{count_macs, run_layer, Weights};
use crate::ir::{
    layer_output_shape, output_shape, ActivationKind, ConvSpec, InterpMode, LayerKind, LayerNode,
    NetGraph, Portion, Role, Stage,
};
use crate::passes::{apply_pass, PassId, PassPlan};
use crate::rng::Rng;
use crate::tensor::{Dims4, Tensor};

/// Environment variable overriding the default seed 0.
pub const SEED_ENV: &str = "MOFA_SEED";

/// Per-case multiply budget for random cases, keeps suites fast.
const CASE_BUDGET: u64 = 4_000_000;

pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| MofaError::Parse(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    /// Sorted by name.
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, outcome: Result<String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        self.checks.push(CheckResult { name: name.into(), passed, detail });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        if self.all_passed() {
            write!(f, "all checks passed")
        } else {
            let n = self.checks.iter().filter(|c| !c.passed).count();
            write!(f, "{n} of {} checks failed", self.checks.len())
        }
    }
}

fn fail(detail: impl Into<String>) -> MofaError {
    MofaError::Graph(detail.into())
}

/// A single-layer case: the layer and the shapes of its operands.
#[derive(Debug, Clone)]
pub struct LayerCase {
    pub kind: LayerKind,
    pub inputs: Vec<Dims4>,
}

fn random_portion(rng: &mut Rng, channels: usize) -> Portion {
    loop {
        let (num, den) = *rng.pick(&[(1, 4), (1, 2), (1, 8), (3, 4), (1, 1)]);
        let p = Portion::new(num, den).expect("static portion");
        if p.active_channels(channels) > 0 {
            return p;
        }
    }
}

fn random_kind(rng: &mut Rng, c: usize) -> LayerKind {
    let k = *rng.pick(&[1usize, 3, 5]);
    let stride = *rng.pick(&[1usize, 2]);
    let bias = rng.next_u64() & 1 == 1;
    let out = rng.range_inclusive(1, 128);
    match rng.range_inclusive(0, 11) {
        0 => LayerKind::VanillaConv(ConvSpec::new(c, out, k, stride, bias)),
        1 => LayerKind::PointwiseConv(ConvSpec::new(c, out, 1, stride, bias)),
        2 => LayerKind::DepthwiseConv(ConvSpec::new(c, c, k, stride, bias)),
        3 => LayerKind::SeparableConv {
            depthwise: ConvSpec::new(c, c, k, stride, false),
            pointwise: ConvSpec::new(c, out, 1, 1, bias),
        },
        4 => LayerKind::PConv {
            conv: ConvSpec::new(c, c, k, 1, bias),
            portion: random_portion(rng, c),
        },
        5 => LayerKind::PdwConv {
            conv: ConvSpec::new(c, c, k, 1, bias),
            portion: random_portion(rng, c),
        },
        6 => LayerKind::Deconv(ConvSpec::new(c, out, k, 2, bias)),
        7 => LayerKind::AvgPool2x2,
        8 => LayerKind::Interp2x {
            mode: *rng.pick(&[InterpMode::Nearest, InterpMode::Bilinear]),
        },
        9 => LayerKind::Activation {
            act: *rng.pick(&[ActivationKind::Relu, ActivationKind::LeakyRelu]),
        },
        10 => LayerKind::Add,
        _ => LayerKind::ConcatSkip,
    }
}

/// Random layer with spatial extent ≤ 32×32 and channels ≤ 128, resampled
/// until its multiply count fits the per-case budget.
pub fn random_layer_case(rng: &mut Rng) -> LayerCase {
    loop {
        let c = rng.range_inclusive(1, 128);
        let shape = Dims4::new(1, c, rng.range_inclusive(1, 32), rng.range_inclusive(1, 32));
        let kind = random_kind(rng, c);
        let inputs = match kind {
            LayerKind::Add => vec![shape, shape],
            LayerKind::ConcatSkip => vec![shape, shape.with_channels(rng.range_inclusive(1, 128))],
            _ => vec![shape],
        };
        match layer_macs(&kind, shape) {
            Ok(m) if m <= CASE_BUDGET => return LayerCase { kind, inputs },
            _ => continue,
        }
    }
}

fn single_node(kind: LayerKind, arity: usize) -> (LayerNode, Weights) {
    let inputs = (0..arity).map(|i| format!("x{i}")).collect();
    let node = LayerNode::new("case", kind, Stage::Enc1, Role::Body, inputs);
    let g = NetGraph { nodes: vec![node.clone()], skips: vec![] };
    let w = Weights::init(&g, 0);
    (node, w)
}

/// Runs one case through the interpreter and compares its multiply count
/// with the analyzer. Returns the agreed count.
pub fn check_oracle_case(case: &LayerCase, seed: u64) -> Result<u64> {
    let (node, w) = single_node(case.kind, case.inputs.len());
    let xs: Vec<Tensor> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, s)| Tensor::from_seed(*s, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = xs.iter().collect();
    let (y, counted) = run_layer(&node, w.get("case"), &refs)?;
    let predicted = layer_macs(&case.kind, case.inputs[0])?;
    if counted != predicted {
        return Err(fail(format!(
            "{} on {}: interpreter {counted} != analyzer {predicted}",
            case.kind.name(),
            case.inputs[0]
        )));
    }
    let shape = layer_output_shape(&node, &case.inputs)?;
    if y.shape() != shape {
        return Err(fail(format!("{}: output {} != inferred {shape}", case.kind.name(), y.shape())));
    }
    Ok(counted)
}

/// `n` random layer cases; returns the number of cases and total multiplies.
pub fn oracle_random(n: usize, seed: u64) -> Result<(usize, u64)> {
    let mut rng = Rng::new(seed ^ 0x6f72_6163_6c65);
    let mut total = 0;
    for i in 0..n {
        let case = random_layer_case(&mut rng);
        total += check_oracle_case(&case, seed.wrapping_add(i as u64))?;
    }
    Ok((n, total))
}

/// Whole-graph multiply count equals the analyzer's actual-convention total,
/// node by node.
pub fn oracle_model(g: &NetGraph, input: Dims4, seed: u64) -> Result<u64> {
    let w = Weights::init(g, seed);
    let x = Tensor::from_seed(input, seed)?;
    let counted = count_macs(g, &w, &x)?;
    let report = analyze(g, input, Convention::Actual)?;
    for l in &report.per_layer {
        let c = counted.get(&l.id).copied().unwrap_or(0);
        if c != l.macs {
            return Err(fail(format!("{}: interpreter {c} != analyzer {}", l.id, l.macs)));
        }
    }
    let total: u64 = counted.values().sum();
    if total != report.totals.macs {
        return Err(fail(format!("total {total} != analyzer {}", report.totals.macs)));
    }
    Ok(total)
}

/// One partial-conv case: pass-through channels are bitwise copies of the
/// input and the active slice equals the standalone conv on
/// `channel_slice(x, 0, c_p)`.
pub fn check_partial_case(rng: &mut Rng, seed: u64) -> Result<()> {
    let c = rng.range_inclusive(1, 128);
    let portion = random_portion(rng, c);
    let cp = portion.active_channels(c);
    let k = *rng.pick(&[1usize, 3, 5]);
    let bias = rng.next_u64() & 1 == 1;
    let (h, w) = (rng.range_inclusive(1, 16), rng.range_inclusive(1, 16));
    let conv = ConvSpec::new(c, c, k, 1, bias);
    let depthwise = rng.next_u64() & 1 == 1;
    let (kind, standalone) = if depthwise {
        (
            LayerKind::PdwConv { conv, portion },
            LayerKind::DepthwiseConv(ConvSpec::new(cp, cp, k, 1, bias)),
        )
    } else {
        (
            LayerKind::PConv { conv, portion },
            LayerKind::VanillaConv(ConvSpec::new(cp, cp, k, 1, bias)),
        )
    };
    let x = Tensor::from_seed(Dims4::new(1, c, h, w), seed)?;
    let (node, weights) = single_node(kind, 1);
    let (y, _) = run_layer(&node, weights.get("case"), &[&x])?;
    let label = format!("{} c={c} p={portion} k={k}", kind.name());
    if cp < c && !y.channel_slice(cp, c)?.bitwise_eq(&x.channel_slice(cp, c)?) {
        return Err(fail(format!("{label}: pass-through channels differ")));
    }
    let alone = LayerNode::new("alone", standalone, Stage::Enc1, Role::Body, vec!["x".into()]);
    let (ref_y, _) = run_layer(&alone, weights.get("case"), &[&x.channel_slice(0, cp)?])?;
    if !y.channel_slice(0, cp)?.bitwise_eq(&ref_y) {
        return Err(fail(format!("{label}: active slice differs from standalone conv")));
    }
    Ok(())
}

pub fn partial_semantics(n: usize, seed: u64) -> Result<usize> {
    let mut rng = Rng::new(seed ^ 0x7061_7274);
    for i in 0..n {
        check_partial_case(&mut rng, seed.wrapping_add(i as u64))?;
    }
    Ok(n)
}

/// Graphs each pass is exercised on: the model itself and the model after
/// every preceding pass of the plan's order.
fn pass_inputs(g: &NetGraph, plan: &PassPlan) -> Result<Vec<(PassId, Vec<NetGraph>)>> {
    let mut out = Vec::new();
    let mut prefix = g.clone();
    for pass in PassId::ALL {
        let mut graphs = vec![g.clone()];
        if prefix != *g {
            graphs.push(prefix.clone());
        }
        out.push((pass, graphs));
        if plan.enabled.contains(&pass) {
            prefix = apply_pass(&prefix, pass, plan)?.0;
        }
    }
    Ok(out)
}

fn io_signature(g: &NetGraph) -> Option<(LayerNode, LayerKind, Stage, Role)> {
    let i = g.input_node()?.clone();
    let o = g.output_node()?;
    Some((i, o.kind, o.stage, o.role))
}

/// `pass(pass(g)) == pass(g)`, end-to-end shape kept at `input`, and the
/// io layers left alone. Returns one result per pass.
pub fn pass_invariants(g: &NetGraph, plan: &PassPlan, input: Dims4) -> Result<Vec<(PassId, Result<String>)>> {
    let expected = output_shape(g, input)?;
    let io = io_signature(g).ok_or_else(|| fail("graph has no io layers"))?;
    let mut results = Vec::new();
    for (pass, graphs) in pass_inputs(g, plan)? {
        let outcome = (|| -> Result<String> {
            let mut rewrites = 0;
            for src in &graphs {
                let (once, n) = apply_pass(src, pass, plan)?;
                let (twice, again) = apply_pass(&once, pass, plan)?;
                if twice != once || again != 0 {
                    return Err(fail(format!("not idempotent, second run rewrote {again} layers")));
                }
                let shape = output_shape(&once, input)?;
                if shape != expected {
                    return Err(fail(format!("end-to-end shape {expected} became {shape}")));
                }
                if io_signature(&once).as_ref() != Some(&io) {
                    return Err(fail("io layers were modified"));
                }
                rewrites += n;
            }
            Ok(format!("idempotent, shape {expected} kept, io untouched ({rewrites} rewrites over {} graphs)", graphs.len()))
        })();
        results.push((pass, outcome));
    }
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub oracle_cases: usize,
    pub partial_cases: usize,
    /// Input for the whole-model multiply count.
    pub model_input: Dims4,
    /// Input for the shape-preservation check.
    pub shape_input: Dims4,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            oracle_cases: 300,
            partial_cases: 100,
            model_input: Dims4::new(1, 3, 64, 64),
            shape_input: Dims4::new(1, 3, 256, 256),
        }
    }
}

/// Runs every check on `g`. Failures are recorded, not returned.
pub fn run_verify(g: &NetGraph, plan: &PassPlan, opts: &VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let mut report = VerifyReport::default();
    let model_input = opts.model_input.with_channels(
        g.input_node()
            .and_then(|n| n.kind.channels())
            .map_or(opts.model_input.c, |(i, _)| i),
    );
    let shape_input = opts.shape_input.with_channels(model_input.c);
    report.push(
        "oracle.model",
        oracle_model(g, model_input, opts.seed)
            .map(|m| format!("{m} multiplies at {model_input} match the analyzer")),
    );
    report.push(
        "oracle.random_layers",
        oracle_random(opts.oracle_cases, opts.seed).map(|(n, m)| format!("{n} cases, {m} multiplies")),
    );
    report.push(
        "partial.semantics",
        partial_semantics(opts.partial_cases, opts.seed).map(|n| format!("{n} cases bitwise")),
    );
    match pass_invariants(g, plan, shape_input) {
        Ok(rs) => {
            for (pass, r) in rs {
                report.push(format!("pass.{pass}"), r);
            }
        }
        Err(e) => report.push("pass.invariants", Err(e)),
    }
    report.checks.sort_by(|a, b| a.name.cmp(&b.name));
    let elapsed = start.elapsed();
    report.push("runtime", Ok(format!("{:.2}s", elapsed.as_secs_f64())));
    report.checks.sort_by(|a, b| a.name.cmp(&b.name));
    report
}
