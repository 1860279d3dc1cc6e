//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Published figures are in millions of parameters
//! and billions of MACs; every comparison uses the same ±15% band.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mofa_core::analyzer::{analyze, layer_macs, Convention};
use mofa_core::builders::{build_pmrid_like, ModelConfig, Upsample};
use mofa_core::ir::{ConvSpec, LayerKind, NetGraph, Stage};
use mofa_core::passes::{run_roadmap, PassId, PassPlan, PassTrace};
use mofa_core::rng::Rng;
use mofa_core::verify::{oracle_random, partial_semantics, run_verify, VerifyOptions};
use mofa_core::Dims4;

const TOLERANCE: f64 = 0.15;
const SEED: u64 = 0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn input() -> Dims4 {
    Dims4::new(1, 3, 256, 256)
}

fn baseline() -> NetGraph {
    build_pmrid_like(&ModelConfig::default()).expect("default config builds")
}

fn within(label: &str, actual: f64, target: f64) -> Result<String, String> {
    let rel = (actual - target) / target;
    let s = format!("{label} {actual:.3} vs {target:.2} ({:+.1}%)", rel * 100.0);
    if rel.abs() <= TOLERANCE {
        Ok(s)
    } else {
        Err(s)
    }
}

fn m(params: u64) -> f64 {
    params as f64 / 1e6
}

fn roadmap(plan: &PassPlan) -> Result<PassTrace, String> {
    run_roadmap(&baseline(), plan)
        .map(|(_, t)| t)
        .map_err(|e| e.to_string())
}

fn after(trace: &PassTrace, pass: PassId) -> Result<u64, String> {
    trace
        .rows
        .iter()
        .find(|r| r.pass == pass.as_str())
        .map(|r| r.params_after)
        .ok_or_else(|| format!("no {pass} row"))
}

fn collect(parts: Vec<Result<String, String>>) -> Outcome {
    let failed = parts.iter().any(Result::is_err);
    let text = parts
        .into_iter()
        .map(|p| p.unwrap_or_else(|e| format!("[out of band] {e}")))
        .collect::<Vec<_>>()
        .join("; ");
    if failed {
        Err(text)
    } else {
        Ok(text)
    }
}

fn oracle_equality() -> Outcome {
    let start = Instant::now();
    let (n, muls) = oracle_random(1000, SEED).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    if t >= Duration::from_secs(60) {
        return Err(format!("{n} cases took {:.1}s", t.as_secs_f64()));
    }
    Ok(format!("{n} random layers, {muls} multiplies counted exactly, {:.2}s", t.as_secs_f64()))
}

fn partial_conv_semantics() -> Outcome {
    let n = partial_semantics(200, SEED).map_err(|e| e.to_string())?;
    Ok(format!("{n} PConv/PDWConv cases: pass-through and active slice bitwise equal"))
}

fn trajectory() -> Outcome {
    let base = analyze(&baseline(), input(), Convention::Actual).map_err(|e| e.to_string())?;
    let trace = roadmap(&PassPlan::default())?;
    let last = trace.rows.last().ok_or("empty trace")?.params_after;
    let below = if last < base.totals.params {
        Ok(format!("final {last} < baseline {}", base.totals.params))
    } else {
        Err(format!("final {last} not below baseline {}", base.totals.params))
    };
    collect(vec![
        within("baseline params", m(base.totals.params), 1.03),
        within("baseline MACs", base.totals.macs as f64 / 1e9, 1.15),
        within("P1 params", m(after(&trace, PassId::Pconv)?), 2.84),
        within("P1-P3 params", m(after(&trace, PassId::Cheap)?), 4.44),
        within("final params", m(last), 0.97),
        below,
    ])
}

fn middle_pairs() -> Outcome {
    let pairs = [
        ((Stage::Enc3, Stage::Dec2), 3.86),
        ((Stage::Enc2, Stage::Dec3), 2.93),
        ((Stage::Enc1, Stage::Dec4), 2.86),
    ];
    let mut parts = Vec::new();
    let mut values = Vec::new();
    for ((e, d), target) in pairs {
        let plan = PassPlan { middle_pair: (e, d), ..PassPlan::only(&[PassId::Pconv, PassId::Middle]) };
        let p = after(&roadmap(&plan)?, PassId::Middle)?;
        values.push(p);
        parts.push(within(&format!("({e},{d})"), m(p), target));
    }
    parts.push(if values[0] > values[1] && values[1] > values[2] {
        Ok("strictly decreasing".into())
    } else {
        Err(format!("ordering violated: {values:?}"))
    });
    collect(parts)
}

fn threshold_sweep() -> Outcome {
    let published = [(0usize, 0.94), (16, 0.95), (32, 0.97), (64, 1.21), (128, 1.25)];
    let mut parts = Vec::new();
    let mut values = Vec::new();
    for (t, target) in published {
        let plan = PassPlan { pdw_threshold: t, ..PassPlan::default() };
        let p = roadmap(&plan)?.rows.last().ok_or("empty trace")?.params_after;
        values.push(p);
        parts.push(within(&format!("T={t}"), m(p), target));
    }
    parts.push(if values.windows(2).all(|w| w[0] <= w[1]) {
        Ok("non-decreasing".into())
    } else {
        Err(format!("not monotone: {values:?}"))
    });
    collect(parts)
}

fn upsample_macs(up: Upsample) -> Result<Vec<u64>, String> {
    let g = build_pmrid_like(&ModelConfig { upsample: up, ..ModelConfig::default() }).map_err(|e| e.to_string())?;
    let r = analyze(&g, input(), Convention::Actual).map_err(|e| e.to_string())?;
    Ok((1..=4)
        .map(|j| {
            let id = format!("dec{j}_up");
            r.per_layer.iter().find(|l| l.id == id).map_or(0, |l| l.macs)
        })
        .collect())
}

fn upsample_arithmetic() -> Outcome {
    let deconv = upsample_macs(Upsample::Deconv)?;
    let conv_interp = upsample_macs(Upsample::ConvThenInterp)?;
    let interp_conv = upsample_macs(Upsample::InterpThenConv)?;
    for j in 0..4 {
        if conv_interp[j] != deconv[j] || 4 * conv_interp[j] != interp_conv[j] {
            return Err(format!(
                "dec{}: deconv {} conv+interp {} interp+conv {}",
                j + 1,
                deconv[j],
                conv_interp[j],
                interp_conv[j]
            ));
        }
    }
    // P4's own rewrite of the deconv baseline
    let p4 = roadmap(&PassPlan::only(&[PassId::UpDown]))?;
    let row = &p4.rows[0];
    if row.macs_after != row.macs_before {
        return Err(format!("P4 changed MACs {} -> {}", row.macs_before, row.macs_after));
    }
    // random single layers
    let mut rng = Rng::new(SEED);
    for _ in 0..500 {
        let (i, o) = (rng.range_inclusive(1, 128), rng.range_inclusive(1, 128));
        let k = *rng.pick(&[1usize, 3, 5, 7]);
        let s = Dims4::new(1, i, rng.range_inclusive(1, 64), rng.range_inclusive(1, 64));
        let up = Dims4::new(1, i, 2 * s.h, 2 * s.w);
        let d = layer_macs(&LayerKind::Deconv(ConvSpec::new(i, o, k, 2, true)), s).map_err(|e| e.to_string())?;
        let conv = LayerKind::VanillaConv(ConvSpec::new(i, o, k, 1, true));
        let ci = layer_macs(&conv, s).map_err(|e| e.to_string())?;
        let ic = layer_macs(&conv, up).map_err(|e| e.to_string())?;
        if ci != d || 4 * ci != ic {
            return Err(format!("{i}->{o} k={k} at {s}: deconv {d} conv+interp {ci} interp+conv {ic}"));
        }
    }
    Ok(format!(
        "per decoder conv+interp = deconv = ¼ interp+conv ({} vs {} MACs total), P4 MAC-neutral, 500 random layers exact",
        conv_interp.iter().sum::<u64>(),
        interp_conv.iter().sum::<u64>()
    ))
}

fn pass_invariants() -> Outcome {
    let start = Instant::now();
    let report = run_verify(&baseline(), &PassPlan::default(), &VerifyOptions { seed: SEED, ..Default::default() });
    let t = start.elapsed();
    let summary = report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("pass."))
        .map(|c| format!("{}={}", c.name, if c.passed { "ok" } else { "FAIL" }))
        .collect::<Vec<_>>()
        .join(" ");
    if !report.all_passed() {
        return Err(report.to_string());
    }
    if t >= Duration::from_secs(30) {
        return Err(format!("verify took {:.1}s", t.as_secs_f64()));
    }
    Ok(format!("{summary}; verify {:.2}s", t.as_secs_f64()))
}

fn distribution() -> Outcome {
    let r = analyze(&baseline(), input(), Convention::AllVanillaEstimate).map_err(|e| e.to_string())?;
    let enc = r.stage_share(|s| s.is_encoder());
    let cheap = r.stage_share(|s| s.is_decoder() || s == Stage::Middle);
    let s = format!("encoders {enc:.4} vs decoders+middle {cheap:.4}");
    if enc > cheap {
        Ok(s)
    } else {
        Err(s)
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 oracle equality", oracle_equality),
        ("2 partial conv semantics", partial_conv_semantics),
        ("3 roadmap trajectory", trajectory),
        ("4 middle pair ordering", middle_pairs),
        ("5 PDW threshold sweep", threshold_sweep),
        ("6 upsample arithmetic", upsample_arithmetic),
        ("7 pass invariants", pass_invariants),
        ("8 MAC distribution", distribution),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(s) => println!("PASS criterion {name}: {s}"),
            Err(s) => {
                failed += 1;
                println!("FAIL criterion {name}: {s}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
