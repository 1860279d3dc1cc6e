use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mofa_core::analyzer::{analyze, Convention};
use mofa_core::builders::{build_pmrid_like, load_config_file, ModelConfig, ModelFile};
use mofa_core::passes::{run_roadmap, PassPlan, PassTrace};
use mofa_core::report::{
    bench_kind, emit_distribution_chart, encoder_vs_cheap_share, microbench,
    render_trajectory_table, TableFormat,
};
use mofa_core::verify::{run_verify, seed_from_env, VerifyOptions};
use mofa_core::{Dims4, MofaError};

#[derive(Parser)]
#[command(name = "mofa", version, about = "Build, cost, rewrite and check PMRID-style U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct and validate a baseline graph from a config.
    Build {
        /// Model config JSON; the calibrated default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and MAC report.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        /// CxHxW, batch 1.
        #[arg(long, default_value = "3x256x256")]
        input: String,
        /// actual | vanilla (all-vanilla estimate)
        #[arg(long, default_value = "actual")]
        convention: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write CSV; defaults to the --out path with a .csv extension.
        #[arg(long, num_args = 0..=1)]
        csv: Option<Option<PathBuf>>,
        /// Also write an SVG chart; defaults to the --out path with a .svg extension.
        #[arg(long, num_args = 0..=1)]
        svg: Option<Option<PathBuf>>,
    },
    /// Run the pass roadmap.
    Apply {
        #[arg(long)]
        model: PathBuf,
        /// Pass plan JSON; all five passes with defaults when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Oracle and invariant checks.
    Verify {
        /// Model JSON; the default baseline when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Overrides MOFA_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time reference kernels.
    Bench {
        /// Comma separated: vanilla, dw, pw, sep, pconv, pdw, deconv.
        #[arg(long, value_delimiter = ',', default_value = "pconv,pdw")]
        ops: Vec<String>,
        /// Comma separated CxHxW shapes.
        #[arg(long, value_delimiter = ',', default_value = "64x32x32")]
        shapes: Vec<String>,
        #[arg(long, default_value_t = 500)]
        budget_ms: u64,
        /// Write the result; .json for JSON, CSV otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a pass trace as a table.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// csv | json | markdown
        #[arg(long, default_value = "markdown")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append the published values, labelled as citations.
        #[arg(long)]
        published_reference: bool,
    },
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelFile, String> {
    ModelFile::from_json(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_plan(path: Option<&Path>) -> Result<PassPlan, String> {
    match path {
        Some(p) => PassPlan::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(PassPlan::default()),
    }
}

fn millions(n: u64) -> f64 {
    n as f64 / 1e6
}

fn giga(n: u64) -> f64 {
    n as f64 / 1e9
}

fn domain<T>(r: mofa_core::Result<T>) -> Result<T, String> {
    r.map_err(|e: MofaError| e.to_string())
}

fn sibling(out: &Path, explicit: Option<Option<PathBuf>>, ext: &str) -> Option<PathBuf> {
    explicit.map(|p| p.unwrap_or_else(|| out.with_extension(ext)))
}

fn run(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Build { config, out } => {
            let cfg = match &config {
                Some(p) => domain(load_config_file(p))?,
                None => ModelConfig::default(),
            };
            let g = domain(build_pmrid_like(&cfg))?;
            let input = Dims4::new(1, cfg.input_ch, 256, 256);
            let r = domain(analyze(&g, input, Convention::Actual))?;
            write(&out, &domain(ModelFile::new(g, Some(cfg)).to_json())?)?;
            println!(
                "built {} layers: {:.3} M params, {:.3} G MACs at {input} -> {}",
                r.per_layer.len(),
                millions(r.totals.params),
                giga(r.totals.macs),
                out.display()
            );
        }
        Command::Analyze { model, input, convention, out, csv, svg } => {
            let input: Dims4 = domain(input.parse())?;
            let convention: Convention = domain(convention.parse())?;
            let m = load_model(&model)?;
            let r = domain(analyze(&m.graph, input, convention))?;
            write(&out, &domain(r.to_json())?)?;
            if let Some(p) = sibling(&out, csv, "csv") {
                write(&p, &domain(r.to_csv())?)?;
            }
            if let Some(p) = sibling(&out, svg, "svg") {
                let (enc, cheap) = encoder_vs_cheap_share(&r);
                if enc <= cheap {
                    eprintln!("note: encoder share {enc:.4} does not exceed decoder+middle share {cheap:.4}");
                }
                domain(emit_distribution_chart(&r, &p))?;
            }
            println!(
                "{:.3} M params, {:.3} G {} ({convention}) at {input}",
                millions(r.totals.params),
                giga(r.totals.macs),
                r.unit
            );
        }
        Command::Apply { model, plan, out, trace } => {
            let m = load_model(&model)?;
            let plan = load_plan(plan.as_deref())?;
            let (g, t) = domain(run_roadmap(&m.graph, &plan))?;
            write(&out, &domain(ModelFile::new(g, None).to_json())?)?;
            if let Some(p) = trace {
                write(&p, &domain(t.to_json())?)?;
            }
            print!("{}", domain(render_trajectory_table(&t, TableFormat::Markdown, false))?);
            if let Some(last) = t.rows.last() {
                println!(
                    "final: {:.3} M params, {:.3} G MACs",
                    millions(last.params_after),
                    giga(last.macs_after)
                );
            }
        }
        Command::Verify { model, plan, seed } => {
            let g = match &model {
                Some(p) => load_model(p)?.graph,
                None => domain(build_pmrid_like(&ModelConfig::default()))?,
            };
            let plan = load_plan(plan.as_deref())?;
            let seed = match seed {
                Some(s) => s,
                None => domain(seed_from_env())?,
            };
            let report = run_verify(&g, &plan, &VerifyOptions { seed, ..Default::default() });
            println!("{report}");
            if !report.all_passed() {
                return Err("verification failed".into());
            }
        }
        Command::Bench { ops, shapes, budget_ms, out } => {
            let mut cases = Vec::new();
            for s in &shapes {
                let shape: Dims4 = domain(s.parse())?;
                for op in &ops {
                    cases.push((domain(bench_kind(op, shape.c))?, shape));
                }
            }
            let r = domain(microbench(&cases, Duration::from_millis(budget_ms)))?;
            println!("{} ({})", r.label, r.environment);
            for e in &r.entries {
                println!(
                    "{:<10} {:<16} median {:>12} ns  mad {:>10} ns  n={:<5} multiplies {}",
                    e.kind,
                    e.shape.to_string(),
                    e.median_ns,
                    e.mad_ns,
                    e.iterations,
                    e.multiplies
                );
            }
            if let Some(p) = out {
                let text = if p.extension().is_some_and(|e| e == "json") {
                    domain(r.to_json())?
                } else {
                    domain(r.to_csv())?
                };
                write(&p, &text)?;
            }
        }
        Command::Report { trace, format, out, published_reference } => {
            let format: TableFormat = domain(format.parse())?;
            let t = PassTrace::from_json(&read(&trace)?).map_err(|e| format!("{}: {e}", trace.display()))?;
            let text = domain(render_trajectory_table(&t, format, published_reference))?;
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
