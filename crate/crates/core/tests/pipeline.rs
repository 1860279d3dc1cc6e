use mofa_core::analyzer::{analyze, Convention};
use mofa_core::builders::{build_pmrid_like, Downsample, ModelConfig, ModelFile, Upsample};
use mofa_core::interpreter::{forward, Weights};
use mofa_core::ir::{validate, SkipMerge};
use mofa_core::passes::{run_roadmap, PassPlan, UpdownScope};
use mofa_core::verify::oracle_model;
use mofa_core::{Dims4, Tensor};

fn small() -> Dims4 {
    Dims4::new(1, 3, 32, 32)
}

#[test]
fn forward_is_deterministic() {
    let g = build_pmrid_like(&ModelConfig::default()).unwrap();
    let w = Weights::init(&g, 11);
    let x = Tensor::from_seed(small(), 11).unwrap();
    let (a, sa) = forward(&g, &w, &x).unwrap();
    let (b, sb) = forward(&g, &w, &x).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(sa, sb);
    assert_eq!(a.shape(), small());
}

#[test]
fn mofa_model_counts_match_analyzer() {
    let g = build_pmrid_like(&ModelConfig::default()).unwrap();
    let (mofa, _) = run_roadmap(&g, &PassPlan::default()).unwrap();
    let total = oracle_model(&mofa, small(), 0).unwrap();
    assert_eq!(total, analyze(&mofa, small(), Convention::Actual).unwrap().totals.macs);
}

#[test]
fn variants_run_end_to_end() {
    for (down, up, merge) in [
        (Downsample::AvgPoolConv, Upsample::InterpThenConv, SkipMerge::Concat),
        (Downsample::Stride2Separable, Upsample::ConvThenInterp, SkipMerge::Add),
    ] {
        let cfg = ModelConfig { downsample: down, upsample: up, skip_merge: merge, ..ModelConfig::default() };
        let g = build_pmrid_like(&cfg).unwrap();
        let plan = PassPlan { updown_scope: UpdownScope::Both, ..PassPlan::default() };
        let (mofa, _) = run_roadmap(&g, &plan).unwrap();
        for graph in [&g, &mofa] {
            // odd extent exercises ceil-mode downsampling
            oracle_model(graph, Dims4::new(1, 3, 48, 48), 1).unwrap();
        }
    }
}

#[test]
fn model_file_survives_roadmap() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_pmrid_like(&ModelConfig::default()).unwrap();
    let (mofa, _) = run_roadmap(&g, &PassPlan::default()).unwrap();
    let path = dir.path().join("mofa.json");
    ModelFile::new(mofa.clone(), None).save(&path).unwrap();
    let back = ModelFile::load(&path).unwrap();
    assert_eq!(back.graph, mofa);
    assert_eq!(validate(&back.graph), Ok(()));
}
