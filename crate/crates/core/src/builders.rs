//! PMRID-style U-Net construction from a declarative config, plus the JSON
//! file formats for configs and built models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MofaError, Result};
use crate::ir::{
    validate, ActivationKind, ConvSpec, InterpMode, LayerKind, LayerNode, NetGraph, Role,
    SkipLink, SkipMerge, Stage,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Downsample {
    #[default]
    #[serde(rename = "stride2-separable")]
    Stride2Separable,
    #[serde(rename = "avgpool+conv")]
    AvgPoolConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    #[default]
    Deconv,
    ConvThenInterp,
    InterpThenConv,
}

/// Spatial kernel sizes per layer family. All must be odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Kernels {
    pub io: usize,
    pub encoder: usize,
    pub middle: usize,
    pub decoder: usize,
    pub downsample: usize,
    pub upsample: usize,
}

impl Default for Kernels {
    fn default() -> Self {
        Kernels {
            io: 3,
            encoder: 5,
            middle: 3,
            decoder: 3,
            downsample: 5,
            upsample: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub input_ch: usize,
    pub stem_ch: usize,
    pub enc_stages: Vec<StageConfig>,
    pub middle_blocks: usize,
    pub dec_stages: Vec<StageConfig>,
    pub downsample: Downsample,
    pub upsample: Upsample,
    pub skip_merge: SkipMerge,
    pub kernels: Kernels,
    /// Encoder and middle blocks squeeze to `channels / bottleneck` between
    /// their two separable convs.
    pub bottleneck: usize,
    pub activation: ActivationKind,
}

impl Default for ModelConfig {
    /// Widths calibrated so the baseline lands near 1.03 M parameters and
    /// 1.15 G MACs at 3×256×256.
    fn default() -> Self {
        let st = |channels, blocks| StageConfig { channels, blocks };
        ModelConfig {
            schema_version: None,
            input_ch: 3,
            stem_ch: 32,
            enc_stages: vec![st(64, 2), st(128, 2), st(256, 4), st(512, 2)],
            middle_blocks: 1,
            dec_stages: vec![st(128, 1), st(64, 1), st(32, 2), st(16, 2)],
            downsample: Downsample::default(),
            upsample: Upsample::default(),
            skip_merge: SkipMerge::default(),
            kernels: Kernels::default(),
            bottleneck: 4,
            activation: ActivationKind::default(),
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        let err = |m: String| Err(MofaError::Config(m));
        if let Some(v) = self.schema_version {
            if v != SCHEMA_VERSION {
                return err(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"));
            }
        }
        if self.enc_stages.len() != 4 {
            return err(format!("expected 4 encoder stages, got {}", self.enc_stages.len()));
        }
        if self.dec_stages.len() != 4 {
            return err(format!("expected 4 decoder stages, got {}", self.dec_stages.len()));
        }
        if self.input_ch == 0 || self.stem_ch == 0 {
            return err("input_ch and stem_ch must be >= 1".into());
        }
        if self.bottleneck == 0 {
            return err("bottleneck must be >= 1".into());
        }
        for (name, s) in self
            .enc_stages
            .iter()
            .map(|s| ("encoder", s))
            .chain(self.dec_stages.iter().map(|s| ("decoder", s)))
        {
            if s.channels == 0 {
                return err(format!("{name} stage channels must be >= 1"));
            }
        }
        for s in &self.enc_stages {
            if s.channels / self.bottleneck == 0 {
                return err(format!(
                    "encoder width {} too narrow for bottleneck {}",
                    s.channels, self.bottleneck
                ));
            }
        }
        let k = self.kernels;
        for (name, v) in [
            ("io", k.io),
            ("encoder", k.encoder),
            ("middle", k.middle),
            ("decoder", k.decoder),
            ("downsample", k.downsample),
            ("upsample", k.upsample),
        ] {
            if v % 2 == 0 {
                return err(format!("{name} kernel must be odd, got {v}"));
            }
        }
        Ok(())
    }
}

/// Parses a config; absent fields take their defaults and unknown fields
/// are rejected. `schema_version` is optional here.
pub fn parse_config(text: &[u8]) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_slice(text)?;
    cfg.check()?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &ModelConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

/// Reads a config file. Files must carry `schema_version: 1`.
pub fn load_config_file(path: &Path) -> Result<ModelConfig> {
    let cfg = parse_config(&fs::read(path)?)?;
    if cfg.schema_version.is_none() {
        return Err(MofaError::Config("config files must set \"schema_version\": 1".into()));
    }
    Ok(cfg)
}

/// On-disk form of a built (and possibly rewritten) graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub graph: NetGraph,
}

impl ModelFile {
    pub fn new(graph: NetGraph, config: Option<ModelConfig>) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            config,
            graph,
        }
    }

    pub fn from_json(text: &[u8]) -> Result<Self> {
        let m: ModelFile = serde_json::from_slice(text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(MofaError::Parse(format!(
                "unsupported schema_version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

struct Builder {
    nodes: Vec<LayerNode>,
    act: ActivationKind,
}

impl Builder {
    fn push(&mut self, id: String, kind: LayerKind, stage: Stage, role: Role, inputs: &[&str]) -> String {
        let inputs = inputs.iter().map(|s| s.to_string()).collect();
        self.nodes.push(LayerNode::new(id.clone(), kind, stage, role, inputs));
        id
    }

    fn act(&mut self, id: String, stage: Stage, from: &str) -> String {
        let kind = LayerKind::Activation { act: self.act };
        self.push(id, kind, stage, Role::Body, &[from])
    }

    fn separable(cin: usize, cout: usize, k: usize, stride: usize) -> LayerKind {
        LayerKind::SeparableConv {
            depthwise: ConvSpec::new(cin, cin, k, stride, false),
            pointwise: ConvSpec::new(cin, cout, 1, 1, true),
        }
    }

    /// sep(c→mid) → act → sep(mid→c) → add(residual) → act
    fn block(&mut self, prefix: &str, stage: Stage, c: usize, mid: usize, k: usize, from: &str) -> String {
        let c1 = self.push(format!("{prefix}_conv1"), Self::separable(c, mid, k, 1), stage, Role::Body, &[from]);
        let a1 = self.act(format!("{prefix}_act1"), stage, &c1);
        let c2 = self.push(format!("{prefix}_conv2"), Self::separable(mid, c, k, 1), stage, Role::Body, &[&a1]);
        let add = self.push(format!("{prefix}_add"), LayerKind::Add, stage, Role::Body, &[from, &c2]);
        self.act(format!("{prefix}_act2"), stage, &add)
    }
}

/// Builds the baseline network: vanilla input/output convs, separable
/// residual blocks in every stage, stride-2 separable downsampling,
/// deconvolution upsampling (by default), and skips enc_i ↔ dec_(5-i).
pub fn build_pmrid_like(cfg: &ModelConfig) -> Result<NetGraph> {
    cfg.check()?;
    let k = cfg.kernels;
    let mut b = Builder {
        nodes: Vec::new(),
        act: cfg.activation,
    };

    let stem = b.push(
        "input".into(),
        LayerKind::VanillaConv(ConvSpec::new(cfg.input_ch, cfg.stem_ch, k.io, 1, true)),
        Stage::Input,
        Role::Io,
        &[],
    );
    let mut x = b.act("input_act".into(), Stage::Input, &stem);
    let mut prev_ch = cfg.stem_ch;

    let mut enc_out = Vec::with_capacity(4);
    for (i, st) in cfg.enc_stages.iter().enumerate() {
        let stage = Stage::encoder(i + 1).expect("four encoder stages");
        let name = format!("enc{}", i + 1);
        let down = match cfg.downsample {
            Downsample::Stride2Separable => b.push(
                format!("{name}_down"),
                Builder::separable(prev_ch, st.channels, k.downsample, 2),
                Stage::UpDown,
                Role::Downsample,
                &[&x],
            ),
            Downsample::AvgPoolConv => {
                let pool = b.push(
                    format!("{name}_down_pool"),
                    LayerKind::AvgPool2x2,
                    Stage::UpDown,
                    Role::Downsample,
                    &[&x],
                );
                b.push(
                    format!("{name}_down"),
                    Builder::separable(prev_ch, st.channels, k.downsample, 1),
                    Stage::UpDown,
                    Role::Downsample,
                    &[&pool],
                )
            }
        };
        x = b.act(format!("{name}_down_act"), stage, &down);
        let mid = st.channels / cfg.bottleneck;
        for j in 0..st.blocks {
            x = b.block(&format!("{name}_b{}", j + 1), stage, st.channels, mid, k.encoder, &x);
        }
        enc_out.push((x.clone(), st.channels));
        prev_ch = st.channels;
    }

    let mid = prev_ch / cfg.bottleneck;
    for j in 0..cfg.middle_blocks {
        x = b.block(&format!("middle_b{}", j + 1), Stage::Middle, prev_ch, mid, k.middle, &x);
    }
    let first_dec = cfg.dec_stages[0].channels;
    if first_dec != prev_ch {
        let proj = b.push(
            "middle_proj".into(),
            LayerKind::PointwiseConv(ConvSpec::new(prev_ch, first_dec, 1, 1, true)),
            Stage::Middle,
            Role::Body,
            &[&x],
        );
        x = b.act("middle_proj_act".into(), Stage::Middle, &proj);
    }

    let mut skips = Vec::with_capacity(4);
    for (j, st) in cfg.dec_stages.iter().enumerate() {
        let stage = Stage::decoder(j + 1).expect("four decoder stages");
        let name = format!("dec{}", j + 1);
        let c = st.channels;
        let (skip_id, skip_ch) = enc_out[3 - j].clone();
        skips.push(SkipLink {
            encoder: Stage::encoder(4 - j).expect("four encoder stages"),
            decoder: stage,
            merge: cfg.skip_merge,
        });
        x = match cfg.skip_merge {
            SkipMerge::Add => {
                let skip = if skip_ch != c {
                    b.push(
                        format!("{name}_skip_proj"),
                        LayerKind::PointwiseConv(ConvSpec::new(skip_ch, c, 1, 1, true)),
                        stage,
                        Role::Body,
                        &[&skip_id],
                    )
                } else {
                    skip_id
                };
                b.push(format!("{name}_merge"), LayerKind::Add, stage, Role::Body, &[&x, &skip])
            }
            SkipMerge::Concat => {
                let cat = b.push(
                    format!("{name}_merge"),
                    LayerKind::ConcatSkip,
                    stage,
                    Role::Body,
                    &[&x, &skip_id],
                );
                b.push(
                    format!("{name}_fuse"),
                    LayerKind::PointwiseConv(ConvSpec::new(c + skip_ch, c, 1, 1, true)),
                    stage,
                    Role::Body,
                    &[&cat],
                )
            }
        };
        for blk in 0..st.blocks {
            x = b.block(&format!("{name}_b{}", blk + 1), stage, c, c, k.decoder, &x);
        }
        let next = cfg.dec_stages.get(j + 1).map_or(cfg.stem_ch, |s| s.channels);
        let up = format!("{name}_up");
        let interp = LayerKind::Interp2x {
            mode: InterpMode::Nearest,
        };
        x = match cfg.upsample {
            Upsample::Deconv => b.push(
                up,
                LayerKind::Deconv(ConvSpec::new(c, next, k.upsample, 2, true)),
                Stage::UpDown,
                Role::Upsample,
                &[&x],
            ),
            Upsample::ConvThenInterp => {
                let conv = b.push(
                    up.clone(),
                    LayerKind::VanillaConv(ConvSpec::new(c, next, k.upsample, 1, true)),
                    Stage::UpDown,
                    Role::Upsample,
                    &[&x],
                );
                b.push(format!("{up}.interp"), interp, Stage::UpDown, Role::Upsample, &[&conv])
            }
            Upsample::InterpThenConv => {
                let i = b.push(format!("{up}.interp"), interp, Stage::UpDown, Role::Upsample, &[&x]);
                b.push(
                    up,
                    LayerKind::VanillaConv(ConvSpec::new(c, next, k.upsample, 1, true)),
                    Stage::UpDown,
                    Role::Upsample,
                    &[&i],
                )
            }
        };
    }

    b.push(
        "output".into(),
        LayerKind::VanillaConv(ConvSpec::new(cfg.stem_ch, cfg.input_ch, k.io, 1, true)),
        Stage::Output,
        Role::Io,
        &[&x],
    );

    let g = NetGraph {
        nodes: b.nodes,
        skips,
    };
    validate(&g).map_err(|v| {
        let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
        MofaError::Config(format!("config produced an invalid graph: {}", msgs.join("; ")))
    })?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{infer_shapes, output_shape};
    use crate::tensor::Dims4;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_config(b"{}").unwrap(), ModelConfig::default());
    }

    #[test]
    fn round_trip() {
        let text = br#"{"enc_stages":[{"channels":32,"blocks":2},{"channels":64,"blocks":2},{"channels":128,"blocks":4},{"channels":256,"blocks":2}]}"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.enc_stages[0].channels, 32);
        let again = parse_config(serialize_config(&cfg).unwrap().as_bytes()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn three_stages_rejected() {
        let text = br#"{"enc_stages":[{"channels":32,"blocks":2},{"channels":64,"blocks":2},{"channels":128,"blocks":4}]}"#;
        let err = parse_config(text).unwrap_err();
        assert!(matches!(err, MofaError::Config(ref m) if m.contains("expected 4")));
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(parse_config(br#"{"stem_channels":16}"#), Err(MofaError::Parse(_))));
        assert!(matches!(parse_config(b"{not json"), Err(MofaError::Parse(_))));
    }

    #[test]
    fn file_needs_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, "{}").unwrap();
        assert!(matches!(load_config_file(&p), Err(MofaError::Config(_))));
        fs::write(&p, r#"{"schema_version":1}"#).unwrap();
        assert_eq!(load_config_file(&p).unwrap().stem_ch, 32);
        fs::write(&p, r#"{"schema_version":2}"#).unwrap();
        assert!(load_config_file(&p).is_err());
    }

    #[test]
    fn default_graph_is_valid() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        assert_eq!(validate(&g), Ok(()));
        let shapes = infer_shapes(&g, Dims4::new(1, 3, 256, 256)).unwrap();
        assert_eq!(shapes["output"], Dims4::new(1, 3, 256, 256));
        assert_eq!(shapes["middle_b1_conv1"], Dims4::new(1, 128, 16, 16));
    }

    #[test]
    fn baseline_structure() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        assert!(!g.contains_kind(|k| matches!(k, LayerKind::PConv { .. } | LayerKind::PdwConv { .. })));
        assert!(matches!(g.input_node().unwrap().kind, LayerKind::VanillaConv(_)));
        assert!(matches!(g.output_node().unwrap().kind, LayerKind::VanillaConv(_)));
        for (stage, blocks) in Stage::ENCODERS.iter().zip([2, 2, 4, 2]) {
            let n = g
                .nodes
                .iter()
                .filter(|n| n.stage == *stage && n.id.ends_with("_conv1"))
                .count();
            assert_eq!(n, blocks, "{stage}");
        }
        assert_eq!(g.skips.len(), 4);
        assert_eq!(g.skips[0].encoder, Stage::Enc4);
        assert_eq!(g.skips[0].decoder, Stage::Dec1);
        let body_convs = g
            .nodes
            .iter()
            .filter(|n| n.stage.is_encoder() || n.stage.is_decoder())
            .filter(|n| n.id.contains("_b"))
            .filter(|n| n.kind.is_conv());
        for n in body_convs {
            assert!(matches!(n.kind, LayerKind::SeparableConv { .. }), "{}", n.id);
        }
    }

    #[test]
    fn all_variants_preserve_end_to_end_shape() {
        for down in [Downsample::Stride2Separable, Downsample::AvgPoolConv] {
            for up in [Upsample::Deconv, Upsample::ConvThenInterp, Upsample::InterpThenConv] {
                for merge in [SkipMerge::Add, SkipMerge::Concat] {
                    let cfg = ModelConfig {
                        downsample: down,
                        upsample: up,
                        skip_merge: merge,
                        ..ModelConfig::default()
                    };
                    let g = build_pmrid_like(&cfg).unwrap();
                    for hw in [16, 48, 64] {
                        assert_eq!(
                            output_shape(&g, Dims4::new(1, 3, hw, hw)).unwrap(),
                            Dims4::new(1, 3, hw, hw)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn io_stays_vanilla_with_odd_settings() {
        let cfg = ModelConfig {
            input_ch: 4,
            stem_ch: 8,
            middle_blocks: 0,
            ..ModelConfig::default()
        };
        let g = build_pmrid_like(&cfg).unwrap();
        assert!(matches!(g.input_node().unwrap().kind, LayerKind::VanillaConv(c) if c.in_ch == 4));
        assert!(matches!(g.output_node().unwrap().kind, LayerKind::VanillaConv(c) if c.out_ch == 4));
    }

    #[test]
    fn model_file_round_trip() {
        let g = build_pmrid_like(&ModelConfig::default()).unwrap();
        let m = ModelFile::new(g, Some(ModelConfig::default()));
        let back = ModelFile::from_json(m.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = ModelConfig {
            kernels: Kernels {
                encoder: 4,
                ..Kernels::default()
            },
            ..ModelConfig::default()
        };
        assert!(matches!(build_pmrid_like(&cfg), Err(MofaError::Config(_))));
    }
}
