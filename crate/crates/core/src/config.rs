//! TOML run configuration and the JSONL run record.
//!
//! ```toml
//! [network]   # NetworkConfig
//! [train]     # TrainConfig
//! [loss]      # CrConfig
//! [synth]     # SynthOptions
//! [proxy]     # ProxyTrainOptions
//! [ablate]    # AblateGrid
//! ```
//!
//! Missing sections and fields take their defaults; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::haze::SynthOptions;
use crate::losses::{CrConfig, CrVariant, ProxyTrainOptions};
use crate::net::{AttentionKind, NetworkConfig, Preset};
use crate::nonlocal::SamplerSpec;
use crate::train::{EvalSummary, StepStats, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: CrConfig,
    pub synth: SynthOptions,
    pub proxy: ProxyTrainOptions,
    pub ablate: AblateGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::preset(Preset::B),
            train: TrainConfig::default(),
            loss: CrConfig::default(),
            synth: SynthOptions::default(),
            proxy: ProxyTrainOptions::default(),
            ablate: AblateGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.synth.sampling.validate()?;
        self.proxy.extractor.validate()?;
        self.ablate.validate()
    }

    /// `--seed` applies to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.synth.seed = seed;
        self.proxy.seed = seed;
        self
    }

    /// `--preset` replaces the network section.
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.network = NetworkConfig::preset(preset);
        self
    }

    /// SHA-256 over the library sources and the effective configuration.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(code_hash().as_bytes());
        h.update(self.to_toml().as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sources compiled into this build, hashed so records identify the code.
const SOURCES: &[(&str, &str)] = &[
    ("autodiff/mod.rs", include_str!("autodiff/mod.rs")),
    ("autodiff/gradcheck.rs", include_str!("autodiff/gradcheck.rs")),
    ("blocks.rs", include_str!("blocks.rs")),
    ("checkpoint.rs", include_str!("checkpoint.rs")),
    ("config.rs", include_str!("config.rs")),
    ("cost.rs", include_str!("cost.rs")),
    ("data.rs", include_str!("data.rs")),
    ("haze.rs", include_str!("haze.rs")),
    ("image_io.rs", include_str!("image_io.rs")),
    ("kernels/broadcast.rs", include_str!("kernels/broadcast.rs")),
    ("kernels/conv.rs", include_str!("kernels/conv.rs")),
    ("kernels/linalg.rs", include_str!("kernels/linalg.rs")),
    ("kernels/pool.rs", include_str!("kernels/pool.rs")),
    ("losses.rs", include_str!("losses.rs")),
    ("metrics.rs", include_str!("metrics.rs")),
    ("net.rs", include_str!("net.rs")),
    ("nn.rs", include_str!("nn.rs")),
    ("nonlocal.rs", include_str!("nonlocal.rs")),
    ("optim.rs", include_str!("optim.rs")),
    ("tensor.rs", include_str!("tensor.rs")),
    ("train.rs", include_str!("train.rs")),
];

/// Git-style: each source is framed as `blob <len>\0<bytes>` before hashing.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    for (name, text) in SOURCES {
        h.update(name.as_bytes());
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
    }
    hex(&h.finalize())
}

/// One line of a records file.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub label: Option<String>,
    pub version: &'static str,
    pub code_hash: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub threads: usize,
    /// Train loss at every logging interval.
    pub losses: Vec<StepStats>,
    pub eval: Option<EvalSummary>,
    /// Command-specific results (proxy accuracy, timings).
    pub details: Option<serde_json::Value>,
    pub wall_time_s: f64,
    /// `None` on success, the error text otherwise.
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(command: &str, config: &RunConfig, threads: usize) -> Self {
        RunRecord {
            command: command.to_owned(),
            label: None,
            version: env!("CARGO_PKG_VERSION"),
            code_hash: code_hash(),
            config_hash: config.content_hash(),
            config: config.clone(),
            threads,
            losses: Vec::new(),
            eval: None,
            details: None,
            wall_time_s: 0.0,
            error: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// Attention axis of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    None,
    Nlb,
    Cnl,
    CnlSpp,
    CnlSpds,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::None,
        AttentionVariant::Nlb,
        AttentionVariant::Cnl,
        AttentionVariant::CnlSpp,
        AttentionVariant::CnlSpds,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttentionVariant::None => "none",
            AttentionVariant::Nlb => "nlb",
            AttentionVariant::Cnl => "cnl",
            AttentionVariant::CnlSpp => "cnl_spp",
            AttentionVariant::CnlSpds => "cnl_spds",
        }
    }

    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (attention, sampler) = match self {
            AttentionVariant::None => (AttentionKind::None, SamplerSpec::None),
            AttentionVariant::Nlb => (AttentionKind::NonLocal, SamplerSpec::None),
            AttentionVariant::Cnl => (AttentionKind::CrossNonLocal, SamplerSpec::None),
            AttentionVariant::CnlSpp => (AttentionKind::CrossNonLocal, SamplerSpec::spp()),
            AttentionVariant::CnlSpds => (AttentionKind::CrossNonLocal, SamplerSpec::spds()),
        };
        cfg.attention = attention;
        cfg.sampler = sampler;
    }
}

/// Axes swept by `ablate`; the level-3 block kind, the attention stage and the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateGrid {
    pub blocks: Vec<BlockKind>,
    pub attention: Vec<AttentionVariant>,
    pub losses: Vec<CrVariant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateGrid {
    fn default() -> Self {
        AblateGrid {
            blocks: vec![BlockKind::Fab, BlockKind::ParallelFe, BlockKind::MsfeSa, BlockKind::Msfab],
            attention: AttentionVariant::ALL.to_vec(),
            losses: CrVariant::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblateCell {
    pub block: BlockKind,
    pub attention: AttentionVariant,
    pub loss: CrVariant,
    pub seed: u64,
}

impl AblateCell {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/seed{}",
            self.block.label(),
            self.attention.label(),
            self.loss.label(),
            self.seed
        )
    }

    /// The base configuration with this cell's switches applied.
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone().with_seed(self.seed);
        cfg.network.encoder_blocks[2] = self.block;
        self.attention.apply(&mut cfg.network);
        cfg.loss.variant = self.loss;
        cfg
    }
}

impl AblateGrid {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.attention.is_empty() || self.losses.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<AblateCell> {
        let mut out = Vec::new();
        for &block in &self.blocks {
            for &attention in &self.attention {
                for &loss in &self.losses {
                    for &seed in &self.seeds {
                        out.push(AblateCell {
                            block,
                            attention,
                            loss,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[nonsense]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[train]\ncrop_size = 40\n").is_err());
        assert!(RunConfig::parse("[network]\nstage_depths = [1, 0, 1, 1, 1]\n").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse("[train]\niterations = 7\n[network.sampler]\nvariant = \"spp\"\noutput_sizes = [1, 2]\n").unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.lr_init, 2e-4);
        assert_eq!(cfg.network.sampler, SamplerSpec::Spp { output_sizes: vec![1, 2] });
        assert_eq!(cfg.network.base_channels, 32);
    }

    #[test]
    fn grid_size_is_the_product_of_axes() {
        let g = AblateGrid {
            blocks: vec![BlockKind::Fab, BlockKind::Msfab],
            attention: vec![AttentionVariant::None, AttentionVariant::CnlSpds],
            losses: vec![CrVariant::None, CrVariant::Dfcr],
            seeds: vec![0],
        };
        let cells = g.cells();
        assert_eq!(cells.len(), 8);
        let c = cells[3].configure(&RunConfig::default());
        assert_eq!(c.network.encoder_blocks[2], BlockKind::Fab);
        assert_eq!(c.network.sampler, SamplerSpec::spds());
        assert_eq!(c.loss.variant, CrVariant::Dfcr);
    }

    #[test]
    fn record_is_one_json_line() {
        let r = RunRecord::new("count", &RunConfig::default(), 1);
        let line = r.to_json_line();
        assert_eq!(line.matches('\n').count(), 1);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["config_hash"], RunConfig::default().content_hash());
        assert_eq!(v["config"]["train"]["lr_init"], 2e-4);
    }

    #[test]
    fn hash_tracks_the_config() {
        let a = RunConfig::default();
        let b = a.clone().with_seed(5);
        assert_eq!(a.content_hash(), a.content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }
}
