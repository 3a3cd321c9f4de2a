//! Run configuration, read from TOML.
//!
//! Only `seed` is mandatory. Every other key has the default shown in
//! [`RunConfig::default`] and in the README; unknown keys are rejected.

use std::path::{Path, PathBuf};

use moda_core::aligner::{AlignerVariant, FuserMode, FuserState};
use moda_core::diagnostics::Series;
use moda_core::modality::ModalityId;
use moda_core::modmask::{MaskSpec, MaskVariant, DEFAULT_BETA, DEFAULT_FIXED_VALUE};
use moda_core::toymodel::{
    AttentionKind, BlockConfig, BlockOverride, CombineMode, HyperParams, ModelConfig, Pattern,
    SyntheticTask,
};
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub diag: DiagSection,
    #[serde(default)]
    pub demo: DemoSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("moda-out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: default_output_dir(),
            model: ModelSection::default(),
            task: TaskSection::default(),
            train: TrainSection::default(),
            diag: DiagSection::default(),
            demo: DemoSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Block fields plus model width and depth. Token counts and vocabularies
/// come from `[task]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub blocks: usize,
    pub attention: AttentionKind,
    pub use_mdm: bool,
    pub use_daa: bool,
    pub mask: MaskVariant,
    pub beta: f64,
    pub p_base: f64,
    pub fixed_value: f64,
    pub aligner: AlignerVariant,
    pub fuser: FuserMode,
    /// 0 selects `max(1, d/4)`.
    pub adapter_rank: usize,
    pub combine: CombineMode,
    pub classes: usize,
    pub text_embed_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 32,
            blocks: 2,
            attention: AttentionKind::Moda,
            use_mdm: true,
            use_daa: true,
            mask: MaskVariant::Pseudo,
            beta: DEFAULT_BETA,
            p_base: 0.0,
            fixed_value: DEFAULT_FIXED_VALUE,
            aligner: AlignerVariant::Cov,
            fuser: FuserMode::Add,
            adapter_rank: 0,
            combine: CombineMode::Concat,
            classes: 2,
            text_embed_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub n_visual: usize,
    pub n_text: usize,
    pub vocab_visual: usize,
    pub vocab_text: usize,
    pub pattern: Pattern,
    /// Number of generated samples; the tail `eval_fraction` is held out.
    pub count: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            n_visual: 4,
            n_text: 4,
            vocab_visual: 16,
            vocab_text: 16,
            pattern: Pattern::Majority,
            count: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub eval_interval: usize,
    pub weight_decay: f64,
    pub eval_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = HyperParams::default();
        TrainSection {
            lr: h.lr,
            steps: h.steps,
            batch: h.batch,
            eval_interval: h.eval_interval,
            weight_decay: h.weight_decay,
            eval_fraction: h.eval_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusName {
    Visual,
    Text,
}

impl From<FocusName> for ModalityId {
    fn from(f: FocusName) -> Self {
        match f {
            FocusName::Visual => ModalityId::VISUAL,
            FocusName::Text => ModalityId::TEXT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSection {
    /// Focus modality whose series is fitted.
    pub focus: FocusName,
    pub series: Series,
    /// Also export full per-layer attention maps of the first eval sample.
    pub heatmaps: bool,
}

impl Default for DiagSection {
    fn default() -> Self {
        DiagSection {
            focus: FocusName::Text,
            series: Series::CrossMean,
            heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub d: usize,
    pub n_visual: usize,
    pub n_text: usize,
    /// Size of the printed causal pseudo mask.
    pub mask_n: usize,
    pub beta: f64,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection {
            d: 4,
            n_visual: 2,
            n_text: 3,
            mask_n: 3,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Overrides applied to `[model]`, one trained model per entry.
    pub grid: Vec<BlockOverride>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            grid: BlockOverride::toggle_grid(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model_config()?;
        Ok(cfg)
    }

    pub fn block_config(&self) -> BlockConfig {
        let m = &self.model;
        let rank = if m.adapter_rank == 0 {
            FuserState::default_rank(m.d)
        } else {
            m.adapter_rank
        };
        let mut block = BlockConfig {
            attention_kind: m.attention,
            mask_spec: MaskSpec {
                variant: m.mask,
                beta: m.beta,
                p_base: m.p_base,
                fixed_value: m.fixed_value,
                n: 0,
            },
            aligner_variant: m.aligner,
            fuser_mode: m.fuser,
            adapter_rank: rank,
            combine: m.combine,
            use_mdm: m.use_mdm,
            use_daa: m.use_daa,
        };
        if m.attention == AttentionKind::BaselineJoint {
            block.use_mdm = false;
            block.use_daa = false;
        }
        block
    }

    pub fn model_config(&self) -> Result<ModelConfig, Error> {
        let t = &self.task;
        let cfg = ModelConfig {
            d: self.model.d,
            blocks: self.model.blocks,
            n_visual: t.n_visual,
            n_text: t.n_text,
            vocab_visual: t.vocab_visual,
            vocab_text: t.vocab_text,
            classes: self.model.classes,
            text_embed_scale: self.model.text_embed_scale,
            block: self.block_config(),
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.task.count == 0 {
            return Err(Error::Config("task.count must be at least 1".into()));
        }
        if t.pattern == Pattern::FirstVsLast && t.n_visual < 2 {
            return Err(Error::Config("first_vs_last needs n_visual >= 2".into()));
        }
        if t.vocab_visual < 2 {
            return Err(Error::Config("vocab_visual must be at least 2".into()));
        }
        Ok(cfg)
    }

    pub fn task(&self) -> SyntheticTask {
        let t = &self.task;
        SyntheticTask {
            seed: self.seed,
            n_visual: t.n_visual,
            n_text: t.n_text,
            vocab_visual: t.vocab_visual,
            vocab_text: t.vocab_text,
            pattern: t.pattern,
        }
    }

    pub fn hyper(&self) -> HyperParams {
        let t = &self.train;
        HyperParams {
            lr: t.lr,
            steps: t.steps,
            batch: t.batch,
            eval_interval: t.eval_interval,
            weight_decay: t.weight_decay,
            eval_fraction: t.eval_fraction,
            seed: self.seed,
        }
    }
}
