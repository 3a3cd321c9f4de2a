//! A small multimodal transformer with hand-written reverse-mode gradients.
//!
//! Each block is either a standard joint causal attention block or a MODA
//! block: per-modality self/cross attention with modular masks and, when
//! enabled, Gram-aligned cross-modal keys. The classifier reads the final
//! (text) position.

mod data;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerVariant, FuserMode, FuserState};
use crate::modmask::{MaskSpec, MaskVariant};
use crate::{Error, Result};

pub use data::{gen_synthetic_dataset, Pattern, Sample, SyntheticTask};
pub use model::{
    backward, cross_entropy, forward, BlockParams, Forward, ForwardCache, Gradients, ModelState,
};
pub use train::{
    ablate, evaluate, train, AblationRow, AdamW, BlockOverride, Evaluation, HyperParams,
    MetricRecord, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// One causal softmax over the whole sequence.
    BaselineJoint,
    /// Separate self and cross softmaxes per modality.
    Moda,
}

/// How the self and cross outputs of a MODA block merge before the output
/// projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// `[O_self | O_cross]·W` with `W` of shape `2d × d`.
    Concat,
    /// `(O_self + O_cross)·W` with `W` of shape `d × d`.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub attention_kind: AttentionKind,
    /// Masks used when `use_mdm` is on; causal `-inf` masks otherwise.
    pub mask_spec: MaskSpec,
    pub aligner_variant: AlignerVariant,
    pub fuser_mode: FuserMode,
    pub adapter_rank: usize,
    pub combine: CombineMode,
    pub use_mdm: bool,
    pub use_daa: bool,
}

impl BlockConfig {
    /// Full MODA block: pseudo-score masks, Gram aligner, additive fuser.
    pub fn moda(d: usize) -> Self {
        BlockConfig {
            attention_kind: AttentionKind::Moda,
            mask_spec: MaskSpec::new(MaskVariant::Pseudo, 0),
            aligner_variant: AlignerVariant::Cov,
            fuser_mode: FuserMode::Add,
            adapter_rank: FuserState::default_rank(d),
            combine: CombineMode::Concat,
            use_mdm: true,
            use_daa: true,
        }
    }

    pub fn baseline(d: usize) -> Self {
        BlockConfig {
            attention_kind: AttentionKind::BaselineJoint,
            use_mdm: false,
            use_daa: false,
            ..Self::moda(d)
        }
    }

    /// Sets both toggles; attention kind follows (no toggle means baseline).
    pub fn with_toggles(mut self, use_mdm: bool, use_daa: bool) -> Self {
        self.use_mdm = use_mdm;
        self.use_daa = use_daa;
        self.attention_kind = if use_mdm || use_daa {
            AttentionKind::Moda
        } else {
            AttentionKind::BaselineJoint
        };
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.attention_kind == AttentionKind::Moda && !(self.use_mdm || self.use_daa) {
            return Err(Error::InvalidConfig(
                "a MODA block needs use_mdm or use_daa".into(),
            ));
        }
        if self.adapter_rank == 0 || self.adapter_rank > d {
            return Err(Error::RankExceedsDim {
                rank: self.adapter_rank,
                dim: d,
            });
        }
        self.mask_spec.validate()
    }

    pub(crate) fn effective_mask(&self) -> MaskSpec {
        if self.use_mdm {
            self.mask_spec
        } else {
            MaskSpec::new(MaskVariant::Inf, self.mask_spec.n)
        }
    }

    pub(crate) fn learnable_masks(&self) -> bool {
        self.attention_kind == AttentionKind::Moda
            && self.use_mdm
            && self.mask_spec.variant == MaskVariant::Learn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub n_visual: usize,
    pub n_text: usize,
    pub vocab_visual: usize,
    pub vocab_text: usize,
    pub classes: usize,
    /// Init scale of text embeddings relative to visual ones; values above 1
    /// bias an untrained model toward text keys.
    pub text_embed_scale: f64,
    pub block: BlockConfig,
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.n_visual + self.n_text
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_visual == 0 || self.n_text == 0 || self.classes < 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "degenerate model config: {self:?}"
            )));
        }
        if self.vocab_visual == 0 || self.vocab_text == 0 {
            return Err(Error::InvalidConfig("empty vocabulary".into()));
        }
        self.block.validate(self.d)
    }
}
