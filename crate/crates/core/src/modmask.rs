//! Attention masks.
//!
//! Every mask compiles to a [`CompiledMask`]: an additive logit matrix plus
//! per-entry flags. Allowed positions add `0` to the raw score. What happens
//! at a disallowed position depends on the variant:
//!
//! | variant         | disallowed entry                                    |
//! |-----------------|-----------------------------------------------------|
//! | `Inf`           | `-inf`, weight exactly zero                         |
//! | `Fix`           | raw score plus a fixed negative constant            |
//! | `Pseudo`/`Learn`| pseudo logit `p_base - (j-1)·β` *replaces* the score |
//! | `SpecialToken`  | `-inf`, plus one always-visible sink column         |
//!
//! Pseudo entries and sink columns take part in the softmax denominator but
//! read no value row, so they absorb probability mass without leaking
//! content from forbidden tokens.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::modality::{ModalityPair, Segmentation};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_FIXED_VALUE: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    Inf,
    Fix,
    Learn,
    SpecialToken,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub variant: MaskVariant,
    pub beta: f64,
    pub p_base: f64,
    pub fixed_value: f64,
    pub n: usize,
}

impl MaskSpec {
    pub fn new(variant: MaskVariant, n: usize) -> Self {
        MaskSpec {
            variant,
            beta: DEFAULT_BETA,
            p_base: 0.0,
            fixed_value: DEFAULT_FIXED_VALUE,
            n,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidDecay(self.beta));
        }
        Ok(())
    }
}

/// Additive logit mask with pseudo-entry and value-participation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledMask {
    variant: MaskVariant,
    logits: Matrix,
    pseudo: Vec<bool>,
    value_participation: Vec<bool>,
    key_count: usize,
}

impl CompiledMask {
    /// Plain additive mask over `mask.cols()` keys, no pseudo entries.
    pub fn additive(mask: Matrix) -> Self {
        let (r, c) = mask.shape();
        CompiledMask {
            variant: MaskVariant::Inf,
            logits: mask,
            pseudo: vec![false; r * c],
            value_participation: vec![true; c],
            key_count: c,
        }
    }

    /// Compiles a mask for `rows × keys` from an admissibility predicate.
    pub fn from_allowed(
        rows: usize,
        keys: usize,
        spec: &MaskSpec,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        spec.validate()?;
        let sink = usize::from(spec.variant == MaskVariant::SpecialToken);
        let cols = keys + sink;
        let mut logits = Matrix::zeros(rows, cols);
        let mut pseudo = vec![false; rows * cols];
        for i in 0..rows {
            let mut rank = 0usize;
            for j in 0..keys {
                if allowed(i, j) {
                    continue;
                }
                logits[(i, j)] = match spec.variant {
                    MaskVariant::Inf | MaskVariant::SpecialToken => f64::NEG_INFINITY,
                    MaskVariant::Fix => spec.fixed_value,
                    MaskVariant::Pseudo | MaskVariant::Learn => {
                        pseudo[i * cols + j] = true;
                        let p = spec.p_base - rank as f64 * spec.beta;
                        rank += 1;
                        p
                    }
                };
            }
        }
        let mut value_participation = vec![true; cols];
        value_participation[keys..].iter_mut().for_each(|v| *v = false);
        Ok(CompiledMask {
            variant: spec.variant,
            logits,
            pseudo,
            value_participation,
            key_count: keys,
        })
    }

    pub fn variant(&self) -> MaskVariant {
        self.variant
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.logits.rows()
    }

    /// Columns of the logit matrix, including sink columns.
    pub fn cols(&self) -> usize {
        self.logits.cols()
    }

    /// Columns backed by real key/value rows.
    pub fn key_count(&self) -> usize {
        self.key_count
    }

    #[inline]
    pub fn is_pseudo(&self, i: usize, j: usize) -> bool {
        self.pseudo[i * self.cols() + j]
    }

    pub fn value_participation(&self) -> &[bool] {
        &self.value_participation
    }

    /// Whether entry `(i, j)` reads a value row. The raw `q·k/τ` score enters
    /// the logit exactly at these entries.
    #[inline]
    pub fn reads_value(&self, i: usize, j: usize) -> bool {
        j < self.key_count && !self.is_pseudo(i, j)
    }

    pub fn pseudo_count(&self, i: usize) -> usize {
        let c = self.cols();
        self.pseudo[i * c..(i + 1) * c].iter().filter(|&&p| p).count()
    }

    pub fn pseudo_column_count(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| self.pseudo_count(i)).collect()
    }

    /// Pseudo logits of row `i`, left to right.
    pub fn pseudo_row(&self, i: usize) -> Vec<f64> {
        (0..self.cols())
            .filter(|&j| self.is_pseudo(i, j))
            .map(|j| self.logits[(i, j)])
            .collect()
    }

    /// Row-major positions of all pseudo entries.
    pub fn pseudo_positions(&self) -> Vec<(usize, usize)> {
        let c = self.cols();
        self.pseudo
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(k, _)| (k / c, k % c))
            .collect()
    }

    fn set_logit(&mut self, i: usize, j: usize, v: f64) {
        self.logits[(i, j)] = v;
    }
}

/// Standard causal mask: `-inf` strictly above the diagonal.
pub fn build_causal_inf_mask(n: usize) -> CompiledMask {
    CompiledMask::from_allowed(n, n, &MaskSpec::new(MaskVariant::Inf, n), |i, j| j <= i)
        .expect("INF spec is valid")
}

/// Causal mask with a finite penalty at future positions.
pub fn build_fixed_mask(n: usize, fixed_value: f64) -> CompiledMask {
    let spec = MaskSpec {
        fixed_value,
        ..MaskSpec::new(MaskVariant::Fix, n)
    };
    CompiledMask::from_allowed(n, n, &spec, |i, j| j <= i).expect("FIX spec is valid")
}

/// Causal pseudo-score mask. Row `i` (1-based) holds `n - i` pseudo logits
/// `p_base - (j-1)·β` at positions `(i, i + j)`.
pub fn build_pseudo_mask(n: usize, beta: f64, p_base: f64) -> Result<CompiledMask> {
    let spec = MaskSpec {
        beta,
        p_base,
        ..MaskSpec::new(MaskVariant::Pseudo, n)
    };
    CompiledMask::from_allowed(n, n, &spec, |i, j| j <= i)
}

/// Causal mask with an extra always-visible sink column (logit 0).
pub fn build_special_token_mask(n: usize) -> CompiledMask {
    CompiledMask::from_allowed(n, n, &MaskSpec::new(MaskVariant::SpecialToken, n), |i, j| {
        j <= i
    })
    .expect("special-token spec is valid")
}

/// Causal `n × n` mask of any variant.
pub fn build_mask(spec: &MaskSpec) -> Result<CompiledMask> {
    CompiledMask::from_allowed(spec.n, spec.n, spec, |i, j| j <= i)
}

/// Self and cross masks for `pair` under sequence-order causality.
///
/// The self mask is `N_m × N_m` and allows key `b` for query `a` when `b`
/// does not come after `a`. The cross mask is `N_m × N_m̄` and allows every
/// rest-modality token that precedes the query in the full sequence. The
/// base variant decides what fills the disallowed entries of each.
pub fn build_modal_masks(
    seg: &Segmentation,
    pair: &ModalityPair,
    base: &MaskSpec,
) -> Result<(CompiledMask, CompiledMask)> {
    let focus = seg.focus_indices(pair)?;
    let rest = seg.rest_indices(pair)?;
    let m_self =
        CompiledMask::from_allowed(focus.len(), focus.len(), base, |a, b| focus[b] <= focus[a])?;
    let m_cross =
        CompiledMask::from_allowed(focus.len(), rest.len(), base, |a, b| rest[b] < focus[a])?;
    Ok((m_self, m_cross))
}

/// Mask whose pseudo logits are trainable parameters.
///
/// Parameters are stored in row-major order of the pseudo positions of the
/// template mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableMask {
    template: CompiledMask,
    positions: Vec<(usize, usize)>,
    params: Vec<f64>,
}

impl LearnableMask {
    pub fn from_template(mut template: CompiledMask) -> Self {
        template.variant = MaskVariant::Learn;
        let positions = template.pseudo_positions();
        let params = positions.iter().map(|&(i, j)| template.logits[(i, j)]).collect();
        LearnableMask {
            template,
            positions,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len());
        self.params.copy_from_slice(params);
    }

    /// The mask with the current parameter values written in.
    pub fn compile(&self) -> CompiledMask {
        compile_with(&self.template, &self.positions, &self.params)
    }

    /// Picks the parameter gradients out of a full logit gradient.
    pub fn gather_grad(&self, d_logits: &Matrix) -> Vec<f64> {
        self.positions.iter().map(|&p| d_logits[p]).collect()
    }

    /// Plain gradient step `θ ← θ - lr·g`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

/// Writes `params` into the pseudo positions of `template`.
pub fn compile_with(
    template: &CompiledMask,
    positions: &[(usize, usize)],
    params: &[f64],
) -> CompiledMask {
    let mut m = template.clone();
    for (&(i, j), &v) in positions.iter().zip(params) {
        m.set_logit(i, j, v);
    }
    m
}

/// Learnable causal mask initialized to the pseudo mask for `(β, p_base)`.
pub fn build_learnable_mask(n: usize, beta: f64, p_base: f64) -> Result<LearnableMask> {
    Ok(LearnableMask::from_template(build_pseudo_mask(n, beta, p_base)?))
}
