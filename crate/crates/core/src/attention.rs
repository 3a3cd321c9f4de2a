//! Masked scaled-dot-product attention and its self/cross-modal split.
//!
//! [`attend`] is the single kernel everything else goes through: it takes a
//! [`CompiledMask`], so pseudo entries (score replaced, no value read) and
//! sink columns are handled in one place. [`attend_backward`] is its exact
//! reverse-mode counterpart.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::modality::{ModalSequence, ModalityPair};
use crate::modmask::CompiledMask;
use crate::numerics::{matmul, matmul_tn, softmax_row, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub temperature: f64,
    pub head_dim: usize,
}

impl AttentionConfig {
    /// `τ = √d`.
    pub fn new(head_dim: usize) -> Self {
        AttentionConfig {
            temperature: libm::sqrt(head_dim as f64),
            head_dim,
        }
    }

    pub fn with_temperature(head_dim: usize, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidTemperature(temperature));
        }
        Ok(AttentionConfig {
            temperature,
            head_dim,
        })
    }
}

/// Query, key and value projections, each `d × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl ProjectionSet {
    pub fn identity(d: usize) -> Self {
        ProjectionSet {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// `(X·W_q, X·W_k, X·W_v)`.
pub fn project(tokens: &Matrix, proj: &ProjectionSet) -> Result<(Matrix, Matrix, Matrix)> {
    for w in [&proj.w_q, &proj.w_k, &proj.w_v] {
        if w.rows() != w.cols() || w.rows() != tokens.cols() {
            return Err(Error::ShapeMismatch {
                op: "project",
                lhs: tokens.shape(),
                rhs: w.shape(),
            });
        }
    }
    Ok((
        matmul(tokens, &proj.w_q)?,
        matmul(tokens, &proj.w_k)?,
        matmul(tokens, &proj.w_v)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `rows(Q) × cols(V)`.
    pub output: Matrix,
    /// Softmax weights over every mask column, sink columns included.
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    /// Gradient with respect to every mask logit.
    pub d_logits: Matrix,
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, mask: &CompiledMask) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "attention q/k",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention k/v",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    if mask.rows() != q.rows() || mask.key_count() != k.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention mask",
            lhs: (q.rows(), k.rows()),
            rhs: (mask.rows(), mask.key_count()),
        });
    }
    Ok(())
}

/// `Softmax(QKᵀ/τ + M)·V` under a compiled mask.
///
/// With `allow_empty_rows`, a query whose every logit is `-inf` gets zero
/// weights and a zero output row instead of [`Error::AllMaskedRow`].
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &CompiledMask,
    temperature: f64,
    allow_empty_rows: bool,
) -> Result<AttentionOutput> {
    check_shapes(q, k, v, mask)?;
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidTemperature(temperature));
    }
    let cols = mask.cols();
    let inv_tau = 1.0 / temperature;
    let mut weights = Matrix::zeros(q.rows(), cols);
    let mut output = Matrix::zeros(q.rows(), v.cols());
    let mut logits = vec![0.0; cols];
    for i in 0..q.rows() {
        let qi = q.row(i);
        let mrow = mask.logits().row(i);
        for j in 0..cols {
            logits[j] = if mask.reads_value(i, j) {
                let s: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                s * inv_tau + mrow[j]
            } else {
                mrow[j]
            };
        }
        if !softmax_row(&logits, weights.row_mut(i)) {
            if allow_empty_rows {
                continue;
            }
            return Err(Error::AllMaskedRow { row: i });
        }
        let wrow = weights.row(i);
        let orow = output.row_mut(i);
        for (j, &a) in wrow.iter().enumerate().take(mask.key_count()) {
            if a == 0.0 || !mask.reads_value(i, j) {
                continue;
            }
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o += a * x;
            }
        }
    }
    Ok(AttentionOutput { output, weights })
}

/// Reverse mode of [`attend`] given the forward weights and `∂L/∂O`.
pub fn attend_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &CompiledMask,
    temperature: f64,
    weights: &Matrix,
    d_out: &Matrix,
) -> AttentionGrads {
    let cols = mask.cols();
    let inv_tau = 1.0 / temperature;
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    let mut d_logits = Matrix::zeros(q.rows(), cols);
    let mut da = vec![0.0; cols];
    for i in 0..q.rows() {
        let wrow = weights.row(i);
        let go = d_out.row(i);
        let mut s = 0.0;
        for j in 0..cols {
            da[j] = if mask.reads_value(i, j) {
                go.iter().zip(v.row(j)).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };
            s += wrow[j] * da[j];
        }
        for j in 0..cols {
            let a = wrow[j];
            if a == 0.0 {
                continue;
            }
            let dz = a * (da[j] - s);
            d_logits[(i, j)] = dz;
            if !mask.reads_value(i, j) {
                continue;
            }
            let g = dz * inv_tau;
            for (t, &x) in dq.row_mut(i).iter_mut().zip(k.row(j)) {
                *t += g * x;
            }
            for (t, &x) in dk.row_mut(j).iter_mut().zip(q.row(i)) {
                *t += g * x;
            }
            for (t, &x) in dv.row_mut(j).iter_mut().zip(go) {
                *t += a * x;
            }
        }
    }
    AttentionGrads {
        dq,
        dk,
        dv,
        d_logits,
    }
}

/// `O = Softmax(QKᵀ/τ + M)·V` with a plain additive mask; returns `(O, A)`.
pub fn masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Matrix,
    cfg: &AttentionConfig,
) -> Result<(Matrix, Matrix)> {
    let out = attend(q, k, v, &CompiledMask::additive(mask.clone()), cfg.temperature, false)?;
    Ok((out.output, out.weights))
}

/// Self- and cross-modal outputs for the focus modality of `pair`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAttention {
    /// `N_m × d`.
    pub o_self: Matrix,
    /// `N_m × d`, or `N_m × 0` when there are no rest tokens.
    pub o_cross: Matrix,
    pub w_self: Matrix,
    pub w_cross: Matrix,
}

/// Separate softmaxes for focus→focus and focus→rest attention.
///
/// Cross rows with no admissible key (a visual query before any text, say)
/// produce zero weights and a zero output row.
pub fn split_modal_attention(
    seq: &ModalSequence,
    proj: &ProjectionSet,
    pair: &ModalityPair,
    mask_self: &CompiledMask,
    mask_cross: &CompiledMask,
    cfg: &AttentionConfig,
) -> Result<SplitAttention> {
    let (q, k, v) = project(seq.tokens(), proj)?;
    split_from_projections(seq, pair, &q, &k, &v, mask_self, mask_cross, cfg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn split_from_projections(
    seq: &ModalSequence,
    pair: &ModalityPair,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask_self: &CompiledMask,
    mask_cross: &CompiledMask,
    cfg: &AttentionConfig,
) -> Result<SplitAttention> {
    let seg = seq.segmentation();
    let fi = seg.focus_indices(pair)?;
    let ri = seg.rest_indices(pair)?;
    let qm = q.select_rows(&fi);
    let s = attend(
        &qm,
        &k.select_rows(&fi),
        &v.select_rows(&fi),
        mask_self,
        cfg.temperature,
        false,
    )?;
    let (o_cross, w_cross) = if ri.is_empty() && mask_cross.cols() == 0 {
        if mask_cross.rows() != fi.len() {
            return Err(Error::ShapeMismatch {
                op: "cross mask",
                lhs: (fi.len(), 0),
                rhs: (mask_cross.rows(), mask_cross.cols()),
            });
        }
        (Matrix::zeros(fi.len(), 0), Matrix::zeros(fi.len(), 0))
    } else {
        let c = attend(
            &qm,
            &k.select_rows(&ri),
            &v.select_rows(&ri),
            mask_cross,
            cfg.temperature,
            true,
        )?;
        (c.output, c.weights)
    };
    Ok(SplitAttention {
        o_self: s.output,
        o_cross,
        w_self: s.weights,
        w_cross,
    })
}

/// Gradients of a split attention call with respect to the full-sequence
/// `Q`, `K`, `V` (rows outside the pair stay zero) and both mask logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    pub d_mask_self: Matrix,
    pub d_mask_cross: Matrix,
}

#[allow(clippy::too_many_arguments)]
pub fn split_modal_attention_backward(
    seq: &ModalSequence,
    pair: &ModalityPair,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask_self: &CompiledMask,
    mask_cross: &CompiledMask,
    cfg: &AttentionConfig,
    forward: &SplitAttention,
    d_self: &Matrix,
    d_cross: &Matrix,
) -> Result<SplitGrads> {
    let seg = seq.segmentation();
    let fi = seg.focus_indices(pair)?;
    let ri = seg.rest_indices(pair)?;
    let (n, d) = q.shape();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, k.cols());
    let mut dv = Matrix::zeros(n, v.cols());
    let qm = q.select_rows(&fi);
    let gs = attend_backward(
        &qm,
        &k.select_rows(&fi),
        &v.select_rows(&fi),
        mask_self,
        cfg.temperature,
        &forward.w_self,
        d_self,
    );
    dq.scatter_add_rows(&fi, &gs.dq);
    dk.scatter_add_rows(&fi, &gs.dk);
    dv.scatter_add_rows(&fi, &gs.dv);
    let d_mask_cross = if ri.is_empty() {
        Matrix::zeros(fi.len(), mask_cross.cols())
    } else {
        let gc = attend_backward(
            &qm,
            &k.select_rows(&ri),
            &v.select_rows(&ri),
            mask_cross,
            cfg.temperature,
            &forward.w_cross,
            d_cross,
        );
        dq.scatter_add_rows(&fi, &gc.dq);
        dk.scatter_add_rows(&ri, &gc.dk);
        dv.scatter_add_rows(&ri, &gc.dv);
        gc.d_logits
    };
    Ok(SplitGrads {
        dq,
        dk,
        dv,
        d_mask_self: gs.d_logits,
        d_mask_cross,
    })
}

/// Gradients of `(Q, K, V)` projections back to tokens and weights.
pub fn project_backward(
    tokens: &Matrix,
    proj: &ProjectionSet,
    dq: &Matrix,
    dk: &Matrix,
    dv: &Matrix,
) -> Result<(Matrix, ProjectionSet)> {
    let mut dx = crate::numerics::matmul_nt(dq, &proj.w_q)?;
    dx.add_assign(&crate::numerics::matmul_nt(dk, &proj.w_k)?);
    dx.add_assign(&crate::numerics::matmul_nt(dv, &proj.w_v)?);
    Ok((
        dx,
        ProjectionSet {
            w_q: matmul_tn(tokens, dq)?,
            w_k: matmul_tn(tokens, dk)?,
            w_v: matmul_tn(tokens, dv)?,
        },
    ))
}

/// Per-row sums, used by normalization checks.
pub fn row_sums(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().sum()).collect()
}
