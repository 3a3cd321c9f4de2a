//! Duplex attention alignment.
//!
//! Each modality `m` owns a normalized Gram matrix `Ĝᵐ = KᵐᵀKᵐ / ‖KᵐᵀKᵐ‖_F`
//! built from its key states. Keys of the other modalities are carried into
//! `m`'s space by right-multiplying with `Ĝᵐ`, then merged with the originals
//! by a [`FuserState`]. Building `Ĝᵐ` costs `O(N_m·d²)` and applying it
//! `O(N·d²)`, so alignment stays linear in the token count.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::modality::ModalityId;
use crate::numerics::{frobenius_norm, matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng;
use crate::{Error, Result};

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub modality: Option<ModalityId>,
    /// `d × d`, symmetric positive semidefinite.
    pub g: Matrix,
    pub norm_value: f64,
}

/// `G = Kᵀ·K` for an `N_m × d` key block.
pub fn gram_matrix(keys: &Matrix) -> Result<GramMatrix> {
    if keys.rows() == 0 {
        return Err(Error::DegenerateGram(0.0));
    }
    let g = matmul_tn(keys, keys)?;
    let norm_value = frobenius_norm(&g)?;
    if norm_value < DEGENERATE_NORM {
        return Err(Error::DegenerateGram(norm_value));
    }
    Ok(GramMatrix {
        modality: None,
        g,
        norm_value,
    })
}

pub fn gram_matrix_for(modality: ModalityId, keys: &Matrix) -> Result<GramMatrix> {
    let mut gm = gram_matrix(keys)?;
    gm.modality = Some(modality);
    Ok(gm)
}

/// `G / ‖G‖_F`.
pub fn normalize_gram(gm: &GramMatrix) -> Result<Matrix> {
    if gm.norm_value.is_nan() || gm.norm_value < DEGENERATE_NORM {
        return Err(Error::DegenerateGram(gm.norm_value));
    }
    let nu = gm.norm_value;
    Ok(gm.g.map(|x| x / nu))
}

/// Carries rest-modality keys into the focus space: `K^{m̄→m} = K^{m̄}·Ĝᵐ`.
pub fn align_tokens(other_keys: &Matrix, normalized_gram: &Matrix) -> Result<Matrix> {
    if normalized_gram.rows() != normalized_gram.cols() {
        return Err(Error::ShapeMismatch {
            op: "align_tokens",
            lhs: other_keys.shape(),
            rhs: normalized_gram.shape(),
        });
    }
    matmul(other_keys, normalized_gram)
}

/// Pulls `∂L/∂Ĝ` back to the key block that produced `Ĝ`.
pub fn normalized_gram_backward(keys: &Matrix, gm: &GramMatrix, d_norm_gram: &Matrix) -> Matrix {
    let nu = gm.norm_value;
    let g_hat = gm.g.scale(1.0 / nu);
    let proj = d_norm_gram.dot(&g_hat);
    let mut dg = d_norm_gram.clone();
    dg.axpy(-proj, &g_hat);
    let dg = dg.scale(1.0 / nu);
    let sym = dg.add(&dg.transpose()).expect("square");
    matmul(keys, &sym).expect("keys are N×d and sym is d×d")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignerVariant {
    /// One learned affine map.
    Mlp,
    /// Two stacked affine maps.
    Mlp2,
    /// Affine, GELU, affine.
    MlpGelu,
    /// Affine map followed by the focus modality's normalized Gram.
    Cov,
}

impl AlignerVariant {
    pub const ALL: [AlignerVariant; 4] = [
        AlignerVariant::Mlp,
        AlignerVariant::Mlp2,
        AlignerVariant::MlpGelu,
        AlignerVariant::Cov,
    ];

    pub fn uses_gram(self) -> bool {
        self == AlignerVariant::Cov
    }

    fn layer_count(self) -> usize {
        match self {
            AlignerVariant::Mlp | AlignerVariant::Cov => 1,
            AlignerVariant::Mlp2 | AlignerVariant::MlpGelu => 2,
        }
    }
}

/// `x·W + b` with `b` broadcast over rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Matrix,
}

impl Affine {
    fn identity(d: usize) -> Self {
        Affine {
            w: Matrix::identity(d),
            b: Matrix::zeros(1, d),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.w)?;
        for i in 0..y.rows() {
            for (t, &b) in y.row_mut(i).iter_mut().zip(self.b.row(0)) {
                *t += b;
            }
        }
        Ok(y)
    }

    /// Returns `∂L/∂x` and the parameter gradients.
    fn backward(&self, x: &Matrix, dy: &Matrix) -> (Matrix, Affine) {
        let mut db = Matrix::zeros(1, dy.cols());
        for i in 0..dy.rows() {
            for (t, &g) in db.row_mut(0).iter_mut().zip(dy.row(i)) {
                *t += g;
            }
        }
        (
            matmul_nt(dy, &self.w).expect("shapes fixed at build"),
            Affine {
                w: matmul_tn(x, dy).expect("shapes fixed at build"),
                b: db,
            },
        )
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// One learned transfer map of the chosen variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aligner {
    pub variant: AlignerVariant,
    pub layers: Vec<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerBackward {
    pub d_input: Matrix,
    pub grads: Aligner,
    /// `∂L/∂Ĝ`, only for [`AlignerVariant::Cov`].
    pub d_gram: Option<Matrix>,
}

impl Aligner {
    /// Identity weights, zero biases.
    pub fn identity(variant: AlignerVariant, d: usize) -> Self {
        Aligner {
            variant,
            layers: (0..variant.layer_count()).map(|_| Affine::identity(d)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    /// Maps an `N × d` key block; `gram` is the target modality's normalized
    /// Gram and is required by [`AlignerVariant::Cov`].
    pub fn apply(&self, x: &Matrix, gram: Option<&Matrix>) -> Result<Matrix> {
        Ok(self.forward_parts(x, gram)?.pop().expect("non-empty"))
    }

    // Intermediate activations, input first and output last.
    fn forward_parts(&self, x: &Matrix, gram: Option<&Matrix>) -> Result<Vec<Matrix>> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "aligner",
                lhs: x.shape(),
                rhs: self.layers[0].w.shape(),
            });
        }
        let mut parts = Vec::with_capacity(4);
        parts.push(x.clone());
        match self.variant {
            AlignerVariant::Mlp => parts.push(self.layers[0].apply(x)?),
            AlignerVariant::Mlp2 => {
                let h = self.layers[0].apply(x)?;
                parts.push(self.layers[1].apply(&h)?);
                parts.insert(1, h);
            }
            AlignerVariant::MlpGelu => {
                let h = self.layers[0].apply(x)?;
                let a = h.map(gelu);
                let y = self.layers[1].apply(&a)?;
                parts.push(h);
                parts.push(a);
                parts.push(y);
            }
            AlignerVariant::Cov => {
                let g = gram.ok_or(Error::InvalidConfig("COV aligner needs a Gram matrix".into()))?;
                let h = self.layers[0].apply(x)?;
                let y = align_tokens(&h, g)?;
                parts.push(h);
                parts.push(y);
            }
        }
        Ok(parts)
    }

    pub fn backward(&self, x: &Matrix, gram: Option<&Matrix>, d_out: &Matrix) -> Result<AlignerBackward> {
        let parts = self.forward_parts(x, gram)?;
        let mut grads = self.clone();
        let mut d_gram = None;
        let d_input = match self.variant {
            AlignerVariant::Mlp => {
                let (dx, g0) = self.layers[0].backward(x, d_out);
                grads.layers[0] = g0;
                dx
            }
            AlignerVariant::Mlp2 => {
                let (dh, g1) = self.layers[1].backward(&parts[1], d_out);
                let (dx, g0) = self.layers[0].backward(x, &dh);
                grads.layers = alloc::vec![g0, g1];
                dx
            }
            AlignerVariant::MlpGelu => {
                let (da, g1) = self.layers[1].backward(&parts[2], d_out);
                let dh = da.zip_with(&parts[1], "gelu", |g, h| g * gelu_grad(h))?;
                let (dx, g0) = self.layers[0].backward(x, &dh);
                grads.layers = alloc::vec![g0, g1];
                dx
            }
            AlignerVariant::Cov => {
                let g = gram.expect("checked in forward");
                let h = &parts[1];
                d_gram = Some(matmul_tn(h, d_out)?);
                let dh = matmul_nt(d_out, g)?;
                let (dx, g0) = self.layers[0].backward(x, &dh);
                grads.layers[0] = g0;
                dx
            }
        };
        Ok(AlignerBackward {
            d_input,
            grads,
            d_gram,
        })
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

/// Identity-initialized aligner with a small seeded perturbation of the
/// weights (`±0.01`), so stacked layers do not start perfectly symmetric.
pub fn build_aligner(variant: AlignerVariant, d: usize, seed: u64) -> Aligner {
    let mut a = Aligner::identity(variant, d);
    let mut r = rng::stream(seed, rng::streams::ALIGNER);
    for layer in &mut a.layers {
        layer.w.add_assign(&rng::uniform_matrix(&mut r, d, d, 0.01));
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuserMode {
    /// Original keys only; alignment is bypassed.
    SelfOnly,
    /// Aligned keys replace the originals.
    AlignedOnly,
    /// `[original | aligned]·P` with a learned `2d × d` projection.
    Concat,
    /// `original + aligned·down·up` through a low-rank adapter.
    Add,
}

impl FuserMode {
    pub const ALL: [FuserMode; 4] = [
        FuserMode::SelfOnly,
        FuserMode::AlignedOnly,
        FuserMode::Concat,
        FuserMode::Add,
    ];
}

/// Merges aligned keys with the originals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuserState {
    pub mode: FuserMode,
    pub rank: usize,
    /// `d × r`.
    pub adapter_down: Matrix,
    /// `r × d`, zero at initialization.
    pub adapter_up: Matrix,
    /// `2d × d`, present in [`FuserMode::Concat`] only.
    pub concat_proj: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseBackward {
    pub d_original: Matrix,
    pub d_aligned: Matrix,
    pub grads: FuserState,
}

impl FuserState {
    /// Default rank is `max(1, d/4)`.
    pub fn default_rank(d: usize) -> usize {
        (d / 4).max(1)
    }

    /// Random down-projection (`±1/√d`), zero up-projection, and `[I; 0]` for
    /// the concat projection: every mode except `AlignedOnly` starts as the
    /// identity on the original keys.
    pub fn new(mode: FuserMode, d: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank > d || rank == 0 {
            return Err(Error::RankExceedsDim { rank, dim: d });
        }
        let mut r = rng::stream(seed, rng::streams::ALIGNER + 100);
        let adapter_down = rng::uniform_matrix(&mut r, d, rank, 1.0 / libm::sqrt(d as f64));
        let concat_proj = (mode == FuserMode::Concat)
            .then(|| Matrix::identity(d).vstack(&Matrix::zeros(d, d)).expect("same width"));
        Ok(FuserState {
            mode,
            rank,
            adapter_down,
            adapter_up: Matrix::zeros(rank, d),
            concat_proj,
        })
    }

    pub fn dim(&self) -> usize {
        self.adapter_down.rows()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = alloc::vec![&self.adapter_down, &self.adapter_up];
        v.extend(self.concat_proj.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = alloc::vec![&mut self.adapter_down, &mut self.adapter_up];
        v.extend(self.concat_proj.as_mut());
        v
    }

    fn validate(&self, original: &Matrix, aligned: &Matrix) -> Result<()> {
        if original.shape() != aligned.shape() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: original.shape(),
                rhs: aligned.shape(),
            });
        }
        if self.rank > self.dim() {
            return Err(Error::RankExceedsDim {
                rank: self.rank,
                dim: self.dim(),
            });
        }
        if original.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "fuse width",
                lhs: original.shape(),
                rhs: self.adapter_down.shape(),
            });
        }
        if self.mode == FuserMode::Concat && self.concat_proj.is_none() {
            return Err(Error::InvalidConfig("CONCAT fuser without projection".into()));
        }
        Ok(())
    }
}

/// Merges `aligned` into `original`; the result is always `N × d`.
pub fn fuse(original: &Matrix, aligned: &Matrix, fuser: &FuserState) -> Result<Matrix> {
    fuser.validate(original, aligned)?;
    match fuser.mode {
        FuserMode::SelfOnly => Ok(original.clone()),
        FuserMode::AlignedOnly => Ok(aligned.clone()),
        FuserMode::Add => {
            let h = matmul(aligned, &fuser.adapter_down)?;
            let mut out = matmul(&h, &fuser.adapter_up)?;
            out.add_assign(original);
            Ok(out)
        }
        FuserMode::Concat => {
            let c = original.hstack(aligned)?;
            matmul(&c, fuser.concat_proj.as_ref().expect("validated"))
        }
    }
}

pub fn fuse_backward(
    original: &Matrix,
    aligned: &Matrix,
    fuser: &FuserState,
    d_out: &Matrix,
) -> Result<FuseBackward> {
    fuser.validate(original, aligned)?;
    let mut grads = fuser.clone();
    for t in grads.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let (n, d) = original.shape();
    let (d_original, d_aligned) = match fuser.mode {
        FuserMode::SelfOnly => (d_out.clone(), Matrix::zeros(n, d)),
        FuserMode::AlignedOnly => (Matrix::zeros(n, d), d_out.clone()),
        FuserMode::Add => {
            let h = matmul(aligned, &fuser.adapter_down)?;
            grads.adapter_up = matmul_tn(&h, d_out)?;
            let dh = matmul_nt(d_out, &fuser.adapter_up)?;
            grads.adapter_down = matmul_tn(aligned, &dh)?;
            (d_out.clone(), matmul_nt(&dh, &fuser.adapter_down)?)
        }
        FuserMode::Concat => {
            let p = fuser.concat_proj.as_ref().expect("validated");
            let c = original.hstack(aligned)?;
            grads.concat_proj = Some(matmul_tn(&c, d_out)?);
            matmul_nt(d_out, p)?.hsplit(d)
        }
    };
    Ok(FuseBackward {
        d_original,
        d_aligned,
        grads,
    })
}
