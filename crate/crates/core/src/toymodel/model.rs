use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::{AttentionKind, CombineMode, ModelConfig};
use crate::aligner::{
    build_aligner, fuse, fuse_backward, gram_matrix_for, normalize_gram, normalized_gram_backward,
    Aligner, FuserState, GramMatrix,
};
use crate::attention::{attend, attend_backward, project, project_backward, AttentionConfig, ProjectionSet};
use crate::diagnostics::{AttentionTrace, TraceLayer};
use crate::modality::{ModalSequence, ModalityId, ModalityPair, Segmentation};
use crate::modmask::{build_causal_inf_mask, build_modal_masks, compile_with, CompiledMask};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::{self, streams, StreamRng};
use crate::{Error, Result};

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub proj: ProjectionSet,
    /// `d × d`, or `2d × d` for a MODA block with concat combine.
    pub w_out: Matrix,
    /// One per modality in segment order; empty unless alignment is on.
    pub aligners: Vec<Aligner>,
    pub fusers: Vec<FuserState>,
    /// Learnable pseudo logits, `[self, cross]` per focus modality (`1 × P`).
    pub mask_params: Vec<Matrix>,
}

impl BlockParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.proj.w_q, &self.proj.w_k, &self.proj.w_v, &self.w_out];
        for a in &self.aligners {
            v.extend(a.tensors());
        }
        for f in &self.fusers {
            v.extend(f.tensors());
        }
        v.extend(self.mask_params.iter());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.proj.w_q,
            &mut self.proj.w_k,
            &mut self.proj.w_v,
            &mut self.w_out,
        ];
        for a in &mut self.aligners {
            v.extend(a.tensors_mut());
        }
        for f in &mut self.fusers {
            v.extend(f.tensors_mut());
        }
        v.extend(self.mask_params.iter_mut());
        v
    }
}

/// Every trainable tensor of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    /// `vocab_visual × d`.
    pub embed_visual: Matrix,
    /// `vocab_text × d`.
    pub embed_text: Matrix,
    /// `(n_visual + n_text) × d`.
    pub positions: Matrix,
    pub blocks: Vec<BlockParams>,
    /// `d × classes`.
    pub head_w: Matrix,
    /// `1 × classes`.
    pub head_b: Matrix,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelState;

fn glorot(r: &mut StreamRng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    // uniform with variance 1/fan_in
    rng::uniform_matrix(r, rows, cols, libm::sqrt(3.0 / fan_in as f64))
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut r = rng::stream(seed, streams::MODEL_INIT);
        let unit = libm::sqrt(3.0);
        let embed_visual = rng::uniform_matrix(&mut r, config.vocab_visual, d, unit);
        let embed_text =
            rng::uniform_matrix(&mut r, config.vocab_text, d, unit * config.text_embed_scale);
        let positions = rng::uniform_matrix(&mut r, config.seq_len(), d, unit * 0.5);
        let seg = config_segmentation(&config)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let bc = &config.block;
            let proj = ProjectionSet {
                w_q: glorot(&mut r, d, d, d),
                w_k: glorot(&mut r, d, d, d),
                w_v: glorot(&mut r, d, d, d),
            };
            let moda = bc.attention_kind == AttentionKind::Moda;
            let out_rows = if moda && bc.combine == CombineMode::Concat { 2 * d } else { d };
            let w_out = glorot(&mut r, out_rows, d, out_rows);
            let (aligners, fusers) = if moda && bc.use_daa {
                let mut al = Vec::new();
                let mut fu = Vec::new();
                for m in 0..seg.segments().len() {
                    let sub = seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((b * 16 + m) as u64);
                    al.push(build_aligner(bc.aligner_variant, d, sub));
                    fu.push(FuserState::new(bc.fuser_mode, d, bc.adapter_rank, sub)?);
                }
                (al, fu)
            } else {
                (Vec::new(), Vec::new())
            };
            let mask_params = if bc.learnable_masks() {
                learnable_templates(&seg, &config)?
                    .into_iter()
                    .map(|(m, pos)| {
                        let vals: Vec<f64> = pos.iter().map(|&p| m.logits()[p]).collect();
                        Matrix::new(1, vals.len(), vals).expect("row vector")
                    })
                    .collect()
            } else {
                Vec::new()
            };
            blocks.push(BlockParams {
                proj,
                w_out,
                aligners,
                fusers,
                mask_params,
            });
        }
        let head_w = glorot(&mut r, d, config.classes, d);
        let head_b = Matrix::zeros(1, config.classes);
        Ok(ModelState {
            config,
            embed_visual,
            embed_text,
            positions,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embed_visual, &self.embed_text, &self.positions];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embed_visual, &mut self.embed_text, &mut self.positions];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        g
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn segmentation(&self) -> Segmentation {
        config_segmentation(&self.config).expect("validated at init")
    }

    /// Token embedding plus position embedding for each token of `sample`.
    pub fn embed(&self, sample: &Sample) -> Result<ModalSequence> {
        let c = &self.config;
        if sample.visual.len() != c.n_visual || sample.text.len() != c.n_text {
            return Err(Error::InvalidSegmentation(alloc::format!(
                "sample has {}+{} tokens, model expects {}+{}",
                sample.visual.len(),
                sample.text.len(),
                c.n_visual,
                c.n_text
            )));
        }
        let d = c.d;
        let mut x = Matrix::zeros(c.seq_len(), d);
        for (p, &id) in sample.visual.iter().enumerate() {
            let e = self.embed_visual.row(id);
            for ((t, a), b) in x.row_mut(p).iter_mut().zip(e).zip(self.positions.row(p)) {
                *t = a + b;
            }
        }
        for (p, &id) in sample.text.iter().enumerate() {
            let q = c.n_visual + p;
            let e = self.embed_text.row(id);
            for ((t, a), b) in x.row_mut(q).iter_mut().zip(e).zip(self.positions.row(q)) {
                *t = a + b;
            }
        }
        ModalSequence::new(x, self.segmentation())
    }

    /// Routes `∂L/∂X` from [`ModelState::embed`] into the embedding tables.
    pub fn embed_backward(&self, sample: &Sample, d_tokens: &Matrix, grads: &mut Gradients) {
        let nv = self.config.n_visual;
        for (p, &id) in sample.visual.iter().enumerate() {
            add_row(&mut grads.embed_visual, id, d_tokens.row(p));
            add_row(&mut grads.positions, p, d_tokens.row(p));
        }
        for (p, &id) in sample.text.iter().enumerate() {
            add_row(&mut grads.embed_text, id, d_tokens.row(nv + p));
            add_row(&mut grads.positions, nv + p, d_tokens.row(nv + p));
        }
    }

    /// Cross-entropy loss of one sample and the full parameter gradient.
    pub fn loss_and_grad(&self, sample: &Sample) -> Result<(f64, Gradients)> {
        let seq = self.embed(sample)?;
        let fwd = forward(self, &seq)?;
        let (loss, d_logits) = cross_entropy(&fwd.logits, sample.label);
        let (mut grads, d_tokens) = backward(self, &fwd.cache, &d_logits)?;
        self.embed_backward(sample, &d_tokens, &mut grads);
        Ok((loss, grads))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let seq = self.embed(sample)?;
        let fwd = forward(self, &seq)?;
        Ok(cross_entropy(&fwd.logits, sample.label).0)
    }
}

fn add_row(m: &mut Matrix, i: usize, src: &[f64]) {
    for (t, s) in m.row_mut(i).iter_mut().zip(src) {
        *t += s;
    }
}

fn config_segmentation(c: &ModelConfig) -> Result<Segmentation> {
    Segmentation::from_lengths(&[(ModalityId::VISUAL, c.n_visual), (ModalityId::TEXT, c.n_text)])
}

type LearnableTemplate = (CompiledMask, Vec<(usize, usize)>);

// Learnable templates in parameter order: [self, cross] per focus modality.
fn learnable_templates(
    seg: &Segmentation,
    config: &ModelConfig,
) -> Result<Vec<LearnableTemplate>> {
    let spec = config.block.mask_spec;
    let mut out = Vec::new();
    for m in seg.modalities() {
        let pair = ModalityPair::focus_on(seg, m)?;
        let (s, c) = build_modal_masks(seg, &pair, &spec)?;
        let ps = s.pseudo_positions();
        let pc = c.pseudo_positions();
        out.push((s, ps));
        out.push((c, pc));
    }
    Ok(out)
}

/// `(loss, ∂loss/∂logits)` for a `1 × C` logit row.
pub fn cross_entropy(logits: &Matrix, label: usize) -> (f64, Matrix) {
    let row = logits.row(0);
    let mut p = vec![0.0; row.len()];
    crate::numerics::softmax_row(row, &mut p);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
    let loss = lse - row[label];
    p[label] -= 1.0;
    (loss, Matrix::new(1, row.len(), p).expect("row vector"))
}

struct FocusCache {
    fi: Vec<usize>,
    ri: Vec<usize>,
    mask_self: CompiledMask,
    mask_cross: CompiledMask,
    mask_positions: Option<[Vec<(usize, usize)>; 2]>,
    k_rest: Matrix,
    aligned: Option<Matrix>,
    k_cross: Matrix,
    w_self: Matrix,
    w_cross: Matrix,
}

enum BlockKind {
    Joint {
        mask: CompiledMask,
        weights: Matrix,
    },
    Split {
        foci: Vec<FocusCache>,
        grams: Vec<Option<(GramMatrix, Matrix)>>,
    },
}

struct BlockCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Input of the output projection.
    combined: Matrix,
    kind: BlockKind,
}

/// Everything [`backward`] needs from a forward pass.
pub struct ForwardCache {
    segmentation: Segmentation,
    blocks: Vec<BlockCache>,
    final_states: Matrix,
    /// Gram matrices built during this pass.
    pub gram_builds: usize,
}

pub struct Forward {
    /// `1 × classes`, read at the final token.
    pub logits: Matrix,
    pub trace: AttentionTrace,
    pub cache: ForwardCache,
}

/// Runs every block over `seq` and applies the head at the final position.
pub fn forward(model: &ModelState, seq: &ModalSequence) -> Result<Forward> {
    let c = &model.config;
    if seq.dim() != c.d {
        return Err(Error::DimMismatch {
            expected: c.d,
            found: seq.dim(),
        });
    }
    let seg = seq.segmentation().clone();
    let att = AttentionConfig::new(c.d);
    let mut h = seq.tokens().clone();
    let mut trace = AttentionTrace::new();
    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut gram_builds = 0;
    for (l, params) in model.blocks.iter().enumerate() {
        let (next, cache, layer) = match c.block.attention_kind {
            AttentionKind::BaselineJoint => joint_block(params, &h, &seg, &att)?,
            AttentionKind::Moda => moda_block(model, params, &h, &seg, &att, &mut gram_builds)?,
        };
        trace.push(TraceLayer {
            layer_index: l,
            ..layer
        })?;
        caches.push(cache);
        h = next;
    }
    let last = h.rows() - 1;
    let mut logits = matmul(&h.select_rows(&[last]), &model.head_w)?;
    logits.add_assign(&model.head_b);
    Ok(Forward {
        logits,
        trace,
        cache: ForwardCache {
            segmentation: seg,
            blocks: caches,
            final_states: h,
            gram_builds,
        },
    })
}

fn joint_block(
    params: &BlockParams,
    h: &Matrix,
    seg: &Segmentation,
    att: &AttentionConfig,
) -> Result<(Matrix, BlockCache, TraceLayer)> {
    let (q, k, v) = project(h, &params.proj)?;
    let mask = build_causal_inf_mask(h.rows());
    let out = attend(&q, &k, &v, &mask, att.temperature, false)?;
    let mut next = matmul(&out.output, &params.w_out)?;
    next.add_assign(h);
    let layer = TraceLayer {
        layer_index: 0,
        weights: out.weights.clone(),
        sink_mass: vec![0.0; h.rows()],
        segmentation: seg.clone(),
    };
    let cache = BlockCache {
        input: h.clone(),
        q,
        k,
        v,
        combined: out.output,
        kind: BlockKind::Joint {
            mask,
            weights: out.weights,
        },
    };
    Ok((next, cache, layer))
}

fn moda_block(
    model: &ModelState,
    params: &BlockParams,
    h: &Matrix,
    seg: &Segmentation,
    att: &AttentionConfig,
    gram_builds: &mut usize,
) -> Result<(Matrix, BlockCache, TraceLayer)> {
    let bc = &model.config.block;
    let (n, d) = h.shape();
    let (q, k, v) = project(h, &params.proj)?;
    let mods: Vec<ModalityId> = seg.modalities().collect();

    // one normalized Gram per modality per pass
    let mut grams: Vec<Option<(GramMatrix, Matrix)>> = vec![None; mods.len()];
    if bc.use_daa && bc.aligner_variant.uses_gram() {
        for (mi, &m) in mods.iter().enumerate() {
            let km = k.select_rows(&seg.get(m)?.range().collect::<Vec<_>>());
            let gm = gram_matrix_for(m, &km)?;
            *gram_builds += 1;
            let ghat = normalize_gram(&gm)?;
            grams[mi] = Some((gm, ghat));
        }
    }

    let spec = bc.effective_mask();
    let mut o_self = Matrix::zeros(n, d);
    let mut o_cross = Matrix::zeros(n, d);
    let mut weights = Matrix::zeros(n, n);
    let mut sink_mass = vec![0.0; n];
    let mut foci = Vec::with_capacity(mods.len());
    for (mi, &m) in mods.iter().enumerate() {
        let pair = ModalityPair::focus_on(seg, m)?;
        let fi = seg.focus_indices(&pair)?;
        let ri = seg.rest_indices(&pair)?;
        let (mut mask_self, mut mask_cross) = build_modal_masks(seg, &pair, &spec)?;
        let mut mask_positions = None;
        if bc.learnable_masks() {
            let ps = mask_self.pseudo_positions();
            let pc = mask_cross.pseudo_positions();
            let (sp, cp) = (&params.mask_params[2 * mi], &params.mask_params[2 * mi + 1]);
            if sp.cols() != ps.len() || cp.cols() != pc.len() {
                return Err(Error::ShapeMismatch {
                    op: "learnable mask",
                    lhs: (ps.len(), pc.len()),
                    rhs: (sp.cols(), cp.cols()),
                });
            }
            mask_self = compile_with(&mask_self, &ps, sp.data());
            mask_cross = compile_with(&mask_cross, &pc, cp.data());
            mask_positions = Some([ps, pc]);
        }
        let qm = q.select_rows(&fi);
        let s = attend(&qm, &k.select_rows(&fi), &v.select_rows(&fi), &mask_self, att.temperature, false)?;
        let k_rest = k.select_rows(&ri);
        let (aligned, k_cross) = if bc.use_daa {
            let g = grams[mi].as_ref().map(|(_, ghat)| ghat);
            let a = params.aligners[mi].apply(&k_rest, g)?;
            let kc = fuse(&k_rest, &a, &params.fusers[mi])?;
            (Some(a), kc)
        } else {
            (None, k_rest.clone())
        };
        let cr = attend(&qm, &k_cross, &v.select_rows(&ri), &mask_cross, att.temperature, true)?;
        o_self.scatter_add_rows(&fi, &s.output);
        o_cross.scatter_add_rows(&fi, &cr.output);

        // trace: each non-empty softmax contributes an equal share of the row;
        // mass on entries that read no value (pseudo or sink) goes to sink_mass
        for (a, &qi) in fi.iter().enumerate() {
            let cross_live = cr.weights.row(a).iter().any(|&w| w > 0.0);
            let share = if cross_live { 0.5 } else { 1.0 };
            trace_row(&mut weights, &mut sink_mass, qi, &fi, &mask_self, s.weights.row(a), a, share);
            if cross_live {
                trace_row(&mut weights, &mut sink_mass, qi, &ri, &mask_cross, cr.weights.row(a), a, 0.5);
            }
        }
        foci.push(FocusCache {
            fi,
            ri,
            mask_self,
            mask_cross,
            mask_positions,
            k_rest,
            aligned,
            k_cross,
            w_self: s.weights,
            w_cross: cr.weights,
        });
    }
    let combined = match bc.combine {
        CombineMode::Concat => o_self.hstack(&o_cross)?,
        CombineMode::Sum => o_self.add(&o_cross)?,
    };
    let mut next = matmul(&combined, &params.w_out)?;
    next.add_assign(h);
    let layer = TraceLayer {
        layer_index: 0,
        weights,
        sink_mass,
        segmentation: seg.clone(),
    };
    let cache = BlockCache {
        input: h.clone(),
        q,
        k,
        v,
        combined,
        kind: BlockKind::Split { foci, grams },
    };
    Ok((next, cache, layer))
}

#[allow(clippy::too_many_arguments)]
fn trace_row(
    weights: &mut Matrix,
    sink_mass: &mut [f64],
    qi: usize,
    keys: &[usize],
    mask: &CompiledMask,
    row: &[f64],
    a: usize,
    share: f64,
) {
    for (b, &w) in row.iter().enumerate() {
        if mask.reads_value(a, b) {
            weights[(qi, keys[b])] += share * w;
        } else {
            sink_mass[qi] += share * w;
        }
    }
}

/// Reverse pass. Returns parameter gradients (embedding tables left at zero)
/// and `∂L/∂X` for the input tokens.
pub fn backward(
    model: &ModelState,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> Result<(Gradients, Matrix)> {
    let mut grads = model.zeros_like();
    let h = &cache.final_states;
    let last = h.rows() - 1;
    let h_last = h.select_rows(&[last]);
    grads.head_w = matmul_tn(&h_last, d_logits)?;
    grads.head_b = d_logits.clone();
    let mut dh = Matrix::zeros(h.rows(), h.cols());
    dh.row_mut(last)
        .copy_from_slice(matmul_nt(d_logits, &model.head_w)?.row(0));
    let att = AttentionConfig::new(model.config.d);
    for (l, bcache) in cache.blocks.iter().enumerate().rev() {
        let params = &model.blocks[l];
        dh = block_backward(model, params, bcache, &cache.segmentation, &att, &dh, &mut grads.blocks[l])?;
    }
    Ok((grads, dh))
}

fn block_backward(
    model: &ModelState,
    params: &BlockParams,
    c: &BlockCache,
    seg: &Segmentation,
    att: &AttentionConfig,
    d_next: &Matrix,
    g: &mut BlockParams,
) -> Result<Matrix> {
    let (n, d) = c.input.shape();
    g.w_out = matmul_tn(&c.combined, d_next)?;
    let d_comb = matmul_nt(d_next, &params.w_out)?;
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    match &c.kind {
        BlockKind::Joint { mask, weights } => {
            let ag = attend_backward(&c.q, &c.k, &c.v, mask, att.temperature, weights, &d_comb);
            dq = ag.dq;
            dk = ag.dk;
            dv = ag.dv;
        }
        BlockKind::Split { foci, grams } => {
            let bc = &model.config.block;
            let (d_self, d_cross) = match bc.combine {
                CombineMode::Concat => d_comb.hsplit(d),
                CombineMode::Sum => (d_comb.clone(), d_comb),
            };
            let mut d_gram: Vec<Option<Matrix>> = vec![None; grams.len()];
            for (mi, fc) in foci.iter().enumerate() {
                let qm = c.q.select_rows(&fc.fi);
                let gs = attend_backward(
                    &qm,
                    &c.k.select_rows(&fc.fi),
                    &c.v.select_rows(&fc.fi),
                    &fc.mask_self,
                    att.temperature,
                    &fc.w_self,
                    &d_self.select_rows(&fc.fi),
                );
                dq.scatter_add_rows(&fc.fi, &gs.dq);
                dk.scatter_add_rows(&fc.fi, &gs.dk);
                dv.scatter_add_rows(&fc.fi, &gs.dv);
                let gc = attend_backward(
                    &qm,
                    &fc.k_cross,
                    &c.v.select_rows(&fc.ri),
                    &fc.mask_cross,
                    att.temperature,
                    &fc.w_cross,
                    &d_cross.select_rows(&fc.fi),
                );
                dq.scatter_add_rows(&fc.fi, &gc.dq);
                dv.scatter_add_rows(&fc.ri, &gc.dv);
                if let Some(aligned) = &fc.aligned {
                    let fb = fuse_backward(&fc.k_rest, aligned, &params.fusers[mi], &gc.dk)?;
                    let ghat = grams[mi].as_ref().map(|(_, gh)| gh);
                    let ab = params.aligners[mi].backward(&fc.k_rest, ghat, &fb.d_aligned)?;
                    let mut dk_rest = fb.d_original;
                    dk_rest.add_assign(&ab.d_input);
                    dk.scatter_add_rows(&fc.ri, &dk_rest);
                    g.fusers[mi] = fb.grads;
                    g.aligners[mi] = ab.grads;
                    if let Some(dg) = ab.d_gram {
                        d_gram[mi] = Some(dg);
                    }
                } else {
                    dk.scatter_add_rows(&fc.ri, &gc.dk);
                }
                if let Some([ps, pc]) = &fc.mask_positions {
                    let gather = |dl: &Matrix, pos: &[(usize, usize)]| {
                        let v: Vec<f64> = pos.iter().map(|&p| dl[p]).collect();
                        Matrix::new(1, v.len(), v).expect("row vector")
                    };
                    g.mask_params[2 * mi] = gather(&gs.d_logits, ps);
                    g.mask_params[2 * mi + 1] = gather(&gc.d_logits, pc);
                }
            }
            for (mi, entry) in grams.iter().enumerate() {
                if let (Some((gm, _)), Some(dg)) = (entry, &d_gram[mi]) {
                    let m = gm.modality.expect("built with modality");
                    let idx: Vec<usize> = seg.get(m)?.range().collect();
                    let km = c.k.select_rows(&idx);
                    dk.scatter_add_rows(&idx, &normalized_gram_backward(&km, gm, dg));
                }
            }
        }
    }
    let (dx, dproj) = project_backward(&c.input, &params.proj, &dq, &dk, &dv)?;
    g.proj = dproj;
    let mut d_in = d_next.clone();
    d_in.add_assign(&dx);
    Ok(d_in)
}
