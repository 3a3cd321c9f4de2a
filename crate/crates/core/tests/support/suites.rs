//! Gradient checks per component. Each function returns the max relative
//! error between analytic and central-difference gradients for one seed.

use moda_core::aligner::{
    build_aligner, fuse, fuse_backward, gram_matrix, normalize_gram, normalized_gram_backward,
    AlignerVariant, FuserMode, FuserState,
};
use moda_core::attention::{
    attend, attend_backward, project, project_backward, split_modal_attention,
    split_modal_attention_backward, AttentionConfig, ProjectionSet,
};
use moda_core::modality::{ModalSequence, ModalityId, ModalityPair, Segmentation};
use moda_core::modmask::{
    build_learnable_mask, build_modal_masks, build_pseudo_mask, build_special_token_mask,
    compile_with, CompiledMask, MaskSpec, MaskVariant,
};
use moda_core::toymodel::{BlockConfig, ModelState};
use moda_core::Matrix;

use super::*;

fn dims(seed: u64) -> (usize, usize, usize) {
    // d ∈ 2..=4, query and key counts ∈ 1..=6
    let d = 2 + (seed % 3) as usize;
    let nq = 1 + (seed * 7 % 6) as usize;
    let nk = 1 + (seed * 5 % 6) as usize;
    (d, nq, nk)
}

/// Dense attention under a finite additive mask, including mask logits.
pub fn attention_dense(seed: u64) -> f64 {
    let (d, nq, nk) = dims(seed);
    let q = random_matrix(seed, 0, nq, d, 1.0);
    let k = random_matrix(seed, 1, nk, d, 1.0);
    let v = random_matrix(seed, 2, nk, d, 1.0);
    let m = random_matrix(seed, 3, nq, nk, 2.0);
    let r = random_matrix(seed, 4, nq, d, 1.0);
    let tau = (d as f64).sqrt();
    let run = |q: &Matrix, k: &Matrix, v: &Matrix, m: &Matrix| {
        weighted_sum(&attend(q, k, v, &CompiledMask::additive(m.clone()), tau, false).unwrap().output, &r)
    };
    let mask = CompiledMask::additive(m.clone());
    let fwd = attend(&q, &k, &v, &mask, tau, false).unwrap();
    let g = attend_backward(&q, &k, &v, &mask, tau, &fwd.weights, &r);
    [
        check_matrix(&q, &g.dq, |x| run(x, &k, &v, &m)),
        check_matrix(&k, &g.dk, |x| run(&q, x, &v, &m)),
        check_matrix(&v, &g.dv, |x| run(&q, &k, x, &m)),
        check_matrix(&m, &g.d_logits, |x| run(&q, &k, &v, x)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Causal pseudo-score and special-token masks: values never read at pseudo
/// or sink entries, yet gradients still flow through their softmax share.
pub fn attention_structured(seed: u64) -> f64 {
    let (d, n, _) = dims(seed);
    let q = random_matrix(seed, 10, n, d, 1.0);
    let k = random_matrix(seed, 11, n, d, 1.0);
    let v = random_matrix(seed, 12, n, d, 1.0);
    let r = random_matrix(seed, 13, n, d, 1.0);
    let tau = (d as f64).sqrt();
    let mut worst = 0.0f64;
    for mask in [build_pseudo_mask(n, 0.1, 0.0).unwrap(), build_special_token_mask(n)] {
        let run = |q: &Matrix, k: &Matrix, v: &Matrix| {
            weighted_sum(&attend(q, k, v, &mask, tau, false).unwrap().output, &r)
        };
        let fwd = attend(&q, &k, &v, &mask, tau, false).unwrap();
        let g = attend_backward(&q, &k, &v, &mask, tau, &fwd.weights, &r);
        worst = worst
            .max(check_matrix(&q, &g.dq, |x| run(x, &k, &v)))
            .max(check_matrix(&k, &g.dk, |x| run(&q, x, &v)))
            .max(check_matrix(&v, &g.dv, |x| run(&q, &k, x)));
    }
    worst
}

fn micro_sequence(seed: u64, d: usize) -> ModalSequence {
    let nv = 1 + (seed % 3) as usize;
    let nt = 1 + (seed / 3 % 3) as usize;
    let seg = Segmentation::from_lengths(&[(ModalityId::VISUAL, nv), (ModalityId::TEXT, nt)]).unwrap();
    ModalSequence::new(random_matrix(seed, 20, nv + nt, d, 1.0), seg).unwrap()
}

/// Split self/cross attention from tokens through projections, for every
/// mask variant and both focus modalities.
pub fn split_attention(seed: u64) -> f64 {
    let d = 2 + (seed % 3) as usize;
    let seq = micro_sequence(seed, d);
    let seg = seq.segmentation().clone();
    let cfg = AttentionConfig::new(d);
    let proj = ProjectionSet {
        w_q: random_matrix(seed, 21, d, d, 1.0),
        w_k: random_matrix(seed, 22, d, d, 1.0),
        w_v: random_matrix(seed, 23, d, d, 1.0),
    };
    let mut worst = 0.0f64;
    for variant in [
        MaskVariant::Inf,
        MaskVariant::Fix,
        MaskVariant::Learn,
        MaskVariant::SpecialToken,
        MaskVariant::Pseudo,
    ] {
        for m in [ModalityId::VISUAL, ModalityId::TEXT] {
            let pair = ModalityPair::focus_on(&seg, m).unwrap();
            let (ms, mc) = build_modal_masks(&seg, &pair, &MaskSpec::new(variant, 0)).unwrap();
            let fwd = split_modal_attention(&seq, &proj, &pair, &ms, &mc, &cfg).unwrap();
            let r1 = random_matrix(seed, 24, fwd.o_self.rows(), fwd.o_self.cols(), 1.0);
            let r2 = random_matrix(seed, 25, fwd.o_cross.rows(), fwd.o_cross.cols(), 1.0);
            let loss = |x: &Matrix, p: &ProjectionSet, ms: &CompiledMask, mc: &CompiledMask| {
                let s = ModalSequence::new(x.clone(), seg.clone()).unwrap();
                let o = split_modal_attention(&s, p, &pair, ms, mc, &cfg).unwrap();
                weighted_sum(&o.o_self, &r1) + weighted_sum(&o.o_cross, &r2)
            };
            let (q, k, v) = project(seq.tokens(), &proj).unwrap();
            let g = split_modal_attention_backward(
                &seq, &pair, &q, &k, &v, &ms, &mc, &cfg, &fwd, &r1, &r2,
            )
            .unwrap();
            let (dx, dp) = project_backward(seq.tokens(), &proj, &g.dq, &g.dk, &g.dv).unwrap();
            let x = seq.tokens();
            worst = worst
                .max(check_matrix(x, &dx, |x| loss(x, &proj, &ms, &mc)))
                .max(check_matrix(&proj.w_q, &dp.w_q, |w| {
                    loss(x, &ProjectionSet { w_q: w.clone(), ..proj.clone() }, &ms, &mc)
                }))
                .max(check_matrix(&proj.w_k, &dp.w_k, |w| {
                    loss(x, &ProjectionSet { w_k: w.clone(), ..proj.clone() }, &ms, &mc)
                }))
                .max(check_matrix(&proj.w_v, &dp.w_v, |w| {
                    loss(x, &ProjectionSet { w_v: w.clone(), ..proj.clone() }, &ms, &mc)
                }));
            // trainable pseudo logits
            for (which, mask, d_logits) in [(0, &ms, &g.d_mask_self), (1, &mc, &g.d_mask_cross)] {
                let pos = mask.pseudo_positions();
                if pos.is_empty() {
                    continue;
                }
                let params = Matrix::new(1, pos.len(), pos.iter().map(|&p| mask.logits()[p]).collect()).unwrap();
                let analytic = Matrix::new(1, pos.len(), pos.iter().map(|&p| d_logits[p]).collect()).unwrap();
                worst = worst.max(check_matrix(&params, &analytic, |p| {
                    let m2 = compile_with(mask, &pos, p.data());
                    if which == 0 {
                        loss(x, &proj, &m2, &mc)
                    } else {
                        loss(x, &proj, &ms, &m2)
                    }
                }));
            }
        }
    }
    worst
}

/// `Ĝ = KᵀK/‖KᵀK‖_F` back to the keys.
pub fn normalized_gram(seed: u64) -> f64 {
    let (d, n, _) = dims(seed);
    let keys = random_matrix(seed, 30, n, d, 1.0);
    let r = random_matrix(seed, 31, d, d, 1.0);
    let gm = gram_matrix(&keys).unwrap();
    let analytic = normalized_gram_backward(&keys, &gm, &r);
    check_matrix(&keys, &analytic, |k| {
        weighted_sum(&normalize_gram(&gram_matrix(k).unwrap()).unwrap(), &r)
    })
}

pub fn aligner(seed: u64, variant: AlignerVariant) -> f64 {
    let (d, n, _) = dims(seed);
    let x = random_matrix(seed, 40, n, d, 1.0);
    let gram = normalize_gram(&gram_matrix(&random_matrix(seed, 41, 3, d, 1.0)).unwrap()).unwrap();
    let r = random_matrix(seed, 42, n, d, 1.0);
    let mut al = build_aligner(variant, d, seed);
    for (i, t) in al.tensors_mut().into_iter().enumerate() {
        let (rows, cols) = t.shape();
        t.add_assign(&random_matrix(seed, 50 + i as u64, rows, cols, 0.5));
    }
    let g = variant.uses_gram().then_some(&gram);
    let b = al.backward(&x, g, &r).unwrap();
    let mut worst = check_matrix(&x, &b.d_input, |x| weighted_sum(&al.apply(x, g).unwrap(), &r));
    let grads: Vec<Matrix> = b.grads.tensors().into_iter().cloned().collect();
    for (t, gt) in grads.iter().enumerate() {
        worst = worst.max(check_matrix(al.tensors()[t], gt, |p| {
            let mut a2 = al.clone();
            *a2.tensors_mut()[t] = p.clone();
            weighted_sum(&a2.apply(&x, g).unwrap(), &r)
        }));
    }
    if let Some(dg) = &b.d_gram {
        worst = worst.max(check_matrix(&gram, dg, |gp| weighted_sum(&al.apply(&x, Some(gp)).unwrap(), &r)));
    }
    worst
}

pub fn fuser(seed: u64, mode: FuserMode) -> f64 {
    let (d, n, _) = dims(seed);
    let rank = 1 + (seed as usize % d);
    let original = random_matrix(seed, 60, n, d, 1.0);
    let aligned = random_matrix(seed, 61, n, d, 1.0);
    let r = random_matrix(seed, 62, n, d, 1.0);
    let mut f = FuserState::new(mode, d, rank, seed).unwrap();
    for (i, t) in f.tensors_mut().into_iter().enumerate() {
        let (rows, cols) = t.shape();
        t.add_assign(&random_matrix(seed, 70 + i as u64, rows, cols, 0.5));
    }
    let b = fuse_backward(&original, &aligned, &f, &r).unwrap();
    let mut worst = check_matrix(&original, &b.d_original, |o| weighted_sum(&fuse(o, &aligned, &f).unwrap(), &r))
        .max(check_matrix(&aligned, &b.d_aligned, |a| weighted_sum(&fuse(&original, a, &f).unwrap(), &r)));
    let grads: Vec<Matrix> = b.grads.tensors().into_iter().cloned().collect();
    for (t, gt) in grads.iter().enumerate() {
        worst = worst.max(check_matrix(f.tensors()[t], gt, |p| {
            let mut f2 = f.clone();
            *f2.tensors_mut()[t] = p.clone();
            weighted_sum(&fuse(&original, &aligned, &f2).unwrap(), &r)
        }));
    }
    worst
}

/// Learnable causal mask: gradient of the pseudo logits themselves.
pub fn learnable_mask(seed: u64) -> f64 {
    let (d, n, _) = dims(seed);
    let n = n.max(2);
    let q = random_matrix(seed, 80, n, d, 1.0);
    let k = random_matrix(seed, 81, n, d, 1.0);
    let v = random_matrix(seed, 82, n, d, 1.0);
    let r = random_matrix(seed, 83, n, d, 1.0);
    let tau = (d as f64).sqrt();
    let mut lm = build_learnable_mask(n, 0.1, 0.0).unwrap();
    let init: Vec<f64> = lm.params().iter().enumerate().map(|(i, p)| p + 0.3 * (i as f64).sin()).collect();
    lm.set_params(&init);
    let mask = lm.compile();
    let fwd = attend(&q, &k, &v, &mask, tau, false).unwrap();
    let g = attend_backward(&q, &k, &v, &mask, tau, &fwd.weights, &r);
    let analytic = Matrix::new(1, init.len(), lm.gather_grad(&g.d_logits)).unwrap();
    let params = Matrix::new(1, init.len(), init).unwrap();
    check_matrix(&params, &analytic, |p| {
        let mut l2 = lm.clone();
        l2.set_params(p.data());
        weighted_sum(&attend(&q, &k, &v, &l2.compile(), tau, false).unwrap().output, &r)
    })
}

/// Full 2-block toy model under `block`, every parameter tensor.
pub fn model(seed: u64, block: BlockConfig) -> f64 {
    let d = 3 + (seed % 2) as usize;
    let nv = 1 + (seed % 3) as usize;
    let nt = 1 + (seed / 3 % 3) as usize;
    let mut m = ModelState::init(micro_config(d, nv, nt, BlockConfig { adapter_rank: 1, ..block }), seed).unwrap();
    perturb_blocks(&mut m, seed, 0.3);
    check_model(&m, &random_sample(seed, nv, nt, 5))
}
