//! Shared oracles for the integration and acceptance suites: central finite
//! differences and a scalar re-implementation of the toy model forward pass.

#![allow(dead_code)]

pub mod criteria;
pub mod suites;

use moda_core::aligner::{AlignerVariant, FuserMode};
use moda_core::modmask::{MaskSpec, MaskVariant};
use moda_core::rng::{self, streams};
use moda_core::toymodel::{
    AttentionKind, BlockConfig, CombineMode, ModelConfig, ModelState, Sample,
};
use moda_core::Matrix;

/// Finite-difference step.
pub const H: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale. With
/// `H = 1e-6`, central differences of the toy loss carry up to ~2e-9 of
/// roundoff, which would otherwise dominate the relative error of entries
/// near 1e-5 or below.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_matrix(seed: u64, salt: u64, rows: usize, cols: usize, a: f64) -> Matrix {
    rng::uniform_matrix(&mut rng::stream(seed, streams::TEST + salt), rows, cols, a)
}

/// Max relative error between `analytic` and central differences of `f`
/// around `x`, entry by entry.
pub fn check_matrix(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = f(&probe);
        probe.data_mut()[i] = orig - H;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// `Σ out ⊙ r`, the scalar loss whose upstream gradient is `r`.
pub fn weighted_sum(out: &Matrix, r: &Matrix) -> f64 {
    out.dot(r)
}

/// Max relative error of the full model gradient on one sample.
pub fn check_model(model: &ModelState, sample: &Sample) -> f64 {
    let (_, grads) = model.loss_and_grad(sample).expect("loss_and_grad");
    let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, g) in analytic.iter().enumerate() {
        for i in 0..g.data().len() {
            let orig = probe.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + H;
            let up = probe.loss(sample).expect("loss");
            probe.tensors_mut()[t].data_mut()[i] = orig - H;
            let down = probe.loss(sample).expect("loss");
            probe.tensors_mut()[t].data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Adds `±a` noise to every block parameter so that zero-initialized
/// adapters and identity aligners do not hide gradient paths.
pub fn perturb_blocks(model: &mut ModelState, seed: u64, a: f64) {
    let mut r = rng::stream(seed, streams::TEST + 7);
    for b in &mut model.blocks {
        let mut ts: Vec<&mut Matrix> = vec![&mut b.proj.w_q, &mut b.proj.w_k, &mut b.proj.w_v];
        ts.push(&mut b.w_out);
        for al in &mut b.aligners {
            ts.extend(al.tensors_mut());
        }
        for f in &mut b.fusers {
            ts.extend(f.tensors_mut());
        }
        ts.extend(b.mask_params.iter_mut());
        for t in ts {
            let (rows, cols) = t.shape();
            t.add_assign(&rng::uniform_matrix(&mut r, rows, cols, a));
        }
    }
}

pub fn micro_config(d: usize, n_visual: usize, n_text: usize, block: BlockConfig) -> ModelConfig {
    ModelConfig {
        d,
        blocks: 2,
        n_visual,
        n_text,
        vocab_visual: 5,
        vocab_text: 5,
        classes: 2,
        text_embed_scale: 1.0,
        block,
    }
}

pub fn random_sample(seed: u64, n_visual: usize, n_text: usize, vocab: usize) -> Sample {
    use rand::Rng;
    let mut r = rng::stream(seed, streams::TEST + 3);
    Sample {
        visual: (0..n_visual).map(|_| r.random_range(0..vocab)).collect(),
        text: (0..n_text).map(|_| r.random_range(0..vocab)).collect(),
        label: r.random_range(0..2),
    }
}

/// Every block configuration the ablation grid can produce, labelled.
pub fn block_grid(d: usize) -> Vec<(String, BlockConfig)> {
    let base = BlockConfig::moda(d);
    let mut out = Vec::new();
    for (mdm, daa) in [(false, false), (true, false), (false, true), (true, true)] {
        out.push((format!("mdm={mdm}/daa={daa}"), base.with_toggles(mdm, daa)));
    }
    for v in [
        MaskVariant::Inf,
        MaskVariant::Fix,
        MaskVariant::Learn,
        MaskVariant::SpecialToken,
        MaskVariant::Pseudo,
    ] {
        let mut b = base;
        b.mask_spec = MaskSpec::new(v, 0);
        out.push((format!("mask={v:?}"), b));
    }
    for a in AlignerVariant::ALL {
        out.push((format!("aligner={a:?}"), BlockConfig { aligner_variant: a, ..base }));
    }
    for f in FuserMode::ALL {
        out.push((format!("fuser={f:?}"), BlockConfig { fuser_mode: f, ..base }));
    }
    for c in [CombineMode::Concat, CombineMode::Sum] {
        out.push((format!("combine={c:?}"), BlockConfig { combine: c, ..base }));
    }
    out
}

// ---------------------------------------------------------------------------
// Scalar oracle. Plain nested loops over `Vec<Vec<f64>>`, written directly
// from the model definition without touching the crate's kernels.

type Mat = Vec<Vec<f64>>;

fn to_mat(m: &Matrix) -> Mat {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += row[k] * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Entry {
    Score(f64),
    Pseudo(f64),
}

/// Mask entries for one `rows × keys` sub-mask plus an optional sink.
fn oracle_mask(
    spec: &MaskSpec,
    rows: usize,
    keys: usize,
    allowed: impl Fn(usize, usize) -> bool,
    learned: Option<&[f64]>,
) -> (Vec<Vec<Entry>>, bool) {
    let mut k = 0;
    let mut out = Vec::new();
    for a in 0..rows {
        let mut row = Vec::new();
        let mut nth = 0.0;
        for b in 0..keys {
            row.push(if allowed(a, b) {
                Entry::Score(0.0)
            } else {
                match spec.variant {
                    MaskVariant::Inf | MaskVariant::SpecialToken => Entry::Score(f64::NEG_INFINITY),
                    MaskVariant::Fix => Entry::Score(spec.fixed_value),
                    MaskVariant::Pseudo | MaskVariant::Learn => {
                        let p = match learned {
                            Some(v) => v[k],
                            None => spec.p_base - nth * spec.beta,
                        };
                        k += 1;
                        nth += 1.0;
                        Entry::Pseudo(p)
                    }
                }
            });
        }
        out.push(row);
    }
    (out, spec.variant == MaskVariant::SpecialToken)
}

/// Returns per-row value-weighted output, real-key weights, and the mass on
/// entries that read no value.
fn oracle_attend(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    mask: &(Vec<Vec<Entry>>, bool),
    tau: f64,
) -> (Mat, Mat, Vec<f64>) {
    let d = v.first().map_or(q[0].len(), |r| r.len());
    let mut out = Vec::new();
    let mut real = Vec::new();
    let mut sink = Vec::new();
    for (a, qa) in q.iter().enumerate() {
        let mut logits = Vec::new();
        for (b, kb) in k.iter().enumerate() {
            logits.push(match mask.0[a][b] {
                Entry::Score(m) => {
                    let mut s = 0.0;
                    for t in 0..qa.len() {
                        s += qa[t] * kb[t];
                    }
                    s / tau + m
                }
                Entry::Pseudo(p) => p,
            });
        }
        if mask.1 {
            logits.push(0.0);
        }
        let w = softmax(&logits);
        let mut o = vec![0.0; d];
        let mut rw = vec![0.0; k.len()];
        let mut sm = 0.0;
        for (b, &wb) in w.iter().enumerate() {
            if b < k.len() && matches!(mask.0[a][b], Entry::Score(_)) {
                rw[b] = wb;
                for t in 0..d {
                    o[t] += wb * v[b][t];
                }
            } else {
                sm += wb;
            }
        }
        out.push(o);
        real.push(rw);
        sink.push(sm);
    }
    (out, real, sink)
}

pub struct OracleOutput {
    pub logits: Vec<f64>,
    /// Per layer, the `N × N` trace weights.
    pub trace: Vec<Mat>,
}

/// Straight-line forward pass of the toy model on one sample.
pub fn oracle_forward(model: &ModelState, sample: &Sample) -> OracleOutput {
    let c = &model.config;
    let d = c.d;
    let n = c.n_visual + c.n_text;
    let modality_of = |i: usize| usize::from(i >= c.n_visual);
    let mut h: Mat = Vec::new();
    for (p, &id) in sample.visual.iter().enumerate() {
        h.push((0..d).map(|t| model.embed_visual[(id, t)] + model.positions[(p, t)]).collect());
    }
    for (p, &id) in sample.text.iter().enumerate() {
        let q = c.n_visual + p;
        h.push((0..d).map(|t| model.embed_text[(id, t)] + model.positions[(q, t)]).collect());
    }
    let tau = (d as f64).sqrt();
    let mut trace = Vec::new();
    let bc = &c.block;
    for params in &model.blocks {
        let q = mul(&h, &to_mat(&params.proj.w_q));
        let k = mul(&h, &to_mat(&params.proj.w_k));
        let v = mul(&h, &to_mat(&params.proj.w_v));
        let mut weights = vec![vec![0.0; n]; n];
        let combined: Mat = if bc.attention_kind == AttentionKind::BaselineJoint {
            let spec = MaskSpec::new(MaskVariant::Inf, n);
            let mask = oracle_mask(&spec, n, n, |a, b| b <= a, None);
            let (o, w, _) = oracle_attend(&q, &k, &v, &mask, tau);
            weights = w;
            o
        } else {
            let spec = if bc.use_mdm { bc.mask_spec } else { MaskSpec::new(MaskVariant::Inf, 0) };
            let learn = bc.use_mdm && bc.mask_spec.variant == MaskVariant::Learn;
            let mut o_self = vec![vec![0.0; d]; n];
            let mut o_cross = vec![vec![0.0; d]; n];
            for m in 0..2 {
                let fi: Vec<usize> = (0..n).filter(|&i| modality_of(i) == m).collect();
                let ri: Vec<usize> = (0..n).filter(|&i| modality_of(i) != m).collect();
                let pick = |x: &Mat, idx: &[usize]| -> Mat { idx.iter().map(|&i| x[i].clone()).collect() };
                let (qf, kf, vf) = (pick(&q, &fi), pick(&k, &fi), pick(&v, &fi));
                let (kr, vr) = (pick(&k, &ri), pick(&v, &ri));
                let ls = learn.then(|| params.mask_params[2 * m].data().to_vec());
                let lc = learn.then(|| params.mask_params[2 * m + 1].data().to_vec());
                let ms = oracle_mask(&spec, fi.len(), fi.len(), |a, b| fi[b] <= fi[a], ls.as_deref());
                let mc = oracle_mask(&spec, fi.len(), ri.len(), |a, b| ri[b] < fi[a], lc.as_deref());

                let k_cross = if bc.use_daa {
                    let al = &params.aligners[m];
                    let affine = |x: &Mat, l: usize| -> Mat {
                        let mut y = mul(x, &to_mat(&al.layers[l].w));
                        for row in &mut y {
                            for (t, x) in row.iter_mut().enumerate().take(d) {
                                *x += al.layers[l].b[(0, t)];
                            }
                        }
                        y
                    };
                    let aligned = match bc.aligner_variant {
                        AlignerVariant::Mlp => affine(&kr, 0),
                        AlignerVariant::Mlp2 => affine(&affine(&kr, 0), 1),
                        AlignerVariant::MlpGelu => {
                            let mut a = affine(&kr, 0);
                            for row in &mut a {
                                for x in row.iter_mut() {
                                    *x = 0.5 * *x * (1.0 + libm::erf(*x / std::f64::consts::SQRT_2));
                                }
                            }
                            affine(&a, 1)
                        }
                        AlignerVariant::Cov => {
                            // normalized Gram of the focus keys
                            let mut g = vec![vec![0.0; d]; d];
                            for row in &kf {
                                for a in 0..d {
                                    for b in 0..d {
                                        g[a][b] += row[a] * row[b];
                                    }
                                }
                            }
                            let norm = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
                            for row in &mut g {
                                for x in row.iter_mut() {
                                    *x /= norm;
                                }
                            }
                            mul(&affine(&kr, 0), &g)
                        }
                    };
                    let f = &params.fusers[m];
                    match f.mode {
                        FuserMode::SelfOnly => kr.clone(),
                        FuserMode::AlignedOnly => aligned,
                        FuserMode::Add => {
                            let low = mul(&mul(&aligned, &to_mat(&f.adapter_down)), &to_mat(&f.adapter_up));
                            kr.iter()
                                .zip(&low)
                                .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect())
                                .collect()
                        }
                        FuserMode::Concat => {
                            let cat: Mat = kr
                                .iter()
                                .zip(&aligned)
                                .map(|(x, y)| x.iter().chain(y).cloned().collect())
                                .collect();
                            mul(&cat, &to_mat(f.concat_proj.as_ref().unwrap()))
                        }
                    }
                } else {
                    kr.clone()
                };

                let (os, ws, _) = oracle_attend(&qf, &kf, &vf, &ms, tau);
                let (oc, wc, sc) = if ri.is_empty() {
                    (vec![vec![0.0; d]; fi.len()], vec![vec![]; fi.len()], vec![0.0; fi.len()])
                } else {
                    oracle_attend(&qf, &k_cross, &vr, &mc, tau)
                };
                for (a, &i) in fi.iter().enumerate() {
                    o_self[i] = os[a].clone();
                    o_cross[i] = oc[a].clone();
                    let live = wc[a].iter().sum::<f64>() + sc[a] > 0.0;
                    let share = if live { 0.5 } else { 1.0 };
                    for (b, &j) in fi.iter().enumerate() {
                        weights[i][j] += share * ws[a][b];
                    }
                    if live {
                        for (b, &j) in ri.iter().enumerate() {
                            weights[i][j] += 0.5 * wc[a][b];
                        }
                    }
                }
            }
            match bc.combine {
                CombineMode::Concat => o_self
                    .iter()
                    .zip(&o_cross)
                    .map(|(a, b)| a.iter().chain(b).cloned().collect())
                    .collect(),
                CombineMode::Sum => o_self
                    .iter()
                    .zip(&o_cross)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                    .collect(),
            }
        };
        let delta = mul(&combined, &to_mat(&params.w_out));
        for i in 0..n {
            for t in 0..d {
                h[i][t] += delta[i][t];
            }
        }
        trace.push(weights);
    }
    let last = vec![h[n - 1].clone()];
    let mut logits = mul(&last, &to_mat(&model.head_w)).remove(0);
    for (j, l) in logits.iter_mut().enumerate() {
        *l += model.head_b[(0, j)];
    }
    OracleOutput { logits, trace }
}
