//! Checks shared by the property tests and the acceptance gate. Each returns
//! the worst observed value so callers can print it next to the threshold.

use moda_core::aligner::{gram_matrix, normalize_gram, FuserMode};
use moda_core::diagnostics::{cumulative_dda, fit_decay};
use moda_core::modmask::{build_pseudo_mask, MaskSpec, MaskVariant};
use moda_core::numerics::frobenius_norm;
use moda_core::rng::{self, streams};
use moda_core::toymodel::{forward, BlockConfig, ModelConfig, ModelState};

use super::{block_grid, micro_config, oracle_forward, perturb_blocks, random_sample};

/// Pseudo-mask structure over `n ∈ 1..=32` and the given `β` grid. Returns
/// the number of violated entries (exact comparison).
pub fn pseudo_mask_violations(betas: &[f64]) -> usize {
    let mut bad = 0;
    for &beta in betas {
        for n in 1..=32 {
            let m = build_pseudo_mask(n, beta, 0.0).unwrap();
            for i in 0..n {
                // 1-based row i+1 holds n-(i+1) pseudo entries
                if m.pseudo_count(i) != n - (i + 1) {
                    bad += 1;
                }
                for j in 1..n - i {
                    let expected = 0.0 - (j as f64 - 1.0) * beta;
                    if !m.is_pseudo(i, i + j) || m.logits()[(i, i + j)] != expected {
                        bad += 1;
                    }
                }
                for j in 0..=i {
                    if m.is_pseudo(i, j) || m.logits()[(i, j)] != 0.0 {
                        bad += 1;
                    }
                }
            }
        }
    }
    bad
}

pub struct GramReport {
    pub max_asymmetry: f64,
    pub min_quadratic_form: f64,
    pub max_norm_error: f64,
}

/// Symmetry, PSD probes and unit norm over `count` random key matrices.
pub fn gram_properties(count: u64) -> GramReport {
    let mut rep = GramReport {
        max_asymmetry: 0.0,
        min_quadratic_form: f64::INFINITY,
        max_norm_error: 0.0,
    };
    for seed in 0..count {
        let mut r = rng::stream(seed, streams::TEST + 40);
        let n = 1 + (seed % 16) as usize;
        let d = 1 + (seed * 7 % 12) as usize;
        let keys = rng::uniform_matrix(&mut r, n, d, 1.0 + seed as f64 % 5.0);
        let gm = gram_matrix(&keys).unwrap();
        let g = &gm.g;
        for i in 0..d {
            for j in 0..d {
                rep.max_asymmetry = rep.max_asymmetry.max((g[(i, j)] - g[(j, i)]).abs());
            }
        }
        for _ in 0..8 {
            let x = rng::uniform_matrix(&mut r, d, 1, 1.0);
            let mut qf = 0.0;
            for i in 0..d {
                for j in 0..d {
                    qf += x[(i, 0)] * g[(i, j)] * x[(j, 0)];
                }
            }
            rep.min_quadratic_form = rep.min_quadratic_form.min(qf);
        }
        let ghat = normalize_gram(&gm).unwrap();
        rep.max_norm_error = rep.max_norm_error.max((frobenius_norm(&ghat).unwrap() - 1.0).abs());
    }
    rep
}

fn identity_pair(d: usize, fuser: FuserMode) -> (BlockConfig, BlockConfig) {
    let inf = MaskSpec::new(MaskVariant::Inf, 0).with_beta(0.0);
    let moda = BlockConfig {
        mask_spec: inf,
        fuser_mode: fuser,
        ..BlockConfig::moda(d)
    };
    let split = BlockConfig {
        use_daa: false,
        ..moda
    };
    (moda, split)
}

/// Largest output gap between a MODA model at identity start and the plain
/// split-attention model with the same seed, over `inputs` random samples
/// and every fuser mode that starts as the identity.
pub fn identity_start_gap(inputs: u64) -> f64 {
    let mut worst = 0.0f64;
    for fuser in [FuserMode::Add, FuserMode::Concat, FuserMode::SelfOnly] {
        for seed in 0..inputs {
            let d = 4 + (seed % 3) as usize * 2;
            let nv = 1 + (seed % 4) as usize;
            let nt = 1 + (seed / 4 % 4) as usize;
            let (a, b) = identity_pair(d, fuser);
            let cfg = |block| ModelConfig {
                d,
                blocks: 2,
                n_visual: nv,
                n_text: nt,
                vocab_visual: 7,
                vocab_text: 7,
                classes: 3,
                text_embed_scale: 1.0,
                block,
            };
            let ma = ModelState::init(cfg(a), seed).unwrap();
            let mb = ModelState::init(cfg(b), seed).unwrap();
            let s = random_sample(seed, nv, nt, 7);
            let fa = forward(&ma, &ma.embed(&s).unwrap()).unwrap();
            let fb = forward(&mb, &mb.embed(&s).unwrap()).unwrap();
            worst = worst.max(fa.logits.max_abs_diff(&fb.logits));
            for (la, lb) in fa.trace.layers().iter().zip(fb.trace.layers()) {
                worst = worst.max(la.weights.max_abs_diff(&lb.weights));
            }
        }
    }
    worst
}

pub struct DecayReport {
    pub max_gamma_error: f64,
    pub max_residual_error: f64,
    pub max_dda_rel_error: f64,
}

/// Exact geometric series of length 2..=12 over a grid of `(c, γ)`.
pub fn decay_exactness() -> DecayReport {
    let mut rep = DecayReport {
        max_gamma_error: 0.0,
        max_residual_error: 0.0,
        max_dda_rel_error: 0.0,
    };
    for len in 2..=12 {
        for &gamma in &[0.3, 0.5, 0.8, 0.95, 1.0, 1.1, 2.0] {
            for &c in &[0.01, 1.0, 7.5] {
                let series: Vec<f64> = (1..=len).map(|l| c * f64::powi(gamma, l)).collect();
                let fit = fit_decay(&series).unwrap();
                rep.max_gamma_error = rep.max_gamma_error.max((fit.gamma - gamma).abs());
                for r in &fit.residuals {
                    rep.max_residual_error = rep.max_residual_error.max((r - 1.0).abs());
                }
            }
            let eps: Vec<f64> = (0..len).map(|l| 0.9 + 0.05 * (l as f64).cos()).collect();
            let mut naive = 1.0;
            for (l, e) in eps.iter().enumerate() {
                naive *= f64::powi(gamma, l as i32 + 1) * e;
            }
            let got = cumulative_dda(gamma, &eps);
            rep.max_dda_rel_error = rep.max_dda_rel_error.max(((got - naive) / naive).abs());
        }
    }
    rep
}

/// Seconds per aligner application on an `n × d` key block (best of `reps`).
pub fn aligner_seconds(n: usize, d: usize, reps: usize) -> f64 {
    use moda_core::aligner::{build_aligner, fuse, AlignerVariant, FuserState};
    let mut r = rng::stream(n as u64, streams::TEST + 50);
    let focus = rng::uniform_matrix(&mut r, n, d, 1.0);
    let rest = rng::uniform_matrix(&mut r, n, d, 1.0);
    let al = build_aligner(AlignerVariant::Cov, d, 0);
    let fu = FuserState::new(FuserMode::Add, d, FuserState::default_rank(d), 0).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = std::time::Instant::now();
        let ghat = normalize_gram(&gram_matrix(&focus).unwrap()).unwrap();
        let aligned = al.apply(&rest, Some(&ghat)).unwrap();
        let out = fuse(&rest, &aligned, &fu).unwrap();
        std::hint::black_box(&out);
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

/// Gram builds observed in one forward pass of a `blocks`-block MODA model.
pub fn gram_builds(blocks: usize) -> (usize, usize) {
    let d = 8;
    let block = BlockConfig::moda(d);
    let cfg = ModelConfig {
        d,
        blocks,
        n_visual: 3,
        n_text: 5,
        vocab_visual: 4,
        vocab_text: 4,
        classes: 2,
        text_embed_scale: 1.0,
        block,
    };
    let m = ModelState::init(cfg, 0).unwrap();
    let fwd = forward(&m, &m.embed(&random_sample(0, 3, 5, 4)).unwrap()).unwrap();
    (fwd.cache.gram_builds, 2 * blocks)
}

/// Every 2-modality split of 2 to 4 tokens.
pub fn oracle_instances() -> Vec<(usize, usize)> {
    (2..=4).flat_map(|n| (1..n).map(move |v| (v, n - v))).collect()
}

/// Largest logit or trace-weight gap between `forward` and the scalar
/// oracle on the seed-0 sample.
pub fn oracle_gap(model: &ModelState, nv: usize, nt: usize) -> f64 {
    let sample = random_sample(0, nv, nt, 5);
    let fwd = forward(model, &model.embed(&sample).unwrap()).unwrap();
    let oracle = oracle_forward(model, &sample);
    let mut gap = fwd
        .logits
        .row(0)
        .iter()
        .zip(&oracle.logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert_eq!(fwd.trace.len(), oracle.trace.len());
    for (layer, w) in fwd.trace.layers().iter().zip(&oracle.trace) {
        for (i, row) in w.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                gap = gap.max((layer.weights[(i, j)] - x).abs());
            }
        }
    }
    gap
}

/// Worst oracle gap over every instance, for the default block at init and
/// every grid config with perturbed parameters.
pub fn oracle_sweep() -> f64 {
    let mut worst = 0.0f64;
    for (nv, nt) in oracle_instances() {
        let m = ModelState::init(micro_config(4, nv, nt, BlockConfig::moda(4)), 0).unwrap();
        worst = worst.max(oracle_gap(&m, nv, nt));
    }
    for (_, block) in block_grid(4) {
        for (nv, nt) in oracle_instances() {
            let mut m = ModelState::init(micro_config(4, nv, nt, block), 0).unwrap();
            perturb_blocks(&mut m, 0, 0.3);
            worst = worst.max(oracle_gap(&m, nv, nt));
        }
    }
    worst
}
