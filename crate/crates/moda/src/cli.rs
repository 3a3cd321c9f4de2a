//! `moda demo | train | ablate | diagnose <trace>`.
//!
//! Every command prints a short report, writes it to `report.txt` under the
//! output directory, and returns one of the exit codes listed in the crate
//! docs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use moda_core::aligner::{gram_matrix, FuserState};
use moda_core::attention::project;
use moda_core::diagnostics::{layer_series, summarize, DecayProfile, LayerSummary};
use moda_core::modality::ModalityId;
use moda_core::modmask::build_pseudo_mask;
use moda_core::toymodel::{ablate, forward, gen_synthetic_dataset, train, ModelConfig, ModelState, Pattern};

use crate::config::RunConfig;
use crate::export::{self, TraceDocument};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "moda", version, about = "Modular duplex attention toy experiments")]
pub struct Cli {
    /// TOML run config; built-in defaults with seed 0 when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One forward pass of a micro model; prints mask, Gram norms and activations.
    Demo,
    /// Train one model; writes metrics.csv, trace.json, trace.csv and checkpoint.json.
    Train,
    /// Train one model per grid row; writes ablation.csv.
    Ablate,
    /// Fit layer decay on an exported trace.
    Diagnose { trace: PathBuf },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs the selected command and returns its report.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    let report = match &cli.command {
        Command::Demo => cmd_demo(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Ablate => cmd_ablate(&cfg)?,
        Command::Diagnose { trace } => cmd_diagnose(&cfg, trace)?,
    };
    export::write(&cfg.output_dir.join("report.txt"), &report)?;
    Ok(report)
}

fn fmt_row(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn write_summaries(out: &mut String, summaries: &[LayerSummary]) {
    for l in summaries {
        for f in &l.foci {
            let d = f.disparity.map_or("undefined".to_string(), |v| format!("{v:.2}%"));
            let _ = writeln!(
                out,
                "  layer {} focus {:<6} self {:.6} cross {:.6} disparity {d}",
                l.layer_index, f.focus.to_string(), f.self_mean, f.cross_mean
            );
        }
    }
}

pub fn cmd_demo(cfg: &RunConfig) -> Result<String> {
    let demo = &cfg.demo;
    let mut out = String::from("# demo\n");
    let p_base = cfg.model.p_base;
    let mask = build_pseudo_mask(demo.mask_n, demo.beta, p_base)?;
    let _ = writeln!(
        out,
        "causal pseudo mask, n={} beta={} p_base={p_base} (allowed entries 0):",
        demo.mask_n, demo.beta
    );
    for i in 0..mask.rows() {
        let _ = writeln!(out, "  {}", fmt_row(mask.logits().row(i)));
    }
    if mask.rows() > 0 {
        let _ = writeln!(out, "pseudo row 0: {}", fmt_row(&mask.pseudo_row(0)));
    }

    if cfg.task.pattern == Pattern::FirstVsLast && demo.n_visual < 2 {
        return Err(Error::Config("first_vs_last needs demo.n_visual >= 2".into()));
    }
    let mut block = cfg.block_config();
    block.adapter_rank = FuserState::default_rank(demo.d);
    block.mask_spec.beta = demo.beta;
    let mc = ModelConfig {
        d: demo.d,
        blocks: 1,
        n_visual: demo.n_visual,
        n_text: demo.n_text,
        block,
        ..cfg.model_config()?
    };
    let model = ModelState::init(mc, cfg.seed)?;
    let mut task = cfg.task();
    task.n_visual = demo.n_visual;
    task.n_text = demo.n_text;
    let sample = &gen_synthetic_dataset(&task, 1)[0];
    let seq = model.embed(sample)?;

    let (_, keys, _) = project(seq.tokens(), &model.blocks[0].proj)?;
    let _ = writeln!(out, "block 0 key Gram norms:");
    for s in seq.segmentation().segments() {
        let rows: Vec<usize> = s.range().collect();
        let g = gram_matrix(&keys.select_rows(&rows))?;
        let _ = writeln!(out, "  {:<6} ||K^T K||_F = {:.6}", s.modality.to_string(), g.norm_value);
    }

    let fwd = forward(&model, &seq)?;
    let _ = writeln!(out, "activation (d={}, {}+{} tokens):", demo.d, demo.n_visual, demo.n_text);
    write_summaries(&mut out, &summarize(&fwd.trace)?);
    Ok(out)
}

fn fit_report(out: &mut String, cfg: &RunConfig, summaries: &[LayerSummary]) {
    let focus: ModalityId = cfg.diag.focus.into();
    let series = layer_series(summaries, focus, cfg.diag.series);
    match DecayProfile::from_series(&series) {
        Ok(p) => {
            let _ = writeln!(out, "decay fit on {focus} {:?}: gamma = {}", cfg.diag.series, p.gamma);
            let _ = writeln!(out, "residuals = {}", fmt_row(&p.residuals));
            let _ = writeln!(out, "e_dda = {}", p.e_dda);
        }
        Err(e) => {
            let _ = writeln!(out, "decay fit on {focus} {:?}: unavailable ({e})", cfg.diag.series);
        }
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let mc = cfg.model_config()?;
    let dataset = gen_synthetic_dataset(&cfg.task(), cfg.task.count);
    let model = ModelState::init(mc, cfg.seed)?;
    let outcome = train(model, &dataset, &cfg.hyper())?;
    let dir = &cfg.output_dir;

    export::write(&dir.join("metrics.csv"), &export::metrics_csv(&outcome.history, mc.blocks))?;
    let mut doc = TraceDocument::from_summaries(&outcome.final_eval.summaries);
    if cfg.diag.heatmaps {
        let last = dataset.last().expect("count >= 1");
        let fwd = forward(&outcome.model, &outcome.model.embed(last)?)?;
        doc.attach_heatmaps(&fwd.trace);
    }
    export::export_trace(&doc, &dir.join("trace.json"))?;
    export::save_checkpoint(&outcome.model, &dir.join("checkpoint.json"))?;

    let ev = &outcome.final_eval;
    let mut out = String::from("# train\n");
    let _ = writeln!(
        out,
        "seed {} steps {} samples {} parameters {}",
        cfg.seed,
        cfg.train.steps,
        dataset.len(),
        outcome.model.parameter_count()
    );
    let _ = writeln!(out, "eval loss {:.6} accuracy {:.4}", ev.loss, ev.accuracy);
    match ev.mean_disparity {
        Some(d) => {
            let _ = writeln!(out, "mean disparity {d:.4}%");
        }
        None => out.push_str("mean disparity undefined\n"),
    }
    write_summaries(&mut out, &ev.summaries);
    fit_report(&mut out, cfg, &ev.summaries);
    Ok(out)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let mc = cfg.model_config()?;
    let dataset = gen_synthetic_dataset(&cfg.task(), cfg.task.count);
    let rows = ablate(&cfg.ablate.grid, &mc, &dataset, &cfg.hyper(), cfg.seed)?;
    export::write(&cfg.output_dir.join("ablation.csv"), &export::ablation_csv(&rows))?;
    let mut out = String::from("# ablate\n");
    for r in &rows {
        let gamma = r.gamma.map_or("-".to_string(), |g| format!("{g:.4}"));
        let _ = writeln!(
            out,
            "{:<16} accuracy {:.4} loss {:.6} disparity {:.4} gamma {gamma}",
            r.label, r.accuracy, r.eval_loss, r.mean_disparity
        );
    }
    Ok(out)
}

pub fn cmd_diagnose(cfg: &RunConfig, trace: &Path) -> Result<String> {
    let doc = TraceDocument::read(trace)?;
    let summaries = doc.summaries();
    let mut out = format!("# diagnose {}\n", trace.display());
    write_summaries(&mut out, &summaries);
    let focus: ModalityId = cfg.diag.focus.into();
    let series = layer_series(&summaries, focus, cfg.diag.series);
    let p = DecayProfile::from_series(&series).map_err(|e| Error::Format {
        path: trace.to_path_buf(),
        msg: format!("{focus} {:?} series {}: {e}", cfg.diag.series, fmt_row(&series)),
    })?;
    let _ = writeln!(out, "decay fit on {focus} {:?}: gamma = {}", cfg.diag.series, p.gamma);
    let _ = writeln!(out, "residuals = {}", fmt_row(&p.residuals));
    let _ = writeln!(out, "e_dda = {}", p.e_dda);
    Ok(out)
}
