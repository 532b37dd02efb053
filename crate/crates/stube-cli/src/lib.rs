//! Command-line front end over the experiment driver. Every subcommand
//! takes `--config <path>`; `--seed N` replaces the four config seeds with
//! N, N+1, N+2, N+3 (init, data, sampler, split).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use stube_core::corpus;
use stube_core::experiment::{
    self, ExperimentConfig, ExperimentError, GridVariant, Seeds,
};
use stube_core::metrics::{self, MetricsReport};
use stube_core::predict;
use stube_core::trajectory::read_trajectories;

#[derive(Parser)]
#[command(
    name = "stube",
    about = "train and probe step-structured hidden trajectories",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the corpus and write the train/eval splits as JSONL.
    GenCorpus(CommonArgs),
    /// Train one variant; writes checkpoint and log.jsonl under the run dir.
    Train(VariantArgs),
    /// Evaluate one variant; writes traj.dump and metrics.json, prints the report.
    Eval(VariantArgs),
    /// Fit the residual probe on one variant's trajectories; prints the ratio table.
    ProbeMlp(VariantArgs),
    /// Greedy-decode held-out questions; prints exact-match accuracy.
    DecodeCheck(DecodeArgs),
    /// Run all six variants end to end and write comparison.md.
    Grid(CommonArgs),
    /// Re-render comparison.md from whatever metrics files are on disk.
    Report(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides all four seeds in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VariantArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid variant id: b1, b2, c, a2, a, or a1.
    #[arg(long)]
    variant: String,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    variant: VariantArgs,
    /// Cap on the number of questions decoded (default from the config).
    #[arg(long)]
    cap: Option<usize>,
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = experiment::load_config(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds = Seeds::from_master(s);
    }
    Ok(cfg)
}

fn variant_of(args: &VariantArgs) -> Result<GridVariant, ExperimentError> {
    GridVariant::parse(&args.variant).ok_or_else(|| {
        ExperimentError::Invalid(format!(
            "unknown variant {:?}; expected one of b1, b2, c, a2, a, a1",
            args.variant
        ))
    })
}

fn cmd_gen_corpus(args: &CommonArgs) -> Result<(), ExperimentError> {
    let cfg = load(args)?;
    let (train, eval) = experiment::build_corpora(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| ExperimentError::Invalid(format!("cannot create {:?}: {e}", cfg.out_dir)))?;
    let train_path = cfg.out_dir.join("corpus.train.jsonl");
    let eval_path = cfg.out_dir.join("corpus.eval.jsonl");
    corpus::write_corpus(&train_path, &train)?;
    corpus::write_corpus(&eval_path, &eval)?;
    println!(
        "wrote {} train + {} eval sequences under {}",
        train.len(),
        eval.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: &VariantArgs) -> Result<(), ExperimentError> {
    let cfg = load(&args.common)?;
    let variant = variant_of(args)?;
    let summary = experiment::train_variant(variant, &cfg)?;
    match summary.final_record {
        Some(r) => println!(
            "trained {}: {} optimizer steps, final loss {:.6} -> {}",
            variant.id(),
            summary.optimizer_steps,
            r.total,
            summary.checkpoint.display()
        ),
        None => println!(
            "snapshot {}: untrained base -> {}",
            variant.id(),
            summary.checkpoint.display()
        ),
    }
    Ok(())
}

fn cmd_eval(args: &VariantArgs) -> Result<(), ExperimentError> {
    let cfg = load(&args.common)?;
    let variant = variant_of(args)?;
    let report = experiment::eval_variant(variant, &cfg)?;
    print!("{}", report.render_markdown());
    Ok(())
}

fn cmd_probe_mlp(args: &VariantArgs) -> Result<(), ExperimentError> {
    let cfg = load(&args.common)?;
    let variant = variant_of(args)?;
    let dump = cfg.variant_dir(variant).join("traj.dump");
    let trajs = if dump.exists() {
        read_trajectories(&dump)?
    } else {
        let model = experiment::model_for(&cfg, variant)?;
        let (_, eval_seqs) = experiment::build_corpora(&cfg)?;
        experiment::decode_trajectories(&model, &eval_seqs)?
    };
    let curve =
        predict::ratio_curve(&trajs, &cfg.eval.m_list, cfg.seeds.split, &cfg.mlp_config())?;
    println!("| m | linear mse | mlp mse | ratio | pairs |");
    println!("| - | - | - | - | - |");
    for p in &curve {
        let ratio = if p.degenerate {
            format!("{:.4} (degenerate)", p.ratio)
        } else {
            format!("{:.4}", p.ratio)
        };
        println!(
            "| {} | {:.6e} | {:.6e} | {} | {} |",
            p.m, p.linear_mse, p.mlp_mse, ratio, p.n_pairs
        );
    }
    Ok(())
}

fn cmd_decode_check(args: &DecodeArgs) -> Result<(), ExperimentError> {
    let cfg = load(&args.variant.common)?;
    let variant = variant_of(&args.variant)?;
    let model = experiment::model_for(&cfg, variant)?;
    let (_, eval_seqs) = experiment::build_corpora(&cfg)?;
    let cap = args.cap.unwrap_or(cfg.eval.decode_sample_cap);
    match experiment::exact_match_greedy(&model, &eval_seqs, cap)? {
        Some(v) => println!(
            "exact-match {} = {:.4} over {} questions",
            variant.id(),
            v,
            eval_seqs.len().min(cap)
        ),
        None => println!("exact-match {}: no questions to decode", variant.id()),
    }
    Ok(())
}

fn cmd_grid(args: &CommonArgs) -> Result<(), ExperimentError> {
    let cfg = load(args)?;
    let reports = experiment::run_grid(&cfg)?;
    for r in &reports {
        let mse1 = r.per_m.first().map_or(f64::NAN, |p| p.linear_mse);
        println!(
            "{}: linear mse(m={}) {:.6e}, exact-match {}",
            r.variant,
            r.per_m.first().map_or(0, |p| p.m),
            mse1,
            r.exact_match.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("wrote {}", cfg.out_dir.join("comparison.md").display());
    Ok(())
}

fn cmd_report(args: &CommonArgs) -> Result<(), ExperimentError> {
    let cfg = load(args)?;
    let mut reports = Vec::new();
    for variant in GridVariant::ALL {
        let path = cfg.variant_dir(variant).join("metrics.json");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ExperimentError::Invalid(format!("cannot read {path:?}: {e}")))?;
        let report = MetricsReport::from_json(&text).map_err(|e| {
            ExperimentError::Invalid(format!("bad metrics file {path:?}: {e}"))
        })?;
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(ExperimentError::Invalid(format!(
            "no metrics files under {}; run eval or grid first",
            cfg.out_dir.display()
        )));
    }
    let rendered = metrics::render_comparison(&reports);
    let out = cfg.out_dir.join("comparison.md");
    std::fs::write(&out, &rendered)
        .map_err(|e| ExperimentError::Invalid(format!("cannot write {out:?}: {e}")))?;
    print!("{rendered}");
    Ok(())
}

/// Parses argv and runs one subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::ProbeMlp(a) => cmd_probe_mlp(a),
        Cmd::DecodeCheck(a) => cmd_decode_check(a),
        Cmd::Grid(a) => cmd_grid(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
