use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use synthcap::corpus::{generate_toy_corpus, load_corpus, save_corpus};
use synthcap::embedding::{load_embeddings, save_embeddings, EmbeddingMatrix};
use synthcap::pipeline::{
    read_captions, read_references, run_ablation, run_inference, run_training, score_captions,
    toy_training_data, DecodeStrategy, PipelineConfig,
};
use synthcap::projection::{project_all, SupportSet};
use synthcap::refine::{mean_paired_cosine, refine_features, write_loss_history};
use synthcap::toy_encoder::{toy_image_encode, toy_text_encode};
use synthcap::{Error, Result};

mod settings;

/// Text-only image captioning in a shared image-text embedding space.
///
/// Every subcommand reads one TOML configuration (`--config`), applies
/// `--set KEY=VALUE` overrides, then the typed flags below. Exit status is 0
/// on success, 2 for invalid input or configuration, 3 for numerical failure.
#[derive(Parser)]
#[command(name = "synthcap", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `decoder.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Start from the synthetic-benchmark preset.
    #[arg(long, global = true)]
    toy: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Feature optimization (contrastive refinement) on or off.
    #[arg(long, global = true)]
    fo: Option<bool>,
    /// Feature projection on or off.
    #[arg(long, global = true)]
    fp: Option<bool>,
    /// Object-tag fusion on or off.
    #[arg(long, global = true)]
    af: Option<bool>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    text_embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pseudo_embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    support: Option<PathBuf>,
    #[arg(long, global = true)]
    image_embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    image_corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    captions: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic caption corpus (JSONL).
    GenToy {
        /// Number of captions; defaults to the toy train plus test sizes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode `--corpus` with the toy text and image encoders.
    EncodeToy {
        #[arg(long)]
        text_out: PathBuf,
        #[arg(long)]
        image_out: PathBuf,
        /// Item index of the first row, for the per-image noise.
        #[arg(long, default_value_t = 0)]
        index_offset: u64,
    },
    /// Refine `--pseudo-embeddings` toward `--text-embeddings`.
    Refine {
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch mean loss, one JSON object per line.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Validate text features as a projection support set and write them.
    ///
    /// Reads `--text-embeddings`, or in toy mode encodes `--corpus` (the
    /// toy training captions when no corpus is given).
    BuildSupport {
        #[arg(long)]
        out: PathBuf,
    },
    /// Project every row of an embedding file onto `--support`.
    Project {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine, project, fuse and train the decoder; writes `--checkpoint`.
    Train,
    /// Caption images with `--checkpoint`.
    Infer {
        /// Beam width; 1 is greedy.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score `--captions` against reference captions.
    Eval {
        /// JSONL with `id` and `refs` (list) or `text` per line.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score all eight toggle combinations.
    Ablate,
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = settings::assemble(c.config.as_deref(), &c.sets, c.toy)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let t = &mut cfg.toggles;
    for (flag, dst) in [(c.fo, &mut t.fo), (c.fp, &mut t.fp), (c.af, &mut t.af)] {
        if let Some(v) = flag {
            *dst = v;
        }
    }
    let p = &mut cfg.paths;
    for (flag, dst) in [
        (&c.corpus, &mut p.corpus),
        (&c.text_embeddings, &mut p.text_embeddings),
        (&c.pseudo_embeddings, &mut p.pseudo_embeddings),
        (&c.support, &mut p.support),
        (&c.image_embeddings, &mut p.image_embeddings),
        (&c.image_corpus, &mut p.image_corpus),
        (&c.checkpoint, &mut p.checkpoint),
        (&c.captions, &mut p.captions),
        (&c.report_dir, &mut p.report_dir),
    ] {
        if flag.is_some() {
            dst.clone_from(flag);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing path: --{flag}")))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(io::stdout(), "{text}")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::GenToy { n, out } => {
            let n = n.unwrap_or(cfg.toy.n_train + cfg.toy.n_test);
            save_corpus(&generate_toy_corpus(&cfg.toy.grammar, n)?, &out)?;
        }
        Command::EncodeToy {
            text_out,
            image_out,
            index_offset,
        } => {
            let records = load_corpus(need(&cfg.paths.corpus, "corpus")?)?;
            let spec = &cfg.toy.encoder;
            let mut text = Vec::with_capacity(records.len());
            let mut image = Vec::with_capacity(records.len());
            for (i, r) in records.iter().enumerate() {
                text.push(toy_text_encode(&r.tokens, spec)?);
                image.push(toy_image_encode(&r.tokens, index_offset + i as u64, spec)?);
            }
            save_embeddings(&EmbeddingMatrix::from_f64_rows(&text, spec.dim)?, text_out)?;
            save_embeddings(
                &EmbeddingMatrix::from_f64_rows(&image, spec.dim)?,
                image_out,
            )?;
        }
        Command::Refine { out, loss_log } => {
            let pseudo = load_embeddings(need(&cfg.paths.pseudo_embeddings, "pseudo-embeddings")?)?;
            let text = load_embeddings(need(&cfg.paths.text_embeddings, "text-embeddings")?)?;
            let outcome = refine_features(&pseudo, &text, &cfg.refine_config())?;
            save_embeddings(&outcome.features, out)?;
            if let Some(p) = loss_log {
                write_loss_history(&outcome.history, std::fs::File::create(p)?)?;
            }
            print_json(&serde_json::json!({
                "cosine_before": mean_paired_cosine(&pseudo, &text)?,
                "cosine_after": mean_paired_cosine(&outcome.features, &text)?,
                "history": outcome.history,
            }))?;
        }
        Command::BuildSupport { out } => {
            let text = match (&cfg.paths.text_embeddings, cfg.toy.enabled) {
                (Some(p), _) => load_embeddings(p)?,
                (None, true) => match &cfg.paths.corpus {
                    Some(c) => {
                        let rows = load_corpus(c)?
                            .iter()
                            .map(|r| toy_text_encode(&r.tokens, &cfg.toy.encoder))
                            .collect::<Result<Vec<_>>>()?;
                        EmbeddingMatrix::from_f64_rows(&rows, cfg.toy.encoder.dim)?
                    }
                    None => toy_training_data(&cfg.toy)?.text,
                },
                (None, false) => {
                    return Err(Error::Config(
                        "missing path: --text-embeddings (or use --toy)".into(),
                    ))
                }
            };
            SupportSet::new(&text, cfg.projection())?;
            save_embeddings(&text, out)?;
        }
        Command::Project { input, out } => {
            let support = load_embeddings(need(&cfg.paths.support, "support")?)?;
            let set = SupportSet::new(&support, cfg.projection())?;
            save_embeddings(&project_all(&load_embeddings(input)?, &set)?, out)?;
        }
        Command::Train => {
            let trained = run_training(&cfg)?;
            print_json(&trained.report)?;
        }
        Command::Infer { beam } => {
            let mut cfg = cfg;
            match beam {
                Some(1) => cfg.decode = DecodeStrategy::Greedy,
                Some(width) => cfg.decode = DecodeStrategy::Beam { width },
                None => {}
            }
            cfg.validate()?;
            let outcome = run_inference(&cfg)?;
            if cfg.paths.captions.is_none() {
                let mut stdout = io::stdout().lock();
                for c in &outcome.captions {
                    let line = serde_json::to_string(c).map_err(io::Error::from)?;
                    writeln!(stdout, "{line}")?;
                }
            }
            let summary = serde_json::json!({
                "n_captions": outcome.captions.len(),
                "metrics": outcome.metrics,
                "object_hit_rate": outcome.object_hit_rate,
            });
            eprintln!("{summary}");
        }
        Command::Eval { references, out } => {
            let captions = read_captions(need(&cfg.paths.captions, "captions")?)?;
            let report = score_captions(&captions, &read_references(references)?)?;
            print_json(&report)?;
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Config(e.to_string()))?;
                std::fs::write(p, text + "\n")?;
            }
        }
        Command::Ablate => {
            let report = run_ablation(&cfg, |v| {
                eprintln!(
                    "{:<9} bleu4 {:.4}  rouge_l {:.4}  cider_d {:.4}  loss {:.4}",
                    v.name, v.bleu4, v.rouge_l, v.cider_d, v.final_loss
                );
            })?;
            print_json(&report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
