use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use polyret::index::AnnMode;
use polyret::retrieval::SearchRequest;
use polyret_cli::config::{parse_stage_list, RunConfig};
use polyret_cli::{evaluate, pipeline, serve};

/// Poly-attention semantic retrieval: synthetic data, training, indexing,
/// hybrid retrieval and evaluation.
#[derive(Parser)]
#[command(name = "polyret", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every artifact.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
}

#[derive(Args)]
struct Seed {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, click log and judgements.
    GenData(Seed),
    /// Train the encoder through the configured stages, then the ranker.
    Train {
        #[command(flatten)]
        seed: Seed,
        /// Comma-separated stage numbers, e.g. 3,4.
        #[arg(long)]
        stages: Option<String>,
    },
    /// Embed titles and build the ANN and text indexes.
    BuildIndex {
        #[command(flatten)]
        seed: Seed,
        #[arg(long)]
        ann_mode: Option<AnnMode>,
        #[arg(long)]
        n_clusters: Option<usize>,
        #[arg(long)]
        n_probe: Option<usize>,
    },
    /// Quantize title embeddings into the embedding store.
    Quantize,
    /// Run the full retrieval workflow for one query.
    Retrieve {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        k_sem: Option<usize>,
        #[arg(long)]
        k_text: Option<usize>,
    },
    /// Offline metrics and simulated online comparisons.
    Eval(Seed),
    /// Answer line-delimited JSON requests on stdin, or on a TCP address.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Compare stage subsets (and optionally layered model features).
    Ablate {
        #[command(flatten)]
        seed: Seed,
        /// Stage subset to compare with the full schedule; repeatable.
        #[arg(long)]
        stages: Vec<String>,
        /// Also run the feature-layering series.
        #[arg(long)]
        features: bool,
    },
}

fn base_config(common: &Common, seed: &Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = &common.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(s) = seed {
        cfg.seed = *s;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenData(seed) => {
            let cfg = base_config(common, &seed.seed)?.resolve()?;
            let corpus = pipeline::gen_data(&cfg)?;
            print_json(&serde_json::json!({
                "docs": corpus.docs.len(),
                "queries": corpus.queries.len(),
                "click_records": corpus.click_log.len(),
                "labels": corpus.labels.len(),
                "dir": cfg.data_dir(),
            }))
        }
        Command::Train { seed, stages } => {
            let mut cfg = base_config(common, &seed.seed)?;
            if let Some(s) = stages {
                cfg.select_stages(&parse_stage_list(&s)?)?;
            }
            let out = pipeline::train(&cfg.resolve()?)?;
            print_json(&out)
        }
        Command::BuildIndex {
            seed,
            ann_mode,
            n_clusters,
            n_probe,
        } => {
            let mut cfg = base_config(common, &seed.seed)?;
            if let Some(m) = ann_mode {
                cfg.index.mode = m;
            }
            if let Some(n) = n_clusters {
                cfg.index.n_clusters = n;
            }
            if let Some(n) = n_probe {
                cfg.index.n_probe = n;
            }
            print_json(&pipeline::build_index(&cfg.resolve()?)?)
        }
        Command::Quantize => print_json(&pipeline::quantize(&base_config(common, &None)?.resolve()?)?),
        Command::Retrieve { query, k, k_sem, k_text } => {
            let mut cfg = base_config(common, &None)?;
            if let Some(k) = k_sem {
                cfg.retrieval.k_sem = k;
            }
            if let Some(k) = k_text {
                cfg.retrieval.k_text = k;
            }
            let cfg = cfg.resolve()?;
            let engine = pipeline::load_engine(&cfg)?;
            let resp = engine.search(&SearchRequest { query, k })?;
            let mut out = BufWriter::new(io::stdout().lock());
            for r in &resp.results {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
            out.flush()?;
            Ok(())
        }
        Command::Eval(seed) => print_json(&evaluate::eval(&base_config(common, &seed.seed)?.resolve()?)?),
        Command::Serve { listen } => {
            let cfg = base_config(common, &None)?.resolve()?;
            let engine = pipeline::load_engine(&cfg)?;
            match listen {
                Some(addr) => serve::serve_tcp(engine, &addr),
                None => serve::serve_lines(&engine, io::stdin().lock(), io::stdout().lock()),
            }
        }
        Command::Ablate { seed, stages, features } => {
            let cfg = base_config(common, &seed.seed)?.resolve()?;
            let sets = stages.iter().map(|s| parse_stage_list(s)).collect::<Result<Vec<_>>>()?;
            if sets.iter().any(|s| s.is_empty()) {
                bail!("empty --stages list");
            }
            let report = evaluate::ablate(&cfg, &sets, features)?;
            print!("{}", evaluate::format_table(&report.stages));
            if !report.features.is_empty() {
                println!();
                print!("{}", evaluate::format_table(&report.features));
            }
            Ok(())
        }
    }
}

/// Machine-readable failure: `{"error": {"kind": ..., "message": ...}}` on stderr.
fn report_error(kind: &str, message: String) -> ExitCode {
    let err = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{}", err);
    ExitCode::from(2)
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<polyret::Error>() {
            return match p {
                polyret::Error::Shape(_) => "shape",
                polyret::Error::Numeric(_) => "numeric",
                polyret::Error::Contract(_) => "contract",
                polyret::Error::Input(_) => "input",
                polyret::Error::NotFound(_) => "not_found",
                polyret::Error::Format(_) => "format",
                polyret::Error::Io(_) => "io",
                polyret::Error::Json(_) => "json",
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error("usage", e.to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(error_kind(&e), format!("{:#}", e)),
    }
}
