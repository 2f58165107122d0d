use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuxi_mme::config::{TrainConfig, Variant};
use fuxi_mme::gradcheck;
use fuxi_mme::synth::SynthSpec;
use fuxi_mme::train::{self, TrainOptions};
use fuxi_mme::{Error, Result};
use serde_json::json;

/// Fuxi-MME sequential recommender.
#[derive(Debug, Parser)]
#[command(name = "fxmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and evaluate the best epoch on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a `last.fxmm` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not echo log lines to stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print test-split metrics of a checkpoint as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50")]
        ks: Vec<usize>,
    },
    /// Train one ablation variant and print its test metrics as JSON.
    Ablate {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        width: usize,
    },
    /// Write a synthetic interaction log as TSV.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FXMM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("FXMM_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            seed,
            deterministic,
            out,
            resume,
            quiet,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            if let Some(dir) = out {
                cfg.out = dir;
            }
            let split = train::load_split(&cfg)?;
            let opts = TrainOptions {
                out: Some(cfg.out.clone()),
                resume,
                stop_after: None,
                echo: !quiet,
            };
            let report = train::train(&cfg, &split, &opts)?;
            let summary = json!({
                "best_epoch": report.best_epoch,
                "best_val_ndcg@10": report.best_val,
                "epochs": report.epochs,
                "test": report.test.map(|t| t.to_json()),
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
        }
        Command::Evaluate { checkpoint, data, ks } => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::Config("--ks needs positive cutoffs".into()));
            }
            let report = train::evaluate_checkpoint(&checkpoint, &data, &ks)?;
            println!("{}", serde_json::to_string_pretty(&report.to_json()).expect("report serialises"));
        }
        Command::Ablate {
            variant,
            config,
            quiet,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let report = train::run_ablation(variant, &cfg, !quiet)?;
            let out = json!({ "variant": variant.tag(), "test": report.to_json() });
            println!("{}", serde_json::to_string_pretty(&out).expect("report serialises"));
        }
        Command::Gradcheck { width } => {
            let results = gradcheck::run_all(width)?;
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{}\t{:.3e}\t{}\t{verdict}", r.name, r.max_rel_err, r.coords);
                ok &= r.passed();
            }
            return Ok(ok);
        }
        Command::Synth { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let store = SynthSpec::parse(&text)?.generate()?;
            store.write_tsv(&out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error\tgradcheck\tone or more layer checks exceeded the tolerance");
            ExitCode::FAILURE
        }
        Err(e) => {
            let message = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
