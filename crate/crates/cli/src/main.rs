use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conbimamba::cli::{self, RunConfig};
use conbimamba::Result;

/// Speaker diarization with a ConBiMamba encoder.
#[derive(Parser, Debug)]
#[command(name = "conbimamba", version)]
struct Args {
    /// JSON run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/dev/test corpora.
    Synth,
    /// Train a model; writes one checkpoint per epoch and metrics.jsonl.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Continue from these weights (second training stage).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Grid-search pipeline thresholds on a dev corpus.
    Tune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Diarize a directory of feature files into hypothesis.rttm.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// tune.json whose best settings replace the configured pipeline.
        #[arg(long)]
        tuned: Option<PathBuf>,
    },
    /// Score a hypothesis RTTM against a reference RTTM.
    Score {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        hypothesis: Option<PathBuf>,
        #[arg(long)]
        collar: Option<f64>,
    },
    /// Average the last N checkpoints (files, or epoch_*.json inside directories).
    AvgCheckpoints {
        paths: Vec<PathBuf>,
        #[arg(short, long)]
        n: Option<usize>,
    },
}

fn set(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(args: Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.as_path();
    match args.command {
        Command::Synth => {
            for s in cli::cmd_synth(&cfg, out)? {
                println!(
                    "{:<6} {:>4} recordings {:>9.1} s  overlap {:.3}",
                    s.split, s.recordings, s.seconds, s.overlap_fraction
                );
            }
        }
        Command::Train { train, dev, init } => {
            set(&mut cfg.paths.train, train);
            set(&mut cfg.paths.dev, dev);
            set(&mut cfg.paths.init_checkpoint, init);
            let o = cli::cmd_train(&cfg, out)?;
            let best = &o.metrics[o.best_epoch];
            println!(
                "{} epochs{}; best epoch {} (val loss {:.5})",
                o.metrics.len(),
                if o.stopped_early { " (early stop)" } else { "" },
                best.epoch,
                best.val_total
            );
        }
        Command::Tune { checkpoint, dev } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.dev, dev);
            let t = cli::cmd_tune(&cfg, out)?;
            println!(
                "best dev DER {:.2}%: binarize {} cluster {} min size {}",
                100.0 * t.best_der,
                t.best.binarize_threshold,
                t.best.cluster.threshold,
                t.best.cluster.min_cluster_size
            );
        }
        Command::Infer { checkpoint, input, tuned } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.test, input);
            set(&mut cfg.paths.tuned, tuned);
            let hyps = cli::cmd_infer(&cfg, out)?;
            println!("diarized {} recordings -> {}", hyps.len(), out.join(cli::HYPOTHESIS_FILE).display());
        }
        Command::Score {
            reference,
            hypothesis,
            collar,
        } => {
            set(&mut cfg.paths.reference, reference);
            set(&mut cfg.paths.hypothesis, hypothesis);
            if let Some(c) = collar {
                cfg.collar = c;
            }
            cli::cmd_score(&cfg, out)?;
            print!("{}", std::fs::read_to_string(out.join(cli::DER_TABLE_FILE)).unwrap_or_default());
        }
        Command::AvgCheckpoints { paths, n } => {
            let mut files = Vec::new();
            for p in paths {
                if p.is_dir() {
                    files.extend(cli::epoch_checkpoints(&p)?);
                } else {
                    files.push(p);
                }
            }
            let target = out.join(cli::AVERAGED_FILE);
            let n = n.unwrap_or(cfg.average_last);
            cli::cmd_avg_checkpoints(&files, n, &target)?;
            println!("averaged {} checkpoints -> {}", n.min(files.len()), target.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
