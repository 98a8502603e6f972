use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use icafusion::complexity::audit;
use icafusion::dmff::{dmff_fuse, DmffConfig, DmffWeights, FusionMode};
use icafusion::gradcheck::{grad_check, GradCheckOptions};
use icafusion::io::{read_rawtensor, read_weight_file, save_weights, write_rawtensor};
use icafusion::synth::{gen_synthetic_pair, SyntheticPairSpec};
use icafusion::train::{train_toy, write_trace_csv, TrainConfig};
use icafusion::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "icafusion", version, about = "RGB-thermal cross-attention feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse an RGB and a thermal feature map with stored weights.
    Fuse {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Fusion mode; defaults to the mode stored with the weights.
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Pipeline config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Train on the synthetic reconstruction task.
    TrainToy {
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print multiply counts for both attention variants.
    Audit {
        #[arg(long)]
        t: u64,
        #[arg(long)]
        c: u64,
        #[arg(long)]
        h: u64,
        /// Emit CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Write a synthetic pair as `<prefix>rgb.raw`, `<prefix>thermal.raw`
    /// and `<prefix>target.raw`.
    Gen {
        /// Generator spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Write freshly initialized weights for a pipeline config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_map(path: &Path) -> Result<Tensor<f32>> {
    read_rawtensor(path).with_context(|| format!("reading tensor {}", path.display()))
}

/// Runs a command; `Ok(false)` means a check ran and failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fuse {
            rgb,
            thermal,
            weights,
            mode,
            out,
        } => {
            let file = read_weight_file::<f32>(&weights)
                .with_context(|| format!("reading weights {}", weights.display()))?;
            let mut cfg = file.config.clone();
            let wts = match mode {
                Some(m) if m != cfg.mode => {
                    cfg.mode = m;
                    file.weights_for(&cfg)?
                }
                _ => file.weights()?,
            };
            let (f_r, f_t) = (read_map(&rgb)?, read_map(&thermal)?);
            let fused = dmff_fuse(&f_r, &f_t, &cfg, &wts)?;
            write_rawtensor(&out, &fused.output)?;
            Ok(true)
        }
        Command::Gradcheck {
            config,
            eps,
            tol,
            seed,
            samples,
        } => {
            let cfg: DmffConfig = read_json(&config)?;
            let opts = GradCheckOptions {
                eps,
                tol,
                seed,
                samples,
                ..Default::default()
            };
            let report = grad_check(&cfg, &opts)?;
            print!("{}", report.to_text());
            Ok(report.passed())
        }
        Command::TrainToy {
            config,
            out_weights,
            trace,
            seed,
            steps,
        } => {
            let mut cfg: TrainConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.steps = n;
            }
            let outcome = train_toy(&cfg)?;
            write_trace_csv(&outcome.trace, &trace)?;
            save_weights(&out_weights, &cfg.dmff, &outcome.weights)?;
            let initial = outcome.trace.first().map_or(outcome.final_loss, |r| r.loss);
            println!(
                "steps {}  initial loss {initial}  final loss {}",
                cfg.steps, outcome.final_loss
            );
            Ok(true)
        }
        Command::Audit { t, c, h, csv } => {
            let report = audit(t, c, h)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_text());
            }
            if !report.counts_agree() {
                eprintln!("runtime multiply counts disagree with the symbolic costs");
            }
            Ok(report.counts_agree())
        }
        Command::Gen { spec, out_prefix } => {
            let spec: SyntheticPairSpec = read_json(&spec)?;
            let pair = gen_synthetic_pair::<f32>(&spec)?;
            for (name, map) in [("rgb", &pair.rgb), ("thermal", &pair.thermal), ("target", &pair.target)] {
                let path = PathBuf::from(format!("{out_prefix}{name}.raw"));
                write_rawtensor(&path, map).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(true)
        }
        Command::Init { config, seed, out } => {
            let cfg: DmffConfig = read_json(&config)?;
            let w = DmffWeights::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            save_weights(&out, &cfg, &w)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
