use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ssfl::config::{DataSpec, TrainConfig};
use ssfl::model::BenchMode;
use ssfl::run::{self, CamClass};
use ssfl::train::{InferMode, Split};

#[derive(Parser)]
#[command(name = "ssfl", version, about = "Train and inspect feature-mask self-supervised classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and checkpoint.ssfl
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Enable the self-distillation head
        #[arg(long)]
        sd: bool,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the other flags
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Report accuracy of a checkpoint under the requested inference modes
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset spec; defaults to the checkpoint's test data
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value = "si,ag")]
        modes: String,
        /// Report aggregated inference under both combine rules
        #[arg(long)]
        both_combines: bool,
        /// Write per-sample class probabilities as CSV
        #[arg(long)]
        probs_out: Option<PathBuf>,
    },
    /// Train one run per beta value and write sweep.csv
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        /// `a..b`, `a..b:step` or a comma-separated list
        #[arg(long, default_value = "0.1..1.0")]
        betas: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare FLOPs, sizes and step time of transformation placements
    BenchTiming {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "baseline,after1,after2,after3,framework")]
        modes: String,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Also write the report as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write class activation maps as PGM heatmaps and PPM overlays
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset spec of the images
        #[arg(long)]
        images: String,
        #[arg(long)]
        out: PathBuf,
        /// `predicted`, `given` or a class index
        #[arg(long, default_value = "predicted")]
        class: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

fn parse_modes(s: &str) -> Result<Vec<InferMode>> {
    s.split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse().map_err(anyhow::Error::from))
        .collect()
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn print_row(split: Split, outcome: &run::TrainOutcome) {
    if let Some(r) = outcome.last(split) {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{split:<5} epoch {:>3}  loss {:.4}  si {}  ag {}  sd {}",
            r.epoch,
            r.loss.total,
            fmt(r.acc_si),
            fmt(r.acc_ag),
            fmt(r.acc_sd)
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            beta,
            sd,
            resume,
            out,
            overrides,
        } => {
            let mut cfg = load_config(&config, seed, out)?;
            if let Some(b) = beta {
                cfg.train.beta = b;
            }
            if sd {
                cfg.train.sd = true;
                if !cfg.modes.contains(&InferMode::Sd) {
                    cfg.modes.push(InferMode::Sd);
                }
            }
            for o in &overrides {
                let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let outcome = run::cmd_train(&cfg, resume)?;
            print_row(Split::Train, &outcome);
            print_row(Split::Test, &outcome);
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
        }
        Command::Eval {
            ckpt,
            data,
            modes,
            both_combines,
            probs_out,
        } => {
            let spec: Option<DataSpec> = data.as_deref().map(str::parse).transpose()?;
            let report = run::cmd_eval(&ckpt, spec.as_ref(), &parse_modes(&modes)?, both_combines)?;
            print!("{}", report.summary());
            if let Some(p) = probs_out {
                std::fs::write(&p, report.probs_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::SweepBeta {
            config,
            betas,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed, out)?;
            let rows = run::cmd_sweep_beta(&cfg, &run::parse_betas(&betas)?)?;
            println!("{:>6} {:>8} {:>8}", "beta", "si", "ag");
            for r in &rows {
                println!("{:>6} {:>8.4} {:>8.4}", r.beta, r.acc_si, r.acc_ag);
            }
            println!("wrote {}", cfg.out_dir.join(run::SWEEP_FILE).display());
        }
        Command::BenchTiming {
            config,
            modes,
            batch,
            warmup,
            iters,
            csv,
        } => {
            let cfg = TrainConfig::from_file(&config)?;
            let modes = modes
                .split(',')
                .map(|m| BenchMode::parse(m).with_context(|| format!("unknown bench mode `{m}`")))
                .collect::<Result<Vec<_>>>()?;
            let report = run::cmd_bench_timing(&cfg, &modes, batch, warmup, iters)?;
            println!("{report}");
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Cam {
            ckpt,
            images,
            out,
            class,
            count,
        } => {
            let class = match class.as_str() {
                "predicted" => CamClass::Predicted,
                "given" => CamClass::Given,
                n => match n.parse() {
                    Ok(c) => CamClass::Fixed(c),
                    Err(_) => bail!("--class must be predicted, given or an index, got `{n}`"),
                },
            };
            let outputs = run::cmd_cam(&ckpt, &images.parse()?, &out, class, count)?;
            for o in &outputs {
                println!("{} class {} (predicted {})", o.heatmap.display(), o.class, o.predicted);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
