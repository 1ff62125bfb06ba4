//! Command implementations behind the `ssfl` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::{bench_timing, CostReport};
use crate::cam::{compute_cams, overlay, write_pgm, write_ppm};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{DataSpec, TrainConfig};
use crate::data::{batches, Augment, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;
use crate::model::{BenchMode, SsflNet};
use crate::nn::Mode;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Tape, Tensor};
use crate::train::{
    infer_ag_heads, infer_sd, infer_si, softmax_rows, train_loop, Combine, InferMode, Method, MetricsRow, Split,
    TrainState,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ssfl";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainOutcome {
    pub fn last(&self, split: Split) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating output directory {}", dir.display()), e))
}

/// Builds a network for `cfg` and trains it without touching the filesystem.
pub fn train_in_memory<T: Scalar>(
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<(SsflNet<T>, Vec<MetricsRow>)> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let mut net = SsflNet::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut state = TrainState::new();
    let rows = train_loop(&mut net, &train, test.as_ref(), &cfg.train, &mut state, |row, _, _| {
        on_row(row);
        Ok(())
    })?;
    Ok((net, rows))
}

/// Trains per `cfg`, writing `metrics.csv` and `checkpoint.ssfl` (after every
/// epoch) into `cfg.out_dir`. With `resume`, continues from the checkpoint
/// there and appends to the existing metrics file.
pub fn cmd_train(cfg: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    match cfg.dtype {
        DType::F32 => train_files::<f32>(cfg, resume),
        DType::F64 => train_files::<f64>(cfg, resume),
    }
}

fn train_files<T: Scalar>(cfg: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let checkpoint_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let (train, test) = cfg.load_data()?;
    let mut net = SsflNet::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut state = TrainState::new();
    let mut writer = if resume {
        let ck = Checkpoint::<T>::load(&checkpoint_path)?;
        let saved = TrainConfig::parse(&ck.config)?;
        if saved.model != cfg.model {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model configuration",
                checkpoint_path.display()
            )));
        }
        net.load_params(&ck.params)?;
        state.epoch = ck.epoch;
        state.velocity = ck.velocity;
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path, &format!("ssfl metrics\n{}", cfg.to_text()))?
    };
    let config_text = cfg.to_text();
    let rows = train_loop(&mut net, &train, test.as_ref(), &cfg.train, &mut state, |row, net, state| {
        writer.write(row)?;
        if row.split == Split::Train {
            Checkpoint {
                config: config_text.clone(),
                epoch: state.epoch,
                params: net.params().clone(),
                velocity: state.velocity.clone(),
            }
            .save(&checkpoint_path)?;
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        rows,
        metrics_path,
        checkpoint_path,
    })
}

/// Accuracy and class distributions of one inference rule.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    /// `si`, `ag`, `ag_logit_mean` or `sd`.
    pub name: String,
    pub accuracy: f64,
    /// Row-major `count x N` probabilities.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn entry(&self, name: &str) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("dataset {} ({} samples)\n", self.dataset, self.labels.len());
        for e in &self.entries {
            let _ = writeln!(s, "{:<14} {:.4}", e.name, e.accuracy);
        }
        s
    }

    /// `index,label,mode,p0,...` rows of every entry.
    pub fn probs_csv(&self) -> String {
        let mut s = String::from("index,label,mode");
        for c in 0..self.num_classes {
            let _ = write!(s, ",p{c}");
        }
        s.push('\n');
        for e in &self.entries {
            for (i, row) in e.probs.chunks(self.num_classes).enumerate() {
                let _ = write!(s, "{i},{},{}", self.labels[i], e.name);
                for p in row {
                    let _ = write!(s, ",{p}");
                }
                s.push('\n');
            }
        }
        s
    }
}

fn argmax_f64(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

/// Restores the network and run configuration stored in a checkpoint.
pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<(SsflNet<T>, TrainConfig)> {
    let ck = Checkpoint::<T>::load(path)?;
    let cfg = TrainConfig::parse(&ck.config)?;
    let mut net = SsflNet::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    net.load_params(&ck.params)?;
    Ok((net, cfg))
}

/// Evaluates a network on `ds` under every requested mode. With
/// `both_combines`, aggregated inference is reported under both rules.
pub fn evaluate_modes<T: Scalar>(
    net: &mut SsflNet<T>,
    cfg: &TrainConfig,
    ds: &Dataset,
    modes: &[InferMode],
    both_combines: bool,
) -> Result<EvalReport> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no inference modes requested".into()));
    }
    let baseline = cfg.train.method == Method::Baseline;
    if modes.contains(&InferMode::Sd) && !cfg.train.sd {
        return Err(Error::InvalidArgument(
            "mode sd requested but the model was trained without the self-distillation head (sd = false)".into(),
        ));
    }
    if baseline && modes.iter().any(|m| *m != InferMode::Si) {
        return Err(Error::InvalidArgument("a baseline model supports mode si only".into()));
    }
    let mut names: Vec<String> = Vec::new();
    for m in modes {
        names.push(m.to_string());
        if *m == InferMode::Ag && both_combines {
            let other = match cfg.train.combine {
                Combine::ProbMean => Combine::LogitMean,
                Combine::LogitMean => Combine::ProbMean,
            };
            names.push(format!("ag_{other}"));
        }
    }
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let n = cfg.model.num_classes;
    let uses_m1 = cfg.train.beta > 0.0;
    for batch in batches(ds, cfg.train.batch_size, 0, false, Augment::None)? {
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_tensor::<T>());
        let mut per_mode: Vec<Tensor<T>> = Vec::new();
        if baseline {
            let logits = net.forward_baseline(&mut tape, x, Mode::Eval)?;
            per_mode.push(softmax_rows(&tape.tensor(logits)));
        } else {
            let out = net.forward_framework(&mut tape, x, Mode::Eval)?;
            let l = out.logits(&tape);
            for m in modes {
                match m {
                    InferMode::Si => per_mode.push(infer_si(&l)?.probs),
                    InferMode::Sd => per_mode.push(infer_sd(&l)?.probs),
                    InferMode::Ag => {
                        per_mode.push(infer_ag_heads(&l, cfg.train.combine, uses_m1)?.probs);
                        if both_combines {
                            let other = match cfg.train.combine {
                                Combine::ProbMean => Combine::LogitMean,
                                Combine::LogitMean => Combine::ProbMean,
                            };
                            per_mode.push(infer_ag_heads(&l, other, uses_m1)?.probs);
                        }
                    }
                }
            }
        }
        for (acc, p) in probs.iter_mut().zip(per_mode) {
            acc.extend(p.data().iter().map(|v| v.to_f64_lossy()));
        }
    }
    let labels = ds.labels().to_vec();
    let entries = names
        .into_iter()
        .zip(probs)
        .map(|(name, probs)| {
            let hits = probs
                .chunks(n)
                .zip(&labels)
                .filter(|(row, y)| argmax_f64(row) == **y)
                .count();
            EvalEntry {
                name,
                accuracy: hits as f64 / labels.len().max(1) as f64,
                probs,
            }
        })
        .collect();
    Ok(EvalReport {
        dataset: ds.name.clone(),
        num_classes: n,
        labels,
        entries,
    })
}

/// Evaluates a checkpoint on `data` (or its configured test set).
pub fn cmd_eval(
    ckpt: impl AsRef<Path>,
    data: Option<&DataSpec>,
    modes: &[InferMode],
    both_combines: bool,
) -> Result<EvalReport> {
    let (dtype, _) = checkpoint::peek(&ckpt)?;
    match dtype {
        DType::F32 => eval_checkpoint::<f32>(ckpt.as_ref(), data, modes, both_combines),
        DType::F64 => eval_checkpoint::<f64>(ckpt.as_ref(), data, modes, both_combines),
    }
}

fn eval_checkpoint<T: Scalar>(
    ckpt: &Path,
    data: Option<&DataSpec>,
    modes: &[InferMode],
    both_combines: bool,
) -> Result<EvalReport> {
    let (mut net, cfg) = load_network::<T>(ckpt)?;
    let spec = data
        .or(cfg.test_data.as_ref())
        .ok_or_else(|| Error::InvalidArgument("no dataset given and the checkpoint has no test data".into()))?;
    let ds = spec.load(cfg.per_class, cfg.normalize)?;
    evaluate_modes(&mut net, &cfg, &ds, modes, both_combines)
}

/// Parses `a..b` (step 0.1), `a..b:step`, or a comma-separated list.
pub fn parse_betas(s: &str) -> Result<Vec<f64>> {
    let bad = |detail: String| Error::config("betas", detail);
    let s = s.trim();
    let betas: Vec<f64> = if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "0.1"));
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}")));
        let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
        if !(step > 0.0) || hi < lo {
            return Err(bad(format!("empty range {s}")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        // Rounded to 12 decimals so that 0.1..1.0 yields 0.3 rather than 0.30000000000000004.
        (0..count)
            .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}"))))
            .collect::<Result<_>>()?
    };
    if betas.is_empty() {
        return Err(bad("no values".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(bad(format!("beta must be finite and >= 0, got {b}")));
    }
    Ok(betas)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub acc_si: f64,
    pub acc_ag: f64,
    /// Weighted penultimate-head loss of the final training epoch.
    pub loss_m1: f64,
    pub run_dir: PathBuf,
}

/// Trains one run per beta, every run from the same base seed, and writes
/// `sweep.csv` into `cfg.out_dir`.
pub fn cmd_sweep_beta(cfg: &TrainConfig, betas: &[f64]) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::config("betas", "no values"));
    }
    if cfg.train.method != Method::Ours {
        return Err(Error::config("method", "the beta sweep needs method = ours"));
    }
    create_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("beta,acc_si,acc_ag,loss_m1,run_dir\n");
    for (i, &beta) in betas.iter().enumerate() {
        let mut run = cfg.clone();
        run.train.beta = beta;
        run.out_dir = cfg.out_dir.join(format!("run{i:02}_beta{beta}"));
        let outcome = cmd_train(&run, false)?;
        let eval = outcome
            .last(Split::Test)
            .or(outcome.last(Split::Train))
            .ok_or_else(|| Error::InvalidArgument("run produced no metrics".into()))?;
        let train = outcome.last(Split::Train).expect("at least one epoch");
        let row = SweepRow {
            beta,
            acc_si: eval.acc_si.unwrap_or(f64::NAN),
            acc_ag: eval.acc_ag.unwrap_or(f64::NAN),
            loss_m1: train.loss.m1,
            run_dir: run.out_dir.clone(),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.beta,
            row.acc_si,
            row.acc_ag,
            row.loss_m1,
            row.run_dir.display()
        );
        rows.push(row);
    }
    let path = cfg.out_dir.join(SWEEP_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(rows)
}

/// Cost and timing comparison on a freshly initialized network for
/// `cfg.model`.
pub fn cmd_bench_timing(
    cfg: &TrainConfig,
    modes: &[BenchMode],
    batch: usize,
    warmup: usize,
    iterations: usize,
) -> Result<CostReport> {
    cfg.model.validate()?;
    match cfg.dtype {
        DType::F32 => {
            let mut net = SsflNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            bench_timing(&mut net, modes, batch, warmup, iterations, cfg.train.seed)
        }
        DType::F64 => {
            let mut net = SsflNet::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
            bench_timing(&mut net, modes, batch, warmup, iterations, cfg.train.seed)
        }
    }
}

/// Which class a CAM explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamClass {
    Predicted,
    /// The image's dataset label.
    Given,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamOutput {
    pub index: usize,
    pub class: usize,
    pub predicted: usize,
    pub heatmap: PathBuf,
    pub overlay: Option<PathBuf>,
}

/// Writes `cam_XXXX.pgm` (and `cam_XXXX.ppm` overlays for 3-channel input)
/// for the first `count` images of `images`.
pub fn cmd_cam(
    ckpt: impl AsRef<Path>,
    images: &DataSpec,
    out_dir: impl AsRef<Path>,
    class: CamClass,
    count: usize,
) -> Result<Vec<CamOutput>> {
    let (dtype, _) = checkpoint::peek(&ckpt)?;
    match dtype {
        DType::F32 => cam_checkpoint::<f32>(ckpt.as_ref(), images, out_dir.as_ref(), class, count),
        DType::F64 => cam_checkpoint::<f64>(ckpt.as_ref(), images, out_dir.as_ref(), class, count),
    }
}

fn cam_checkpoint<T: Scalar>(
    ckpt: &Path,
    images: &DataSpec,
    out_dir: &Path,
    class: CamClass,
    count: usize,
) -> Result<Vec<CamOutput>> {
    let (mut net, cfg) = load_network::<T>(ckpt)?;
    if cfg.train.method == Method::Baseline {
        return Err(Error::InvalidArgument("CAMs use the joint head; this is a baseline model".into()));
    }
    if let CamClass::Fixed(c) = class {
        if c >= cfg.model.num_classes {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: cfg.model.num_classes,
            });
        }
    }
    let raw = images.load_raw()?;
    let take: Vec<usize> = (0..raw.len().min(count)).collect();
    let raw = raw.subset(&take);
    let mut ds = raw.clone();
    if cfg.normalize {
        ds.normalize(&images.normalization())?;
    }
    create_dir(out_dir)?;
    let mut outputs = Vec::new();
    for batch in batches(&ds, cfg.train.batch_size, 0, false, Augment::None)? {
        let choices: Vec<Option<usize>> = batch
            .labels
            .iter()
            .map(|&y| match class {
                CamClass::Predicted => None,
                CamClass::Given => Some(y),
                CamClass::Fixed(c) => Some(c),
            })
            .collect();
        let cams = compute_cams(&mut net, &batch.to_tensor::<T>(), &choices)?;
        for (cam, &i) in cams.iter().zip(&batch.indices) {
            let heatmap = out_dir.join(format!("cam_{i:04}.pgm"));
            write_pgm(&heatmap, cam.width, cam.height, &cam.heatmap)?;
            let overlay_path = if raw.channels == 3 {
                let p = out_dir.join(format!("cam_{i:04}.ppm"));
                write_ppm(&p, cam.width, cam.height, &overlay(raw.image(i), &cam.heatmap))?;
                Some(p)
            } else {
                None
            };
            outputs.push(CamOutput {
                index: i,
                class: cam.class,
                predicted: cam.predicted,
                heatmap,
                overlay: overlay_path,
            });
        }
    }
    Ok(outputs)
}
