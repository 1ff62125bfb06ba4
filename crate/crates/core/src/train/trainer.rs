use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{batches, Augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{SsflNet, HEAD_M, HEAD_M1, HEAD_SD};
use crate::nn::{sgd_step_with_lr, Mode, SgdConfig, Velocity};
use crate::scalar::Scalar;
use crate::tensor::Tape;

use super::infer::{infer_ag_heads, infer_sd, infer_si, predict_rows, Combine};
use super::loss::{joint_loss, sd_loss, LossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    /// Joint heads on masked features (optionally with self-distillation).
    #[default]
    Ours,
    /// Plain backbone with one `N`-way classifier.
    Baseline,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ours" => Ok(Method::Ours),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::config("method", format!("expected ours|baseline, got `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub method: Method,
    pub beta: f64,
    pub sd: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub augment: Augment,
    pub combine: Combine,
    /// Evaluate the test split every `eval_every` epochs and after the last.
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            method: Method::Ours,
            beta: 1.0,
            sd: false,
            epochs: 300,
            batch_size: 128,
            sgd: SgdConfig::default(),
            seed: 0,
            augment: Augment::None,
            combine: Combine::ProbMean,
            eval_every: 1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.sd && self.method == Method::Baseline {
            return Err(Error::config("sd", "self-distillation requires method = ours"));
        }
        self.sgd.validate()
    }

    /// Aggregation skips the penultimate head when it receives no training
    /// signal.
    fn ag_uses_penultimate(&self) -> bool {
        self.beta > 0.0
    }
}

/// Optimizer state carried across epochs and checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState<T> {
    /// Completed epochs; the next epoch runs at `lr_at_epoch(epoch)`.
    pub epoch: usize,
    pub velocity: Velocity<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new() -> Self {
        TrainState {
            epoch: 0,
            velocity: Velocity::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One metrics line. Baseline runs report their single classifier as `acc_si`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBreakdown,
    pub acc_si: Option<f64>,
    pub acc_ag: Option<f64>,
    pub acc_sd: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

/// Shuffle/augmentation seed of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Freezes heads that the configured objective does not train.
fn configure_heads<T: Scalar>(net: &mut SsflNet<T>, opts: &TrainOptions) {
    let params = net.params_mut();
    let (joint, sd) = match opts.method {
        Method::Ours => (true, opts.sd),
        Method::Baseline => (false, true),
    };
    for head in [HEAD_M, HEAD_M1] {
        params.set_trainable(&format!("{head}."), joint);
    }
    params.set_trainable(&format!("{HEAD_SD}."), sd);
}

#[derive(Default)]
struct Accum {
    n: usize,
    total: f64,
    m: f64,
    m1: f64,
    sd_ce: f64,
    sd_kl: f64,
    hits_si: usize,
    hits_ag: usize,
    hits_sd: usize,
}

impl Accum {
    fn add(&mut self, b: usize, l: &LossBreakdown) {
        let w = b as f64;
        self.n += b;
        self.total += w * l.total;
        self.m += w * l.m;
        self.m1 += w * l.m1;
        self.sd_ce += w * l.sd_ce.unwrap_or(0.0);
        self.sd_kl += w * l.sd_kl.unwrap_or(0.0);
    }

    fn row(&self, epoch: usize, split: Split, opts: &TrainOptions, lr: f64, seconds: f64) -> MetricsRow {
        let n = self.n.max(1) as f64;
        let ours = opts.method == Method::Ours;
        MetricsRow {
            epoch,
            split,
            loss: LossBreakdown {
                total: self.total / n,
                m: self.m / n,
                m1: self.m1 / n,
                sd_ce: opts.sd.then_some(self.sd_ce / n),
                sd_kl: opts.sd.then_some(self.sd_kl / n),
            },
            acc_si: Some(self.hits_si as f64 / n),
            acc_ag: ours.then_some(self.hits_ag as f64 / n),
            acc_sd: opts.sd.then_some(self.hits_sd as f64 / n),
            lr,
            seconds,
        }
    }
}

fn hits(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, y)| p == y).count()
}

/// Forward pass and loss for one batch, adding accuracy counts to `acc`.
fn batch_step<T: Scalar>(
    net: &mut SsflNet<T>,
    tape: &mut Tape<T>,
    x: crate::tensor::Var,
    y: &[usize],
    opts: &TrainOptions,
    mode: Mode,
    acc: &mut Accum,
) -> Result<(crate::tensor::Var, LossBreakdown)> {
    match opts.method {
        Method::Baseline => {
            let logits = net.forward_baseline(tape, x, mode)?;
            let l = tape.cross_entropy(logits, y)?;
            acc.hits_si += hits(&predict_rows(&tape.tensor(logits)), y);
            let v = tape.scalar_value(l).to_f64_lossy();
            let breakdown = LossBreakdown {
                total: v,
                m: v,
                ..Default::default()
            };
            Ok((l, breakdown))
        }
        Method::Ours => {
            let out = net.forward_framework(tape, x, mode)?;
            let joint = out.logits(tape);
            let ag = infer_ag_heads(&joint, opts.combine, opts.ag_uses_penultimate())?;
            acc.hits_si += hits(&infer_si(&joint)?.predicted, y);
            acc.hits_ag += hits(&ag.predicted, y);
            if opts.sd {
                acc.hits_sd += hits(&infer_sd(&joint)?.predicted, y);
                sd_loss(tape, &out, y, opts.beta, &ag.probs)
            } else {
                joint_loss(tape, &out, y, opts.beta)
            }
        }
    }
}

/// Runs epoch `state.epoch` over `ds` and advances the state.
pub fn train_epoch<T: Scalar>(
    net: &mut SsflNet<T>,
    ds: &Dataset,
    opts: &TrainOptions,
    state: &mut TrainState<T>,
) -> Result<MetricsRow> {
    opts.validate()?;
    configure_heads(net, opts);
    let start = Instant::now();
    let epoch = state.epoch;
    let lr = opts.sgd.lr_at_epoch(epoch);
    let mut acc = Accum::default();
    let stream = batches(ds, opts.batch_size, epoch_seed(opts.seed, epoch), true, opts.augment)?;
    for (bi, batch) in stream.enumerate() {
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_tensor());
        let (loss, breakdown) = batch_step(net, &mut tape, x, &batch.labels, opts, Mode::Train, &mut acc)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: bi });
        }
        tape.backward(loss)?;
        net.params_mut().zero_grad();
        net.collect_grads(&tape)?;
        sgd_step_with_lr(net.params_mut(), &opts.sgd, lr, &mut state.velocity)?;
        acc.add(batch.len(), &breakdown);
    }
    net.params_mut().zero_grad();
    state.epoch += 1;
    Ok(acc.row(epoch, Split::Train, opts, lr, start.elapsed().as_secs_f64()))
}

/// Loss and accuracies over `ds` in eval mode; running statistics are left
/// untouched.
pub fn evaluate<T: Scalar>(
    net: &mut SsflNet<T>,
    ds: &Dataset,
    opts: &TrainOptions,
    epoch: usize,
    lr: f64,
) -> Result<MetricsRow> {
    let start = Instant::now();
    let mut acc = Accum::default();
    for batch in batches(ds, opts.batch_size, 0, false, Augment::None)? {
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_tensor());
        let (_, breakdown) = batch_step(net, &mut tape, x, &batch.labels, opts, Mode::Eval, &mut acc)?;
        acc.add(batch.len(), &breakdown);
    }
    Ok(acc.row(epoch, Split::Test, opts, lr, start.elapsed().as_secs_f64()))
}

/// Trains from `state.epoch` up to `opts.epochs`, handing every train and
/// test row to `on_row` as soon as it is available.
pub fn train_loop<T: Scalar>(
    net: &mut SsflNet<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &TrainOptions,
    state: &mut TrainState<T>,
    mut on_row: impl FnMut(&MetricsRow, &SsflNet<T>, &TrainState<T>) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    opts.validate()?;
    let c = net.config();
    if train.num_classes != c.num_classes || train.channels != c.in_channels || train.height != c.in_size {
        return Err(Error::InvalidArgument(format!(
            "dataset `{}` ({} classes, {}x{}x{}) does not fit the model",
            train.name, train.num_classes, train.channels, train.height, train.width
        )));
    }
    let mut rows = Vec::new();
    while state.epoch < opts.epochs {
        let row = train_epoch(net, train, opts, state)?;
        on_row(&row, net, state)?;
        let (epoch, lr) = (row.epoch, row.lr);
        rows.push(row);
        if let Some(test) = test {
            if state.epoch % opts.eval_every == 0 || state.epoch == opts.epochs {
                let row = evaluate(net, test, opts, epoch, lr)?;
                on_row(&row, net, state)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
