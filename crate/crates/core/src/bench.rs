//! Cost comparison of where the feature transformation is applied: analytic
//! FLOPs and parameter counts, recorded activation sizes, and measured
//! training-step time.

use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{analytic_cost, BenchMode, SsflNet};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::train::{expand_labels, joint_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub mode: BenchMode,
    pub conv_flops: u64,
    pub head_flops: u64,
    pub params: u64,
    /// Elements produced by graph nodes during one training step's forward
    /// pass.
    pub activation_elems: u64,
    /// Mean wall time of one forward+backward step.
    pub seconds_per_iter: f64,
}

impl CostRow {
    pub fn total_flops(&self) -> u64 {
        self.conv_flops + self.head_flops
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub batch: usize,
    pub iterations: usize,
    /// Always starts with the baseline row.
    pub rows: Vec<CostRow>,
}

fn pct(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (x - base) / base
    }
}

impl CostReport {
    pub fn baseline(&self) -> &CostRow {
        &self.rows[0]
    }

    pub fn row(&self, mode: BenchMode) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// FLOPs overhead of `row` relative to the baseline, in percent.
    pub fn flops_overhead(&self, row: &CostRow) -> f64 {
        pct(row.total_flops() as f64, self.baseline().total_flops() as f64)
    }

    /// Time overhead of `row` relative to the baseline, in percent.
    pub fn time_overhead(&self, row: &CostRow) -> f64 {
        pct(row.seconds_per_iter, self.baseline().seconds_per_iter)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,conv_flops,head_flops,total_flops,flops_overhead_pct,params,activation_elems,seconds_per_iter,time_overhead_pct\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3},{},{},{:.6},{:.3}",
                r.mode.name(),
                r.conv_flops,
                r.head_flops,
                r.total_flops(),
                self.flops_overhead(r),
                r.params,
                r.activation_elems,
                r.seconds_per_iter,
                self.time_overhead(r)
            );
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>22} {:>10} {:>14} {:>22}",
            "mode", "MFLOPs/batch", "params", "activations", "s/iter"
        )?;
        for r in &self.rows {
            let flops = format!(
                "{:.2} ({:+.1}%)",
                r.total_flops() as f64 / 1e6,
                self.flops_overhead(r)
            );
            let time = format!("{:.4} ({:+.1}%)", r.seconds_per_iter, self.time_overhead(r));
            writeln!(
                f,
                "{:<10} {:>22} {:>10} {:>14} {:>22}",
                r.mode.name(),
                flops,
                r.params,
                r.activation_elems,
                time
            )?;
        }
        write!(f, "batch {}, mean of {} iterations", self.batch, self.iterations)
    }
}

/// One forward+backward step of `mode`; returns the recorded activation
/// element count.
fn step<T: Scalar>(net: &mut SsflNet<T>, x: &Tensor<T>, y: &[usize], mode: BenchMode) -> Result<u64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let loss = match mode {
        BenchMode::Baseline => {
            let logits = net.forward_baseline(&mut tape, xv, Mode::Train)?;
            tape.cross_entropy(logits, y)?
        }
        BenchMode::After(k) => {
            let logits = net.forward_bench(&mut tape, xv, k, Mode::Train)?;
            let c = net.config();
            tape.cross_entropy(logits, &expand_labels(y, c.num_classes, c.t)?)?
        }
        BenchMode::Framework => {
            let out = net.forward_framework(&mut tape, xv, Mode::Train)?;
            joint_loss(&mut tape, &out, y, 1.0)?.0
        }
    };
    let activations = tape.stats().activation_elems;
    tape.backward(loss)?;
    Ok(activations)
}

/// Measures every mode (plus the baseline) on one random batch. Modes are
/// timed round-robin so that drift affects all of them alike.
pub fn bench_timing<T: Scalar>(
    net: &mut SsflNet<T>,
    modes: &[BenchMode],
    batch: usize,
    warmup: usize,
    iterations: usize,
    seed: u64,
) -> Result<CostReport> {
    if batch == 0 || iterations == 0 {
        return Err(Error::InvalidArgument("batch and iterations must be positive".into()));
    }
    let cfg = net.config().clone();
    if cfg.t == 0 {
        return Err(Error::InvalidArgument("timing comparison needs t = 4".into()));
    }
    let mut all = vec![BenchMode::Baseline];
    all.extend(modes.iter().copied().filter(|m| *m != BenchMode::Baseline));
    for m in &all {
        if let BenchMode::After(k) = m {
            if *k > cfg.stage_count() {
                return Err(Error::InvalidArgument(format!(
                    "mode {} unavailable: the model has {} stages",
                    m.name(),
                    cfg.stage_count()
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[batch, cfg.in_channels, cfg.in_size, cfg.in_size], |_| {
        T::of(StandardNormal.sample(&mut rng))
    });
    let y: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();

    // Running statistics drift during timing; restore them afterwards.
    let saved = net.params().clone();
    let mut activations = vec![0u64; all.len()];
    let mut seconds = vec![0f64; all.len()];
    for round in 0..warmup + iterations {
        for (i, &m) in all.iter().enumerate() {
            let start = Instant::now();
            activations[i] = step(net, &x, &y, m)?;
            if round >= warmup {
                seconds[i] += start.elapsed().as_secs_f64();
            }
        }
    }
    net.load_params(&saved)?;

    let rows = all
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let c = analytic_cost(&cfg, m, batch).expect("mode validated above");
            CostRow {
                mode: m,
                conv_flops: c.conv_flops,
                head_flops: c.head_flops,
                params: c.params,
                activation_elems: activations[i],
                seconds_per_iter: seconds[i] / iterations as f64,
            }
        })
        .collect();
    Ok(CostReport {
        batch,
        iterations,
        rows,
    })
}
