//! Shape-only cost model of one forward pass.

use super::SsflNetConfig;

/// Where the feature transformation happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMode {
    /// No transformation, single `N`-way head.
    Baseline,
    /// Transform after stage `k` (1-based) and propagate the stacked batch.
    After(usize),
    /// Transform the last two stage outputs, classify without further convs.
    Framework,
}

impl BenchMode {
    pub fn name(&self) -> String {
        match self {
            BenchMode::Baseline => "baseline".into(),
            BenchMode::After(k) => format!("after{k}"),
            BenchMode::Framework => "framework".into(),
        }
    }

    pub fn parse(s: &str) -> Option<BenchMode> {
        match s.trim() {
            "baseline" => Some(BenchMode::Baseline),
            "framework" => Some(BenchMode::Framework),
            other => other
                .strip_prefix("after")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(BenchMode::After),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub conv_flops: u64,
    pub head_flops: u64,
    /// Trainable scalars touched by the mode.
    pub params: u64,
}

impl CostBreakdown {
    pub fn total_flops(&self) -> u64 {
        self.conv_flops + self.head_flops
    }
}

fn conv_flops(batch: usize, out_ch: usize, out_size: usize, in_ch: usize, k: usize) -> u64 {
    2 * (batch * out_ch * out_size * out_size * in_ch * k * k) as u64
}

/// Forward FLOPs (two per multiply-accumulate) of convolutions and head
/// matrix products for a batch of `batch` inputs. Returns `None` for an
/// `After(k)` outside the stage range.
pub fn analytic_cost(config: &SsflNetConfig, mode: BenchMode, batch: usize) -> Option<CostBreakdown> {
    let m = config.stage_count();
    if let BenchMode::After(k) = mode {
        if k == 0 || k > m {
            return None;
        }
    }
    let versions = config.t + 1;
    let n = config.num_classes;
    let joint = config.joint_classes();
    let widths = config.widths();
    let sizes = config.stage_sizes();

    let mut cost = CostBreakdown::default();
    let w0 = widths[0];
    cost.conv_flops += conv_flops(batch, w0, config.stem_size(), config.in_channels, 3);
    let mut backbone_params = (w0 * config.in_channels * 9 + 2 * w0) as u64;

    let mut in_ch = w0;
    for (si, stage) in config.stages.iter().enumerate() {
        let rows = match mode {
            BenchMode::After(k) if si >= k => batch * versions,
            _ => batch,
        };
        for bi in 0..stage.blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let out = stage.width;
            let size = sizes[si];
            cost.conv_flops += conv_flops(rows, out, size, in_ch, 3);
            cost.conv_flops += conv_flops(rows, out, size, out, 3);
            backbone_params += (out * in_ch * 9 + out * out * 9 + 4 * out) as u64;
            if stride != 1 || in_ch != out {
                cost.conv_flops += conv_flops(rows, out, size, in_ch, 1);
                backbone_params += (out * in_ch + 2 * out) as u64;
            }
            in_ch = out;
        }
    }

    let head = |rows: usize, dim: usize, classes: usize| 2 * (rows * dim * classes) as u64;
    let head_params = |dim: usize, classes: usize| (dim * classes + classes) as u64;
    let (w_m, w_m1) = (widths[m - 1], widths[m - 2]);
    cost.params = backbone_params;
    match mode {
        BenchMode::Baseline => {
            cost.head_flops = head(batch, w_m, n);
            cost.params += head_params(w_m, n);
        }
        BenchMode::After(_) => {
            cost.head_flops = head(batch * versions, w_m, joint);
            cost.params += head_params(w_m, joint);
        }
        BenchMode::Framework => {
            cost.head_flops = head(batch * versions, w_m, joint)
                + head(batch * versions, w_m1, joint)
                + head(batch, w_m, n);
            cost.params += head_params(w_m, joint) + head_params(w_m1, joint) + head_params(w_m, n);
        }
    }
    Some(cost)
}
