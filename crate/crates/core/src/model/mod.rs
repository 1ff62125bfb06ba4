//! Staged residual backbone with joint classifiers on the last two stages and
//! a single-pass self-distillation head.

mod cost;

pub use cost::{analytic_cost, BenchMode, CostBreakdown};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{transform_block, MaskSet};
use crate::nn::{fan_in_uniform, linear_head, BatchNorm, Bound, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{conv_output_extent, Tape, Tensor, Var};

pub const HEAD_M: &str = "head_m";
pub const HEAD_M1: &str = "head_m1";
pub const HEAD_SD: &str = "head_sd";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsflNetConfig {
    pub in_channels: usize,
    /// Square input side length.
    pub in_size: usize,
    pub num_classes: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    /// Number of dropping masks; 4 for the quadrant scheme, 0 disables the
    /// transformation entirely.
    pub t: usize,
}

impl Default for SsflNetConfig {
    fn default() -> Self {
        SsflNetConfig {
            in_channels: 3,
            in_size: 32,
            num_classes: 10,
            stem_stride: 1,
            stages: [16, 32, 64]
                .iter()
                .map(|&width| StageConfig { blocks: 2, width })
                .collect(),
            t: 4,
        }
    }
}

impl SsflNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::config("stages", "at least two stages are required"));
        }
        if let Some(s) = self.stages.iter().find(|s| s.blocks == 0 || s.width == 0) {
            return Err(Error::config("stages", format!("empty stage {s:?}")));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.stem_stride == 0 {
            return Err(Error::config(
                "model",
                "in_channels, num_classes and stem_stride must be positive",
            ));
        }
        if self.t != 0 && self.t != crate::mask::QUADRANT_MASKS {
            return Err(Error::UnsupportedMaskScheme(self.t));
        }
        if conv_output_extent(self.in_size, 3, self.stem_stride, 1).is_none() {
            return Err(Error::config("in_size", format!("{} is too small", self.in_size)));
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.width).collect()
    }

    /// Output width of the joint heads, `N * (T + 1)`.
    pub fn joint_classes(&self) -> usize {
        self.num_classes * (self.t + 1)
    }

    pub fn stem_size(&self) -> usize {
        conv_output_extent(self.in_size, 3, self.stem_stride, 1).unwrap_or(0)
    }

    /// Spatial side length after each stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut size = self.stem_size();
        (0..self.stages.len())
            .map(|i| {
                if i > 0 {
                    size = conv_output_extent(size, 3, 2, 1).unwrap_or(0);
                }
                size
            })
            .collect()
    }
}

/// Graph handles produced by [`SsflNet::forward_framework`].
#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    /// `(B * (T + 1)) x N(T + 1)` logits of the last-stage joint head.
    pub logits_m: Var,
    /// `(B * (T + 1)) x N(T + 1)` logits of the penultimate-stage joint head.
    pub logits_m1: Var,
    /// `B x N` logits of the self-distillation head.
    pub logits_sd: Var,
    /// Untransformed last-stage feature map `B x C x h x w`, kept in eval mode.
    pub feature_m: Option<Tensor<T>>,
    pub batch: usize,
    pub num_classes: usize,
    pub t: usize,
}

impl<T: Scalar> ForwardOutputs<T> {
    pub fn logits(&self, tape: &Tape<T>) -> JointLogits<T> {
        JointLogits {
            logits_m: tape.tensor(self.logits_m),
            logits_m1: tape.tensor(self.logits_m1),
            logits_sd: tape.tensor(self.logits_sd),
            num_classes: self.num_classes,
            t: self.t,
        }
    }
}

/// Detached head outputs of one framework forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLogits<T> {
    pub logits_m: Tensor<T>,
    pub logits_m1: Tensor<T>,
    pub logits_sd: Tensor<T>,
    pub num_classes: usize,
    pub t: usize,
}

impl<T: Scalar> JointLogits<T> {
    pub fn batch(&self) -> usize {
        self.logits_sd.shape()[0]
    }
}

#[derive(Debug, Clone)]
struct Block {
    prefix: String,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    bn1: BatchNorm,
    bn2: BatchNorm,
    shortcut_bn: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
pub struct SsflNet<T> {
    config: SsflNetConfig,
    params: ParamStore<T>,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Block>>,
    /// Masks matching the output geometry of every stage.
    stage_masks: Vec<Option<MaskSet<T>>>,
    /// Parameter handles of the most recent forward pass.
    bound: Option<Bound>,
}

impl<T: Scalar> SsflNet<T> {
    /// Builds a network with seeded fan-in uniform weights, zero biases,
    /// unit batch-norm scales and zero shifts.
    pub fn new(config: SsflNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let relu_gain = 2f64.sqrt();

        let w0 = config.stages[0].width;
        params.insert(
            "stem.conv.weight",
            fan_in_uniform(&[w0, config.in_channels, 3, 3], config.in_channels * 9, relu_gain, &mut rng),
        )?;
        let stem_bn = BatchNorm::new("stem.bn", w0);
        stem_bn.register(&mut params)?;

        let mut stages = Vec::new();
        let mut in_ch = w0;
        for (si, stage) in config.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let prefix = format!("stage{}.block{bi}", si + 1);
                let out_ch = stage.width;
                params.insert(
                    format!("{prefix}.conv1.weight"),
                    fan_in_uniform(&[out_ch, in_ch, 3, 3], in_ch * 9, relu_gain, &mut rng),
                )?;
                let bn1 = BatchNorm::new(format!("{prefix}.bn1"), out_ch);
                bn1.register(&mut params)?;
                params.insert(
                    format!("{prefix}.conv2.weight"),
                    fan_in_uniform(&[out_ch, out_ch, 3, 3], out_ch * 9, relu_gain, &mut rng),
                )?;
                let bn2 = BatchNorm::new(format!("{prefix}.bn2"), out_ch);
                bn2.register(&mut params)?;
                let shortcut_bn = if stride != 1 || in_ch != out_ch {
                    params.insert(
                        format!("{prefix}.shortcut.weight"),
                        fan_in_uniform(&[out_ch, in_ch, 1, 1], in_ch, 1.0, &mut rng),
                    )?;
                    let bn = BatchNorm::new(format!("{prefix}.shortcut_bn"), out_ch);
                    bn.register(&mut params)?;
                    Some(bn)
                } else {
                    None
                };
                blocks.push(Block {
                    prefix,
                    in_ch,
                    out_ch,
                    stride,
                    bn1,
                    bn2,
                    shortcut_bn,
                });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }

        let widths = config.widths();
        let m = widths.len();
        let joint = config.joint_classes();
        for (name, dim, classes) in [
            (HEAD_M, widths[m - 1], joint),
            (HEAD_M1, widths[m - 2], joint),
            (HEAD_SD, widths[m - 1], config.num_classes),
        ] {
            params.insert(format!("{name}.weight"), fan_in_uniform(&[dim, classes], dim, 1.0, &mut rng))?;
            params.insert(
                format!("{name}.bias"),
                Tensor::zeros(&[classes]).with_requires_grad(true),
            )?;
        }

        let stage_masks = if config.t == 0 {
            vec![None; m]
        } else {
            config
                .stage_sizes()
                .iter()
                .zip(&widths)
                .map(|(&size, &w)| MaskSet::new(w, size, config.t).map(Some))
                .collect::<Result<_>>()?
        };

        Ok(SsflNet {
            config,
            params,
            stem_bn,
            stages,
            stage_masks,
            bound: None,
        })
    }

    pub fn config(&self) -> &SsflNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces every tensor value from `other`, which must hold the same
    /// names and shapes.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, t) in self.params.iter_mut() {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load_params", t.shape(), src.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    fn bind(&mut self, tape: &mut Tape<T>) -> Bound {
        let bound = self.params.bind(tape);
        self.bound = Some(bound.clone());
        bound
    }

    /// Adds gradients from `tape` (after `backward`) into the parameters
    /// bound by the most recent forward pass on that tape.
    pub fn collect_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        let bound = self
            .bound
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("collect_grads before any forward pass".into()))?;
        self.params.collect_grads(tape, bound)
    }

    /// Masks applied to the output of stage `stage` (1-based).
    pub fn masks(&self, stage: usize) -> Option<&MaskSet<T>> {
        self.stage_masks.get(stage.wrapping_sub(1)).and_then(Option::as_ref)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.in_size || s[3] != c.in_size || s[0] == 0 {
            return Err(Error::shape(
                "model input",
                s,
                &[c.in_channels, c.in_size, c.in_size],
            ));
        }
        Ok(())
    }

    fn stem(&mut self, tape: &mut Tape<T>, x: Var, bound: &Bound, mode: Mode) -> Result<Var> {
        let w = bound.var("stem.conv.weight")?;
        let h = tape.conv2d(x, w, self.config.stem_stride, 1)?;
        let h = self.stem_bn.forward(tape, h, bound, &mut self.params, mode)?;
        Ok(tape.relu(h))
    }

    /// Runs stage `index` (0-based).
    fn stage(&mut self, index: usize, tape: &mut Tape<T>, mut x: Var, bound: &Bound, mode: Mode) -> Result<Var> {
        for bi in 0..self.stages[index].len() {
            let blk = self.stages[index][bi].clone();
            debug_assert_eq!(tape.shape(x)[1], blk.in_ch);
            let w1 = bound.var(&format!("{}.conv1.weight", blk.prefix))?;
            let w2 = bound.var(&format!("{}.conv2.weight", blk.prefix))?;
            let h = tape.conv2d(x, w1, blk.stride, 1)?;
            let h = blk.bn1.forward(tape, h, bound, &mut self.params, mode)?;
            let h = tape.relu(h);
            let h = tape.conv2d(h, w2, 1, 1)?;
            let h = blk.bn2.forward(tape, h, bound, &mut self.params, mode)?;
            let skip = match &blk.shortcut_bn {
                Some(bn) => {
                    let ws = bound.var(&format!("{}.shortcut.weight", blk.prefix))?;
                    let s = tape.conv2d(x, ws, blk.stride, 0)?;
                    bn.forward(tape, s, bound, &mut self.params, mode)?
                }
                None => x,
            };
            debug_assert_eq!(tape.shape(h)[1], blk.out_ch);
            let sum = tape.add(h, skip)?;
            x = tape.relu(sum);
        }
        Ok(x)
    }

    fn pool_flat(tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let p = tape.adaptive_avg_pool(f)?;
        tape.flatten(p)
    }

    fn head(tape: &mut Tape<T>, bound: &Bound, name: &str, features: Var) -> Result<Var> {
        let w = bound.var(&format!("{name}.weight"))?;
        let b = bound.var(&format!("{name}.bias"))?;
        linear_head(tape, features, w, b)
    }

    fn transform(&self, tape: &mut Tape<T>, stage: usize, f: Var) -> Result<Var> {
        match self.masks(stage) {
            Some(ms) => transform_block(tape, f, ms),
            None => Ok(f),
        }
    }

    /// Stem plus stages `1..=upto` (1-based), returning the feature after each.
    fn backbone(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        bound: &Bound,
        mode: Mode,
        upto: usize,
    ) -> Result<Vec<Var>> {
        let mut h = self.stem(tape, x, bound, mode)?;
        let mut feats = Vec::with_capacity(upto);
        for i in 0..upto {
            h = self.stage(i, tape, h, bound, mode)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Joint-head forward pass. The penultimate feature is transformed and
    /// classified directly; only the untransformed feature continues through
    /// the last stage.
    pub fn forward_framework(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardOutputs<T>> {
        self.check_input(tape, x)?;
        let m = self.config.stage_count();
        let bound = self.bind(tape);
        let feats = self.backbone(tape, x, &bound, mode, m - 1)?;
        let f_m1 = feats[m - 2];

        let tf_m1 = self.transform(tape, m - 1, f_m1)?;
        let pooled_m1 = Self::pool_flat(tape, tf_m1)?;
        let logits_m1 = Self::head(tape, &bound, HEAD_M1, pooled_m1)?;

        let f_m = self.stage(m - 1, tape, f_m1, &bound, mode)?;
        let tf_m = self.transform(tape, m, f_m)?;
        let pooled_m = Self::pool_flat(tape, tf_m)?;
        let logits_m = Self::head(tape, &bound, HEAD_M, pooled_m)?;

        let pooled = Self::pool_flat(tape, f_m)?;
        let logits_sd = Self::head(tape, &bound, HEAD_SD, pooled)?;

        Ok(ForwardOutputs {
            logits_m,
            logits_m1,
            logits_sd,
            feature_m: (mode == Mode::Eval).then(|| tape.tensor(f_m)),
            batch: tape.shape(x)[0],
            num_classes: self.config.num_classes,
            t: self.config.t,
        })
    }

    /// Plain backbone and single `N`-way classifier (the self-distillation
    /// head slot), returning `B x N` logits.
    pub fn forward_baseline(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_single(tape, x, mode)?.0)
    }

    /// Baseline path that also returns the last-stage feature map.
    pub fn forward_single(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let m = self.config.stage_count();
        let bound = self.bind(tape);
        let feats = self.backbone(tape, x, &bound, mode, m)?;
        let f_m = feats[m - 1];
        let pooled = Self::pool_flat(tape, f_m)?;
        Ok((Self::head(tape, &bound, HEAD_SD, pooled)?, f_m))
    }

    /// Transforms after stage `k` (1-based) and pushes the stacked
    /// `B * (T + 1)` batch through the remaining stages into the last joint
    /// head.
    pub fn forward_bench(&mut self, tape: &mut Tape<T>, x: Var, k: usize, mode: Mode) -> Result<Var> {
        self.check_input(tape, x)?;
        let m = self.config.stage_count();
        if k == 0 || k > m {
            return Err(Error::InvalidArgument(format!(
                "transform stage {k} out of range 1..={m}"
            )));
        }
        let bound = self.bind(tape);
        let feats = self.backbone(tape, x, &bound, mode, k)?;
        let mut h = self.transform(tape, k, feats[k - 1])?;
        for i in k..m {
            h = self.stage(i, tape, h, &bound, mode)?;
        }
        let pooled = Self::pool_flat(tape, h)?;
        Self::head(tape, &bound, HEAD_M, pooled)
    }
}
