//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the rule needed
//! to push gradients back to its inputs. Nodes are only ever appended, so the
//! tape is always in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Work recorded while building the tape, computed from operand shapes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpStats {
    pub conv_flops: u64,
    pub matmul_flops: u64,
    pub conv_calls: u64,
    pub matmul_calls: u64,
    /// Elements produced by non-leaf nodes.
    pub activation_elems: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        over_batch: bool,
    },
    Scale {
        a: Var,
        k: T,
    },
    Relu {
        a: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    AvgPool {
        input: Var,
        plane: usize,
    },
    Reshape {
        input: Var,
    },
    Matmul {
        a: Var,
        w: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    ConcatBatch {
        parts: Vec<Var>,
        row: usize,
    },
    StridedSelect {
        input: Var,
        start: usize,
        step: usize,
        axis: Axis,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        plane: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlToLogits {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize by the statistics of the current batch.
    Batch,
    /// Normalize by supplied running `(mean, var)`.
    Running(&'a [T], &'a [T]),
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    stats: OpStats,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            stats: OpStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> OpStats {
        self.stats
    }

    /// Records a tensor as a leaf; it participates in differentiation when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a constant (never differentiated) leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.stats.activation_elems += value.len() as u64;
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape matches value")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every gradient held on the tape, including leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, a: Var, b: Option<Var>, kind: ElementwiseKind) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Add, Some(b)) => self.binary(Binary::Add, a, b),
            (ElementwiseKind::Sub, Some(b)) => self.binary(Binary::Sub, a, b),
            (ElementwiseKind::Mul, Some(b)) => self.binary(Binary::Mul, a, b),
            (ElementwiseKind::Scale(k), None) => Ok(self.scale(a, T::of(k))),
            (ElementwiseKind::Relu, None) => Ok(self.relu(a)),
            (kind, b) => Err(Error::InvalidArgument(format!(
                "{kind:?} takes {} operand(s), got {}",
                if matches!(kind, ElementwiseKind::Scale(_) | ElementwiseKind::Relu) {
                    1
                } else {
                    2
                },
                1 + b.is_some() as usize
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let over_batch = if sa == sb {
            false
        } else if !sa.is_empty() && sb == &sa[1..] {
            true
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(name, sa, sb));
        };
        let shape = sa.to_vec();
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value: Vec<T> = if over_batch {
            let w = vb.len();
            va.iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % w.max(1)]))
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.push(
            shape,
            value,
            Op::Binary {
                kind,
                a,
                b,
                over_batch,
            },
            &[a, b],
        ))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale { a, k }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Relu { a }, &[a])
    }

    // ----------------------------------------------------------------- structure

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", si, sw));
        }
        let (batch, in_ch, height, width) = (si[0], si[1], si[2], si[3]);
        let (out_ch, w_ch, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if w_ch != in_ch || kh != kw {
            return Err(Error::shape("conv2d", si, sw));
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::conv_output_extent(height, kh, stride, pad),
            kernels::conv_output_extent(width, kw, stride, pad),
        ) else {
            return Err(Error::invalid_shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} with stride {stride} does not fit input {height}x{width} padded by {pad}"
                ),
            ));
        };
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h,
            out_w,
        };
        let value = kernels::conv2d_forward(&geom, self.value(input), self.value(weight));
        self.stats.conv_flops += 2 * geom.macs();
        self.stats.conv_calls += 1;
        Ok(self.push(
            vec![batch, out_ch, out_h, out_w],
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            &[input, weight],
        ))
    }

    /// Mean over each spatial plane: `B x C x H x W -> B x C x 1 x 1`.
    pub fn adaptive_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::invalid_shape(
                "adaptive_avg_pool",
                format!("expected non-empty B x C x H x W, got {s:?}"),
            ));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(plane as f64);
        let value = self
            .value(input)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(vec![b, c, 1, 1], value, Op::AvgPool { input, plane }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(input);
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", from, shape));
        }
        let value = self.value(input).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { input }, &[input]))
    }

    /// Collapses every axis after the first: `B x ... -> B x D`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let b = s.first().copied().unwrap_or(1);
        let d = s.iter().skip(1).product();
        self.reshape(input, &[b, d])
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sa.len() != 2 || sw.len() != 2 || sa[1] != sw[0] {
            return Err(Error::shape("matmul", sa, sw));
        }
        let (m, k, n) = (sa[0], sa[1], sw[1]);
        let mut value = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k, 1),
            self.value(w),
            (n, 1),
            T::zero(),
            &mut value,
            (n, 1),
        );
        self.stats.matmul_flops += 2 * (m * k * n) as u64;
        self.stats.matmul_calls += 1;
        Ok(self.push(vec![m, n], value, Op::Matmul { a, w, m, k, n }, &[a, w]))
    }

    /// Stacks `parts` grouped per sample: output row `b * parts.len() + j` is
    /// row `b` of part `j`.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_batch of zero parts".into()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.is_empty() {
            return Err(Error::invalid_shape("concat_batch", "parts must have a batch axis"));
        }
        for &p in &parts[1..] {
            if self.shape(p) != s0.as_slice() {
                return Err(Error::shape("concat_batch", &s0, self.shape(p)));
            }
        }
        let batch = s0[0];
        let row: usize = s0[1..].iter().product();
        let mut value = Vec::with_capacity(batch * row * parts.len());
        for b in 0..batch {
            for &p in parts {
                value.extend_from_slice(&self.value(p)[b * row..(b + 1) * row]);
            }
        }
        let mut shape = s0;
        shape[0] = batch * parts.len();
        Ok(self.push(
            shape,
            value,
            Op::ConcatBatch {
                parts: parts.to_vec(),
                row,
            },
            parts,
        ))
    }

    /// Selects indices `start, start + step, ...` along rows (axis 0) or
    /// columns (axis 1 of a matrix).
    pub fn strided_select(&mut self, input: Var, start: usize, step: usize, axis: Axis) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if step == 0 || start >= step {
            return Err(Error::InvalidArgument(format!(
                "strided_select needs 0 <= start < step, got start {start}, step {step}"
            )));
        }
        let (extent, ok) = match axis {
            Axis::Rows => (s.first().copied().unwrap_or(0), !s.is_empty()),
            Axis::Cols => (s.get(1).copied().unwrap_or(0), s.len() == 2),
        };
        if !ok {
            return Err(Error::invalid_shape(
                "strided_select",
                format!("{axis:?} selection on shape {s:?}"),
            ));
        }
        if start >= extent {
            return Err(Error::invalid_shape(
                "strided_select",
                format!("start {start} selects nothing from extent {extent}"),
            ));
        }
        let count = (extent - start).div_ceil(step);
        let src = self.value(input);
        let (shape, value) = match axis {
            Axis::Rows => {
                let row: usize = s[1..].iter().product();
                let mut v = Vec::with_capacity(count * row);
                for i in 0..count {
                    let r = start + i * step;
                    v.extend_from_slice(&src[r * row..(r + 1) * row]);
                }
                let mut shape = s.clone();
                shape[0] = count;
                (shape, v)
            }
            Axis::Cols => {
                let (rows, cols) = (s[0], s[1]);
                let mut v = Vec::with_capacity(rows * count);
                for r in 0..rows {
                    for i in 0..count {
                        v.push(src[r * cols + start + i * step]);
                    }
                }
                (vec![rows, count], v)
            }
        };
        Ok(self.push(
            shape,
            value,
            Op::StridedSelect {
                input,
                start,
                step,
                axis,
            },
            &[input],
        ))
    }

    /// Per-channel normalization followed by a learnable affine map.
    ///
    /// Returns the output and, for batch statistics, the `(mean, biased var)`
    /// used so the caller can update running estimates.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 && s.len() != 2 {
            return Err(Error::invalid_shape("batch_norm", format!("got {s:?}")));
        }
        let (batch, channels) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        if batch == 0 {
            return Err(Error::invalid_shape("batch_norm", "zero batch"));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::shape("batch_norm", &s, self.shape(gamma)));
        }
        let x = self.value(input);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let (m, v) = kernels::channel_stats(x, batch, channels, plane);
                (m.clone(), v.clone(), Some((m, v)))
            }
            NormStats::Running(m, v) => {
                if m.len() != channels || v.len() != channels {
                    return Err(Error::shape("batch_norm", &[channels], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut value = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    let h = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    value[i] = g[c] * h + bt[c];
                }
            }
        }
        let out = self.push(
            s,
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                batch,
                channels,
                plane,
                xhat,
                inv_std,
                train: batch_stats.is_some(),
            },
            &[input, gamma, beta],
        );
        Ok((out, batch_stats))
    }

    // ----------------------------------------------------------------- reductions and losses

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().copied().sum();
        self.push(vec![], vec![v], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let v = vals.iter().copied().sum::<T>() / T::of(vals.len().max(1) as f64);
        self.push(vec![], vec![v], Op::Mean { a }, &[a])
    }

    /// Mean cross-entropy of row-wise softmax against integer targets,
    /// stabilized by subtracting each row's maximum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::invalid_shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let (rows, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = self.value(logits);
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            total += lse - row[targets[r]];
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::of(rows as f64);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `KL(target || softmax(logits))`. The target
    /// distribution is a constant: no gradient flows into whatever produced it.
    pub fn kl_to_logits(&mut self, target: &Tensor<T>, logits: Var, eps: T) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || target.shape() != s || s[0] == 0 {
            return Err(Error::shape("kl_to_logits", target.shape(), s));
        }
        let (rows, k) = (s[0], s[1]);
        let z = self.value(logits);
        let p = target.data();
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            for i in 0..k {
                let log_q = row[i] - lse;
                probs[r * k + i] = log_q.exp();
                let pi = p[r * k + i];
                if pi > T::zero() {
                    total += pi * (pi.max(eps).ln() - log_q);
                }
            }
        }
        let loss = total / T::of(rows as f64);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::KlToLogits {
                logits,
                target: p.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`]; intermediate gradients are rebuilt
    /// on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.value.len(), g.len());
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                over_batch,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let w = vb.len().max(1);
                let bidx = |j: usize| if *over_batch { j % w } else { j };
                if self.wants(*a) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(j, &x)| x * vb[bidx(j)]).collect(),
                    };
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for (j, &x) in g.iter().enumerate() {
                        db[bidx(j)] += match kind {
                            Binary::Add => x,
                            Binary::Sub => -x,
                            Binary::Mul => x * va[j],
                        };
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale { a, k } => {
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|&x| x * *k).collect()));
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    let y = &node.value;
                    let da = g
                        .iter()
                        .zip(y)
                        .map(|(&x, &o)| if o > T::zero() { x } else { T::zero() })
                        .collect();
                    out.push((*a, da));
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (di, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(di) = di {
                    out.push((*input, di));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
            }
            Op::AvgPool { input, plane } => {
                if self.wants(*input) {
                    let inv = T::one() / T::of(*plane as f64);
                    let mut di = Vec::with_capacity(g.len() * plane);
                    for &x in g {
                        di.extend(std::iter::repeat_n(x * inv, *plane));
                    }
                    out.push((*input, di));
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    out.push((*input, g.to_vec()));
                }
            }
            Op::Matmul { a, w, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // dA = G (m x n) * W^T (n x k)
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n, 1),
                        self.value(*w),
                        (1, n),
                        T::zero(),
                        &mut da,
                        (k, 1),
                    );
                    out.push((*a, da));
                }
                if self.wants(*w) {
                    // dW = A^T (k x m) * G (m x n)
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a),
                        (1, k),
                        g,
                        (n, 1),
                        T::zero(),
                        &mut dw,
                        (n, 1),
                    );
                    out.push((*w, dw));
                }
            }
            Op::ConcatBatch { parts, row } => {
                let p = parts.len();
                let batch = node.shape[0] / p;
                for (j, &part) in parts.iter().enumerate() {
                    if !self.wants(part) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(batch * row);
                    for b in 0..batch {
                        let r = b * p + j;
                        d.extend_from_slice(&g[r * row..(r + 1) * row]);
                    }
                    out.push((part, d));
                }
            }
            Op::StridedSelect {
                input,
                start,
                step,
                axis,
            } => {
                if self.wants(*input) {
                    let s = self.shape(*input);
                    let mut d = vec![T::zero(); self.value(*input).len()];
                    match axis {
                        Axis::Rows => {
                            let row: usize = s[1..].iter().product();
                            for (i, chunk) in g.chunks(row.max(1)).enumerate() {
                                let r = start + i * step;
                                d[r * row..(r + 1) * row].copy_from_slice(chunk);
                            }
                        }
                        Axis::Cols => {
                            let (rows, cols) = (s[0], s[1]);
                            let count = node.shape[1];
                            for r in 0..rows {
                                for i in 0..count {
                                    d[r * cols + start + i * step] = g[r * count + i];
                                }
                            }
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                batch,
                channels,
                plane,
                xhat,
                inv_std,
                train,
            } => {
                let (batch, channels, plane) = (*batch, *channels, *plane);
                let gm = self.value(*gamma);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        for j in off..off + plane {
                            dgamma[c] += g[j] * xhat[j];
                            dbeta[c] += g[j];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    let count = T::of((batch * plane) as f64);
                    for c in 0..channels {
                        let scale = gm[c] * inv_std[c];
                        // For batch statistics the mean and variance depend on x too.
                        let (mean_dy, mean_dy_xhat) = if *train {
                            (dbeta[c] / count, dgamma[c] / count)
                        } else {
                            (T::zero(), T::zero())
                        };
                        for b in 0..batch {
                            let off = (b * channels + c) * plane;
                            for j in off..off + plane {
                                dx[j] = scale * (g[j] - mean_dy - xhat[j] * mean_dy_xhat);
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).len()]));
                }
            }
            Op::Mean { a } => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    out.push((*a, vec![g[0] / T::of(n.max(1) as f64); n]));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let rows = targets.len();
                    let k = probs.len() / rows;
                    let scale = g[0] / T::of(rows as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * k + t] -= scale;
                    }
                    out.push((*logits, d));
                }
            }
            Op::KlToLogits {
                logits,
                target,
                probs,
            } => {
                if self.wants(*logits) {
                    let s = self.shape(*logits);
                    let (rows, k) = (s[0], s[1]);
                    let scale = g[0] / T::of(rows as f64);
                    let mut d = vec![T::zero(); rows * k];
                    for r in 0..rows {
                        let mass: T = target[r * k..(r + 1) * k].iter().copied().sum();
                        for i in 0..k {
                            let j = r * k + i;
                            d[j] = (probs[j] * mass - target[j]) * scale;
                        }
                    }
                    out.push((*logits, d));
                }
            }
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
