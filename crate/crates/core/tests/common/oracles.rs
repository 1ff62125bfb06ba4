//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Each check returns a short summary on success and
//! a diagnostic on failure.

use rand::Rng;

use ssfl::mask::{transform_block, MaskSet};
use ssfl::model::{SsflNet, SsflNetConfig, StageConfig, HEAD_M, HEAD_M1, HEAD_SD};
use ssfl::nn::Mode;
use ssfl::train::{
    expand_labels, infer_ag, infer_ag_heads, infer_sd, infer_si, joint_loss, kl_divergence, Combine, JointLabel,
    KL_EPS,
};
use ssfl::{model::JointLogits, Tape, Tensor};

use super::{random, rng};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `-ln softmax(row)[target]` by direct summation.
pub fn ce_row(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + z.ln() - row[target]
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

pub fn mask_tiling(max_size: usize, max_channels: usize) -> Check {
    let mut r = rng(5);
    for c in 1..=max_channels {
        for s in 1..=max_size {
            let ms = MaskSet::<f64>::new(c, s, 4).map_err(|e| e.to_string())?;
            ensure(ms.mask(0).data().iter().all(|v| *v == 1.0), || format!("M_0 not all ones at C={c} S={s}"))?;
            let mut cover = vec![0.0; c * s * s];
            for j in 1..=4 {
                for (acc, m) in cover.iter_mut().zip(ms.mask(j).data()) {
                    ensure(*m == 0.0 || *m == 1.0, || format!("M_{j} not binary at C={c} S={s}"))?;
                    *acc += 1.0 - m;
                }
            }
            ensure(cover.iter().all(|v| *v == 1.0), || format!("drop regions do not tile at C={c} S={s}"))?;

            let f = random(&mut r, &[2, c, s, s], 0.0);
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let ov = transform_block(&mut tape, fv, &ms).map_err(|e| e.to_string())?;
            let out = tape.tensor(ov);
            let n = c * s * s;
            for b in 0..2 {
                let fb = &f.data()[b * n..(b + 1) * n];
                ensure(&out.data()[b * 5 * n..(b * 5 + 1) * n] == fb, || {
                    format!("version 0 differs from input at C={c} S={s}")
                })?;
                let mut sum = vec![0.0; n];
                for j in 1..=4 {
                    let row = &out.data()[(b * 5 + j) * n..(b * 5 + j + 1) * n];
                    for ((acc, x), t) in sum.iter_mut().zip(fb).zip(row) {
                        *acc += x - t;
                    }
                }
                ensure(sum == fb, || format!("coverage identity fails at C={c} S={s}"))?;
            }
        }
    }
    Ok(format!("sizes 1..={max_size}, channels 1..={max_channels}"))
}

pub fn label_bijection(n: usize, t: usize, batches: usize) -> Check {
    let v = t + 1;
    let mut seen = vec![false; n * v];
    for y in 0..n {
        for j in 0..=t {
            let l = JointLabel::new(y, j, n, t).map_err(|e| e.to_string())?;
            let flat = l.flat(t);
            ensure(flat == y * v + j && !seen[flat], || format!("({y},{j}) -> {flat}"))?;
            seen[flat] = true;
            let back = JointLabel::from_flat(flat, t);
            ensure(back.y == y && back.j == j, || format!("{flat} -> ({},{})", back.y, back.j))?;
        }
    }
    ensure(seen.iter().all(|s| *s), || "flat labels not onto".into())?;
    ensure(JointLabel::new(n, 0, n, t).is_err(), || "out-of-range class accepted".into())?;
    let mut r = rng(7);
    for _ in 0..batches {
        let b = r.gen_range(1..40);
        let y: Vec<usize> = (0..b).map(|_| r.gen_range(0..n)).collect();
        let got = expand_labels(&y, n, t).map_err(|e| e.to_string())?;
        // stack([targets * 5 + j for j in range(5)], 1).view(-1)
        let mut stacked = vec![vec![0; v]; b];
        for j in 0..v {
            for (row, yy) in stacked.iter_mut().zip(&y) {
                row[j] = yy * v + j;
            }
        }
        let expect: Vec<usize> = stacked.into_iter().flatten().collect();
        ensure(got == expect, || format!("expand_labels differs for {y:?}"))?;
    }
    Ok(format!("N={n} T={t} exhaustive, {batches} random batches"))
}

/// Largest gap between stacked cross-entropy and the per-version average.
pub fn stacked_ce_gap(cases: u64) -> f64 {
    let mut worst = 0f64;
    for seed in 0..cases {
        let mut r = rng(100 + seed);
        let (b, n, t) = (r.gen_range(1..9), r.gen_range(2..12), 4);
        let v = t + 1;
        let logits = Tensor::from_fn(&[b * v, n * v], |_| r.gen_range(-6.0..6.0));
        let y: Vec<usize> = (0..b).map(|_| r.gen_range(0..n)).collect();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let l = tape.cross_entropy(lv, &expand_labels(&y, n, t).unwrap()).unwrap();
        let stacked = tape.scalar_value(l);
        let mut per_j = 0.0;
        for j in 0..v {
            let mut term = 0.0;
            for (s, &ys) in y.iter().enumerate() {
                term += ce_row(logits.row(s * v + j), ys * v + j);
            }
            per_j += term / b as f64;
        }
        worst = worst.max((stacked - per_j / v as f64).abs());
    }
    worst
}

pub fn random_joint(r: &mut impl Rng, b: usize, n: usize, t: usize, scale: f64) -> JointLogits<f64> {
    let v = t + 1;
    let mut make = |rows, cols| Tensor::from_fn(&[rows, cols], |_| r.gen_range(-scale..scale));
    JointLogits {
        logits_m: make(b * v, n * v),
        logits_m1: make(b * v, n * v),
        logits_sd: make(b, n),
        num_classes: n,
        t,
    }
}

fn prob_mean_brute(l: &JointLogits<f64>) -> Vec<Vec<f64>> {
    let (n, v) = (l.num_classes, l.t + 1);
    let mut out = Vec::new();
    for s in 0..l.batch() {
        let mut p = vec![0.0; n];
        for head in [&l.logits_m, &l.logits_m1] {
            let mut scores = vec![0.0; n];
            for (y, sc) in scores.iter_mut().enumerate() {
                for j in 0..v {
                    *sc += head.get(&[s * v + j, y * v + j]);
                }
                *sc /= v as f64;
            }
            for (a, q) in p.iter_mut().zip(softmax(&scores)) {
                *a += 0.5 * q;
            }
        }
        out.push(p);
    }
    out
}

/// `sum_j (outputs3[j::5, j::5] + outputs2[j::5, j::5]) / 10`, argmax per row.
fn segment_argmax(l: &JointLogits<f64>) -> Vec<usize> {
    let (n, v) = (l.num_classes, l.t + 1);
    let slice = |m: &Tensor<f64>, j: usize| -> Vec<f64> {
        let cols = m.shape()[1];
        let rows: Vec<usize> = (j..m.shape()[0]).step_by(v).collect();
        let cs: Vec<usize> = (j..cols).step_by(v).collect();
        rows.iter().flat_map(|&r| cs.iter().map(move |&c| m.get(&[r, c]))).collect()
    };
    let mut agg = vec![0.0; l.batch() * n];
    for j in 0..v {
        for ((a, x3), x2) in agg.iter_mut().zip(slice(&l.logits_m, j)).zip(slice(&l.logits_m1, j)) {
            *a += (x3 + x2) / (2 * v) as f64;
        }
    }
    agg.chunks(n).map(argmax).collect()
}

pub fn inference_validity(cases: u64) -> Check {
    let mut worst_sum = 0f64;
    let mut worst_brute = 0f64;
    for seed in 0..cases {
        let mut r = rng(300 + seed);
        let (b, n) = (r.gen_range(1..7), r.gen_range(2..11));
        let l = random_joint(&mut r, b, n, 4, 8.0);
        let si = infer_si(&l).map_err(|e| e.to_string())?;
        let ag = infer_ag(&l, Combine::ProbMean).map_err(|e| e.to_string())?;
        let lm = infer_ag(&l, Combine::LogitMean).map_err(|e| e.to_string())?;
        let sd = infer_sd(&l).map_err(|e| e.to_string())?;
        for res in [&si, &ag, &lm, &sd] {
            for row in res.probs.data().chunks(n) {
                ensure(row.iter().all(|p| *p >= 0.0), || format!("negative probability in {:?}", res.mode))?;
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for (got, want) in ag.probs.data().chunks(n).zip(prob_mean_brute(&l)) {
            for (g, w) in got.iter().zip(want) {
                worst_brute = worst_brute.max((g - w).abs());
            }
        }
        let expect = segment_argmax(&l);
        ensure(lm.predicted == expect, || {
            format!("case {seed}: logit_mean argmax {:?} vs transcription {expect:?}", lm.predicted)
        })?;
    }
    ensure(worst_sum <= 1e-9, || format!("row sum off by {worst_sum:e}"))?;
    ensure(worst_brute <= 1e-12, || format!("prob_mean off brute force by {worst_brute:e}"))?;
    Ok(format!(
        "{cases} cases: max |row sum - 1| {worst_sum:.1e}, prob_mean gap {worst_brute:.1e}, logit_mean argmax agrees"
    ))
}

pub fn tiny_net_config(t: usize) -> SsflNetConfig {
    SsflNetConfig {
        in_channels: 2,
        in_size: 8,
        num_classes: 3,
        stem_stride: 1,
        stages: vec![StageConfig { blocks: 1, width: 4 }, StageConfig { blocks: 1, width: 6 }, StageConfig {
            blocks: 1,
            width: 8,
        }],
        t,
    }
}

/// With `T = 0` and `beta = 0` the joint objective is the plain classifier
/// loss and aggregation collapses to single inference.
pub fn degeneration(seeds: u64) -> Check {
    let mut worst_loss = 0f64;
    let mut worst_prob = 0f64;
    for seed in 0..seeds {
        let mut net = SsflNet::<f64>::new(tiny_net_config(0), seed).map_err(|e| e.to_string())?;
        for suffix in ["weight", "bias"] {
            let w = net.params().get(&format!("{HEAD_M}.{suffix}")).unwrap().clone();
            net.params_mut().get_mut(&format!("{HEAD_SD}.{suffix}")).unwrap().data_mut().copy_from_slice(w.data());
        }
        let mut r = rng(seed);
        let x = random(&mut r, &[5, 2, 8, 8], 0.0);
        let y: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = net.forward_framework(&mut tape, xv, Mode::Eval).map_err(|e| e.to_string())?;
        let (jl, _) = joint_loss(&mut tape, &out, &y, 0.0).map_err(|e| e.to_string())?;
        let joint = tape.scalar_value(jl);
        let logits = out.logits(&tape);

        let mut base = Tape::new();
        let xb = base.constant(x);
        let bl = net.forward_baseline(&mut base, xb, Mode::Eval).map_err(|e| e.to_string())?;
        let bt = base.tensor(bl);
        let plain = y.iter().enumerate().map(|(s, &ys)| ce_row(bt.row(s), ys)).sum::<f64>() / y.len() as f64;
        worst_loss = worst_loss.max((joint - plain).abs());

        let si = infer_si(&logits).map_err(|e| e.to_string())?;
        for combine in [Combine::ProbMean, Combine::LogitMean] {
            let ag = infer_ag_heads(&logits, combine, false).map_err(|e| e.to_string())?;
            for (a, s) in ag.probs.data().iter().zip(si.probs.data()) {
                worst_prob = worst_prob.max((a - s).abs());
            }
        }
    }
    ensure(worst_loss <= 1e-12, || format!("joint vs plain CE gap {worst_loss:e}"))?;
    ensure(worst_prob == 0.0, || format!("AG differs from SI by {worst_prob:e}"))?;
    Ok(format!("{seeds} nets: loss gap {worst_loss:.1e}, AG == SI elementwise"))
}

fn random_dist(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.15) { 0.0 } else { r.gen_range(0.0..1.0) }).collect();
    let z: f64 = raw.iter().sum();
    if z == 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return v;
    }
    raw.into_iter().map(|x| x / z).collect()
}

/// KL identities, non-negativity and detachment of the distillation teacher.
pub fn self_distillation(pairs: u64) -> Check {
    let mut r = rng(77);
    let mut min_kl = f64::INFINITY;
    for _ in 0..pairs {
        let (b, n) = (r.gen_range(1..5), r.gen_range(2..10));
        let p: Vec<f64> = (0..b).flat_map(|_| random_dist(&mut r, n)).collect();
        let q: Vec<f64> = (0..b).flat_map(|_| random_dist(&mut r, n)).collect();
        let (p, q) = (Tensor::new(&[b, n], p).unwrap(), Tensor::new(&[b, n], q).unwrap());
        let self_kl = kl_divergence(&p, &p).map_err(|e| e.to_string())?;
        ensure(self_kl == 0.0, || format!("KL(p, p) = {self_kl:e}"))?;
        let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        min_kl = min_kl.min(kl);
        ensure(kl >= 0.0, || format!("negative KL {kl:e}"))?;
    }
    let probe = teacher_probe()?;
    ensure(probe < 1e-10, || format!("teacher path gradient {probe:e}"))?;
    Ok(format!("{pairs} pairs: min KL {min_kl:.3e}; teacher-path probe {probe:.1e}"))
}

fn kl_term(net: &mut SsflNet<f64>, x: &Tensor<f64>, teacher: Option<&Tensor<f64>>) -> (Tape<f64>, ssfl::Var, Tensor<f64>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = net.forward_framework(&mut tape, xv, Mode::Train).unwrap();
    let p_ag = infer_ag(&out.logits(&tape), Combine::ProbMean).unwrap().probs;
    let target = teacher.cloned().unwrap_or(p_ag);
    let kl = tape.kl_to_logits(&target, out.logits_sd, KL_EPS).unwrap();
    (tape, kl, target)
}

/// Largest gradient of the distillation term reaching a joint-head
/// parameter: reverse-mode values and central differences with the teacher
/// held at its detached value.
pub fn teacher_probe() -> Result<f64, String> {
    let mut net = SsflNet::<f64>::new(tiny_net_config(4), 9).map_err(|e| e.to_string())?;
    let x = random(&mut rng(21), &[3, 2, 8, 8], 0.0);
    let (mut tape, kl, teacher) = kl_term(&mut net, &x, None);
    tape.backward(kl).map_err(|e| e.to_string())?;
    net.collect_grads(&tape).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    let mut student_grad = 0f64;
    for (name, t) in net.params().iter() {
        let g = t.grad().map_or(0.0, |g| g.iter().fold(0f64, |a, v| a.max(v.abs())));
        if name.starts_with(HEAD_M) {
            worst = worst.max(g);
        } else if name.starts_with(HEAD_SD) {
            student_grad = student_grad.max(g);
        }
    }
    ensure(student_grad > 1e-6, || "distillation term does not reach the student".into())?;
    let h = 1e-5;
    for head in [HEAD_M, HEAD_M1] {
        let name = format!("{head}.weight");
        let len = net.params().get(&name).unwrap().numel();
        for k in (0..len).step_by(7) {
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params_mut().get_mut(&name).unwrap().data_mut()[k] += delta;
                let (tape, kl, _) = kl_term(&mut n, &x, Some(&teacher));
                tape.scalar_value(kl)
            };
            worst = worst.max(((eval(h) - eval(-h)) / (2.0 * h)).abs());
        }
    }
    Ok(worst)
}
