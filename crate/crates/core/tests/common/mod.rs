#![allow(dead_code)]

pub mod oracles;
pub mod runs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssfl::tensor::{Axis, ElementwiseKind, NormStats};
use ssfl::model::{SsflNet, SsflNetConfig, StageConfig};
use ssfl::nn::Mode;
use ssfl::train::{joint_loss, sd_loss};
use ssfl::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Relative error is `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero.
pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() >= gap {
            break v;
        }
    })
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn projected_loss(inputs: &[Tensor<f64>], proj: &Tensor<f64>, build: &Build<'_>) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars);
    let loss = if tape.shape(out).iter().product::<usize>() == 1 && tape.shape(out).is_empty() {
        out
    } else {
        let flat = tape.reshape(out, &[proj.numel()]).expect("projection size");
        let r = tape.constant(proj.clone());
        let prod = tape.mul(flat, r).expect("same shape");
        tape.sum(prod)
    };
    (tape, vars, loss)
}

/// Largest relative error between reverse-mode gradients and central
/// differences of `sum(build(inputs) * R)` for a seeded random `R`.
pub fn max_grad_error(seed: u64, inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = build(&mut probe, &vars);
    let out_len: usize = probe.shape(out).iter().product();
    let proj = random(&mut rng(seed ^ 0xABCD), &[out_len], 0.1);

    let (mut tape, vars, loss) = projected_loss(inputs, &proj, build);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor<f64>]| {
        let (tape, _, loss) = projected_loss(xs, &proj, build);
        tape.scalar_value(loss)
    };
    let mut worst = 0f64;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[i][k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build<'static>>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation, each on small random operands.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("add_broadcast", &[&[4, 3], &[3]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[&[2, 2, 2], &[2, 2, 2]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("mul_broadcast", &[&[2, 2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", &[&[5]], |t, v| t.elementwise(v[0], None, ElementwiseKind::Scale(-1.7)).unwrap()),
        case("relu", &[&[3, 4]], |t, v| t.relu(v[0])),
        case("conv2d_s1_p1", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap()),
        case("conv2d_s2_p1", &[&[1, 2, 6, 6], &[2, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap()),
        case("conv2d_1x1_s2", &[&[2, 3, 4, 4], &[2, 3, 1, 1]], |t, v| t.conv2d(v[0], v[1], 2, 0).unwrap()),
        case("adaptive_avg_pool", &[&[2, 3, 3, 3]], |t, v| t.adaptive_avg_pool(v[0]).unwrap()),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        case("flatten", &[&[2, 2, 1, 3]], |t, v| t.flatten(v[0]).unwrap()),
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("concat_batch", &[&[2, 3], &[2, 3], &[2, 3]], |t, v| t.concat_batch(v).unwrap()),
        case("strided_select_rows", &[&[10, 3]], |t, v| t.strided_select(v[0], 2, 5, Axis::Rows).unwrap()),
        case("strided_select_cols", &[&[3, 10]], |t, v| t.strided_select(v[0], 0, 5, Axis::Cols).unwrap()),
        case("batch_norm_train", &[&[4, 2, 2, 2], &[2], &[2]], |t, v| {
            t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5).unwrap().0
        }),
        case("batch_norm_running", &[&[3, 2, 2, 2], &[2], &[2]], |t, v| {
            t.batch_norm(v[0], v[1], v[2], NormStats::Running(&[0.1, -0.2], &[0.5, 1.5]), 1e-5)
                .unwrap()
                .0
        }),
        case("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
        case("mean", &[&[2, 3]], |t, v| t.mean(v[0])),
        case("cross_entropy", &[&[4, 5]], |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()),
        case("kl_to_logits", &[&[3, 4]], |t, v| {
            let p = Tensor::new(&[3, 4], vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.5, 0.5, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap();
            t.kl_to_logits(&p, v[0], 1e-12).unwrap()
        }),
        case("linear_head", &[&[3, 4], &[4, 6], &[6]], |t, v| {
            ssfl::nn::linear_head(t, v[0], v[1], v[2]).unwrap()
        }),
    ]
}

/// Two-stage network small enough for per-parameter finite differences.
pub fn fd_net_config() -> SsflNetConfig {
    SsflNetConfig {
        in_channels: 1,
        in_size: 6,
        num_classes: 2,
        stem_stride: 1,
        stages: vec![StageConfig { blocks: 1, width: 2 }, StageConfig { blocks: 1, width: 3 }],
        t: 4,
    }
}

/// Worst relative error of every trainable parameter's gradient of the
/// joint loss (or the distillation loss with a fixed teacher).
pub fn network_grad_error(net: &SsflNet<f64>, x: &Tensor<f64>, sd: bool, teacher: &Tensor<f64>) -> f64 {
    let loss_of = |n: &mut SsflNet<f64>| -> (Tape<f64>, ssfl::Var) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = n.forward_framework(&mut tape, xv, Mode::Train).unwrap();
        let l = if sd {
            sd_loss(&mut tape, &out, &[0, 1, 1], 1.0, teacher).unwrap().0
        } else {
            joint_loss(&mut tape, &out, &[0, 1, 1], 0.5).unwrap().0
        };
        (tape, l)
    };
    let mut n = net.clone();
    let (mut tape, l) = loss_of(&mut n);
    tape.backward(l).unwrap();
    n.collect_grads(&tape).unwrap();
    let names: Vec<String> = n
        .params()
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(k, _)| k.to_string())
        .collect();
    let h = FD_STEP;
    let mut worst = 0f64;
    for name in &names {
        let p = n.params().get(name).unwrap();
        let analytic = p.grad().map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec);
        for k in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut p = net.clone();
                p.params_mut().get_mut(name).unwrap().data_mut()[k] += delta;
                let (tape, l) = loss_of(&mut p);
                tape.scalar_value(l)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[k];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(FD_FLOOR));
        }
    }
    worst
}
