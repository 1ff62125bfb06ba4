mod common;

use approx::assert_relative_eq;
use common::oracles::{degeneration, inference_validity, random_joint, tiny_net_config};
use common::{random, rng};
use ssfl::model::{analytic_cost, BenchMode, JointLogits, SsflNet, HEAD_M, HEAD_SD};
use ssfl::nn::Mode;
use ssfl::train::{infer_ag, infer_sd, infer_si, Combine};
use ssfl::{Tape, Tensor};

#[test]
fn inference_rows_are_distributions_and_match_oracles() {
    inference_validity(100).unwrap();
}

#[test]
fn transformation_off_and_zero_beta_degenerate() {
    degeneration(5).unwrap();
}

#[test]
fn single_inference_two_classes() {
    let mut l = random_joint(&mut rng(0), 1, 2, 4, 1.0);
    l.logits_m.set(&[0, 0], 2.0);
    l.logits_m.set(&[0, 5], 1.0);
    let si = infer_si(&l).unwrap();
    let e = (2f64.exp(), 1f64.exp());
    assert_relative_eq!(si.probs.data()[0], e.0 / (e.0 + e.1), epsilon = 1e-15);
    assert_relative_eq!(si.probs.data()[0], 0.7311, epsilon = 1e-4);
    assert_eq!(si.predicted, vec![0]);
}

#[test]
fn uniform_logits_give_uniform_probs() {
    let l = JointLogits {
        logits_m: Tensor::full(&[10, 15], 0.3),
        logits_m1: Tensor::full(&[10, 15], -1.0),
        logits_sd: Tensor::zeros(&[2, 3]),
        num_classes: 3,
        t: 4,
    };
    let results = [
        infer_si(&l).unwrap(),
        infer_ag(&l, Combine::ProbMean).unwrap(),
        infer_ag(&l, Combine::LogitMean).unwrap(),
        infer_sd(&l).unwrap(),
    ];
    for r in results {
        assert!(r.probs.data().iter().all(|p: &f64| (p - 1.0 / 3.0).abs() < 1e-15));
    }
    let bad = JointLogits { logits_m: Tensor::zeros(&[9, 15]), ..l };
    assert!(infer_si(&bad).is_err());
}

#[test]
fn single_inference_is_the_zero_version_head_slice() {
    let mut net = SsflNet::<f64>::new(tiny_net_config(4), 6).unwrap();
    let x = random(&mut rng(6), &[4, 2, 8, 8], 0.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = net.forward_framework(&mut tape, xv, Mode::Eval).unwrap();
    let si = infer_si(&out.logits(&tape)).unwrap();

    let w = net.params().get(&format!("{HEAD_M}.weight")).unwrap().clone();
    let b = net.params().get(&format!("{HEAD_M}.bias")).unwrap().clone();
    let d = w.shape()[0];
    let sliced_w = Tensor::from_fn(&[d, 3], |i| w.get(&[i / 3, (i % 3) * 5]));
    let sliced_b = Tensor::from_fn(&[3], |i| b.data()[i * 5]);
    net.params_mut().get_mut(&format!("{HEAD_SD}.weight")).unwrap().data_mut().copy_from_slice(sliced_w.data());
    net.params_mut().get_mut(&format!("{HEAD_SD}.bias")).unwrap().data_mut().copy_from_slice(sliced_b.data());
    let mut base = Tape::new();
    let xb = base.constant(x);
    let logits = net.forward_baseline(&mut base, xb, Mode::Eval).unwrap();
    let probs = ssfl::train::softmax_rows(&base.tensor(logits));
    assert!(probs.max_abs_diff(&si.probs) < 1e-13);
}

#[test]
fn distillation_inference_is_one_head() {
    let cfg = tiny_net_config(4);
    let single = analytic_cost(&cfg, BenchMode::Baseline, 4).unwrap();
    let framework = analytic_cost(&cfg, BenchMode::Framework, 4).unwrap();
    assert_eq!(single.conv_flops, framework.conv_flops);
    assert_eq!(single.head_flops, 2 * 4 * 8 * 3);
    assert!(framework.head_flops > single.head_flops);
    let l = random_joint(&mut rng(8), 3, 4, 4, 3.0);
    let sd = infer_sd(&l).unwrap();
    assert_eq!(sd.probs, ssfl::train::softmax_rows(&l.logits_sd));
}
