use proptest::prelude::*;

use stip_core::distill::kd_losses;
use stip_core::embed::{expand_repeat, positional_encoding, RepeatMode};
use stip_core::fusion::{ExternalMemory, FusionConfig, Mdqe, Psa};
use stip_core::metrics::{Confusion, Metrics};
use stip_core::nn::{BatchNorm, Ctx, Mode};
use stip_core::{rng, ParameterStore, Tape, Tensor};

fn tensor(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
    rng::normal_tensor(shape, 0.0, std, &mut rng::seeded(seed))
}

fn assert_rows_sum_to_one(t: &Tensor<f64>, axis: usize) {
    let shape = t.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..n).map(|j| t.data()[(o * n + j) * inner + i]).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
    }
}

fn softmax_rows(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_stochastic_on_any_axis(seed in any::<u64>(), a in 1usize..4, b in 1usize..5, c in 1usize..5, axis in 0usize..3, scale in 0.1f64..30.0) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[a, b, c], seed, scale)).unwrap();
        let p = tape.softmax(x, axis).unwrap();
        assert_rows_sum_to_one(tape.value(p), axis);
    }

    #[test]
    fn mdqe_and_memory_weights_are_stochastic(seed in any::<u64>(), l in 1usize..7, heads_log in 0u32..3, slots in 1usize..9) {
        let heads = 1usize << heads_log;
        let config = FusionConfig { numhead: heads, groups: 1, memory_slots: slots, ..FusionConfig::default() };
        let mut store = ParameterStore::<f64>::new(seed);
        let mdqe = Mdqe::new(&mut store, "mdqe", 8, &config).unwrap();
        let memory = ExternalMemory::new(&mut store, "memory", 8, slots, 8).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[2, l, 8], seed ^ 1, 1.0)).unwrap();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Infer);
        let a = mdqe.forward(&mut ctx, x).unwrap();
        let m = memory.forward(&mut ctx, x).unwrap();
        prop_assert_eq!(tape.shape(a.out), &[2, l, 8]);
        prop_assert_eq!(tape.shape(m.out), &[2, l, 8]);
        assert_rows_sum_to_one(tape.value(a.weights), 2);
        assert_rows_sum_to_one(tape.value(m.weights), 2);
        if slots == 1 {
            prop_assert!(tape.value(m.weights).data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn psa_preserves_shape_and_gates_are_stochastic(seed in any::<u64>(), groups_log in 0u32..3, l in 1usize..9) {
        let groups = 1usize << groups_log;
        let mut store = ParameterStore::<f64>::new(seed);
        let psa = Psa::new(&mut store, "psa", 8, groups).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[2, l, 8], seed ^ 2, 1.0)).unwrap();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Infer);
        let out = psa.forward(&mut ctx, x).unwrap();
        prop_assert_eq!(tape.shape(out.out), &[2, l, 8]);
        assert_rows_sum_to_one(tape.value(out.weights), 1);
    }

    #[test]
    fn single_head_identity_mdqe_is_plain_attention(seed in any::<u64>(), l in 1usize..7, c in 1usize..6) {
        let config = FusionConfig { numhead: 1, groups: 1, ..FusionConfig::default() };
        let mut store = ParameterStore::<f64>::new(seed);
        let mdqe = Mdqe::new(&mut store, "m", c, &config).unwrap();
        let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        for name in ["m/wq", "m/wk", "m/wv", "m/wo"] {
            store.set(name, eye.clone()).unwrap();
        }
        let x = tensor(&[2, l, c], seed ^ 3, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Infer);
        let out = mdqe.forward(&mut ctx, xv).unwrap();
        let got = tape.value(out.out);
        for b in 0..2 {
            let row = |i: usize| &x.data()[(b * l + i) * c..(b * l + i + 1) * c];
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| row(i).iter().zip(row(j)).map(|(p, q)| p * q).sum::<f64>() / (c as f64).sqrt())
                    .collect();
                let p = softmax_rows(&scores);
                for k in 0..c {
                    let want: f64 = (0..l).map(|j| p[j] * row(j)[k]).sum();
                    prop_assert!((got.at(&[b, i, k]) - want).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn kd_endpoints_and_convexity(seed in any::<u64>(), alpha in 0.0f64..=1.0, t in 0.5f64..8.0) {
        let logits = tensor(&[3, 2], seed, 2.0);
        let mut probs = tensor(&[3, 2], seed ^ 4, 2.0);
        for row in probs.data_mut().chunks_exact_mut(2) {
            let p = softmax_rows(row);
            row.copy_from_slice(&p);
        }
        let eval = |a: f64| {
            let mut tape = Tape::new();
            let l = tape.input(logits.clone()).unwrap();
            let kd = kd_losses(&mut tape, &probs, l, t, a).unwrap();
            let v = |x| tape.value(x).data()[0];
            (v(kd.kl), v(kd.clf), v(kd.total))
        };
        let (kl, clf, total) = eval(alpha);
        prop_assert!(kl >= -1e-12);
        prop_assert!(total >= kl.min(clf) - 1e-12 && total <= kl.max(clf) + 1e-12);
        let (kl1, _, total1) = eval(1.0);
        prop_assert_eq!(total1.to_bits(), kl1.to_bits());
        let (_, clf0, total0) = eval(0.0);
        prop_assert_eq!(total0.to_bits(), clf0.to_bits());
    }

    #[test]
    fn metrics_match_formula(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + tn + fp + fn_ > 0);
        let m = Metrics::from_confusion(Confusion { tp, tn, fp, fn_ });
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        prop_assert_eq!(m.accuracy, (tp + tn) / (tp + tn + fp + fn_));
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        prop_assert_eq!(m.precision, p);
        prop_assert_eq!(m.recall, r);
        prop_assert_eq!(m.f1, if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn tile_repeat_copies_whole_blocks(seed in any::<u64>(), b in 1usize..3, n in 1usize..6, c in 1usize..4, k in 1usize..4) {
        let x = tensor(&[b, n, c], seed, 1.0);
        let y = expand_repeat(&x, k, RepeatMode::Tile).unwrap();
        prop_assert_eq!(y.shape(), &[b, n * k, c]);
        for bi in 0..b {
            for j in 0..k {
                for i in 0..n {
                    for ch in 0..c {
                        prop_assert_eq!(y.at(&[bi, i + j * n, ch]), x.at(&[bi, i, ch]));
                    }
                }
            }
        }
    }

    #[test]
    fn positional_encoding_is_bounded(n in 1usize..64, half in 1usize..16) {
        let pe = positional_encoding::<f64>(n, 2 * half).unwrap();
        prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn batchnorm_train_output_is_standardized(seed in any::<u64>(), b in 2usize..5, l in 1usize..6, shift in -5.0f64..5.0) {
        let mut store = ParameterStore::<f64>::new(seed);
        let bn = BatchNorm::new(&mut store, "bn", 3, 0.1).unwrap();
        let mut x = tensor(&[b, l, 3], seed, 2.0);
        x.data_mut().iter_mut().for_each(|v| *v += shift);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let y = bn.forward(&mut ctx, xv).unwrap();
        let x = tape.value(xv).clone();
        let y = tape.value(y);
        let n = (b * l) as f64;
        for ch in 0..3 {
            let moments = |t: &Tensor<f64>| {
                let vals: Vec<f64> = t.data().iter().skip(ch).step_by(3).cloned().collect();
                let mean = vals.iter().sum::<f64>() / n;
                (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
            };
            let (_, in_var) = moments(&x);
            let (mean, var) = moments(y);
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - in_var / (in_var + 1e-5)).abs() < 1e-9);
        }
    }
}
