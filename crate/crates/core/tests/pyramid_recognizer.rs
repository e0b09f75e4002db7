mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use textseg::pyramid::{
    extract_pyramid, fuse, fuse_level, Backbone, ConvLayer, FeaturePyramid, FusionWeights,
};
use textseg::recognizer::{
    self, argmax, attention_step, decode, decode_forced, encode_holistic, recognition_loss,
    AttentionTrace, BiLstmLayer, DecodeStep, LstmCell, RecognizerDims, RecognizerWeights, END,
    START,
};
use textseg::tensor::{Archive, Tensor};

fn shapes(p: &FeaturePyramid) -> Vec<Vec<usize>> {
    p.levels.iter().map(|t| t.shape().to_vec()).collect()
}

#[test]
fn pyramid_shapes_at_default_size() {
    let bb = Backbone::seeded(0, 3, 512);
    let p = extract_pyramid(&Tensor::zeros(&[3, 48, 160]), &bb).unwrap();
    assert_eq!(
        shapes(&p),
        vec![vec![512, 24, 80], vec![512, 12, 40], vec![512, 6, 40]]
    );
    let p = extract_pyramid(&Tensor::zeros(&[3, 16, 16]), &Backbone::seeded(0, 3, 8)).unwrap();
    assert_eq!(
        shapes(&p),
        vec![vec![8, 8, 8], vec![8, 4, 4], vec![8, 2, 4]]
    );
    let err = extract_pyramid(&Tensor::zeros(&[3, 12, 16]), &bb).unwrap_err();
    assert!(matches!(err, textseg::Error::Config(_)));
}

#[test]
fn zero_image_zero_bias_gives_zero_pyramid() {
    let mut bb = Backbone::seeded(1, 3, 8);
    for s in &mut bb.stages {
        s.bias = Tensor::zeros(s.bias.shape());
    }
    let p = extract_pyramid(&Tensor::zeros(&[3, 16, 16]), &bb).unwrap();
    assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
}

fn random_pyramid(seed: u64, c: usize) -> FeaturePyramid {
    let mut r = rng(seed);
    FeaturePyramid::new([
        rand_tensor(&mut r, &[c, 8, 8], -1.0, 1.0),
        rand_tensor(&mut r, &[c, 4, 4], -1.0, 1.0),
        rand_tensor(&mut r, &[c, 2, 4], -1.0, 1.0),
    ])
}

fn random_fusion(seed: u64) -> FusionWeights {
    let mut r = rng(seed);
    let mut v = || [0, 1, 2].map(|_| r.random_range(-2.0f32..2.0));
    FusionWeights {
        alpha: v(),
        beta: v(),
        gamma: v(),
    }
}

#[test]
fn fusion_selection_and_zero() {
    let p = random_pyramid(2, 3);
    let sel = FusionWeights {
        alpha: [1.0; 3],
        beta: [0.0; 3],
        gamma: [0.0; 3],
    };
    let f = fuse(&p, &sel).unwrap();
    let fused = f.fused().unwrap();
    assert_eq!(fused[0], p.levels[0]);
    assert_eq!(
        fused[1],
        textseg::tensor::resize_bilinear(&p.levels[0], 4, 4).unwrap()
    );
    let z = fuse(&p, &FusionWeights::uniform(0.0)).unwrap();
    assert!(z
        .fused()
        .unwrap()
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fusion_matches_per_pixel_formula() {
    for seed in 0..10 {
        let p = random_pyramid(seed, 2);
        let w = random_fusion(seed + 100);
        let f = fuse(&p, &w).unwrap();
        for l in 0..3 {
            let (h, wd) = p.level_size(l);
            let coeff = [w.alpha[l], w.beta[l], w.gamma[l]];
            let mut want = vec![0.0; 2 * h * wd];
            for (k, src) in p.levels.iter().enumerate() {
                let (sh, sw) = (src.shape()[1], src.shape()[2]);
                for c in 0..2 {
                    let plane = &f64s(src)[c * sh * sw..(c + 1) * sh * sw];
                    for (i, v) in bilinear(plane, sh, sw, h, wd).into_iter().enumerate() {
                        want[c * h * wd + i] += coeff[k] as f64 * v;
                    }
                }
            }
            assert!(max_abs_diff(f.fused().unwrap()[l].data(), &want) <= 1e-6);
        }
    }
}

#[test]
fn fusion_levels_are_independent_of_order() {
    let p = random_pyramid(3, 4);
    let w = random_fusion(4);
    let forward: Vec<Tensor> = (0..3).map(|l| fuse_level(&p, l, &w).unwrap()).collect();
    let backward: Vec<Tensor> = (0..3)
        .rev()
        .map(|l| fuse_level(&p, l, &w).unwrap())
        .collect();
    for l in 0..3 {
        assert_eq!(forward[l], backward[2 - l]);
    }
}

#[test]
fn fusion_archive_names() {
    let mut a = Archive::new();
    random_fusion(5).store(&mut a);
    Backbone::seeded(0, 3, 8).store(&mut a);
    for l in 1..=3 {
        for n in ["alpha", "beta", "gamma"] {
            assert!(a.contains(&format!("fusion.l{l}.{n}")));
        }
        assert!(a.contains(&format!("backbone.stage{l}.weight")));
        assert!(a.contains(&format!("backbone.stage{l}.bias")));
    }
    assert_eq!(FusionWeights::from_archive(&a).unwrap(), random_fusion(5));
}

proptest! {
    #[test]
    fn fuse_is_linear_in_weights(seed in any::<u64>()) {
        let p = random_pyramid(seed, 2);
        let (w1, w2) = (random_fusion(seed ^ 1), random_fusion(seed ^ 2));
        let sum = FusionWeights {
            alpha: [0, 1, 2].map(|i| w1.alpha[i] + w2.alpha[i]),
            beta: [0, 1, 2].map(|i| w1.beta[i] + w2.beta[i]),
            gamma: [0, 1, 2].map(|i| w1.gamma[i] + w2.gamma[i]),
        };
        let (a, b, s) = (fuse(&p, &w1).unwrap(), fuse(&p, &w2).unwrap(), fuse(&p, &sum).unwrap());
        for l in 0..3 {
            let ab = a.fused().unwrap()[l].add(&b.fused().unwrap()[l]).unwrap();
            prop_assert!(max_abs_diff(s.fused().unwrap()[l].data(), &f64s(&ab)) <= 1e-5);
        }
    }
}

fn dims(c: usize, classes: usize) -> RecognizerDims {
    RecognizerDims {
        channels: c,
        hidden: 6,
        attention: 5,
        embedding: 4,
        classes,
    }
}

#[test]
fn attention_matches_direct_oracle() {
    let mut r = rng(10);
    for seed in 0..20 {
        let w = RecognizerWeights::seeded(seed, dims(3, 7)).unwrap();
        let f = rand_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
        let h = rand_vec(&mut r, 6, -1.0, 1.0);
        let (alpha, glimpse) = attention_step(&f, &h, &w).unwrap();
        let h64: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        let (wa, wg) = attention(&f, &h64, &w.att_feat, &w.att_hidden, &w.att_score);
        assert!(max_abs_diff(alpha.data(), &wa) <= 1e-6);
        assert!(max_abs_diff(glimpse.data(), &wg) <= 1e-6);
    }
}

fn contrived_one_hot(c: usize, h: usize, w: usize, at: usize) -> (RecognizerWeights, Tensor) {
    // One feature channel is an indicator of the chosen position, and the
    // centre tap amplifies it so the score there dominates.
    let mut rw = RecognizerWeights::seeded(0, dims(c, 5)).unwrap();
    rw.att_feat = Tensor::zeros(rw.att_feat.shape());
    rw.att_hidden = Tensor::zeros(rw.att_hidden.shape());
    rw.att_score = Tensor::zeros(rw.att_score.shape());
    rw.att_feat.data_mut()[4] = 1.0; // row 0, channel 0, centre tap
    rw.att_score.data_mut()[0] = 1e4;
    let mut r = rng(11);
    let mut f = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    for p in 0..h * w {
        f.data_mut()[p] = if p == at { 1.0 } else { 0.0 };
    }
    (rw, f)
}

#[test]
fn one_hot_attention_selects_feature_column() {
    let (h, w, c) = (3, 5, 4);
    for at in [0, 7, 14] {
        let (rw, f) = contrived_one_hot(c, h, w, at);
        let (alpha, g) = attention_step(&f, &[0.0; 6], &rw).unwrap();
        assert_eq!(argmax(alpha.data()), at);
        assert_eq!(alpha.data()[at], 1.0);
        let col: Vec<f32> = (0..c).map(|ch| f.data()[ch * h * w + at]).collect();
        assert_eq!(g.data(), col.as_slice());
    }
}

#[test]
fn uniform_scores_give_mean_glimpse() {
    let mut rw = RecognizerWeights::seeded(3, dims(2, 5)).unwrap();
    rw.att_score = Tensor::zeros(rw.att_score.shape());
    let f = rand_tensor(&mut rng(12), &[2, 3, 3], -1.0, 1.0);
    let (alpha, g) = attention_step(&f, &[0.1; 6], &rw).unwrap();
    assert!(alpha.data().iter().all(|&a| (a - 1.0 / 9.0).abs() < 1e-7));
    for c in 0..2 {
        let mean = f.data()[c * 9..(c + 1) * 9]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / 9.0;
        assert!((g.data()[c] as f64 - mean).abs() < 1e-6);
    }
}

fn bilstm_final(layer: &BiLstmLayer, seq: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let run = |cell: &LstmCell, order: Vec<usize>| {
        let hid = cell.hidden();
        let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
        let mut outs = vec![Vec::new(); seq.len()];
        for t in order {
            (h, c) = lstm_step(&cell.w_ih, &cell.w_hh, &cell.bias, &seq[t], &h, &c);
            outs[t] = h.clone();
        }
        (outs, h)
    };
    let (fo, fl) = run(&layer.fwd, (0..seq.len()).collect());
    let (bo, bl) = run(&layer.bwd, (0..seq.len()).rev().collect());
    let cat = fo
        .into_iter()
        .zip(bo)
        .map(|(a, b)| [a, b].concat())
        .collect();
    (cat, fl, bl)
}

fn holistic_oracle(f: &Tensor, w: &RecognizerWeights) -> Vec<f64> {
    let [c, h, wd] = [f.shape()[0], f.shape()[1], f.shape()[2]];
    let seq: Vec<Vec<f64>> = (0..wd)
        .map(|t| {
            (0..c)
                .map(|ch| {
                    (0..h)
                        .map(|i| f.data()[(ch * h + i) * wd + t] as f64)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect();
    let (l1, _, _) = bilstm_final(&w.encoder[0], &seq);
    let (_, fl, bl) = bilstm_final(&w.encoder[1], &l1);
    [fl, bl].concat()
}

#[test]
fn holistic_encoder_matches_oracle() {
    let mut r = rng(13);
    for seed in 0..5 {
        let w = RecognizerWeights::seeded(seed, dims(3, 5)).unwrap();
        let width = 1 + seed as usize;
        let f = rand_tensor(&mut r, &[3, 2, width], -1.0, 1.0);
        let got = encode_holistic(&f, &w).unwrap();
        assert_eq!(got.len(), 6);
        assert!(max_abs_diff(got.data(), &holistic_oracle(&f, &w)) <= 1e-6);
    }
    let mut z = RecognizerWeights::seeded(0, dims(3, 5)).unwrap();
    for layer in &mut z.encoder {
        for cell in [&mut layer.fwd, &mut layer.bwd] {
            *cell = LstmCell::zeros(cell.input(), cell.hidden());
        }
    }
    let out = encode_holistic(&Tensor::zeros(&[3, 2, 4]), &z).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decode_steps_match_oracle() {
    let mut r = rng(14);
    let w = RecognizerWeights::seeded(9, dims(3, 6)).unwrap();
    let f = rand_tensor(&mut r, &[3, 3, 4], -1.0, 1.0);
    let trace = decode_forced(&f, &w, &[4, 5, 3]).unwrap();
    let mut h = holistic_oracle(&f, &w);
    let mut c = vec![0.0; h.len()];
    let e = w.embedding.shape()[1];
    for (t, prev) in [START, 4, 5].into_iter().enumerate() {
        let x: Vec<f64> = w.embedding.data()[prev * e..(prev + 1) * e]
            .iter()
            .map(|&v| v as f64)
            .collect();
        (h, c) = lstm_step(
            &w.decoder.w_ih,
            &w.decoder.w_hh,
            &w.decoder.bias,
            &x,
            &h,
            &c,
        );
        let (alpha, g) = attention(&f, &h, &w.att_feat, &w.att_hidden, &w.att_score);
        let feat = [h.clone(), g].concat();
        let cols = feat.len();
        let logits: Vec<f64> = (0..6)
            .map(|k| {
                w.out_bias.data()[k] as f64
                    + (0..cols)
                        .map(|j| w.out_weight.data()[k * cols + j] as f64 * feat[j])
                        .sum::<f64>()
            })
            .collect();
        let step = &trace.steps[t];
        assert!(max_abs_diff(step.hidden.data(), &h) <= 1e-6);
        assert!(max_abs_diff(step.attention.data(), &alpha) <= 1e-6);
        assert!(max_abs_diff(step.logits.data(), &logits) <= 1e-5);
    }
}

#[test]
fn decode_truncation_determinism_and_ties() {
    let w = RecognizerWeights::seeded(4, dims(3, 8)).unwrap();
    let f = rand_tensor(&mut rng(15), &[3, 4, 4], -1.0, 1.0);
    assert_eq!(decode(&f, &w, 1).unwrap().len(), 1);
    let a = decode(&f, &w, 3).unwrap();
    let b = decode(&f, &w, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 3);
    assert!(decode(&f, &w, 0).is_err());
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);

    // Forcing every logit equal makes the lowest class id win.
    let mut tie = RecognizerWeights::seeded(4, dims(3, 3)).unwrap();
    tie.out_weight = Tensor::zeros(tie.out_weight.shape());
    tie.out_bias = Tensor::zeros(tie.out_bias.shape());
    let t = decode(&f, &tie, 2).unwrap();
    assert!(t.steps.iter().all(|s| s.symbol == 0));
}

#[test]
fn decode_stops_at_end() {
    let mut w = RecognizerWeights::seeded(4, dims(3, 5)).unwrap();
    w.out_weight = Tensor::zeros(w.out_weight.shape());
    w.out_bias = Tensor::zeros(w.out_bias.shape());
    w.out_bias.data_mut()[END] = 1.0;
    let t = decode(&rand_tensor(&mut rng(16), &[3, 2, 2], -1.0, 1.0), &w, 10).unwrap();
    assert_eq!(t.symbols(), vec![END]);
    assert!(t.instances().is_empty());
}

fn trace_with_logits(rows: &[Vec<f32>]) -> AttentionTrace {
    AttentionTrace {
        steps: rows
            .iter()
            .map(|l| DecodeStep {
                attention: Tensor::full(&[1, 1], 1.0),
                glimpse: Tensor::zeros(&[1]),
                hidden: Tensor::zeros(&[1]),
                logits: Tensor::vector(l.clone()),
                symbol: argmax(l),
            })
            .collect(),
    }
}

#[test]
fn recognition_loss_cases() {
    let k = 7;
    let uniform = trace_with_logits(&vec![vec![0.3; k]; 4]);
    let l = recognition_loss(&uniform, &[3, 4, 5, 1]).unwrap();
    assert!((l - 4.0 * (k as f64).ln()).abs() < 1e-9);

    let mut sure = vec![-1e4f32; k];
    sure[3] = 1e4;
    assert_eq!(
        recognition_loss(&trace_with_logits(&[sure]), &[3]).unwrap(),
        0.0
    );

    assert!(recognition_loss(&uniform, &[]).is_err());
    assert!(recognition_loss(&uniform, &[3; 5]).is_err());

    let mut r = rng(17);
    for _ in 0..50 {
        let rows: Vec<Vec<f32>> = (0..3).map(|_| rand_vec(&mut r, k, -5.0, 5.0)).collect();
        let gt: Vec<usize> = (0..3).map(|_| r.random_range(0..k)).collect();
        let want: f64 = rows
            .iter()
            .zip(&gt)
            .map(|(l, &y)| cross_entropy(&l.iter().map(|&v| v as f64).collect::<Vec<_>>(), y))
            .sum();
        let got = recognition_loss(&trace_with_logits(&rows), &gt).unwrap();
        assert!((got - want).abs() <= 1e-9);
        assert!(got >= 0.0);
    }
}

#[test]
fn recognizer_archive_round_trip_and_missing_name() {
    let w = RecognizerWeights::seeded(2, dims(3, 5)).unwrap();
    let mut a = Archive::new();
    w.store(&mut a);
    assert!(a.names().all(|n| n.starts_with("rec.")));
    assert_eq!(RecognizerWeights::from_archive(&a).unwrap(), w);
    let name = a.names().next().unwrap().to_string();
    a.remove(&name);
    let err = RecognizerWeights::from_archive(&a).unwrap_err();
    assert!(err.to_string().contains(&name));
}

#[test]
fn channel_mismatch_is_rejected() {
    let w = RecognizerWeights::seeded(2, dims(3, 5)).unwrap();
    assert!(encode_holistic(&Tensor::zeros(&[4, 2, 2]), &w).is_err());
    assert!(recognizer::decode(&Tensor::zeros(&[4, 2, 2]), &w, 2).is_err());
    let _ = ConvLayer::zeros(1, 1, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]
    #[test]
    fn attention_invariants(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let mut r = rng(seed);
        let rw = RecognizerWeights::seeded(seed, dims(3, 6)).unwrap();
        let f = rand_tensor(&mut r, &[3, h, w], -3.0, 3.0);
        let trace = decode(&f, &rw, 4).unwrap();
        for s in &trace.steps {
            let sum: f64 = s.attention.data().iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5);
            prop_assert!(s.attention.data().iter().all(|&v| v >= 0.0));
            for c in 0..3 {
                let plane = &f.data()[c * h * w..(c + 1) * h * w];
                let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let g = s.glimpse.data()[c];
                prop_assert!(g >= lo - 1e-5 && g <= hi + 1e-5);
            }
        }
    }
}
