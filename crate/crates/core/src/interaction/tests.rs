use super::*;
use proptest::prelude::*;
use rand::Rng;
use rand::seq::SliceRandom;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> FeatureTensor {
    FeatureTensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn agents(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<AgentFeature> {
    (0..n)
        .map(|i| AgentFeature {
            feat: rand_tensor(rng, [1, c, h, w]),
            track_id: i as u64,
            class_id: (i % 3) as u32,
        })
        .collect()
}

fn layer(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Hr2oWeights {
    let mut w = Hr2oWeights::random(c, d, LayerNormParams::unit(d, 1e-5), rng);
    for conv in [&mut w.q, &mut w.k, &mut w.v, &mut w.out] {
        conv.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    w.norm.gain.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    w.norm.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
    w
}

/// Straight loops over (i, j, y, x) using tensor accessors only.
fn dense_oracle(agents: &[AgentFeature], w: &Hr2oWeights) -> Vec<FeatureTensor> {
    let n = agents.len();
    let [_, c, h, wd] = agents[0].feat.dims();
    let d = w.q.c_out;
    let conv = |cw: &Conv1x1Weights, f: &FeatureTensor, o: usize, y: usize, x: usize| {
        let mut s = cw.b[o];
        for i in 0..cw.c_in {
            s += cw.w[o * cw.c_in + i] * f.get(0, i, y, x);
        }
        s
    };
    let mut outs = Vec::new();
    for i in 0..n {
        let mut out = agents[i].feat.clone();
        for y in 0..h {
            for x in 0..wd {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    for e in 0..d {
                        logits[j] += conv(&w.q, &agents[i].feat, e, y, x) * conv(&w.k, &agents[j].feat, e, y, x);
                    }
                    logits[j] /= (d as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let mut agg = vec![0.0; d];
                for j in 0..n {
                    let a = (logits[j] - m).exp() / z;
                    for e in 0..d {
                        agg[e] += a * conv(&w.v, &agents[j].feat, e, y, x);
                    }
                }
                let mean = agg.iter().sum::<f64>() / d as f64;
                let var = agg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let act: Vec<f64> = (0..d)
                    .map(|e| (w.norm.gain[e] * (agg[e] - mean) / (var + w.norm.eps).sqrt() + w.norm.bias[e]).max(0.0))
                    .collect();
                for o in 0..c {
                    let mut s = w.out.b[o];
                    for e in 0..d {
                        s += w.out.w[o * d + e] * act[e];
                    }
                    out.set(0, o, y, x, out.get(0, o, y, x) + s);
                }
            }
        }
        outs.push(out);
    }
    outs
}

#[test]
fn matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = agents(&mut rng, 3, 2, 2, 2);
    let w = layer(&mut rng, 2, 2);
    let got = hr2o_forward(&a, &w, Dropout::disabled(), 0).unwrap();
    for (g, o) in got.iter().zip(dense_oracle(&a, &w)) {
        assert!(g.max_abs_diff(&o) < 1e-9);
    }
}

#[test]
fn single_agent_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = agents(&mut rng, 1, 3, 2, 3);
    let w = layer(&mut rng, 3, 2);
    let tr = hr2o_forward_traced(&a, &w, Dropout::disabled(), 0).unwrap();
    let v = kernel::conv1x1(&a[0].feat, &w.v).unwrap();
    assert!(tr.aggregated[0].max_abs_diff(&v) < 1e-12);
    assert_eq!(tr.attention(1, 2, 0, 0), 1.0);
}

#[test]
fn zero_queries_give_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = agents(&mut rng, 4, 2, 2, 2);
    let mut w = layer(&mut rng, 2, 3);
    w.q = Conv1x1Weights::zeros(3, 2);
    let tr = hr2o_forward_traced(&a, &w, Dropout::disabled(), 0).unwrap();
    let vs: Vec<_> = a.iter().map(|x| kernel::conv1x1(&x.feat, &w.v).unwrap()).collect();
    let mean = FeatureTensor::from_fn(vs[0].dims(), |t, c, y, x| vs.iter().map(|v| v.get(t, c, y, x)).sum::<f64>() / 4.0);
    for i in 0..4 {
        assert!((tr.attention(0, 1, i, 2) - 0.25).abs() < 1e-15);
        assert!(tr.aggregated[i].max_abs_diff(&mean) < 1e-12);
    }
}

#[test]
fn zero_output_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = agents(&mut rng, 3, 2, 3, 3);
    let mut w = layer(&mut rng, 2, 2);
    w.out = Conv1x1Weights::zeros(2, 2);
    let got = hr2o_forward(&a, &w, Dropout::from_rate(0.5), 9).unwrap();
    for (g, x) in got.iter().zip(&a) {
        assert_eq!(g, &x.feat);
    }
}

#[test]
fn rejects_bad_agent_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = layer(&mut rng, 2, 2);
    assert!(hr2o_forward(&[], &w, Dropout::disabled(), 0).is_err());
    let mut a = agents(&mut rng, 2, 2, 2, 2);
    a[1].feat = FeatureTensor::zeros([1, 2, 3, 2]);
    assert!(hr2o_forward(&a, &w, Dropout::disabled(), 0).is_err());
}

#[test]
fn context_reduce_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let roi = rand_tensor(&mut rng, [1, 3, 2, 2]);
    let ctx = rand_tensor(&mut rng, [1, 2, 2, 2]);
    let mut sel_roi = Conv1x1Weights::zeros(3, 5);
    let mut sel_ctx = Conv1x1Weights::zeros(2, 5);
    for i in 0..3 {
        sel_roi.w[i * 5 + i] = 1.0;
    }
    for i in 0..2 {
        sel_ctx.w[i * 5 + 3 + i] = 1.0;
    }
    let zero_ctx = FeatureTensor::zeros([1, 2, 2, 2]);
    assert_eq!(agent_context_reduce(&roi, &zero_ctx, &sel_roi).unwrap(), roi);
    let zero_roi = FeatureTensor::zeros([1, 3, 2, 2]);
    assert_eq!(agent_context_reduce(&zero_roi, &ctx, &sel_ctx).unwrap(), ctx);

    let w = Conv1x1Weights::random(4, 5, 1.0, &mut rng);
    let out = agent_context_reduce(&roi, &ctx, &w).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            let px: Vec<f64> = (0..3).map(|c| roi.get(0, c, y, x)).chain((0..2).map(|c| ctx.get(0, c, y, x))).collect();
            for o in 0..4 {
                let want: f64 = (0..5).map(|i| w.w[o * 5 + i] * px[i]).sum::<f64>() + w.b[o];
                assert!((out.get(0, o, y, x) - want).abs() < 1e-12);
            }
        }
    }
    let bad_ctx = FeatureTensor::zeros([1, 2, 3, 2]);
    assert!(agent_context_reduce(&roi, &bad_ctx, &w).is_err());
}

#[test]
fn classify_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let feat = rand_tensor(&mut rng, [1, 2, 2, 2]);
    let zero = HeadWeights::zeros(3, 8);
    assert!(classify(&feat, &zero, 0, 0).unwrap().scores.iter().all(|s| *s == 0.5));
    let mut biased = HeadWeights::zeros(3, 8);
    biased.b[1] = 50.0;
    assert!(classify(&feat, &biased, 0, 0).unwrap().scores[1] > 1.0 - 1e-12);
    let head = HeadWeights::random(3, 8, &mut rng);
    let got = classify(&feat, &head, 4, 2).unwrap();
    for k in 0..3 {
        let z: f64 = (0..8).map(|i| head.w[k * 8 + i] * feat.data()[i]).sum::<f64>() + head.b[k];
        assert!((got.scores[k] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-9);
    }
    assert!(classify(&FeatureTensor::zeros([1, 1, 2, 2]), &head, 0, 0).is_err());
}

fn small_model(seed: u64, depth: usize) -> (ClassifierWeights, ClipSample) {
    let shape = ClassifierShape {
        roi_channels: 3,
        context_channels: 2,
        channels: 4,
        attention_dim: 3,
        depth,
        n_actions: 3,
        out_h: 2,
        out_w: 2,
    };
    let mut w = ClassifierWeights::init(shape, 1e-5, 1.0, 0.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut flat = w.to_flat();
    flat.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    w.set_flat(&flat).unwrap();
    let sample = ClipSample {
        rois: (0..2).map(|_| rand_tensor(&mut rng, [1, 3, 2, 2])).collect(),
        context: rand_tensor(&mut rng, [1, 2, 2, 2]),
        targets: (0..2)
            .map(|_| (0..3).map(|_| f64::from(u8::from(rng.gen::<bool>()))).collect())
            .collect(),
    };
    (w, sample)
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        let (w, s) = small_model(seed, 1);
        let chk = gradient_check(&w, &s, &FocalLossSpec::default(), &ForwardOptions::default(), 1e-4).unwrap();
        assert!(chk.max_relative_error <= 1e-4, "seed {seed}: {chk:?}");
    }
}

#[test]
fn gradients_with_stacked_layers_and_dropout_mask() {
    let (w, s) = small_model(7, 2);
    let opts = ForwardOptions {
        dropout: Dropout::from_rate(0.3),
        seed: 5,
        interaction: true,
    };
    let chk = gradient_check(&w, &s, &FocalLossSpec::default(), &opts, 1e-4).unwrap();
    assert!(chk.max_relative_error <= 1e-4, "{chk:?}");
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let (mut w, mut s) = small_model(3, 1);
    w.head.w.iter_mut().for_each(|v| *v = 0.0);
    w.head.b = vec![60.0, -60.0, 60.0];
    for t in &mut s.targets {
        *t = vec![1.0, 0.0, 1.0];
    }
    let (loss, g) = loss_and_grad(&w, &s, &FocalLossSpec::default(), &ForwardOptions::default()).unwrap();
    assert!(loss < 1e-20);
    assert!(g.to_flat().iter().all(|v| v.abs() <= 1e-8));
}

#[test]
fn ablation_has_no_layer_gradient() {
    let (w, s) = small_model(2, 1);
    let opts = ForwardOptions {
        interaction: false,
        ..ForwardOptions::default()
    };
    let (_, g) = loss_and_grad(&w, &s, &FocalLossSpec::default(), &opts).unwrap();
    for (name, seg) in g.segments() {
        if name.starts_with("layer") {
            assert!(seg.iter().all(|v| *v == 0.0), "{name}");
        }
    }
    let chk = gradient_check(&w, &s, &FocalLossSpec::default(), &opts, 1e-4).unwrap();
    assert!(chk.max_relative_error <= 1e-4, "{chk:?}");
}

#[test]
fn weights_roundtrip_through_file() {
    let (w, _) = small_model(9, 2);
    let dir = std::env::temp_dir().join(format!("roadact-w-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w.bin");
    w.save(&path).unwrap();
    let back = ClassifierWeights::load(&path).unwrap();
    assert_eq!(back.shape, w.shape);
    for (a, b) in back.to_flat().iter().zip(w.to_flat()) {
        assert_eq!(*a, b as f32 as f64);
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn clip_roundtrips_through_file() {
    let (_, s) = small_model(4, 1);
    let dir = std::env::temp_dir().join(format!("roadact-c-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("clip.bin");
    s.save(&path).unwrap();
    let back = ClipSample::load(&path).unwrap();
    assert_eq!(back.rois.len(), s.rois.len());
    assert_eq!(back.targets, s.targets);
    assert!(back.context.max_abs_diff(&s.context) < 1e-6);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = toy_interaction_dataset(8, 1);
    let w = ClassifierWeights::init(toy_shape(), 1e-5, 1.0, 0.0, 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (trained, _) = train_toy(w.clone(), &data, &cfg).unwrap();
    assert_eq!(trained, w);
    assert!(train_toy(w, &[], &cfg).is_err());
}

#[test]
fn divergence_is_reported() {
    let data = toy_interaction_dataset(8, 1);
    let w = ClassifierWeights::init(toy_shape(), 1e-5, 1.0, 0.0, 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        epochs: 3,
        ..TrainConfig::default()
    };
    match train_toy(w, &data, &cfg) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = agents(&mut rng, n, 3, 2, 2);
        let w = layer(&mut rng, 3, 2);
        let tr = hr2o_forward_traced(&a, &w, Dropout::disabled(), 0).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for i in 0..n {
                    let row: Vec<f64> = (0..n).map(|j| tr.attention(y, x, i, j)).collect();
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = agents(&mut rng, 4, 2, 2, 2);
        let w = layer(&mut rng, 2, 3);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let base = hr2o_forward(&a, &w, Dropout::disabled(), 0).unwrap();
        let out = hr2o_forward(&permuted, &w, Dropout::disabled(), 0).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!(out[k].max_abs_diff(&base[i]) < 1e-12);
        }
    }

    #[test]
    fn class_ids_do_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = agents(&mut rng, 3, 2, 2, 2);
        let w = layer(&mut rng, 2, 2);
        let mut relabeled = a.clone();
        relabeled.iter_mut().for_each(|x| x.class_id = rng.gen_range(0..4));
        prop_assert_eq!(
            hr2o_forward(&a, &w, Dropout::disabled(), 0).unwrap(),
            hr2o_forward(&relabeled, &w, Dropout::disabled(), 0).unwrap()
        );
    }

    #[test]
    fn attention_is_spatially_local(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = agents(&mut rng, 3, 2, 3, 3);
        let w = layer(&mut rng, 2, 2);
        let before = hr2o_forward_traced(&a, &w, Dropout::disabled(), 0).unwrap();
        let (j, y0, x0) = (rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..3));
        for c in 0..2 {
            let v = a[j].feat.get(0, c, y0, x0);
            a[j].feat.set(0, c, y0, x0, v + rng.gen_range(0.5..2.0));
        }
        let after = hr2o_forward_traced(&a, &w, Dropout::disabled(), 0).unwrap();
        for i in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    for e in 0..2 {
                        let d = (before.aggregated[i].get(0, e, y, x) - after.aggregated[i].get(0, e, y, x)).abs();
                        if (y, x) != (y0, x0) {
                            prop_assert_eq!(d, 0.0);
                        }
                    }
                }
            }
        }
    }
}
