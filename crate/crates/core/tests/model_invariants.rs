//! Structural properties of the assembled network: batch independence,
//! class-permutation equivariance, per-class head independence and the
//! token-isolation probe.

use segface_core::backbone::forward_pyramid;
use segface_core::data::{collate, generate_scene, SceneSpec};
use segface_core::decoder::{run_decoder, DecoderConfig, Inspector};
use segface_core::head::{channel_inner_product, init_head, predict_masks, token_mlp, HeadConfig};
use segface_core::model::{forward, init_model, predict_logits, ModelConfig};
use segface_core::numerics::{Graph, ParamSet, Tensor};
use segface_core::rng::SplitMix64;

fn small() -> ModelConfig {
    let mut cfg = ModelConfig {
        embed_dim: 32,
        ..ModelConfig::default()
    };
    cfg.backbone.channels = [8, 8, 16, 16];
    cfg.backbone.blocks_per_stage = 1;
    cfg.decoder = DecoderConfig {
        layers: 2,
        heads: 4,
        ffn_hidden: 64,
    };
    cfg.head = HeadConfig { upscale_channels: 8 };
    cfg
}

fn batch(indices: &[u64]) -> Tensor<f32> {
    let spec = SceneSpec {
        resolution: 64,
        ..SceneSpec::default()
    };
    let samples: Vec<_> = indices.iter().map(|&i| generate_scene(&spec, i).unwrap()).collect();
    collate(&samples.iter().collect::<Vec<_>>()).unwrap().0
}

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

#[test]
fn backbone_is_batch_independent_bitwise() {
    let cfg = ModelConfig::default();
    let params = init_model::<f32>(&cfg, 10).unwrap();
    let images = batch(&[0, 1, 2]);
    let pyramid = |x: &Tensor<f32>| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        forward_pyramid(&mut g, &params, &cfg.backbone, v).unwrap().materialize(&g)
    };
    let joint = pyramid(&images);
    for b in 0..3 {
        let single = pyramid(&images.index_first(b).unwrap().reshape(&[1, 3, 64, 64]).unwrap());
        for (level, (j, s)) in joint.levels.iter().zip(&single.levels).enumerate() {
            let row = j.index_first(b).unwrap();
            assert_eq!(row.data(), s.data(), "level {level}, sample {b}");
        }
    }
}

#[test]
fn full_model_is_batch_independent() {
    for cfg in [small(), ModelConfig::default()] {
        let params = init_model::<f32>(&cfg, 10).unwrap();
        let images = batch(&[3, 4, 5]);
        let joint = predict_logits(&params, &cfg, &images).unwrap();
        for b in 0..3 {
            let x = images.index_first(b).unwrap().reshape(&[1, 3, 64, 64]).unwrap();
            let single = predict_logits(&params, &cfg, &x).unwrap();
            let row = joint.index_first(b).unwrap().reshape(single.shape()).unwrap();
            let diff = row.max_abs_diff(&single);
            assert!(diff <= 1e-6, "sample {b}: {diff}");
        }
    }
}

fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let rows: Vec<_> = perm.iter().map(|&p| t.index_first(p).unwrap()).collect();
    Tensor::stack(&rows).unwrap()
}

#[test]
fn permuting_class_tokens_permutes_logits_bitwise() {
    let perm = [7, 2, 9, 0, 5, 1, 8, 3, 6, 4];
    for cfg in [small(), ModelConfig::default()] {
        let params = init_model::<f32>(&cfg, 10).unwrap();
        let mut permuted = params.clone();
        for name in ["decoder.tokens", "decoder.token_pe"] {
            let p = permuted.get_mut(name).unwrap();
            p.value = permute_rows(&p.value, &perm);
        }
        let images = batch(&[6, 7]);
        let base = predict_logits(&params, &cfg, &images).unwrap();
        let out = predict_logits(&permuted, &cfg, &images).unwrap();
        for b in 0..2 {
            let (bb, ob) = (base.index_first(b).unwrap(), out.index_first(b).unwrap());
            for (k, &p) in perm.iter().enumerate() {
                assert_eq!(
                    ob.index_first(k).unwrap().data(),
                    bb.index_first(p).unwrap().data(),
                    "sample {b}, channel {k}"
                );
            }
        }
    }
}

#[test]
fn each_class_mask_depends_only_on_its_own_token() {
    let (n, d, c) = (6, 16, 8);
    let params: ParamSet<f32> = init_head(&HeadConfig { upscale_channels: c }, d, 3).unwrap();
    let u = random(&[2, c, 12, 12], 1);
    let tokens = random(&[2, n, d], 2);
    let run = |t: &Tensor<f32>| {
        let mut g = Graph::new();
        let (uv, tv) = (g.constant(u.clone()), g.constant(t.clone()));
        let s = predict_masks(&mut g, &params, uv, tv).unwrap();
        g.value(s).clone()
    };
    let base = run(&tokens);
    for j in 0..n {
        let mut perturbed = tokens.clone();
        for b in 0..2 {
            for x in &mut perturbed.data_mut()[(b * n + j) * d..][..d] {
                *x += 0.37;
            }
        }
        let out = run(&perturbed);
        for b in 0..2 {
            let (o, s) = (out.index_first(b).unwrap(), base.index_first(b).unwrap());
            for i in 0..n {
                let same = o.index_first(i).unwrap().data() == s.index_first(i).unwrap().data();
                assert_eq!(same, i != j, "perturbed {j}, class {i}, sample {b}");
            }
        }
    }

    // The graph op agrees with the standalone inner product.
    let mut g = Graph::new();
    let tv = g.constant(tokens.clone());
    let m = token_mlp(&mut g, &params, tv).unwrap();
    let direct = channel_inner_product(&u, g.value(m)).unwrap();
    assert_eq!(direct.data(), base.data());
}

#[test]
fn zeroing_one_tokens_face_readout_leaves_other_tokens_untouched() {
    let mut cfg = small();
    cfg.decoder.layers = 1;
    let params = init_model::<f32>(&cfg, 10).unwrap();
    let images = batch(&[8, 9]);
    let run = |zero: Vec<usize>| {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pyramid = forward_pyramid(&mut g, &params, &cfg.backbone, x).unwrap();
        let fused = segface_core::fusion::run_fusion(&mut g, &params, &pyramid, cfg.fusion).unwrap();
        let mut insp = Inspector::new();
        insp.zero_token_to_face = zero;
        let out = run_decoder(&mut g, &params, &cfg.decoder, fused, Some(&mut insp)).unwrap();
        (insp.token_to_face_outputs[0].clone(), g.value(out.tokens).clone())
    };
    let (d, n) = (cfg.embed_dim, 10);
    let (base_ca, base_tokens) = run(Vec::new());
    for i in [0, 4, 9] {
        let (ca, tokens) = run(vec![i]);
        for b in 0..2 {
            for j in 0..n {
                let at = (b * n + j) * d;
                let (row, base_row) = (&ca.data()[at..at + d], &base_ca.data()[at..at + d]);
                let (tok, base_tok) = (&tokens.data()[at..at + d], &base_tokens.data()[at..at + d]);
                if j == i {
                    assert!(row.iter().all(|&v| v == 0.0), "zeroed row {i}");
                    assert_ne!(tok, base_tok, "token {i} should change");
                } else {
                    assert_eq!(row, base_row, "zeroed {i}, row {j}, sample {b}");
                    assert_eq!(tok, base_tok, "zeroed {i}, token {j}, sample {b}");
                }
            }
        }
    }
}

#[test]
fn inspector_does_not_change_the_forward_pass() {
    let cfg = small();
    let params = init_model::<f32>(&cfg, 10).unwrap();
    let images = batch(&[10]);
    let plain = predict_logits(&params, &cfg, &images).unwrap();
    let mut g = Graph::new();
    let x = g.constant(images);
    let mut insp = Inspector::new();
    let out = forward(&mut g, &params, &cfg, x, Some(&mut insp)).unwrap();
    assert_eq!(g.value(out.logits).data(), plain.data());
    assert_eq!(insp.token_to_face_outputs.len(), cfg.decoder.layers);
    assert_eq!(insp.attention.len(), 3 * cfg.decoder.layers);
}
