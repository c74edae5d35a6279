use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volrep_core::volume::{ValueDomain, Volume};
use volrep_nn::encoder::{
    channel_mean_maps, chunk_slices, to_token_representation, ConvLayerSpec, Encoder, EncoderConfig, ExtractorKind,
    FeatureMapStack, Features, HeadKind,
};
use volrep_nn::{Graph, Tensor};

fn volume(seed: u64, dims: [usize; 3]) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.iter().product()).map(|_| rng.random_range(0.0..1.0)).collect();
    Volume::new(dims, data, ValueDomain::Normalized).unwrap()
}

fn small(head: HeadKind, n_labels: usize) -> EncoderConfig {
    EncoderConfig {
        head,
        input_shape: [12, 16, 16],
        n_labels,
        backbone: vec![ConvLayerSpec::new(3, [1, 3, 3], [1, 2, 2], [0, 1, 1]); 2],
        head_convs: vec![ConvLayerSpec::new(4, [3, 3, 3], [1, 1, 1], [1, 1, 1])],
        hidden: 8,
        attn_dim: 8,
        attn_heads: 2,
        attn_ffn: 8,
        ..Default::default()
    }
}

#[test]
fn default_backbone_stack_shape() {
    let enc = Encoder::new(EncoderConfig { freeze_backbone: true, ..Default::default() }).unwrap();
    let f = enc.extract_features(&volume(1, [64, 64, 64])).unwrap();
    let s = f.stack().unwrap();
    assert_eq!(s.tensor.shape(), &[22, 8, 16, 16]);
    let enc = Encoder::new(EncoderConfig { input_shape: [61, 64, 64], ..Default::default() }).unwrap();
    let f = enc.extract_features(&volume(1, [61, 64, 64])).unwrap();
    assert_eq!(f.stack().unwrap().n_chunks(), 21);
}

#[test]
fn extraction_is_deterministic_and_per_chunk() {
    let enc = Encoder::new(small(HeadKind::Conv3d, 1)).unwrap();
    let v = volume(2, [12, 16, 16]);
    let a = enc.extract_features(&v).unwrap();
    assert_eq!(a, enc.extract_features(&v).unwrap());

    // swap chunks 0 and 2 (slices 0..3 and 6..9)
    let plane = 16 * 16;
    let mut data = v.data().to_vec();
    for k in 0..3 * plane {
        data.swap(k, 6 * plane + k);
    }
    let swapped = Volume::new([12, 16, 16], data, ValueDomain::Normalized).unwrap();
    let b = enc.extract_features(&swapped).unwrap();
    let (sa, sb) = (a.stack().unwrap(), b.stack().unwrap());
    let per = sa.tensor.len() / sa.n_chunks();
    let chunk = |s: &FeatureMapStack, i: usize| s.tensor.data()[i * per..(i + 1) * per].to_vec();
    assert_eq!(chunk(sa, 0), chunk(sb, 2));
    assert_eq!(chunk(sa, 2), chunk(sb, 0));
    assert_eq!(chunk(sa, 1), chunk(sb, 1));
}

#[test]
fn whole_volume_features_have_declared_width() {
    let cfg = EncoderConfig {
        extractor: ExtractorKind::Whole3d,
        input_shape: [16, 16, 16],
        backbone: EncoderConfig::whole_volume_backbone(),
        head_convs: vec![ConvLayerSpec::new(4, [1, 1, 1], [1, 1, 1], [0, 0, 0])],
        n_labels: 5,
        ..Default::default()
    };
    let enc = Encoder::new(cfg).unwrap();
    let f = enc.extract_features(&volume(3, [16, 16, 16])).unwrap();
    match &f {
        Features::Whole(t) => assert_eq!(t.shape(), &[8, 2, 2, 2]),
        Features::Chunked(_) => panic!("expected whole-volume features"),
    }
    assert_eq!(enc.predict_features(&f).unwrap().logits.len(), 5);
}

#[test]
fn logits_match_label_count_for_every_head() {
    for head in [HeadKind::Conv3d, HeadKind::AttentionPooling, HeadKind::Transformer] {
        for n in [1, 5, 11] {
            let enc = Encoder::new(small(head, n)).unwrap();
            let p = enc.predict_volume(&volume(4, [12, 16, 16])).unwrap();
            assert_eq!(p.logits.len(), n);
            assert_eq!(p.penultimate.len(), 100);
            assert!(p.logits.iter().all(|z| z.is_finite()));
        }
    }
}

#[test]
fn zeroed_final_layer_gives_half_probabilities() {
    for (head, last) in [(HeadKind::Conv3d, "head.fc3"), (HeadKind::AttentionPooling, "head.fc2")] {
        let mut enc = Encoder::new(small(head, 5)).unwrap();
        for suffix in ["weight", "bias"] {
            let id = enc.params.id(&format!("{last}.{suffix}")).unwrap();
            enc.params.get_mut(id).data_mut().fill(0.0);
        }
        let p = enc.predict_volume(&volume(5, [12, 16, 16])).unwrap();
        assert!(p.logits.iter().all(|&z| z == 0.0));
        assert!(p.probabilities.iter().all(|&q| q == 0.5));
    }
}

#[test]
fn attention_weights_are_a_distribution() {
    let enc = Encoder::new(small(HeadKind::AttentionPooling, 3)).unwrap();
    let f = enc.extract_features(&volume(6, [12, 16, 16])).unwrap();
    let mut g = Graph::new(&enc.params);
    let out = enc.forward_features(&mut g, &f).unwrap();
    let w = g.value(out.attention.unwrap()).data();
    assert_eq!(w.len(), 4);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn uniform_scores_reduce_to_mean_pooling() {
    let mut enc = Encoder::new(small(HeadKind::AttentionPooling, 3)).unwrap();
    for suffix in ["weight", "bias"] {
        let id = enc.params.id(&format!("head.score.{suffix}")).unwrap();
        enc.params.get_mut(id).data_mut().fill(0.0);
    }
    let f = enc.extract_features(&volume(7, [12, 16, 16])).unwrap();
    let s = f.stack().unwrap();
    let (n, width) = (s.n_chunks(), s.tensor.len() / s.n_chunks());
    let mean: Vec<f64> =
        (0..width).map(|j| (0..n).map(|c| s.tensor.data()[c * width + j]).sum::<f64>() / n as f64).collect();

    // Oracle: the fully connected path applied to the plain mean.
    let w1 = enc.params.get(enc.params.id("head.fc1.weight").unwrap());
    let b1 = enc.params.get(enc.params.id("head.fc1.bias").unwrap());
    let pen: Vec<f64> = (0..100)
        .map(|o| b1.data()[o] + (0..width).map(|i| mean[i] * w1.data()[i * 100 + o]).sum::<f64>())
        .collect();
    let p = enc.predict_features(&f).unwrap();
    for (a, b) in p.penultimate.iter().zip(&pen) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn transformer_head_is_chunk_permutation_invariant() {
    let enc = Encoder::new(small(HeadKind::Transformer, 3)).unwrap();
    let f = enc.extract_features(&volume(8, [12, 16, 16])).unwrap();
    let s = f.stack().unwrap();
    let per = s.tensor.len() / s.n_chunks();
    let mut permuted = Vec::new();
    for c in [3, 1, 0, 2] {
        permuted.extend_from_slice(&s.tensor.data()[c * per..(c + 1) * per]);
    }
    let g = Features::Chunked(FeatureMapStack { tensor: Tensor::new(s.tensor.shape().to_vec(), permuted) });
    let (a, b) = (enc.predict_features(&f).unwrap(), enc.predict_features(&g).unwrap());
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn transformer_head_accepts_a_single_chunk() {
    let cfg = EncoderConfig { input_shape: [3, 16, 16], ..small(HeadKind::Transformer, 2) };
    let enc = Encoder::new(cfg).unwrap();
    let p = enc.predict_volume(&volume(9, [3, 16, 16])).unwrap();
    assert!(p.logits.iter().all(|z| z.is_finite()));
}

#[test]
fn volume_shape_mismatch_is_invalid_input() {
    let enc = Encoder::new(small(HeadKind::Conv3d, 1)).unwrap();
    assert!(matches!(
        enc.predict_volume(&volume(1, [12, 16, 8])),
        Err(volrep_nn::Error::InvalidInput(_))
    ));
}

#[test]
fn feature_map_memory_shape_and_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..20 * 4 * 3 * 3).map(|_| rng.random_range(0.0..2.0)).collect();
    let stack = FeatureMapStack { tensor: Tensor::new(vec![20, 4, 3, 3], data.clone()) };
    let m = channel_mean_maps(&stack);
    assert_eq!(m.shape(), &[20, 9]);
    let doubled = FeatureMapStack { tensor: Tensor::new(vec![20, 4, 3, 3], data.iter().map(|x| 2.0 * x).collect()) };
    for (a, b) in m.data().iter().zip(channel_mean_maps(&doubled).data()) {
        assert_eq!(2.0 * a, *b);
    }
    // channel-constant maps: the mean equals any one channel
    let plane: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect();
    let constant: Vec<f64> = (0..4).flat_map(|_| plane.clone()).collect();
    let m = channel_mean_maps(&FeatureMapStack { tensor: Tensor::new(vec![1, 4, 3, 3], constant) });
    assert_eq!(m.data(), &plane[..]);
}

proptest! {
    #[test]
    fn chunks_cover_every_slice_in_order(depth in 1usize..200) {
        let chunks = chunk_slices(depth);
        prop_assert_eq!(chunks.len(), depth.div_ceil(3));
        let flat: Vec<usize> = chunks.iter().flatten().copied().collect();
        prop_assert_eq!(&flat[..depth], &(0..depth).collect::<Vec<_>>()[..]);
        prop_assert!(flat[depth..].iter().all(|&s| s == depth - 1));
    }

    #[test]
    fn tokens_are_bounded_and_affine_invariant(
        v in proptest::collection::vec(-50.0f64..50.0, 100),
        a in 0.01f64..20.0,
        b in -100.0f64..100.0,
    ) {
        let t = to_token_representation(&v);
        prop_assert_eq!(t.len(), 100);
        prop_assert!(t.iter().all(|&x| x <= 99));
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let u = to_token_representation(&w);
        // Rounding may flip only where the scaled value sits on a half step.
        let differ = t.iter().zip(&u).filter(|(x, y)| x != y).count();
        prop_assert!(differ == 0 || t.iter().zip(&u).all(|(x, y)| x.abs_diff(*y) <= 1));
    }
}

#[test]
fn affine_invariance_is_exact_for_dyadic_values() {
    // With exactly representable values no rounding boundary moves.
    let v: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
    let w: Vec<f64> = v.iter().map(|x| 4.0 * x - 8.0).collect();
    assert_eq!(to_token_representation(&v), to_token_representation(&w));
}
