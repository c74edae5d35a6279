use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volrep_core::report::{EOS, PAD, SOS};
use volrep_core::Execution;
use volrep_nn::decoder::{Conditioning, Decoder, DecoderConfig, Memory, MemoryKind, StopReason};
use volrep_nn::eval::next_word_accuracy;
use volrep_nn::train::{train, DecoderSample, TrainConfig};
use volrep_nn::{Error, Graph, Tensor};

fn config(conditioning: Conditioning, memory: MemoryKind) -> DecoderConfig {
    DecoderConfig {
        n_blocks: 2,
        model_dim: 16,
        n_heads: 4,
        ffn_dim: 32,
        vocab_size: 12,
        max_len: 10,
        conditioning,
        memory,
        memory_len: 5,
        memory_width: 6,
        memory_positions: true,
        seed: 1,
    }
}

fn memory(kind: MemoryKind, seed: u64) -> Memory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        MemoryKind::Tokens => Memory::Tokens((0..5).map(|_| rng.random_range(0..100)).collect()),
        MemoryKind::FeatureMap => Memory::FeatureMap(Tensor::new(
            vec![5, 6],
            (0..30).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )),
    }
}

const MODES: [(Conditioning, MemoryKind); 4] = [
    (Conditioning::CrossAttention, MemoryKind::Tokens),
    (Conditioning::CrossAttention, MemoryKind::FeatureMap),
    (Conditioning::PrefixTokens, MemoryKind::Tokens),
    (Conditioning::PrefixTokens, MemoryKind::FeatureMap),
];

#[test]
fn distributions_are_normalised() {
    for (c, k) in MODES {
        let dec = Decoder::new(config(c, k)).unwrap();
        let m = memory(k, 2);
        let d = dec.decode_step(&[SOS, 5, 6], &m).unwrap();
        assert_eq!(d.len(), 12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for row in dec.teacher_forced(&[SOS, 4, 7, 8, EOS], &m).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn teacher_forcing_matches_stepwise_decoding() {
    for (c, k) in MODES {
        let dec = Decoder::new(config(c, k)).unwrap();
        let m = memory(k, 3);
        let reference = [SOS, 9, 4, 4, 11, EOS];
        let tf = dec.teacher_forced(&reference, &m).unwrap();
        assert_eq!(tf.len(), reference.len() - 1);
        for t in 1..reference.len() {
            let step = dec.decode_step(&reference[..t], &m).unwrap();
            for (a, b) in tf[t - 1].iter().zip(&step) {
                assert!((a - b).abs() < 1e-6, "{c:?} {k:?} position {t}");
            }
        }
    }
}

#[test]
fn single_token_body_gives_single_distribution() {
    let dec = Decoder::new(config(Conditioning::CrossAttention, MemoryKind::Tokens)).unwrap();
    assert_eq!(dec.teacher_forced(&[SOS, EOS], &memory(MemoryKind::Tokens, 1)).unwrap().len(), 1);
}

#[test]
fn perturbing_a_token_only_affects_later_positions() {
    for (c, k) in MODES {
        let dec = Decoder::new(config(c, k)).unwrap();
        let m = memory(k, 4);
        let a = [SOS, 5, 6, 7, 8, 9, EOS];
        for pos in 1..a.len() - 1 {
            let mut b = a;
            b[pos] = 10;
            let (da, db) = (dec.teacher_forced(&a, &m).unwrap(), dec.teacher_forced(&b, &m).unwrap());
            // Distribution i predicts token i+1 from tokens 0..=i.
            for i in 0..pos {
                assert_eq!(da[i], db[i], "{c:?} {k:?}: position {i} saw token {pos}");
            }
            assert_ne!(da[pos], db[pos]);
        }
    }
}

#[test]
fn generation_is_deterministic_and_well_terminated() {
    for (c, k) in MODES {
        let dec = Decoder::new(config(c, k)).unwrap();
        let m = memory(k, 5);
        let a = dec.generate(&m, 10).unwrap();
        assert_eq!(a, dec.generate(&m, 10).unwrap());
        assert_eq!(a.ids[0], SOS);
        assert!(a.ids[1..].iter().all(|&t| t != SOS && t != PAD));
        assert_eq!(a.distributions.len(), a.ids.len() - 1);
        match a.stop_reason {
            StopReason::Eos => assert_eq!(*a.ids.last().unwrap(), EOS),
            StopReason::MaxLen => assert_eq!(a.ids.len(), 10),
        }
        let short = dec.generate(&m, 3).unwrap();
        assert!(short.ids.len() <= 3);
    }
}

#[test]
fn input_errors() {
    let dec = Decoder::new(config(Conditioning::CrossAttention, MemoryKind::Tokens)).unwrap();
    let m = memory(MemoryKind::Tokens, 6);
    let long = vec![SOS; 11];
    assert!(matches!(dec.decode_step(&long, &m), Err(Error::InvalidInput(_))));
    assert!(matches!(dec.decode_step(&[5], &m), Err(Error::InvalidInput(_))));
    assert!(matches!(dec.decode_step(&[SOS], &Memory::Tokens(vec![100; 5])), Err(Error::InvalidInput(_))));
    assert!(dec.decode_step(&[SOS], &memory(MemoryKind::FeatureMap, 1)).is_err());
    let fm = Decoder::new(config(Conditioning::CrossAttention, MemoryKind::FeatureMap)).unwrap();
    let wrong = Memory::FeatureMap(Tensor::zeros(&[5, 7]));
    assert!(matches!(fm.decode_step(&[SOS], &wrong), Err(Error::Config(_))));
}

#[test]
fn prefix_mode_loss_ignores_image_positions() {
    let dec = Decoder::new(config(Conditioning::PrefixTokens, MemoryKind::Tokens)).unwrap();
    let m = Memory::Tokens(vec![0; 5]);
    let reference = [SOS, 7, 8, 9, EOS];
    let mut g = Graph::new(&dec.params);
    let out = dec.forward(&mut g, &reference[..4], &m).unwrap();
    assert_eq!(out.text_offset, 5);
    let logits = g.value(out.logits).clone();
    assert_eq!(logits.rows(), 9);

    // Oracle: mean negative log-softmax over the text rows only.
    let mut expected = 0.0;
    for (i, &t) in reference[1..].iter().enumerate() {
        let row = logits.row_slice(5 + i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        expected += lse - row[t as usize];
    }
    expected /= 4.0;
    let mut g2 = Graph::new(&dec.params);
    let loss = dec.loss(&mut g2, &reference, &m).unwrap();
    assert!((g2.value(loss).item() - expected).abs() < 1e-12);

    // No gradient flows back through the image-position logits.
    let logits_var = {
        let out = dec.forward(&mut g, &reference[..4], &m).unwrap();
        let targets: Vec<usize> = (0..9).map(|r| if r >= 5 { reference[r - 4] as usize } else { 0 }).collect();
        let mask: Vec<bool> = (0..9).map(|r| r >= 5).collect();
        let l = g.cross_entropy(out.logits, &targets, &mask);
        (out.logits, l)
    };
    let grads = g.backward(logits_var.1);
    let d = grads.wrt(logits_var.0).unwrap();
    assert!(d[..5 * 12].iter().all(|&x| x == 0.0));
    assert!(d[5 * 12..].iter().any(|&x| x != 0.0));
}

#[test]
fn small_model_overfits_ten_pairs() {
    // Ten distinct memories, each with its own report; perfect next-word
    // accuracy is only reachable by reading the memory.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<DecoderSample> = (0..10)
        .map(|i| {
            let mut reference = vec![SOS];
            reference.extend((0..4).map(|_| rng.random_range(4..12)));
            reference.push(EOS);
            DecoderSample { memory: memory(MemoryKind::Tokens, 100 + i), reference }
        })
        .collect();
    let mut dec = Decoder::new(config(Conditioning::CrossAttention, MemoryKind::Tokens)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 10,
        min_steps: 2000,
        max_steps: 2000,
        eval_every: 100,
        execution: Execution::Sequential,
        ..Default::default()
    };
    train(&mut dec, &samples, &samples, &cfg, None).unwrap();
    assert_eq!(next_word_accuracy(&dec, &samples, Execution::Sequential).unwrap(), 1.0);

    // Same prefix, different memories: different predictions.
    let a = dec.decode_step(&samples[0].reference[..2], &samples[0].memory).unwrap();
    let b = dec.decode_step(&samples[0].reference[..2], &samples[1].memory).unwrap();
    assert_ne!(a, b);
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let dec = Decoder::new(DecoderConfig { vocab_size: 40, ..config(Conditioning::CrossAttention, MemoryKind::Tokens) })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let samples: Vec<DecoderSample> = (0..300)
        .map(|i| {
            let mut reference = vec![SOS];
            reference.extend((0..8).map(|_| rng.random_range(0..40)));
            DecoderSample { memory: memory(MemoryKind::Tokens, i), reference }
        })
        .collect();
    let acc = next_word_accuracy(&dec, &samples, Execution::Parallel).unwrap();
    let (p, n) = (1.0 / 40.0, 300.0 * 8.0);
    let sigma = f64::sqrt(p * (1.0 - p) / n);
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
}
