use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volrep_core::report::{EOS, SOS};
use volrep_core::Execution;
use volrep_nn::checkpoint;
use volrep_nn::decoder::{Decoder, DecoderConfig, Memory, MemoryKind, ARCHITECTURE as DECODER};
use volrep_nn::encoder::{
    ConvLayerSpec, Encoder, EncoderConfig, EncoderInput, EncoderSample, FeatureMapStack, Features, HeadKind,
    ARCHITECTURE as ENCODER,
};
use volrep_nn::layers::Linear;
use volrep_nn::search::{hyperparameter_search, Dynamics, SearchGrid, Trial};
use volrep_nn::train::{batch_gradients, train, Model, TrainConfig};
use volrep_nn::{Error, Graph, ParamStore, Result, Tensor, Var};

/// Synthetic pooling task: the label says whether chunks 0 and 1 are
/// brighter than 0.5 on average. Mean pooling separates it linearly.
fn encoder_task(n: usize, seed: u64) -> Vec<EncoderSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..1.0);
            let b: f64 = rng.random_range(0.0..1.0);
            let mut data = Vec::new();
            for level in [a, b, 0.5] {
                data.extend((0..4).map(|_| level + rng.random_range(-0.05..0.05)));
            }
            let f = Features::Chunked(FeatureMapStack { tensor: Tensor::new(vec![3, 1, 2, 2], data) });
            EncoderSample { input: EncoderInput::Features(f), labels: vec![u8::from(a + b > 1.0)] }
        })
        .collect()
}

fn encoder() -> Encoder {
    let cfg = EncoderConfig {
        head: HeadKind::AttentionPooling,
        input_shape: [9, 8, 8],
        n_labels: 1,
        backbone: vec![ConvLayerSpec::new(1, [1, 3, 3], [1, 4, 4], [0, 1, 1])],
        penultimate: 16,
        seed: 4,
        ..Default::default()
    };
    Encoder::new(cfg).unwrap()
}

fn quick(steps: usize, execution: Execution) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        batch_size: 8,
        min_steps: steps,
        max_steps: steps,
        eval_every: 10,
        execution,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_bitwise_identical_weights() {
    let (tr, va) = (encoder_task(64, 1), encoder_task(16, 2));
    let run = |exec| {
        let mut e = encoder();
        train(&mut e, &tr, &va, &quick(60, exec), None).unwrap();
        e.params
    };
    let a = run(Execution::Sequential);
    assert_eq!(a, run(Execution::Sequential));
    assert_eq!(a, run(Execution::Parallel));
}

#[test]
fn loss_halves_and_history_is_monotone() {
    let (tr, va) = (encoder_task(128, 3), encoder_task(32, 4));
    let mut e = encoder();
    let cfg = TrainConfig { learning_rate: 1e-2, ..quick(600, Execution::Parallel) };
    let out = train(&mut e, &tr, &va, &cfg, None).unwrap();
    let val = out.values("val", "loss");
    assert!(val.last().unwrap().1 <= 0.5 * val[0].1, "{val:?}");
    let steps: Vec<usize> = out.history.iter().map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert!(out.history.iter().all(|r| r.value.is_finite()));
}

#[test]
fn best_parameters_are_restored() {
    let (tr, va) = (encoder_task(64, 5), encoder_task(16, 6));
    let mut e = encoder();
    let out = train(&mut e, &tr, &va, &quick(100, Execution::Parallel), None).unwrap();
    let best = out.values("val", "loss").iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    assert_eq!(best, out.best_val_loss);
    let now = volrep_nn::train::mean_loss(&e, &va, Execution::Sequential).unwrap();
    assert_eq!(now, best);
}

#[test]
fn early_stopping_waits_for_min_steps() {
    // A model that cannot improve: validation loss is flat from the start.
    struct Flat(ParamStore, Linear);
    impl Model for Flat {
        type Sample = f64;
        fn params(&self) -> &ParamStore {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.0
        }
        fn sample_loss(&self, g: &mut Graph, s: &f64) -> Result<Var> {
            let x = g.input(Tensor::scalar(*s));
            let y = self.1.forward(g, x);
            let z = g.scale(y, 0.0);
            let c = g.input(Tensor::scalar(1.0));
            let z = g.add(z, c);
            Ok(g.sum_all(z))
        }
    }
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "l", 1, 1);
    let mut m = Flat(store, lin);
    let cfg = TrainConfig { min_steps: 400, max_steps: 1000, eval_every: 50, ..quick(0, Execution::Sequential) };
    let out = train(&mut m, &[1.0; 8], &[1.0; 4], &cfg, None).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.steps, 400);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    struct Exploding(ParamStore);
    impl Model for Exploding {
        type Sample = ();
        fn params(&self) -> &ParamStore {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.0
        }
        fn sample_loss(&self, g: &mut Graph, _: &()) -> Result<Var> {
            let id = self.0.id("w").unwrap();
            let w = g.param(id);
            Ok(g.scale(w, f64::NAN))
        }
    }
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(1.0));
    let mut m = Exploding(store);
    match train(&mut m, &[(); 8], &[(); 2], &quick(10, Execution::Sequential), None) {
        Err(Error::Training { step, snapshot, .. }) => {
            assert_eq!(step, 1);
            assert!(snapshot.contains("loss"));
        }
        other => panic!("expected a training failure, got {other:?}"),
    }
}

#[test]
fn config_bounds_are_enforced() {
    for cfg in [
        TrainConfig { learning_rate: 0.1, ..Default::default() },
        TrainConfig { learning_rate: 1e-6, ..Default::default() },
        TrainConfig { batch_size: 5, ..Default::default() },
        TrainConfig { batch_size: 51, ..Default::default() },
        TrainConfig { grad_accumulation: 0, ..Default::default() },
        TrainConfig { min_steps: 10, max_steps: 5, ..Default::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    TrainConfig::encoder().validate().unwrap();
    TrainConfig::decoder().validate().unwrap();
}

#[test]
fn accumulated_batches_equal_one_large_batch() {
    let tr = encoder_task(16, 7);
    let e = encoder();
    let all: Vec<&EncoderSample> = tr.iter().collect();
    let (_, full) = batch_gradients(&e, &all, Execution::Sequential).unwrap();
    let (_, mut a) = batch_gradients(&e, &all[..8], Execution::Sequential).unwrap();
    let (_, b) = batch_gradients(&e, &all[8..], Execution::Sequential).unwrap();
    a.add(&b);
    a.scale(0.5);
    for id in e.params.ids() {
        if let (Some(x), Some(y)) = (full.get(id), a.get(id)) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn search_stops_when_midpoint_succeeds() {
    let r = hyperparameter_search(&TrainConfig::default(), &SearchGrid::default(), 0.95, 4, |cfg| {
        Ok(Trial { metric: 0.99, dynamics: Dynamics::Stable, artifact: cfg.learning_rate })
    })
    .unwrap();
    assert!(r.successful);
    assert_eq!(r.log.len(), 1);
    assert_eq!(r.log[0].batch_size, 28);
}

#[test]
fn search_budget_exhaustion_is_flagged_and_replayable() {
    let run = || {
        let mut k = 0;
        hyperparameter_search(&TrainConfig::default(), &SearchGrid::default(), 0.95, 4, |cfg| {
            k += 1;
            match k {
                1 => Err(Error::Training { step: 3, reason: "nan".into(), snapshot: String::new() }),
                2 => Ok(Trial { metric: 0.6, dynamics: Dynamics::Noisy, artifact: cfg.batch_size }),
                _ => Ok(Trial { metric: 0.5 + 0.1 * k as f64, dynamics: Dynamics::Stable, artifact: cfg.batch_size }),
            }
        })
        .unwrap()
    };
    let r = run();
    assert!(!r.successful);
    assert_eq!(r.log.len(), 4);
    assert_eq!(r.log[0].dynamics, Dynamics::Diverged);
    assert!(r.log[1].learning_rate < r.log[0].learning_rate);
    assert_eq!(r.log[2].batch_size, 50);
    assert!(r.log[3].learning_rate > r.log[2].learning_rate);
    assert_eq!(r.best.as_ref().unwrap().1.metric, 0.9);
    assert_eq!(r.log, run().log);
}

#[test]
fn checkpoint_round_trip_and_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let mut e = encoder();
    train(&mut e, &encoder_task(32, 8), &encoder_task(8, 9), &quick(20, Execution::Sequential), None).unwrap();
    checkpoint::save(&path, ENCODER, &e.config, &e.params, 20, vec![("val_loss".into(), 0.1)]).unwrap();

    let mut fresh = encoder();
    let meta = checkpoint::load_into(&path, ENCODER, &fresh.config.clone(), &mut fresh.params).unwrap();
    assert_eq!(meta.step, 20);
    assert_eq!(fresh.params, e.params);

    let other = EncoderConfig { penultimate: 17, ..e.config.clone() };
    let mut p = Encoder::new(other.clone()).unwrap().params;
    assert!(matches!(checkpoint::load_into(&path, ENCODER, &other, &mut p), Err(Error::CheckpointMismatch(_))));
    let mut q = e.params.clone();
    assert!(matches!(
        checkpoint::load_into(&path, DECODER, &e.config, &mut q),
        Err(Error::CheckpointMismatch(_))
    ));

    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::decode_params(&bytes[..bytes.len() - 3]).is_err());
    assert!(checkpoint::decode_params(b"nope").is_err());
    assert_eq!(checkpoint::encode_params(&e.params), bytes);
}

#[test]
fn decoder_checkpoint_is_deterministic() {
    let cfg = DecoderConfig {
        n_blocks: 1,
        model_dim: 8,
        n_heads: 2,
        ffn_dim: 8,
        vocab_size: 10,
        max_len: 8,
        memory: MemoryKind::Tokens,
        memory_len: 4,
        ..Default::default()
    };
    let samples: Vec<_> = (0..12u32)
        .map(|i| volrep_nn::train::DecoderSample {
            memory: Memory::Tokens(vec![i, 2 * i, 3, 4]),
            reference: vec![SOS, 4 + i % 6, 5, EOS],
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let mut blobs = Vec::new();
    for k in 0..2 {
        let mut d = Decoder::new(cfg.clone()).unwrap();
        train(&mut d, &samples, &samples, &quick(30, Execution::Parallel), None).unwrap();
        let path = dir.path().join(format!("dec{k}.bin"));
        checkpoint::save(&path, DECODER, &d.config, &d.params, 30, vec![]).unwrap();
        blobs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(blobs[0], blobs[1]);
}
