use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volrep_core::report::{EOS, SOS};
use volrep_core::Execution;
use volrep_nn::decoder::{Decoder, DecoderConfig, Memory};
use volrep_nn::train::{batch_gradients, DecoderSample};

fn decoder_batch(c: &mut Criterion) {
    let cfg = DecoderConfig { n_blocks: 2, model_dim: 48, n_heads: 4, ffn_dim: 96, max_len: 56, ..Default::default() };
    let dec = Decoder::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples: Vec<DecoderSample> = (0..16)
        .map(|_| {
            let mut reference = vec![SOS];
            reference.extend((0..30).map(|_| rng.random_range(4..64)));
            reference.push(EOS);
            DecoderSample { memory: Memory::Tokens((0..100).map(|_| rng.random_range(0..100)).collect()), reference }
        })
        .collect();
    let batch: Vec<&DecoderSample> = samples.iter().collect();

    let mut group = c.benchmark_group("decoder_batch_gradients_16");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| batch_gradients(&dec, &batch, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, decoder_batch);
criterion_main!(benches);
