//! Finite-difference checks of every trainable layer, at dimensions small
//! enough for double-precision central differences to be sharp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volrep_core::report::{EOS, SOS};
use volrep_core::volume::{Volume, ValueDomain};
use volrep_nn::decoder::{Conditioning, Decoder, DecoderConfig, Memory, MemoryKind};
use volrep_nn::encoder::{ConvLayerSpec, Encoder, EncoderConfig, EncoderInput, ExtractorKind, HeadKind};
use volrep_nn::gradcheck::check_params;
use volrep_nn::layers::{Conv, Embedding, LayerNorm, Linear, TransformerBlock};
use volrep_nn::conv::ConvGeom;
use volrep_nn::{Graph, ParamStore, Tensor, Var};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.iter().product()).map(|_| rng.random_range(0.0..1.0)).collect();
    Volume::new(dims, data, ValueDomain::Normalized).unwrap()
}

/// Weighted sum of `y` with fixed random weights, a loss whose gradient
/// reaches every output entry.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(random_tensor(&mut rng, &shape));
    let p = g.mul(y, w);
    let p = g.reshape(p, &[1, n]);
    g.sum_all(p)
}

fn assert_check(store: &mut ParamStore, loss: impl Fn(&mut Graph) -> Var) {
    let r = check_params(store, 12, EPS, 3, loss);
    assert!(r.checked > 0);
    assert!(r.worst_rel_err <= TOL, "worst {} at {}", r.worst_rel_err, r.worst_param);
}

#[test]
fn linear_layernorm_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, &mut rng, "emb", 7, 6);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let lin = Linear::new(&mut store, &mut rng, "lin", 6, 4);
    // Perturb the norm's affine parameters away from the identity.
    for name in ["ln.gamma", "ln.beta"] {
        let id = store.id(name).unwrap();
        *store.get_mut(id) = random_tensor(&mut rng, &[1, 6]);
    }
    assert_check(&mut store, |g| {
        let x = emb.forward(g, &[3, 0, 3, 6]);
        let x = ln.forward(g, x);
        let y = lin.forward(g, x);
        let y = g.sigmoid(y);
        probe(g, y, 9)
    });
}

#[test]
fn conv_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let geom = ConvGeom { in_channels: 2, in_dims: [3, 5, 4], kernel: [3, 3, 2], stride: [1, 2, 1], pad: [1, 1, 0] };
    let conv = Conv::new(&mut store, &mut rng, "conv", geom, 3);
    let x = random_tensor(&mut rng, &[2, 3, 5, 4]);
    assert_check(&mut store, |g| {
        let x = g.input(x.clone());
        let y = conv.forward(g, x);
        probe(g, y, 4)
    });
}

#[test]
fn transformer_block_causal_and_cross() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, &mut rng, "b", 8, 2, 12);
    let cross = volrep_nn::layers::MultiHeadAttention::new(&mut store, &mut rng, "x", 8, 4);
    let x = random_tensor(&mut rng, &[5, 8]);
    let m = random_tensor(&mut rng, &[3, 8]);
    assert_check(&mut store, |g| {
        let x = g.input(x.clone());
        let m = g.input(m.clone());
        let h = block.forward(g, x, true);
        let c = cross.forward(g, h, m, false);
        let y = g.softmax_rows(c);
        probe(g, y, 5)
    });
}

fn small_encoder(extractor: ExtractorKind, head: HeadKind, freeze: bool) -> EncoderConfig {
    let (input_shape, backbone) = match extractor {
        ExtractorKind::Chunked2d => ([12, 8, 8], vec![ConvLayerSpec::new(2, [1, 3, 3], [1, 2, 2], [0, 1, 1])]),
        ExtractorKind::Whole3d => ([6, 8, 8], vec![ConvLayerSpec::new(2, [3, 3, 3], [2, 2, 2], [1, 1, 1])]),
    };
    EncoderConfig {
        extractor,
        head,
        input_shape,
        n_labels: 3,
        freeze_backbone: freeze,
        backbone,
        head_convs: vec![ConvLayerSpec::new(2, [3, 3, 3], [1, 1, 1], [1, 1, 1])],
        hidden: 6,
        penultimate: 5,
        attn_dim: 4,
        attn_heads: 2,
        attn_ffn: 6,
        // Some seeds leave a head unit whose inputs are all dead: its
        // pre-activation is exactly the zero bias, a ReLU kink.
        seed: 12,
    }
}

fn check_encoder(cfg: EncoderConfig) {
    let enc = Encoder::new(cfg.clone()).unwrap();
    let input = EncoderInput::Volume(random_volume(21, cfg.input_shape));
    let labels = [1, 0, 1];
    let mut store = enc.params.clone();
    assert_check(&mut store, |g| enc.loss(g, &input, &labels).unwrap());
}

#[test]
fn conv3d_head_with_trainable_backbones() {
    check_encoder(small_encoder(ExtractorKind::Chunked2d, HeadKind::Conv3d, false));
    check_encoder(small_encoder(ExtractorKind::Whole3d, HeadKind::Conv3d, false));
}

#[test]
fn attention_pooling_head() {
    check_encoder(small_encoder(ExtractorKind::Chunked2d, HeadKind::AttentionPooling, false));
}

#[test]
fn transformer_head() {
    check_encoder(small_encoder(ExtractorKind::Chunked2d, HeadKind::Transformer, false));
}

#[test]
fn frozen_backbone_receives_no_gradient() {
    let cfg = small_encoder(ExtractorKind::Chunked2d, HeadKind::AttentionPooling, true);
    let enc = Encoder::new(cfg.clone()).unwrap();
    let input = EncoderInput::Volume(random_volume(5, cfg.input_shape));
    let mut g = Graph::new(&enc.params);
    let loss = enc.loss(&mut g, &input, &[0, 1, 1]).unwrap();
    let grads = g.backward(loss).params;
    for (id, name, _) in enc.params.iter() {
        assert_eq!(grads.get(id).is_some(), !name.starts_with("backbone."), "{name}");
    }
}

fn small_decoder(conditioning: Conditioning, memory: MemoryKind) -> DecoderConfig {
    DecoderConfig {
        n_blocks: 2,
        model_dim: 8,
        n_heads: 2,
        ffn_dim: 10,
        vocab_size: 9,
        max_len: 8,
        conditioning,
        memory,
        memory_len: 3,
        memory_width: 4,
        memory_positions: true,
        seed: 5,
    }
}

fn check_decoder(cfg: DecoderConfig) {
    let dec = Decoder::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let memory = match cfg.memory {
        MemoryKind::Tokens => Memory::Tokens(vec![4, 99, 0]),
        MemoryKind::FeatureMap => Memory::FeatureMap(random_tensor(&mut rng, &[3, 4])),
    };
    let reference = [SOS, 5, 7, 4, 8, EOS];
    let mut store = dec.params.clone();
    assert_check(&mut store, |g| dec.loss(g, &reference, &memory).unwrap());
}

#[test]
fn decoder_all_modes() {
    for conditioning in [Conditioning::CrossAttention, Conditioning::PrefixTokens] {
        for memory in [MemoryKind::Tokens, MemoryKind::FeatureMap] {
            check_decoder(small_decoder(conditioning, memory));
        }
    }
}
