//! Feature extractors, classifier heads and the two encoded-image
//! representations handed to the decoder.
//!
//! The chunked extractor runs a small 2D CNN over consecutive three-slice
//! chunks (the slices act as the three input channels); the whole-volume
//! extractor runs a 3D CNN once per volume. Either feeds one of three heads:
//! a 3D-convolution stack, attention pooling over chunks, or a single
//! transformer block followed by attention pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use volrep_core::abnormality::{inject_findings, Findings};
use volrep_core::phantom::Phantom;
use volrep_core::volume::Volume;

use crate::conv::ConvGeom;
use crate::decoder::{Memory, MemoryKind};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Linear, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHUNK_SLICES: usize = 3;
pub const TOKEN_LEVELS: u32 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Chunked2d,
    Whole3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Conv3d,
    AttentionPooling,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvLayerSpec { out_channels, kernel, stride, pad }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub extractor: ExtractorKind,
    pub head: HeadKind,
    /// Volume shape `[depth, rows, cols]` the model is built for.
    pub input_shape: [usize; 3],
    pub n_labels: usize,
    pub freeze_backbone: bool,
    pub backbone: Vec<ConvLayerSpec>,
    pub head_convs: Vec<ConvLayerSpec>,
    /// Width of the first linear layer of the 3D-convs head.
    pub hidden: usize,
    /// Width of the penultimate layer, which is also the token budget.
    pub penultimate: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub attn_ffn: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            extractor: ExtractorKind::Chunked2d,
            head: HeadKind::Conv3d,
            input_shape: [64, 64, 64],
            n_labels: 11,
            freeze_backbone: false,
            backbone: vec![
                ConvLayerSpec::new(8, [1, 3, 3], [1, 2, 2], [0, 1, 1]),
                ConvLayerSpec::new(8, [1, 3, 3], [1, 2, 2], [0, 1, 1]),
                ConvLayerSpec::new(8, [1, 3, 3], [1, 1, 1], [0, 1, 1]),
            ],
            head_convs: vec![
                ConvLayerSpec::new(16, [3, 3, 3], [1, 2, 2], [0, 1, 1]),
                ConvLayerSpec::new(16, [3, 3, 3], [2, 1, 1], [0, 1, 1]),
                ConvLayerSpec::new(16, [3, 3, 3], [2, 2, 2], [0, 1, 1]),
            ],
            hidden: 64,
            penultimate: 100,
            attn_dim: 32,
            attn_heads: 4,
            attn_ffn: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Default whole-volume backbone: three strided 3D convolutions.
    pub fn whole_volume_backbone() -> Vec<ConvLayerSpec> {
        vec![
            ConvLayerSpec::new(4, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
            ConvLayerSpec::new(8, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
            ConvLayerSpec::new(8, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
        ]
    }

    pub fn n_chunks(&self) -> usize {
        self.input_shape[0].div_ceil(CHUNK_SLICES)
    }
}

/// Per-chunk feature maps, `[n_chunks, channels, fh, fw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapStack {
    pub tensor: Tensor,
}

impl FeatureMapStack {
    pub fn n_chunks(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn map_dims(&self) -> [usize; 2] {
        [self.tensor.shape()[2], self.tensor.shape()[3]]
    }
}

/// Extracted features of one volume.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Chunked(FeatureMapStack),
    /// `[channels, d, h, w]` from the whole-volume extractor.
    Whole(Tensor),
}

impl Features {
    pub fn stack(&self) -> Option<&FeatureMapStack> {
        match self {
            Features::Chunked(s) => Some(s),
            Features::Whole(_) => None,
        }
    }
}

/// Slice indices of each three-slice chunk; a trailing partial chunk repeats
/// the last slice.
pub fn chunk_slices(depth: usize) -> Vec<[usize; CHUNK_SLICES]> {
    (0..depth.div_ceil(CHUNK_SLICES))
        .map(|c| std::array::from_fn(|k| (c * CHUNK_SLICES + k).min(depth - 1)))
        .collect()
}

/// The chunk as a `[3, 1, rows, cols]` tensor, slices as channels.
pub fn chunk_tensor(v: &Volume, chunk: [usize; CHUNK_SLICES]) -> Tensor {
    let mut data = Vec::with_capacity(CHUNK_SLICES * v.rows() * v.cols());
    for s in chunk {
        data.extend_from_slice(v.slice(s));
    }
    Tensor::new(vec![CHUNK_SLICES, 1, v.rows(), v.cols()], data)
}

/// Linear map of `[min, max]` onto `[0, 99]`, rounded half away from zero.
/// A constant vector maps to all zeros.
pub fn to_token_representation(penultimate: &[f64]) -> Vec<u32> {
    let min = penultimate.iter().copied().fold(f64::INFINITY, f64::min);
    let max = penultimate.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0; penultimate.len()];
    }
    let top = f64::from(TOKEN_LEVELS - 1);
    penultimate.iter().map(|&v| ((v - min) / (max - min) * top).round() as u32).collect()
}

/// Channel mean of each chunk's maps, flattened: `[n_chunks, fh·fw]`.
pub fn channel_mean_maps(stack: &FeatureMapStack) -> Tensor {
    let (n, c) = (stack.n_chunks(), stack.channels());
    let [fh, fw] = stack.map_dims();
    let plane = fh * fw;
    let src = stack.tensor.data();
    let mut out = vec![0.0; n * plane];
    for chunk in 0..n {
        for ch in 0..c {
            let base = (chunk * c + ch) * plane;
            for p in 0..plane {
                out[chunk * plane + p] += src[base + p];
            }
        }
    }
    out.iter_mut().for_each(|x| *x /= c as f64);
    Tensor::new(vec![n, plane], out)
}

fn build_convs(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    specs: &[ConvLayerSpec],
    mut channels: usize,
    mut dims: [usize; 3],
) -> Option<(Vec<Conv>, usize, [usize; 3])> {
    let mut layers = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let geom = ConvGeom { in_channels: channels, in_dims: dims, kernel: s.kernel, stride: s.stride, pad: s.pad };
        dims = geom.out_dims()?;
        layers.push(Conv::new(store, rng, &format!("{prefix}.conv{i}"), geom, s.out_channels));
        channels = s.out_channels;
    }
    Some((layers, channels, dims))
}

fn conv_out_dims(specs: &[ConvLayerSpec], mut dims: [usize; 3]) -> Option<[usize; 3]> {
    for s in specs {
        let g = ConvGeom { in_channels: 1, in_dims: dims, kernel: s.kernel, stride: s.stride, pad: s.pad };
        dims = g.out_dims()?;
    }
    Some(dims)
}

#[derive(Clone, Debug)]
struct Conv3dHead {
    convs: Vec<Conv>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

#[derive(Clone, Debug)]
struct AttentionPoolingHead {
    score: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct TransformerHead {
    proj: Linear,
    block: TransformerBlock,
    pool: AttentionPoolingHead,
}

#[derive(Clone, Debug)]
enum Head {
    Conv3d(Conv3dHead),
    Attention(AttentionPoolingHead),
    Transformer(TransformerHead),
}

impl AttentionPoolingHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, width: usize, cfg: &EncoderConfig) -> Self {
        AttentionPoolingHead {
            score: Linear::new(store, rng, &format!("{prefix}.score"), width, 1),
            fc1: Linear::new_relu(store, rng, &format!("{prefix}.fc1"), width, cfg.penultimate),
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), cfg.penultimate, cfg.n_labels),
        }
    }

    /// Returns (attention weights `[1, n]`, penultimate, logits).
    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var, Var) {
        let s = self.score.forward(g, x);
        let s = g.transpose(s);
        let w = g.softmax_rows(s);
        let pooled = g.matmul(w, x);
        let pen = self.fc1.forward(g, pooled);
        let h = g.relu(pen);
        let logits = self.fc2.forward(g, h);
        (w, pen, logits)
    }
}

/// Graph handles of one classification pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub logits: Var,
    pub penultimate: Var,
    /// Softmax weights over chunks for the pooling heads.
    pub attention: Option<Var>,
}

/// Plain values of one classification pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub penultimate: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    backbone: Vec<Conv>,
    /// Head input: chunked `[channels, fh, fw]` per chunk, or whole `[c, d, h, w]`.
    feature_shape: Vec<usize>,
    head: Head,
}

pub const ARCHITECTURE: &str = "volrep-encoder-v1";

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Encoder> {
        if config.extractor == ExtractorKind::Whole3d && config.head != HeadKind::Conv3d {
            return Err(Error::config(format!(
                "the whole-volume extractor yields one feature set per image and cannot feed the {:?} head, which needs per-chunk features",
                config.head
            )));
        }
        if config.n_labels == 0 || config.penultimate == 0 {
            return Err(Error::config("n_labels and penultimate width must be positive"));
        }
        if config.input_shape.contains(&0) {
            return Err(Error::config("input shape must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let [depth, rows, cols] = config.input_shape;

        let (backbone, feature_shape) = match config.extractor {
            ExtractorKind::Chunked2d => {
                if config.backbone.iter().any(|s| s.kernel[0] != 1 || s.stride[0] != 1 || s.pad[0] != 0) {
                    return Err(Error::config("the chunked backbone is 2D: kernel, stride and pad depth must be 1, 1, 0"));
                }
                let (layers, c, d) =
                    build_convs(&mut store, &mut rng, "backbone", &config.backbone, CHUNK_SLICES, [1, rows, cols])
                        .ok_or_else(|| Error::config("backbone kernels do not fit the slice size"))?;
                (layers, vec![c, d[1], d[2]])
            }
            ExtractorKind::Whole3d => {
                let (layers, c, d) =
                    build_convs(&mut store, &mut rng, "backbone", &config.backbone, 1, [depth, rows, cols])
                        .ok_or_else(|| Error::config("backbone kernels do not fit the volume"))?;
                (layers, vec![c, d[0], d[1], d[2]])
            }
        };

        let head = match config.head {
            HeadKind::Conv3d => {
                let (channels, dims) = match config.extractor {
                    ExtractorKind::Chunked2d => {
                        (feature_shape[0], [config.n_chunks(), feature_shape[1], feature_shape[2]])
                    }
                    ExtractorKind::Whole3d => (feature_shape[0], [feature_shape[1], feature_shape[2], feature_shape[3]]),
                };
                let (convs, c, d) = build_convs(&mut store, &mut rng, "head", &config.head_convs, channels, dims)
                    .ok_or_else(|| {
                        let need = (1..=4096)
                            .find(|&n| conv_out_dims(&config.head_convs, [n, dims[1], dims[2]]).is_some());
                        match need {
                            Some(n) if config.extractor == ExtractorKind::Chunked2d => Error::config(format!(
                                "the 3D-convs head needs at least {n} chunks ({} slices) but the input has {}",
                                n * CHUNK_SLICES,
                                dims[0]
                            )),
                            _ => Error::config(format!("3D-convs head kernels do not fit features of shape {dims:?}")),
                        }
                    })?;
                let flat = c * d.iter().product::<usize>();
                Head::Conv3d(Conv3dHead {
                    convs,
                    fc1: Linear::new_relu(&mut store, &mut rng, "head.fc1", flat, config.hidden),
                    fc2: Linear::new_relu(&mut store, &mut rng, "head.fc2", config.hidden, config.penultimate),
                    fc3: Linear::new(&mut store, &mut rng, "head.fc3", config.penultimate, config.n_labels),
                })
            }
            HeadKind::AttentionPooling => {
                let width = feature_shape.iter().product();
                Head::Attention(AttentionPoolingHead::new(&mut store, &mut rng, "head", width, &config))
            }
            HeadKind::Transformer => {
                let width = feature_shape.iter().product();
                if config.attn_heads == 0 || !config.attn_dim.is_multiple_of(config.attn_heads) {
                    return Err(Error::config("attn_dim must be a positive multiple of attn_heads"));
                }
                Head::Transformer(TransformerHead {
                    proj: Linear::new(&mut store, &mut rng, "head.proj", width, config.attn_dim),
                    block: TransformerBlock::new(
                        &mut store,
                        &mut rng,
                        "head.block",
                        config.attn_dim,
                        config.attn_heads,
                        config.attn_ffn,
                    ),
                    pool: AttentionPoolingHead::new(&mut store, &mut rng, "head.pool", config.attn_dim, &config),
                })
            }
        };
        if config.freeze_backbone {
            store.set_trainable("backbone.", false);
        }
        Ok(Encoder { config, params: store, backbone, feature_shape, head })
    }

    fn check_volume(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.config.input_shape {
            return Err(Error::invalid(format!(
                "volume shape {:?} does not match the encoder input {:?}",
                v.dims(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Backbone forward pass inside `g`; the result is a head input node.
    fn backbone_forward(&self, g: &mut Graph, v: &Volume) -> Var {
        match self.config.extractor {
            ExtractorKind::Chunked2d => {
                let per_chunk: Vec<Var> = chunk_slices(v.depth())
                    .into_iter()
                    .map(|c| {
                        let mut x = g.input(chunk_tensor(v, c));
                        for layer in &self.backbone {
                            let y = layer.forward(g, x);
                            x = g.relu(y);
                        }
                        let width = g.value(x).len();
                        g.reshape(x, &[1, width])
                    })
                    .collect();
                let stacked = g.concat_rows(&per_chunk);
                let mut shape = vec![per_chunk.len()];
                shape.extend_from_slice(&self.feature_shape);
                g.reshape(stacked, &shape)
            }
            ExtractorKind::Whole3d => {
                let [d, h, w] = v.dims();
                let mut x = g.input(Tensor::new(vec![1, d, h, w], v.data().to_vec()));
                for layer in &self.backbone {
                    let y = layer.forward(g, x);
                    x = g.relu(y);
                }
                x
            }
        }
    }

    /// Runs the backbone alone. With a frozen backbone the result can be
    /// cached and fed to [`Encoder::forward_features`] repeatedly.
    pub fn extract_features(&self, v: &Volume) -> Result<Features> {
        self.check_volume(v)?;
        let mut g = Graph::new(&self.params);
        let x = self.backbone_forward(&mut g, v);
        let t = g.value(x).clone();
        Ok(match self.config.extractor {
            ExtractorKind::Chunked2d => Features::Chunked(FeatureMapStack { tensor: t }),
            ExtractorKind::Whole3d => Features::Whole(t),
        })
    }

    fn check_features(&self, f: &Features) -> Result<()> {
        let ok = match (self.config.extractor, f) {
            (ExtractorKind::Chunked2d, Features::Chunked(s)) => {
                s.tensor.shape()[1..] == self.feature_shape[..] && s.n_chunks() == self.config.n_chunks()
            }
            (ExtractorKind::Whole3d, Features::Whole(t)) => t.shape() == &self.feature_shape[..],
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("features do not match the encoder's extractor"))
        }
    }

    fn head_forward(&self, g: &mut Graph, x: Var) -> ClassifierOutput {
        let chunked = self.config.extractor == ExtractorKind::Chunked2d;
        match &self.head {
            Head::Conv3d(h) => {
                let mut x = if chunked {
                    let n = g.value(x).shape()[0];
                    let c = self.feature_shape[0];
                    let swapped = g.swap_axes(x, n, c);
                    g.reshape(swapped, &[c, n, self.feature_shape[1], self.feature_shape[2]])
                } else {
                    x
                };
                for conv in &h.convs {
                    let y = conv.forward(g, x);
                    x = g.relu(y);
                }
                let flat = g.value(x).len();
                let x = g.reshape(x, &[1, flat]);
                let a = h.fc1.forward(g, x);
                let a = g.relu(a);
                let pen = h.fc2.forward(g, a);
                let a = g.relu(pen);
                let logits = h.fc3.forward(g, a);
                ClassifierOutput { logits, penultimate: pen, attention: None }
            }
            Head::Attention(h) => {
                let n = g.value(x).shape()[0];
                let x = g.reshape(x, &[n, self.feature_shape.iter().product()]);
                let (w, pen, logits) = h.forward(g, x);
                ClassifierOutput { logits, penultimate: pen, attention: Some(w) }
            }
            Head::Transformer(h) => {
                let n = g.value(x).shape()[0];
                let x = g.reshape(x, &[n, self.feature_shape.iter().product()]);
                let x = h.proj.forward(g, x);
                let x = h.block.forward(g, x, false);
                let (w, pen, logits) = h.pool.forward(g, x);
                ClassifierOutput { logits, penultimate: pen, attention: Some(w) }
            }
        }
    }

    /// Head forward pass from precomputed features.
    pub fn forward_features(&self, g: &mut Graph, f: &Features) -> Result<ClassifierOutput> {
        self.check_features(f)?;
        let t = match f {
            Features::Chunked(s) => s.tensor.clone(),
            Features::Whole(t) => t.clone(),
        };
        let x = g.input(t);
        Ok(self.head_forward(g, x))
    }

    /// End-to-end forward pass, differentiable through the backbone.
    pub fn forward_volume(&self, g: &mut Graph, v: &Volume) -> Result<ClassifierOutput> {
        self.check_volume(v)?;
        let x = self.backbone_forward(g, v);
        Ok(self.head_forward(g, x))
    }

    fn prediction(g: &Graph, out: &ClassifierOutput) -> Prediction {
        let logits = g.value(out.logits).data().to_vec();
        Prediction {
            probabilities: logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect(),
            logits,
            penultimate: g.value(out.penultimate).data().to_vec(),
        }
    }

    pub fn predict_features(&self, f: &Features) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_features(&mut g, f)?;
        Ok(Self::prediction(&g, &out))
    }

    pub fn predict_volume(&self, v: &Volume) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_volume(&mut g, v)?;
        Ok(Self::prediction(&g, &out))
    }

    /// Per-sample BCE loss node from features or a volume.
    pub fn loss(&self, g: &mut Graph, input: &EncoderInput, labels: &[u8]) -> Result<Var> {
        if labels.len() != self.config.n_labels {
            return Err(Error::invalid(format!(
                "{} labels for a {}-label encoder",
                labels.len(),
                self.config.n_labels
            )));
        }
        let out = match input {
            EncoderInput::Features(f) => self.forward_features(g, f)?,
            EncoderInput::Volume(v) => self.forward_volume(g, v)?,
            EncoderInput::Injected { phantom, findings } => {
                self.forward_volume(g, &inject_findings(phantom, findings)?)?
            }
        };
        let y: Vec<f64> = labels.iter().map(|&b| f64::from(b)).collect();
        Ok(g.bce_with_logits(out.logits, &y))
    }

    /// Feature shape per chunk (chunked) or per volume (whole).
    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    /// Rows and row width of the decoder memories this encoder produces.
    pub fn memory_shape(&self, kind: MemoryKind) -> Result<(usize, usize)> {
        match kind {
            MemoryKind::Tokens => Ok((self.config.penultimate, 1)),
            MemoryKind::FeatureMap if self.config.extractor == ExtractorKind::Chunked2d => {
                Ok((self.config.n_chunks(), self.feature_shape[1] * self.feature_shape[2]))
            }
            MemoryKind::FeatureMap => Err(Error::config("feature-map memories need the chunked extractor")),
        }
    }

    /// Decoder memory for `f`: the quantised penultimate activations, or
    /// the channel-mean map of every chunk.
    pub fn memory(&self, f: &Features, kind: MemoryKind) -> Result<Memory> {
        self.memory_shape(kind)?;
        Ok(match kind {
            MemoryKind::Tokens => Memory::Tokens(to_token_representation(&self.predict_features(f)?.penultimate)),
            MemoryKind::FeatureMap => {
                let stack = f.stack().ok_or_else(|| Error::invalid("expected chunked features"))?;
                Memory::FeatureMap(channel_mean_maps(stack))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub enum EncoderInput {
    Features(Features),
    Volume(Volume),
    /// A shared phantom with findings applied on demand, so a large dataset
    /// need not hold every injected volume in memory.
    Injected { phantom: Arc<Phantom>, findings: Findings },
}

impl EncoderInput {
    pub fn predict(&self, encoder: &Encoder) -> Result<Prediction> {
        match self {
            EncoderInput::Features(f) => encoder.predict_features(f),
            EncoderInput::Volume(v) => encoder.predict_volume(v),
            EncoderInput::Injected { phantom, findings } => {
                encoder.predict_volume(&inject_findings(phantom, findings)?)
            }
        }
    }

    /// Backbone features of this input.
    pub fn features(&self, encoder: &Encoder) -> Result<Features> {
        match self {
            EncoderInput::Features(f) => Ok(f.clone()),
            EncoderInput::Volume(v) => encoder.extract_features(v),
            EncoderInput::Injected { phantom, findings } => {
                encoder.extract_features(&inject_findings(phantom, findings)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderSample {
    pub input: EncoderInput,
    pub labels: Vec<u8>,
}
