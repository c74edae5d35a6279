//! Autoregressive transformer decoder conditioned on an encoded image.
//!
//! In cross-attention mode every block attends over the image memory after
//! its causal self-attention. In prefix mode the embedded image rows are
//! prepended to the text and the whole sequence runs through causal
//! self-attention only; outputs at image positions never reach the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volrep_core::report::{TokenId, EOS, PAD, SOS};

use crate::encoder::TOKEN_LEVELS;
use crate::graph::{Graph, Var};
use crate::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{argmax, Tensor};
use crate::{Error, Result};

pub const ARCHITECTURE: &str = "volrep-decoder-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    CrossAttention,
    PrefixTokens,
}

/// Which encoded-image representation the decoder consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Tokens,
    FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest text sequence, SOS and EOS included.
    pub max_len: usize,
    pub conditioning: Conditioning,
    pub memory: MemoryKind,
    /// Memory rows: 100 image tokens, or one row per chunk.
    pub memory_len: usize,
    /// Flattened map size `fh·fw` for feature-map memories.
    pub memory_width: usize,
    /// Learned position embedding on feature-map memory rows. Token memories
    /// always carry one, since a token's meaning depends on its index.
    pub memory_positions: bool,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_blocks: 6,
            model_dim: 224,
            n_heads: 8,
            ffn_dim: 512,
            vocab_size: 64,
            max_len: 64,
            conditioning: Conditioning::CrossAttention,
            memory: MemoryKind::Tokens,
            memory_len: 100,
            memory_width: 64,
            memory_positions: true,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    /// Two narrow blocks, small enough to train in minutes on one core.
    pub fn compact() -> Self {
        DecoderConfig { n_blocks: 2, model_dim: 48, n_heads: 4, ffn_dim: 96, max_len: 56, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.ffn_dim == 0 {
            return Err(Error::config("n_blocks and ffn_dim must be positive"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must leave room for SOS and EOS"));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::config("vocabulary must contain the special tokens"));
        }
        if self.memory_len == 0 || (self.memory == MemoryKind::FeatureMap && self.memory_width == 0) {
            return Err(Error::config("memory dimensions must be positive"));
        }
        Ok(())
    }
}

/// One encoded image as the decoder sees it.
#[derive(Clone, Debug, PartialEq)]
pub enum Memory {
    /// Integer tokens in `0..100`.
    Tokens(Vec<u32>),
    /// Channel-averaged maps, `[n_chunks, fh·fw]`, before projection.
    FeatureMap(Tensor),
}

#[derive(Clone, Debug)]
enum MemoryEncoder {
    Tokens { values: Embedding, positions: Embedding },
    FeatureMap { projector: Linear, positions: Option<Embedding> },
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    fn forward(&self, g: &mut Graph, x: Var, memory: Option<Var>) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, true);
        let mut x = g.add(x, a);
        if let (Some((ln, attn)), Some(m)) = (&self.cross, memory) {
            let h = ln.forward(g, x);
            let c = attn.forward(g, h, m, false);
            x = g.add(x, c);
        }
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Starts with SOS; ends with EOS when `stop_reason` is `Eos`.
    pub ids: Vec<TokenId>,
    /// Distribution that produced each id after SOS.
    pub distributions: Vec<Vec<f64>>,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
    tokens: Embedding,
    positions: Embedding,
    memory: MemoryEncoder,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    out: Linear,
}

/// Graph handles of one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[rows, vocab]`; in prefix mode the first `text_offset` rows belong to
    /// image positions.
    pub logits: Var,
    pub text_offset: usize,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Decoder> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let tokens = Embedding::new(&mut store, &mut rng, "tokens", config.vocab_size, d);
        let positions = Embedding::new(&mut store, &mut rng, "positions", config.max_len, d);
        let memory = match config.memory {
            MemoryKind::Tokens => MemoryEncoder::Tokens {
                values: Embedding::new(&mut store, &mut rng, "memory.values", TOKEN_LEVELS as usize, d),
                positions: Embedding::new(&mut store, &mut rng, "memory.positions", config.memory_len, d),
            },
            MemoryKind::FeatureMap => MemoryEncoder::FeatureMap {
                projector: Linear::new(&mut store, &mut rng, "memory.projector", config.memory_width, d),
                positions: config
                    .memory_positions
                    .then(|| Embedding::new(&mut store, &mut rng, "memory.positions", config.memory_len, d)),
            },
        };
        let cross = config.conditioning == Conditioning::CrossAttention;
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let name = format!("block{i}");
                DecoderBlock {
                    ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), d),
                    self_attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("{name}.self"), d, config.n_heads),
                    cross: cross.then(|| {
                        (
                            LayerNorm::new(&mut store, &format!("{name}.ln_cross"), d),
                            MultiHeadAttention::new(&mut store, &mut rng, &format!("{name}.cross"), d, config.n_heads),
                        )
                    }),
                    ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), d),
                    ffn: FeedForward::new(&mut store, &mut rng, &format!("{name}.ffn"), d, config.ffn_dim),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let out = Linear::new(&mut store, &mut rng, "out", d, config.vocab_size);
        Ok(Decoder { config, params: store, tokens, positions, memory, blocks, ln_f, out })
    }

    pub fn check_memory(&self, m: &Memory) -> Result<()> {
        let c = &self.config;
        match (c.memory, m) {
            (MemoryKind::Tokens, Memory::Tokens(t)) => {
                if t.len() != c.memory_len {
                    return Err(Error::invalid(format!("{} image tokens, expected {}", t.len(), c.memory_len)));
                }
                if let Some(&bad) = t.iter().find(|&&v| v >= TOKEN_LEVELS) {
                    return Err(Error::invalid(format!("image token {bad} outside 0..{TOKEN_LEVELS}")));
                }
            }
            (MemoryKind::FeatureMap, Memory::FeatureMap(t)) => {
                if t.shape() != [c.memory_len, c.memory_width] {
                    return Err(Error::config(format!(
                        "feature-map memory of shape {:?} does not fit a projector for [{}, {}]",
                        t.shape(),
                        c.memory_len,
                        c.memory_width
                    )));
                }
            }
            _ => return Err(Error::invalid("memory representation does not match the decoder")),
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.first() != Some(&SOS) {
            return Err(Error::invalid("token sequence must start with SOS"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Embedded memory rows `[memory_len, model_dim]`.
    pub fn encode_memory(&self, g: &mut Graph, m: &Memory) -> Result<Var> {
        self.check_memory(m)?;
        let idx: Vec<usize> = (0..self.config.memory_len).collect();
        Ok(match (&self.memory, m) {
            (MemoryEncoder::Tokens { values, positions }, Memory::Tokens(t)) => {
                let ids: Vec<usize> = t.iter().map(|&v| v as usize).collect();
                let v = values.forward(g, &ids);
                let p = positions.forward(g, &idx);
                g.add(v, p)
            }
            (MemoryEncoder::FeatureMap { projector, positions }, Memory::FeatureMap(t)) => {
                let x = g.input(t.clone());
                let x = projector.forward(g, x);
                match positions {
                    Some(p) => {
                        let p = p.forward(g, &idx);
                        g.add(x, p)
                    }
                    None => x,
                }
            }
            _ => unreachable!("checked above"),
        })
    }

    /// Forward pass over `ids` (no trailing target) conditioned on `m`.
    pub fn forward(&self, g: &mut Graph, ids: &[TokenId], m: &Memory) -> Result<DecoderOutput> {
        self.check_ids(ids)?;
        let mem = self.encode_memory(g, m)?;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = self.tokens.forward(g, &idx);
        let pos: Vec<usize> = (0..ids.len()).collect();
        let pos = self.positions.forward(g, &pos);
        let text = g.add(tok, pos);
        let (mut x, memory, text_offset) = match self.config.conditioning {
            Conditioning::CrossAttention => (text, Some(mem), 0),
            Conditioning::PrefixTokens => (g.concat_rows(&[mem, text]), None, self.config.memory_len),
        };
        for block in &self.blocks {
            x = block.forward(g, x, memory);
        }
        let x = self.ln_f.forward(g, x);
        let logits = self.out.forward(g, x);
        Ok(DecoderOutput { logits, text_offset })
    }

    /// Mean next-token cross-entropy over the text positions of `reference`
    /// (SOS … EOS). Image positions in prefix mode are masked out.
    pub fn loss(&self, g: &mut Graph, reference: &[TokenId], m: &Memory) -> Result<Var> {
        if reference.len() < 2 {
            return Err(Error::invalid("reference needs at least SOS and one target"));
        }
        let n = reference.len() - 1;
        let out = self.forward(g, &reference[..n], m)?;
        let rows = out.text_offset + n;
        let mut targets = vec![0usize; rows];
        let mut mask = vec![false; rows];
        for (i, &t) in reference[1..].iter().enumerate() {
            targets[out.text_offset + i] = t as usize;
            mask[out.text_offset + i] = true;
        }
        Ok(g.cross_entropy(out.logits, &targets, &mask))
    }

    /// Softmax rows of the text logits.
    fn text_distributions(g: &Graph, out: &DecoderOutput) -> Vec<Vec<f64>> {
        let t = g.value(out.logits);
        (out.text_offset..t.rows()).map(|r| softmax(t.row_slice(r))).collect()
    }

    /// Distributions for positions `1..len(reference)`, each conditioned on
    /// the reference tokens before it.
    pub fn teacher_forced(&self, reference: &[TokenId], m: &Memory) -> Result<Vec<Vec<f64>>> {
        if reference.len() < 2 {
            return Err(Error::invalid("reference needs at least SOS and one target"));
        }
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, &reference[..reference.len() - 1], m)?;
        Ok(Self::text_distributions(&g, &out))
    }

    /// Next-token distribution after `prefix`.
    pub fn decode_step(&self, prefix: &[TokenId], m: &Memory) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, prefix, m)?;
        let t = g.value(out.logits);
        Ok(softmax(t.row_slice(t.rows() - 1)))
    }

    /// Greedy decoding from SOS until EOS or `max_len` tokens.
    pub fn generate(&self, m: &Memory, max_len: usize) -> Result<GenerationResult> {
        let limit = max_len.min(self.config.max_len);
        let mut ids = vec![SOS];
        let mut distributions = Vec::new();
        while ids.len() < limit {
            let dist = self.decode_step(&ids, m)?;
            let next = best_emittable(&dist);
            ids.push(next);
            distributions.push(dist);
            if next == EOS {
                return Ok(GenerationResult { ids, distributions, stop_reason: StopReason::Eos });
            }
        }
        Ok(GenerationResult { ids, distributions, stop_reason: StopReason::MaxLen })
    }
}

/// Most probable token other than PAD and SOS, which never follow a prefix.
fn best_emittable(dist: &[f64]) -> TokenId {
    let skip = (SOS as usize).max(PAD as usize) + 1;
    (skip + argmax(&dist[skip..])) as TokenId
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_size_is_about_four_million() {
        let d = Decoder::new(DecoderConfig::default()).unwrap();
        let n = d.params.count();
        assert!((3_500_000..4_500_000).contains(&n), "{n}");
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = DecoderConfig { model_dim: 30, n_heads: 4, ..Default::default() };
        assert!(matches!(Decoder::new(cfg), Err(Error::Config(_))));
    }
}
