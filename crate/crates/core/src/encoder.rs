//! The IBERT encoder: joint token/segment/position embeddings, multi-head
//! self-attention with an additive normal bias on the scores, and post-norm
//! Transformer blocks.

use iskg_numerics::{NumericsError, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ModelError;

/// Row of the token table used for out-of-vocabulary ids.
pub const UNK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    TrainOnly,
    Always,
    Off,
}

/// The attention-score bias `n ~ N(0, sigma²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            mode: NoiseMode::TrainOnly,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self {
            sigma: 0.0,
            mode: NoiseMode::Off,
        }
    }

    /// Whether a forward pass in the given phase draws a bias at all.
    pub fn active(&self, training: bool) -> bool {
        self.sigma > 0.0
            && match self.mode {
                NoiseMode::Off => false,
                NoiseMode::Always => true,
                NoiseMode::TrainOnly => training,
            }
    }

    /// A sampler for one forward pass, or `None` when the bias is inactive.
    pub fn sampler(&self, training: bool, rng: Rng) -> Option<BiasSampler> {
        self.active(training).then(|| BiasSampler::new(self.sigma, rng))
    }
}

/// Draws the `n × n` i.i.d. bias matrices for one forward pass.
#[derive(Clone, Debug)]
pub struct BiasSampler {
    sigma: f64,
    rng: Rng,
}

impl BiasSampler {
    pub fn new(sigma: f64, rng: Rng) -> Self {
        Self { sigma, rng }
    }

    pub fn sample(&mut self, n: usize) -> Tensor {
        let data = (0..n * n).map(|_| self.rng.normal(0.0, self.sigma)).collect();
        Tensor::new(vec![n, n], data).expect("square shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_tok: usize,
    pub d_seg: usize,
    pub n_seg: usize,
    pub d_pos: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub noise: NoiseConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_tok: 768,
            d_seg: 20,
            n_seg: 2,
            d_pos: 128,
            max_len: 256,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            layers: 2,
            noise: NoiseConfig::default(),
        }
    }
}

impl EncoderConfig {
    /// Width of the concatenated embedding before projection.
    pub fn joint_width(&self) -> usize {
        self.d_tok + self.d_seg + self.d_pos
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_tok == 0 || self.d_seg == 0 || self.d_pos == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("encoder dimensions must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.n_seg == 0 || self.max_len == 0 {
            return bad("n_seg and max_len must be positive");
        }
        if !(self.noise.sigma >= 0.0) {
            return bad("noise sigma must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub projection: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub attention: AttentionParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: EmbeddingTables,
    pub blocks: Vec<TransformerBlock>,
}

const EMBED_STD: f64 = 0.1;

impl Encoder {
    /// Registers fresh parameters named `enc.*` in `store`.
    pub fn new(config: EncoderConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let embedding = EmbeddingTables {
            token: store.add_normal("enc.emb.token", vocab_size.max(1), c.d_tok, EMBED_STD, rng),
            segment: store.add_normal("enc.emb.segment", c.n_seg, c.d_seg, EMBED_STD, rng),
            position: store.add_normal("enc.emb.position", c.max_len, c.d_pos, EMBED_STD, rng),
            projection: store.add_glorot("enc.emb.projection", c.joint_width(), c.d_model, rng),
        };
        let blocks = (0..c.layers)
            .map(|l| {
                let p = |s: &str| format!("enc.block{l}.{s}");
                TransformerBlock {
                    attention: AttentionParams {
                        w_q: store.add_glorot(p("w_q"), c.d_model, c.d_model, rng),
                        w_k: store.add_glorot(p("w_k"), c.d_model, c.d_model, rng),
                        w_v: store.add_glorot(p("w_v"), c.d_model, c.d_model, rng),
                        heads: c.heads,
                    },
                    w1: store.add_glorot(p("ffn.w1"), c.d_model, c.d_ff, rng),
                    b1: store.add(p("ffn.b1"), Tensor::zeros(&[1, c.d_ff])),
                    w2: store.add_glorot(p("ffn.w2"), c.d_ff, c.d_model, rng),
                    b2: store.add(p("ffn.b2"), Tensor::zeros(&[1, c.d_model])),
                    ln1_gain: store.add(p("ln1.gain"), Tensor::full(&[1, c.d_model], 1.0)),
                    ln1_bias: store.add(p("ln1.bias"), Tensor::zeros(&[1, c.d_model])),
                    ln2_gain: store.add(p("ln2.gain"), Tensor::full(&[1, c.d_model], 1.0)),
                    ln2_bias: store.add(p("ln2.bias"), Tensor::zeros(&[1, c.d_model])),
                }
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    /// Looks up and concatenates the three embeddings per token, then
    /// projects to `d_model`. Unknown token ids map to [`UNK`].
    pub fn embed(&self, tape: &mut Tape, token_ids: &[usize], segment_ids: &[usize], positions: &[usize]) -> Result<Var, ModelError> {
        let n = token_ids.len();
        if segment_ids.len() != n || positions.len() != n {
            return Err(ModelError::Config("token, segment and position ids must have equal length".into()));
        }
        let c = &self.config;
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, c.d_model])));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= c.max_len) {
            return Err(ModelError::TooLong { len: p + 1, max: c.max_len });
        }
        if let Some(&s) = segment_ids.iter().find(|&&s| s >= c.n_seg) {
            return Err(ModelError::Config(format!("segment id {s} out of range")));
        }
        let vocab = tape.params().value(self.embedding.token).rows();
        let ids: Vec<usize> = token_ids.iter().map(|&t| if t < vocab { t } else { UNK }).collect();
        let table = tape.param(self.embedding.token);
        let tok = tape.gather_rows(table, &ids);
        let table = tape.param(self.embedding.segment);
        let seg = tape.gather_rows(table, segment_ids);
        let table = tape.param(self.embedding.position);
        let pos = tape.gather_rows(table, positions);
        let joint = tape.concat_cols(&[tok, seg, pos]);
        let proj = tape.param(self.embedding.projection);
        Ok(tape.matmul(joint, proj))
    }

    /// `embed` followed by every block. Segment ids are all 0 and
    /// positions count from 0.
    pub fn encode(&self, tape: &mut Tape, token_ids: &[usize], noise: &mut Option<BiasSampler>) -> Result<Var, ModelError> {
        let n = token_ids.len();
        if n == 0 {
            return Err(ModelError::Empty);
        }
        if n > self.config.max_len {
            return Err(ModelError::TooLong { len: n, max: self.config.max_len });
        }
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed(tape, token_ids, &vec![0; n], &positions)?;
        for block in &self.blocks {
            x = transformer_block(tape, x, block, noise);
        }
        Ok(x)
    }
}

/// `(q·kᵀ + n_bias) / √d_k`: entry `[i, j]` scores query `i` against key `j`.
pub fn attention_scores(k: &Tensor, q: &Tensor, n_bias: Option<&Tensor>, d_k: usize) -> Result<Tensor, NumericsError> {
    let mut s = q.matmul_nt(k)?;
    if let Some(n) = n_bias {
        s = s.add(n)?;
    }
    Ok(s.scale(1.0 / (d_k as f64).sqrt()))
}

/// Multi-head self-attention. Each head uses its own column slice of the
/// shared `W_q`, `W_k`, `W_v`; head outputs are concatenated. A bias matrix
/// is drawn per head when `noise` is present; it is a constant on the tape.
pub fn self_attention(tape: &mut Tape, a: Var, params: &AttentionParams, noise: &mut Option<BiasSampler>) -> Var {
    let n = tape.value(a).rows();
    let d_model = tape.value(a).cols();
    let d_k = d_model / params.heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let wq = tape.param(params.w_q);
    let wk = tape.param(params.w_k);
    let wv = tape.param(params.w_v);
    let q = tape.matmul(a, wq);
    let k = tape.matmul(a, wk);
    let v = tape.matmul(a, wv);
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (lo, hi) = (h * d_k, (h + 1) * d_k);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let mut s = tape.matmul_nt(qh, kh);
        if let Some(sampler) = noise.as_mut() {
            let bias = tape.constant(sampler.sample(n));
            s = tape.add(s, bias);
        }
        let s = tape.scale(s, scale);
        let p = tape.softmax(s);
        heads.push(tape.matmul(p, vh));
    }
    if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    }
}

/// Post-norm block: `h = LN(a + attn(a))`, `out = LN(h + FFN(h))`.
pub fn transformer_block(tape: &mut Tape, a: Var, block: &TransformerBlock, noise: &mut Option<BiasSampler>) -> Var {
    let c = self_attention(tape, a, &block.attention, noise);
    let ac = tape.add(a, c);
    let (g1, b1) = (tape.param(block.ln1_gain), tape.param(block.ln1_bias));
    let h = tape.layer_norm(ac, g1, b1);
    let f = feed_forward(tape, h, block);
    let hf = tape.add(h, f);
    let (g2, b2) = (tape.param(block.ln2_gain), tape.param(block.ln2_bias));
    tape.layer_norm(hf, g2, b2)
}

fn feed_forward(tape: &mut Tape, h: Var, block: &TransformerBlock) -> Var {
    let (w1, b1, w2, b2) = (
        tape.param(block.w1),
        tape.param(block.b1),
        tape.param(block.w2),
        tape.param(block.b2),
    );
    let z = tape.matmul(h, w1);
    let z = tape.add_row(z, b1);
    let z = tape.relu(z);
    let z = tape.matmul(z, w2);
    tape.add_row(z, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_tok: 8,
            d_seg: 3,
            d_pos: 5,
            max_len: 16,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            layers: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn joint_width_at_paper_defaults() {
        assert_eq!(EncoderConfig::default().joint_width(), 916);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { heads: 3, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn empty_embedding_and_overlength() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small(), 10, &mut store, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::with_params(&store);
        let e = enc.embed(&mut tape, &[], &[], &[]).unwrap();
        assert_eq!(tape.value(e).shape(), &[0, 8]);
        let ids = vec![1; 17];
        assert!(matches!(
            enc.encode(&mut tape, &ids, &mut None),
            Err(ModelError::TooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn same_token_different_positions_differ() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small(), 10, &mut store, &mut Rng::new(2)).unwrap();
        let mut tape = Tape::with_params(&store);
        let e = enc.embed(&mut tape, &[4, 4], &[0, 0], &[0, 1]).unwrap();
        let v = tape.value(e);
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn unknown_ids_use_the_unk_row() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small(), 10, &mut store, &mut Rng::new(3)).unwrap();
        let mut tape = Tape::with_params(&store);
        let a = enc.embed(&mut tape, &[UNK], &[0], &[0]).unwrap();
        let b = enc.embed(&mut tape, &[999], &[0], &[0]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn scalar_score() {
        let one = Tensor::from_rows(&[vec![1.0]]);
        assert_eq!(attention_scores(&one, &one, None, 1).unwrap().item(), 1.0);
        assert_eq!(attention_scores(&one, &one, Some(&Tensor::zeros(&[1, 1])), 1).unwrap().item(), 1.0);
    }

    #[test]
    fn noise_modes() {
        let c = NoiseConfig::default();
        assert!(c.active(true) && !c.active(false));
        assert!(NoiseConfig { mode: NoiseMode::Always, ..c }.active(false));
        assert!(!NoiseConfig { sigma: 0.0, mode: NoiseMode::Always }.active(true));
        assert!(!NoiseConfig::off().active(true));
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small(), 10, &mut store, &mut Rng::new(4)).unwrap();
        let mut tape = Tape::with_params(&store);
        let out = enc.encode(&mut tape, &[1, 2, 3], &mut None).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 8]);
    }
}
