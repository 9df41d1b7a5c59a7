//! HAINEX: the encoder, BiLSTM context layer and CRF decoder composed into
//! one extraction model, with its vocabulary and checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use iskg_numerics::{checkpoint, NumericsError, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{bilstm_encode, LstmParams};
use crate::corpus::{decode_lenient, tokenize, BioLabel, LabeledSentence, Span, Tokenizer, NUM_LABELS};
use crate::decoder::{self, IlConfig, IlNoise};
use crate::encoder::{BiasSampler, Encoder, EncoderConfig, UNK};
use crate::iskf::EntityClass;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty sentence")]
    Empty,
    #[error("sentence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Token inventory; id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Tokens in order of first appearance, after the UNK entry.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a LabeledSentence>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::from([(UNK_TOKEN.to_string(), UNK)]);
        for s in sentences {
            for t in &s.tokens {
                if !index.contains_key(&t.text) {
                    index.insert(t.text.clone(), tokens.len());
                    tokens.push(t.text.clone());
                }
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn ids<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mle,
    #[default]
    Il,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    /// LSTM input width; when it differs from `d_model` a linear layer maps
    /// the encoder output to it.
    pub lstm_input: Option<usize>,
    pub il: IlConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale dimensions used for the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                d_tok: 64,
                d_seg: 20,
                d_pos: 128,
                max_len: 128,
                d_model: 64,
                heads: 4,
                d_ff: 128,
                layers: 2,
                ..EncoderConfig::default()
            },
            hidden: 64,
            lstm_input: None,
            il: IlConfig::default(),
        }
    }

    /// A very small model for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                d_tok: 6,
                d_seg: 2,
                d_pos: 3,
                max_len: 64,
                d_model: 4,
                heads: 2,
                d_ff: 5,
                layers: 1,
                ..EncoderConfig::default()
            },
            hidden: 3,
            lstm_input: None,
            il: IlConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden == 0 || self.lstm_input == Some(0) {
            return Err(ModelError::Config("hidden and lstm_input must be positive".into()));
        }
        self.il.validate().map_err(ModelError::Config)
    }
}

/// A span found in raw text, with codepoint offsets into that text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedSpan {
    pub text: String,
    pub class: EntityClass,
    /// Token range, end exclusive.
    pub token_start: usize,
    pub token_end: usize,
    /// Codepoint range in the source text, end exclusive.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    vocab: Vocab,
    tokenizer: Tokenizer,
}

#[derive(Clone, Debug)]
pub struct Hainex {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub input_projection: Option<ParamId>,
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    pub emit_w: ParamId,
    pub emit_b: ParamId,
    pub transitions: ParamId,
    pub s_raw: ParamId,
}

impl Hainex {
    pub fn new(config: ModelConfig, vocab: Vocab, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), vocab.len(), &mut store, &mut rng)?;
        let d_model = config.encoder.d_model;
        let lstm_in = config.lstm_input.unwrap_or(d_model);
        let input_projection =
            (lstm_in != d_model).then(|| store.add_glorot("ctx.input_projection", d_model, lstm_in, &mut rng));
        let lstm_fwd = LstmParams::new("ctx.fwd", lstm_in, config.hidden, &mut store, &mut rng);
        let lstm_bwd = LstmParams::new("ctx.bwd", lstm_in, config.hidden, &mut store, &mut rng);
        let emit_w = store.add_glorot("crf.emission.w", 2 * config.hidden, NUM_LABELS, &mut rng);
        let emit_b = store.add("crf.emission.b", Tensor::zeros(&[1, NUM_LABELS]));
        let transitions = store.add("crf.transitions", decoder::initial_transitions(NUM_LABELS));
        let s_raw = store.add("crf.s_raw", Tensor::scalar(config.il.s_raw_init));
        Ok(Self {
            config,
            vocab,
            tokenizer,
            store,
            encoder,
            input_projection,
            lstm_fwd,
            lstm_bwd,
            emit_w,
            emit_b,
            transitions,
            s_raw,
        })
    }

    /// Encoder → BiLSTM → emission projection; returns the `n × 11`
    /// emission scores.
    pub fn forward(&self, tape: &mut Tape, token_ids: &[usize], noise: &mut Option<BiasSampler>) -> Result<Var> {
        let mut x = self.encoder.encode(tape, token_ids, noise)?;
        if let Some(p) = self.input_projection {
            let w = tape.param(p);
            x = tape.matmul(x, w);
        }
        let ctx = bilstm_encode(tape, x, &self.lstm_fwd, &self.lstm_bwd);
        let (w, b) = (tape.param(self.emit_w), tape.param(self.emit_b));
        let e = tape.matmul(ctx, w);
        Ok(tape.add_row(e, b))
    }

    /// Training loss of one sentence. `rng` drives the attention bias
    /// (when active in training) and the IL perturbation noise.
    pub fn loss(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        gold: &[usize],
        kind: LossKind,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut sampler = self.config.encoder.noise.sampler(training, Rng::new(rng.next_u64()));
        let em = self.forward(tape, token_ids, &mut sampler)?;
        let tr = tape.param(self.transitions);
        Ok(match kind {
            LossKind::Mle => decoder::tape_loss_mle(tape, em, tr, gold),
            LossKind::Il => {
                let il = &self.config.il;
                let noise = IlNoise::sample(token_ids.len(), NUM_LABELS, il.noise_scale, rng);
                let s_raw = tape.param(self.s_raw);
                decoder::tape_loss_il(tape, em, tr, s_raw, gold, il, noise)
            }
        })
    }

    /// Deterministic evaluation-mode emissions.
    pub fn emissions(&self, token_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.store);
        let mut sampler = self.config.encoder.noise.sampler(false, Rng::new(0));
        let e = self.forward(&mut tape, token_ids, &mut sampler)?;
        Ok(tape.value(e).clone())
    }

    pub fn predict_ids(&self, token_ids: &[usize]) -> Result<Vec<BioLabel>> {
        let e = self.emissions(token_ids)?;
        let (path, _) = decoder::viterbi(&e, self.store.value(self.transitions));
        Ok(path
            .into_iter()
            .map(|i| BioLabel::from_index(i).expect("label index in range"))
            .collect())
    }

    pub fn predict(&self, words: &[&str]) -> Result<Vec<BioLabel>> {
        self.predict_ids(&self.vocab.ids(words.iter().copied()))
    }

    /// Tokenizes, labels and decodes raw text. Ill-formed label runs are
    /// dropped.
    pub fn extract(&self, text: &str) -> Result<(Vec<BioLabel>, Vec<ExtractedSpan>)> {
        let toks = tokenize(text, self.tokenizer);
        if toks.is_empty() {
            return Err(ModelError::Empty);
        }
        let labels = self.predict_ids(&self.vocab.ids(toks.iter().map(|t| t.text.as_str())))?;
        let chars: Vec<char> = text.chars().collect();
        let spans = decode_lenient(&labels)
            .spans
            .into_iter()
            .map(|s: Span| {
                let (start, end) = (toks[s.start].start, toks[s.end - 1].end);
                ExtractedSpan {
                    text: chars[start..end].iter().collect(),
                    class: s.class,
                    token_start: s.start,
                    token_end: s.end,
                    start,
                    end,
                }
            })
            .collect();
        Ok((labels, spans))
    }

    /// Current IL threshold `s = σ(s_raw)`.
    pub fn threshold(&self) -> f64 {
        iskg_numerics::sigmoid(self.store.value(self.s_raw).item())
    }

    /// Writes `base.json` (manifest with config, vocabulary and tokenizer)
    /// and `base.bin`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let meta = Metadata {
            model: self.config.clone(),
            vocab: self.vocab.clone(),
            tokenizer: self.tokenizer,
        };
        let meta = serde_json::to_value(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        checkpoint::save(&self.store, meta, base)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(base)?;
        let meta: Metadata = serde_json::from_value(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(meta.model, meta.vocab, meta.tokenizer, 0)?;
        if model.store.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, want), (_, got)) in model.store.iter().zip(store.iter()) {
            if want.name != got.name {
                return Err(ModelError::Checkpoint(format!("expected parameter {}, found {}", want.name, got.name)));
            }
        }
        model.store.copy_values_from(&store)?;
        Ok(model)
    }
}
