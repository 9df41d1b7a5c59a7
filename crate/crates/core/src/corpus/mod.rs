//! Tokenized, BIO-labelled HAZOP descriptions: the on-disk corpus format,
//! span encoding/decoding, splitting, and a synthetic corpus generator.

mod synth;

use std::fmt;
use std::str::FromStr;

use iskg_numerics::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iskf::EntityClass;

pub use synth::{generate_synthetic, SynthCorpus, SynthGrammar, Template};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("ill-formed BIO at position {position}: {label} cannot follow {previous}")]
    IllFormed {
        position: usize,
        label: BioLabel,
        previous: BioLabel,
    },
    #[error("span {start}..{end} is empty or out of bounds for {len} tokens")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("spans {0:?} and {1:?} overlap")]
    Overlap((usize, usize), (usize, usize)),
    #[error("dataset has {0} sentences; splitting needs at least 10")]
    TooSmall(usize),
    #[error("bad split ratio `{0}`")]
    BadRatio(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Number of distinct BIO labels: O plus B/I for each of the five classes.
pub const NUM_LABELS: usize = 1 + 2 * EntityClass::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioLabel {
    O,
    B(EntityClass),
    I(EntityClass),
}

impl BioLabel {
    /// Dense index: `O` = 0, then `B-X`, `I-X` pairs in class order.
    pub fn index(self) -> usize {
        let class_pos = |c: EntityClass| EntityClass::ALL.iter().position(|&x| x == c).expect("known class");
        match self {
            Self::O => 0,
            Self::B(c) => 1 + 2 * class_pos(c),
            Self::I(c) => 2 + 2 * class_pos(c),
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::O),
            i if i < NUM_LABELS => {
                let c = EntityClass::ALL[(i - 1) / 2];
                Some(if i % 2 == 1 { Self::B(c) } else { Self::I(c) })
            }
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = BioLabel> {
        (0..NUM_LABELS).map(|i| Self::from_index(i).expect("in range"))
    }

    pub fn class(self) -> Option<EntityClass> {
        match self {
            Self::O => None,
            Self::B(c) | Self::I(c) => Some(c),
        }
    }

    /// Whether `self` may directly follow `prev` in well-formed BIO.
    pub fn may_follow(self, prev: BioLabel) -> bool {
        match self {
            Self::I(c) => matches!(prev, Self::B(p) | Self::I(p) if p == c),
            _ => true,
        }
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::O => f.write_str("O"),
            Self::B(c) => write!(f, "B-{}", c.tag()),
            Self::I(c) => write!(f, "I-{}", c.tag()),
        }
    }
}

impl FromStr for BioLabel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Self::O);
        }
        let unknown = || CorpusError::UnknownLabel(s.to_string());
        let (prefix, tag) = s.split_once('-').ok_or_else(unknown)?;
        let class = EntityClass::from_tag(tag).ok_or_else(unknown)?;
        match prefix {
            "B" => Ok(Self::B(class)),
            "I" => Ok(Self::I(class)),
            _ => Err(unknown()),
        }
    }
}

impl Serialize for BioLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

/// End-exclusive token span with its class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub class: EntityClass,
}

impl Span {
    pub fn new(start: usize, end: usize, class: EntityClass) -> Self {
        Self { start, end, class }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub id: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<BioLabel>,
}

impl LabeledSentence {
    /// Builds a sentence from token strings and spans.
    pub fn from_spans(id: impl Into<String>, words: &[&str], spans: &[Span]) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            tokens: make_tokens(words.iter().copied()),
            labels: bio_encode(words.len(), spans)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn spans(&self) -> Result<Vec<Span>> {
        bio_decode(&self.labels)
    }

    /// Surface text of the tokens in `span`, joined per the tokenizer.
    pub fn span_text(&self, span: &Span, tokenizer: Tokenizer) -> String {
        join_tokens(
            self.tokens[span.start..span.end].iter().map(|t| t.text.as_str()),
            tokenizer,
        )
    }
}

fn make_tokens<'a>(words: impl Iterator<Item = &'a str>) -> Vec<Token> {
    words
        .enumerate()
        .map(|(index, text)| Token {
            text: text.to_string(),
            index,
        })
        .collect()
}

pub fn bio_encode(len: usize, spans: &[Span]) -> Result<Vec<BioLabel>> {
    let mut labels = vec![BioLabel::O; len];
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for s in &sorted {
        if s.start >= s.end || s.end > len {
            return Err(CorpusError::BadSpan {
                start: s.start,
                end: s.end,
                len,
            });
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(CorpusError::Overlap((w[0].start, w[0].end), (w[1].start, w[1].end)));
        }
    }
    for s in sorted {
        labels[s.start] = BioLabel::B(s.class);
        for l in &mut labels[s.start + 1..s.end] {
            *l = BioLabel::I(s.class);
        }
    }
    Ok(labels)
}

/// Strict decoding: maximal `B I*` runs become spans; any `I` that does not
/// continue a same-class run is an error.
pub fn bio_decode(labels: &[BioLabel]) -> Result<Vec<Span>> {
    let decoded = decode_lenient(labels);
    if let Some(frag) = decoded.ill_formed.first() {
        let previous = if frag.start == 0 { BioLabel::O } else { labels[frag.start - 1] };
        return Err(CorpusError::IllFormed {
            position: frag.start,
            label: labels[frag.start],
            previous,
        });
    }
    Ok(decoded.spans)
}

pub fn is_well_formed(labels: &[BioLabel]) -> bool {
    let mut prev = BioLabel::O;
    labels.iter().all(|&l| {
        let ok = l.may_follow(prev);
        prev = l;
        ok
    })
}

/// Decoded spans, with ill-formed runs (an `I-X` that does not continue a
/// same-class run, plus its `I-X` continuation) reported separately.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decoded {
    pub spans: Vec<Span>,
    pub ill_formed: Vec<Span>,
}

pub fn decode_lenient(labels: &[BioLabel]) -> Decoded {
    let mut out = Decoded::default();
    // (start, class, well_formed)
    let mut open: Option<(usize, EntityClass, bool)> = None;
    let mut close = |open: &mut Option<(usize, EntityClass, bool)>, end: usize| {
        if let Some((start, class, ok)) = open.take() {
            let span = Span::new(start, end, class);
            if ok {
                out.spans.push(span);
            } else {
                out.ill_formed.push(span);
            }
        }
    };
    for (i, &l) in labels.iter().enumerate() {
        match l {
            BioLabel::O => close(&mut open, i),
            BioLabel::B(c) => {
                close(&mut open, i);
                open = Some((i, c, true));
            }
            BioLabel::I(c) => match open {
                Some((_, oc, _)) if oc == c => {}
                _ => {
                    close(&mut open, i);
                    open = Some((i, c, false));
                }
            },
        }
    }
    close(&mut open, labels.len());
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "dev" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub sentences: Vec<LabeledSentence>,
    /// One tag per sentence once [`split`] has run.
    pub splits: Option<Vec<Split>>,
}

impl Dataset {
    pub fn new(sentences: Vec<LabeledSentence>) -> Self {
        Self {
            sentences,
            splits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sentences tagged `which`; an unsplit dataset yields nothing.
    pub fn part(&self, which: Split) -> Vec<&LabeledSentence> {
        match &self.splits {
            Some(tags) => self
                .sentences
                .iter()
                .zip(tags)
                .filter(|(_, &t)| t == which)
                .map(|(s, _)| s)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::detect(self.sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.text.as_str())))
    }
}

/// Parses `token<TAB>label` lines with blank lines between sentences.
/// Sentences get ids `s0`, `s1`, ... in file order.
pub fn parse_corpus(text: &str) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut labels: Vec<BioLabel> = Vec::new();
    let mut flush = |words: &mut Vec<String>, labels: &mut Vec<BioLabel>| {
        if !words.is_empty() {
            sentences.push(LabeledSentence {
                id: format!("s{}", sentences.len()),
                tokens: make_tokens(words.iter().map(String::as_str)),
                labels: std::mem::take(labels),
            });
            words.clear();
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut words, &mut labels);
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse { line: line_no, message };
        let (token, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected token<TAB>label".into()))?;
        if token.is_empty() || label.contains('\t') {
            return Err(parse_err("expected exactly one non-empty token and one label".into()));
        }
        let label: BioLabel = label.trim().parse().map_err(|e: CorpusError| parse_err(e.to_string()))?;
        let prev = labels.last().copied().unwrap_or(BioLabel::O);
        if !label.may_follow(prev) {
            return Err(parse_err(format!("{label} cannot follow {prev}")));
        }
        words.push(token.to_string());
        labels.push(label);
    }
    flush(&mut words, &mut labels);
    Ok(Dataset::new(sentences))
}

pub fn write_corpus<'a>(sentences: impl IntoIterator<Item = &'a LabeledSentence>) -> String {
    let mut out = String::new();
    for s in sentences {
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            out.push_str(&t.text);
            out.push('\t');
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 8,
            val: 1,
            test: 1,
        }
    }
}

impl FromStr for SplitRatio {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CorpusError::BadRatio(s.to_string());
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match parts[..] {
            [train, val, test] if train + val + test > 0 && train > 0 => Ok(Self { train, val, test }),
            _ => Err(bad()),
        }
    }
}

impl SplitRatio {
    /// `(train, val, test)` sizes: floors for train and val, remainder to test.
    pub fn sizes(self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.val + self.test) as usize;
        let train = n * self.train as usize / total;
        let val = n * self.val as usize / total;
        (train, val, n - train - val)
    }
}

/// Tags every sentence with a split after a seeded shuffle.
pub fn split(dataset: &Dataset, ratio: SplitRatio, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    if n < 10 {
        return Err(CorpusError::TooSmall(n));
    }
    let (train, val, _) = ratio.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut tags = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        tags[idx] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        sentences: dataset.sentences.clone(),
        splits: Some(tags),
    })
}

/// How raw text is cut into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    /// One token per non-whitespace codepoint.
    #[default]
    Codepoint,
    /// Whitespace-separated words, with each ASCII punctuation character
    /// split off as its own token.
    Whitespace,
}

impl Tokenizer {
    /// Codepoint if every token is a single codepoint, else Whitespace.
    pub fn detect<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        if tokens.into_iter().any(|t| t.chars().nth(1).is_some()) {
            Self::Whitespace
        } else {
            Self::Codepoint
        }
    }
}

/// A token cut from raw text with its codepoint offsets (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn tokenize(text: &str, tokenizer: Tokenizer) -> Vec<TextToken> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    match tokenizer {
        Tokenizer::Codepoint => {
            for (i, c) in chars.iter().enumerate() {
                if !c.is_whitespace() {
                    out.push(TextToken {
                        text: c.to_string(),
                        start: i,
                        end: i + 1,
                    });
                }
            }
        }
        Tokenizer::Whitespace => {
            let mut start: Option<usize> = None;
            let emit = |out: &mut Vec<TextToken>, s: usize, e: usize| {
                out.push(TextToken {
                    text: chars[s..e].iter().collect(),
                    start: s,
                    end: e,
                });
            };
            for (i, c) in chars.iter().enumerate() {
                if c.is_whitespace() || c.is_ascii_punctuation() {
                    if let Some(s) = start.take() {
                        emit(&mut out, s, i);
                    }
                    if c.is_ascii_punctuation() {
                        emit(&mut out, i, i + 1);
                    }
                } else if start.is_none() {
                    start = Some(i);
                }
            }
            if let Some(s) = start {
                emit(&mut out, s, chars.len());
            }
        }
    }
    out
}

/// Joins tokens back into surface text. Codepoint tokens concatenate;
/// whitespace tokens get a space only between two ASCII-alphanumeric edges,
/// so `T - 5642103` renders as `T-5642103`.
pub fn join_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, tokenizer: Tokenizer) -> String {
    let mut out = String::new();
    for t in tokens {
        if tokenizer == Tokenizer::Whitespace {
            let left = out.chars().last();
            let right = t.chars().next();
            if let (Some(l), Some(r)) = (left, right) {
                if l.is_ascii_alphanumeric() && r.is_ascii_alphanumeric() {
                    out.push(' ');
                }
            }
        }
        out.push_str(t);
    }
    out
}
