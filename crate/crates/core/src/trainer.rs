//! Mini-batch training with Adam, span-level evaluation, and the run
//! configuration shared by the CLI and the experiment harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use iskg_numerics::{Adam, AdamConfig, ParamGrads, ParamStore, Rng, Tape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{decode_lenient, BioLabel, Dataset, Decoded, LabeledSentence, Span, Split};
use crate::iskf::EntityClass;
use crate::model::{Hainex, LossKind, ModelConfig, ModelError, Vocab};
use crate::parallel::{map_collect, Execution};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: sentence {sentence} has loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        sentence: String,
        loss: f64,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub execution: Execution,
    /// Keep the parameters of the epoch with the best validation F1.
    pub keep_best: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            loss: LossKind::Il,
            seed: 42,
            execution: Execution::Sequential,
            keep_best: true,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(TrainError::Config("epochs, batch_size and lr must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Span-level counts and scores for one class (or the micro total).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            true_positives,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: BTreeMap<EntityClass, ClassMetrics>,
    pub total: ClassMetrics,
    /// Predicted runs that were not well-formed BIO; each is counted as a
    /// wrong prediction.
    pub ill_formed: usize,
}

/// Row order of the printed table.
pub const TABLE_ORDER: [EntityClass; 5] = [
    EntityClass::Equipment,
    EntityClass::ProcessLabel,
    EntityClass::Material,
    EntityClass::State,
    EntityClass::Consequence,
];

impl Metrics {
    /// Strict span matching: a prediction counts only if start, end and
    /// class all equal a gold span.
    pub fn score(gold: &[Vec<Span>], predicted: &[Decoded]) -> Self {
        assert_eq!(gold.len(), predicted.len(), "one prediction per gold sentence");
        let mut counts: BTreeMap<EntityClass, (usize, usize, usize)> =
            EntityClass::ALL.iter().map(|&c| (c, (0, 0, 0))).collect();
        let mut ill_formed = 0;
        for (g, p) in gold.iter().zip(predicted) {
            for s in g {
                counts.get_mut(&s.class).expect("known class").2 += 1;
            }
            for s in &p.spans {
                let c = counts.get_mut(&s.class).expect("known class");
                c.1 += 1;
                if g.contains(s) {
                    c.0 += 1;
                }
            }
            for s in &p.ill_formed {
                counts.get_mut(&s.class).expect("known class").1 += 1;
                ill_formed += 1;
            }
        }
        let per_class: BTreeMap<_, _> = counts
            .iter()
            .map(|(&c, &(tp, pred, gold))| (c, ClassMetrics::from_counts(tp, pred, gold)))
            .collect();
        let (tp, pred, g) = counts
            .values()
            .fold((0, 0, 0), |acc, &(a, b, c)| (acc.0 + a, acc.1 + b, acc.2 + c));
        Self {
            per_class,
            total: ClassMetrics::from_counts(tp, pred, g),
            ill_formed,
        }
    }

    pub fn class(&self, c: EntityClass) -> ClassMetrics {
        self.per_class.get(&c).copied().unwrap_or_default()
    }

    /// F1 per class plus `Total`, keyed by display name.
    pub fn f1_summary(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = TABLE_ORDER
            .iter()
            .map(|&c| (c.display_name().to_string(), self.class(c).f1))
            .collect();
        out.insert("Total".into(), self.total.f1);
        out
    }

    /// Percentages laid out as Total followed by one row per class.
    pub fn table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "{:<15}{:>8}{:>8}{:>8}", "Entity", "P", "R", "F1");
        let mut row = |name: &str, m: &ClassMetrics| {
            let _ = writeln!(
                out,
                "{name:<15}{:>8.2}{:>8.2}{:>8.2}",
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1
            );
        };
        row("Total", &self.total);
        for c in TABLE_ORDER {
            row(c.display_name(), &self.class(c));
        }
        out
    }
}

/// Decodes every sentence with the model and scores against gold labels.
pub fn evaluate(model: &Hainex, sentences: &[&LabeledSentence], exec: Execution) -> Result<Metrics, ModelError> {
    let results = map_collect(exec, sentences, |_, s| model.predict(&s.words()));
    let mut gold = Vec::with_capacity(sentences.len());
    let mut pred = Vec::with_capacity(sentences.len());
    for (s, r) in sentences.iter().zip(results) {
        pred.push(decode_lenient(&r?));
        gold.push(decode_lenient(&s.labels).spans);
    }
    Ok(Metrics::score(&gold, &pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sentence training loss.
    pub loss: f64,
    pub val_f1: Option<BTreeMap<String, f64>>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Hainex,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
}

/// Builds an untrained model whose vocabulary comes from the training split.
pub fn init_model(dataset: &Dataset, config: &TrainConfig) -> Result<Hainex, TrainError> {
    let train = dataset.part(Split::Train);
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let vocab = Vocab::build(train.iter().copied());
    Ok(Hainex::new(config.model.clone(), vocab, dataset.tokenizer(), config.seed)?)
}

/// Groups same-length sentences into batches of at most `batch_size`, in
/// an epoch-specific random order.
pub fn make_batches(sentences: &[&LabeledSentence], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    rng.shuffle(&mut order);
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        by_len.entry(sentences[i].len()).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = by_len
        .into_values()
        .flat_map(|group| group.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    rng.shuffle(&mut batches);
    batches
}

/// Loss value and parameter gradients of one sentence.
pub fn sentence_gradients(
    model: &Hainex,
    sentence: &LabeledSentence,
    kind: LossKind,
    rng: &mut Rng,
) -> Result<(f64, ParamGrads), ModelError> {
    let ids = model.vocab.ids(sentence.words());
    let gold: Vec<usize> = sentence.labels.iter().map(|l| l.index()).collect();
    let mut tape = Tape::with_params(&model.store);
    let loss = model.loss(&mut tape, &ids, &gold, kind, true, rng)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss).into_params()))
}

/// Gradients of a batch, summed in batch order so the result does not
/// depend on the execution mode.
pub fn batch_gradients(
    model: &Hainex,
    sentences: &[&LabeledSentence],
    kind: LossKind,
    rng_path: impl Fn(usize) -> Rng + Sync,
    exec: Execution,
) -> Result<(Vec<f64>, ParamGrads), ModelError> {
    let results = map_collect(exec, sentences, |i, s| sentence_gradients(model, s, kind, &mut rng_path(i)));
    let mut losses = Vec::with_capacity(sentences.len());
    let mut total = ParamGrads::new(model.store.len());
    for r in results {
        let (loss, grads) = r?;
        losses.push(loss);
        total.merge(grads);
    }
    Ok((losses, total))
}

/// Trains `model` on the dataset's train split, validating on its val split
/// after every epoch. Writes one JSON line per epoch to `log` if given.
pub fn train(
    mut model: Hainex,
    dataset: &Dataset,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train_set = dataset.part(Split::Train);
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let val_set = dataset.part(Split::Val);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order_rng = Rng::derive(config.seed, &[epoch as u64, u64::MAX]);
        let batches = make_batches(&train_set, config.batch_size, &mut order_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let members: Vec<&LabeledSentence> = batch.iter().map(|&i| train_set[i]).collect();
            let path = |i: usize| Rng::derive(config.seed, &[epoch as u64, b as u64, i as u64]);
            let (losses, grads) = batch_gradients(&model, &members, config.loss, path, config.execution)?;
            for (loss, s) in losses.iter().zip(&members) {
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch: epoch + 1,
                        batch: b,
                        sentence: s.id.clone(),
                        loss: *loss,
                    });
                }
                loss_sum += loss;
            }
            model.store.accumulate(&grads).map_err(ModelError::from)?;
            adam.step(&mut model.store);
        }
        let loss = loss_sum / train_set.len() as f64;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_set, config.execution)?)
        };
        if config.keep_best {
            let score = val.as_ref().map_or(-loss, |m| m.total.f1);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch + 1, model.store.clone()));
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss,
            val_f1: val.as_ref().map(Metrics::f1_summary),
        };
        if let Some(w) = log.as_mut() {
            let mut line = serde_json::to_value(&record).expect("record serializes");
            line["seconds"] = serde_json::json!(started.elapsed().as_secs_f64());
            writeln!(w, "{line}")?;
        }
        history.push(record);
    }
    let (best_epoch, best_val_f1) = match best {
        Some((score, epoch, store)) => {
            model.store = store;
            (epoch, (!val_set.is_empty()).then_some(score))
        }
        None => (config.epochs, None),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_f1,
    })
}

/// Trains and writes the metrics log next to `log_path`.
pub fn train_with_log(model: Hainex, dataset: &Dataset, config: &TrainConfig, log_path: &Path) -> Result<TrainOutcome, TrainError> {
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(log_path)?);
    let out = train(model, dataset, config, Some(&mut file))?;
    file.flush()?;
    Ok(out)
}

/// Gold labels as spans; convenience for callers that score predictions
/// produced elsewhere.
pub fn gold_spans(labels: &[BioLabel]) -> Vec<Span> {
    decode_lenient(labels).spans
}
