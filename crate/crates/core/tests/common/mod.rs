#![allow(dead_code)]

use iskg_core::decoder::{self, IlConfig, IlNoise};
use iskg_core::encoder::{self, BiasSampler, Encoder, EncoderConfig, NoiseConfig};
use iskg_core::context::{self, LstmParams};
use iskg_core::corpus::{generate_synthetic, SynthGrammar, Tokenizer};
use iskg_core::model::{Hainex, LossKind, ModelConfig, Vocab};
use iskg_numerics::{grad_check, GradCheckOptions, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;

pub fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Random emissions and fully random transitions (START and STOP rows
/// included), so every entry the decoder reads is exercised.
pub fn random_crf(rng: &mut Rng, n: usize, l: usize) -> (Tensor, Tensor) {
    (random(rng, n, l), random(rng, l + 2, l + 2))
}

/// Independent path score: START → y_0 → … → y_{n-1} → STOP.
pub fn oracle_score(e: &Tensor, t: &Tensor, y: &[usize]) -> f64 {
    let l = e.cols();
    let mut s = t.get(l, y[0]) + e.get(0, y[0]);
    for i in 1..y.len() {
        s += t.get(y[i - 1], y[i]) + e.get(i, y[i]);
    }
    s + t.get(y[y.len() - 1], l + 1)
}

/// Every label sequence of length `n` over `l` labels, in lexicographic order.
pub fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..l).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

pub struct BruteForce {
    pub log_z: f64,
    pub best: Vec<usize>,
    pub best_score: f64,
    pub margin: f64,
}

/// Exhaustive enumeration. `margin` is the gap between the best and the
/// second best score (infinite with a single path).
pub fn brute_force(e: &Tensor, t: &Tensor) -> BruteForce {
    let paths = all_paths(e.rows(), e.cols());
    let scores: Vec<f64> = paths.iter().map(|p| oracle_score(e, t, p)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let (arg, _) = scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bs), (i, &s)| if s > bs { (i, s) } else { (bi, bs) });
    let second = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    BruteForce {
        log_z,
        best: paths[arg].clone(),
        best_score: scores[arg],
        margin: max - second,
    }
}

pub struct OracleSweep {
    pub instances: usize,
    pub max_log_z_error: f64,
    pub viterbi_mismatches: usize,
}

/// Compares the decoder with enumeration on `count` random instances with
/// `1 ≤ n ≤ 6` tokens and `1 ≤ L ≤ 4` labels.
pub fn crf_oracle_sweep(count: usize, seed: u64) -> OracleSweep {
    let mut max_err: f64 = 0.0;
    let mut mismatches = 0;
    for i in 0..count {
        let mut rng = Rng::derive(seed, &[i as u64]);
        let n = 1 + rng.below(6);
        let l = 1 + rng.below(4);
        let (e, t) = random_crf(&mut rng, n, l);
        let bf = brute_force(&e, &t);
        max_err = max_err.max((decoder::log_partition(&e, &t) - bf.log_z).abs());
        let (path, _) = decoder::viterbi(&e, &t);
        if path != bf.best {
            mismatches += 1;
        }
    }
    OracleSweep {
        instances: count,
        max_log_z_error: max_err,
        viterbi_mismatches: mismatches,
    }
}

/// A fixed random projection of `x` to a scalar.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let w = random(&mut Rng::new(seed), shape[0], shape[1]);
    let w = tape.constant(w);
    let prod = tape.mul(x, w);
    tape.sum(prod)
}

pub fn max_rel_error(store: &mut ParamStore, f: impl for<'a> Fn(&mut Tape<'a>) -> Var) -> f64 {
    max_rel_error_with(store, f, &GradCheckOptions::default())
}

pub fn max_rel_error_with(store: &mut ParamStore, f: impl for<'a> Fn(&mut Tape<'a>) -> Var, opts: &GradCheckOptions) -> f64 {
    let report = grad_check(store, f, opts);
    assert!(report.checked > 0, "nothing was checked");
    report.max_rel_error
}

fn store_of(rng: &mut Rng, shapes: &[(&str, usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes.iter().map(|&(n, r, c)| s.add(n, random(rng, r, c))).collect();
    (s, ids)
}

/// Central-difference checks of every differentiable tape op and model
/// component, by name. Noise is off or frozen throughout.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = Rng::new(2024);

    let (mut s, p) = store_of(&mut rng, &[("a", 3, 4), ("b", 4, 5)]);
    out.push(("matmul", max_rel_error(&mut s, |t| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        let z = t.matmul(a, b);
        project(t, z, 1)
    })));
    let (mut s, p) = store_of(&mut rng, &[("a", 3, 4), ("b", 5, 4)]);
    out.push(("matmul_nt", max_rel_error(&mut s, |t| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        let z = t.matmul_nt(a, b);
        project(t, z, 2)
    })));
    let (mut s, p) = store_of(&mut rng, &[("a", 3, 4), ("b", 3, 4)]);
    out.push(("add, sub, mul, scale", max_rel_error(&mut s, |t| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        let m = t.mul(a, b);
        let d = t.sub(m, b);
        let z = t.add(d, a);
        let z = t.scale(z, -0.7);
        project(t, z, 3)
    })));
    let (mut s, p) = store_of(&mut rng, &[("x", 3, 4), ("b", 1, 4)]);
    out.push(("add_row", max_rel_error(&mut s, |t| {
        let (x, b) = (t.param(p[0]), t.param(p[1]));
        let z = t.add_row(x, b);
        project(t, z, 4)
    })));
    let (mut s, p) = store_of(&mut rng, &[("x", 3, 5)]);
    out.push(("sigmoid", max_rel_error(&mut s, |t| {
        let x = t.param(p[0]);
        let z = t.sigmoid(x);
        project(t, z, 5)
    })));
    out.push(("tanh", max_rel_error(&mut s, |t| {
        let x = t.param(p[0]);
        let z = t.tanh(x);
        project(t, z, 6)
    })));
    out.push(("relu", max_rel_error(&mut s, |t| {
        let x = t.param(p[0]);
        let z = t.relu(x);
        project(t, z, 7)
    })));
    out.push(("softmax", max_rel_error(&mut s, |t| {
        let x = t.param(p[0]);
        let z = t.softmax(x);
        project(t, z, 8)
    })));
    let (mut s, p) = store_of(&mut rng, &[("x", 3, 5), ("g", 1, 5), ("b", 1, 5)]);
    out.push(("layer_norm", max_rel_error(&mut s, |t| {
        let (x, g, b) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
        let z = t.layer_norm(x, g, b);
        project(t, z, 9)
    })));
    let (mut s, p) = store_of(&mut rng, &[("a", 3, 2), ("b", 3, 4), ("c", 2, 6)]);
    out.push(("concat, slice, transpose", max_rel_error(&mut s, |t| {
        let (a, b, c) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
        let ab = t.concat_cols(&[a, b]);
        let abc = t.concat_rows(&[ab, c]);
        let mid = t.slice_cols(abc, 1, 5);
        let rows = t.slice_rows(mid, 1, 4);
        let z = t.transpose(rows);
        project(t, z, 10)
    })));
    let (mut s, p) = store_of(&mut rng, &[("table", 5, 3)]);
    out.push(("gather_rows", max_rel_error(&mut s, |t| {
        let x = t.param(p[0]);
        let z = t.gather_rows(x, &[4, 0, 4, 2]);
        project(t, z, 11)
    })));

    // Encoder pieces.
    let cfg = EncoderConfig {
        d_tok: 5,
        d_seg: 2,
        d_pos: 3,
        max_len: 16,
        d_model: 4,
        heads: 2,
        d_ff: 6,
        layers: 2,
        noise: NoiseConfig::off(),
        ..EncoderConfig::default()
    };
    let mut s = ParamStore::new();
    let enc = Encoder::new(cfg.clone(), 7, &mut s, &mut Rng::new(3)).unwrap();
    let x0 = random(&mut rng, 4, 4);
    out.push(("self_attention", max_rel_error(&mut s, |t| {
        let x = t.constant(x0.clone());
        let z = encoder::self_attention(t, x, &enc.blocks[0].attention, &mut None);
        project(t, z, 12)
    })));
    let frozen = BiasSampler::new(0.3, Rng::new(17));
    out.push(("self_attention with frozen bias", max_rel_error(&mut s, |t| {
        let x = t.constant(x0.clone());
        let z = encoder::self_attention(t, x, &enc.blocks[0].attention, &mut Some(frozen.clone()));
        project(t, z, 13)
    })));
    out.push(("transformer_block", max_rel_error(&mut s, |t| {
        let x = t.constant(x0.clone());
        let z = encoder::transformer_block(t, x, &enc.blocks[1], &mut None);
        project(t, z, 14)
    })));
    out.push(("encoder", max_rel_error(&mut s, |t| {
        let z = enc.encode(t, &[1, 6, 0, 3], &mut None).unwrap();
        project(t, z, 15)
    })));

    // BiLSTM.
    let mut s = ParamStore::new();
    let f = LstmParams::new("f", 3, 4, &mut s, &mut rng);
    let b = LstmParams::new("b", 3, 4, &mut s, &mut rng);
    perturb_all(&mut s, &mut rng);
    let xs = random(&mut rng, 5, 3);
    let xin = s.add("x", xs);
    out.push(("lstm forward direction", max_rel_error(&mut s, |t| {
        let x = t.param(xin);
        let z = context::lstm_sequence(t, x, &f, false);
        project(t, z, 16)
    })));
    out.push(("bilstm", max_rel_error(&mut s, |t| {
        let x = t.param(xin);
        let z = context::bilstm_encode(t, x, &f, &b);
        project(t, z, 17)
    })));

    // CRF losses.
    let (e0, t0) = random_crf(&mut rng, 5, 4);
    let mut s = ParamStore::new();
    let (ep, tp) = (s.add("e", e0), s.add("t", t0));
    let gold = [1, 3, 0, 0, 2];
    out.push(("log_partition", max_rel_error(&mut s, |t| {
        let (e, tr) = (t.param(ep), t.param(tp));
        decoder::tape_log_partition(t, e, tr)
    })));
    out.push(("score_path", max_rel_error(&mut s, |t| {
        let (e, tr) = (t.param(ep), t.param(tp));
        decoder::tape_score_path(t, e, tr, &gold)
    })));
    out.push(("loss_mle", max_rel_error(&mut s, |t| {
        let (e, tr) = (t.param(ep), t.param(tp));
        decoder::tape_loss_mle(t, e, tr, &gold)
    })));
    let il = IlConfig::default();
    let noise = IlNoise::sample(5, 4, 0.1, &mut Rng::new(9));
    for (name, s_raw) in [("loss_il amplify branch", -3.0), ("loss_il dampen branch", 3.0)] {
        let sp = s.add(name, Tensor::scalar(s_raw));
        let opts = GradCheckOptions {
            only: Some(vec![ep, tp]),
            ..GradCheckOptions::default()
        };
        out.push((name, max_rel_error_with(&mut s, |t| {
            let (e, tr, sr) = (t.param(ep), t.param(tp), t.param(sp));
            decoder::tape_loss_il(t, e, tr, sr, &gold, &il, noise.clone())
        }, &opts)));
    }

    // Full pipeline on a tiny model.
    let (model, ids, gold) = tiny_pipeline();
    for (name, kind) in [("pipeline mle", LossKind::Mle), ("pipeline il (frozen noise)", LossKind::Il)] {
        let mut store = model.store.clone();
        let params: Vec<ParamId> = store.iter().map(|(id, _)| id).filter(|&id| id != model.s_raw).collect();
        let opts = GradCheckOptions {
            only: Some(params),
            ..GradCheckOptions::default()
        };
        out.push((name, max_rel_error_with(&mut store, |t| {
            model.loss(t, &ids, &gold, kind, true, &mut Rng::new(77)).unwrap()
        }, &opts)));
    }
    out
}

/// Moves zero-initialised biases away from zero so their gradients are
/// exercised at a generic point.
fn perturb_all(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.normal(0.0, 0.3);
        }
    }
}

/// A tiny model with active attention noise (frozen by a fixed rng in the
/// loss closure) and a four-token sentence.
pub fn tiny_pipeline() -> (Hainex, Vec<usize>, Vec<usize>) {
    let corpus = generate_synthetic(&SynthGrammar::default_hazop(5), 3);
    let vocab = Vocab::build(&corpus.dataset.sentences);
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.noise = NoiseConfig::default();
    let mut model = Hainex::new(cfg, vocab, Tokenizer::Whitespace, 11).unwrap();
    perturb_all(&mut model.store, &mut Rng::new(12));
    let s = &corpus.dataset.sentences[0];
    let ids = model.vocab.ids(s.words().into_iter().take(4));
    let gold = s.labels.iter().take(4).map(|l| l.index()).collect();
    (model, ids, gold)
}
