mod common;

use common::*;
use iskg_core::encoder::{
    attention_scores, self_attention, transformer_block, AttentionParams, BiasSampler, Encoder, EncoderConfig,
    NoiseConfig, NoiseMode,
};
use iskg_numerics::{ParamStore, Rng, Tape, Tensor, LAYER_NORM_EPS};

fn config(layers: usize) -> EncoderConfig {
    EncoderConfig {
        d_tok: 6,
        d_seg: 3,
        d_pos: 4,
        max_len: 32,
        d_model: 8,
        heads: 2,
        d_ff: 10,
        layers,
        noise: NoiseConfig::off(),
        ..EncoderConfig::default()
    }
}

fn softmax_rows(m: &mut [Vec<f64>]) {
    for row in m {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - max).exp() / z;
        }
    }
}

fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for c in 0..cols {
            out.set(r, c, (row[c] - mean) * inv * gain.data()[c] + bias.data()[c]);
        }
    }
    out
}

#[test]
fn bias_perturbs_scores_with_std_sigma_over_root_dk() {
    let mut rng = Rng::new(1);
    let (n, d_k, sigma) = (8, 16, 0.1);
    let k = random(&mut rng, n, d_k);
    let q = random(&mut rng, n, d_k);
    let clean = attention_scores(&k, &q, None, d_k).unwrap();
    let mut sampler = BiasSampler::new(sigma, Rng::new(2));
    let mut diffs = Vec::new();
    for _ in 0..400 {
        let noisy = attention_scores(&k, &q, Some(&sampler.sample(n)), d_k).unwrap();
        diffs.extend(noisy.sub(&clean).unwrap().data().iter().copied());
    }
    let m = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / m;
    let std = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0)).sqrt();
    let want = sigma / (d_k as f64).sqrt();
    // 25 600 draws: the standard error of the mean is want / 160 and the
    // relative error of the std estimate is about 0.5 %.
    assert!(mean.abs() < 4.0 * want / 160.0, "mean {mean}");
    assert!((std / want - 1.0).abs() < 0.03, "std {std} vs {want}");
}

#[test]
fn three_token_attention_matches_hand_computation() {
    let mut rng = Rng::new(3);
    for heads in [1, 2] {
        let d = 4;
        let mut store = ParamStore::new();
        let params = AttentionParams {
            w_q: store.add("q", random(&mut rng, d, d)),
            w_k: store.add("k", random(&mut rng, d, d)),
            w_v: store.add("v", random(&mut rng, d, d)),
            heads,
        };
        let a = random(&mut rng, 3, d);
        let mut tape = Tape::with_params(&store);
        let av = tape.constant(a.clone());
        let out = self_attention(&mut tape, av, &params, &mut None);
        let got = tape.value(out).clone();

        let proj = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..3)
                .map(|i| (0..d).map(|c| (0..d).map(|r| a.get(i, r) * w.get(r, c)).sum()).collect())
                .collect()
        };
        let (q, k, v) = (
            proj(store.value(params.w_q)),
            proj(store.value(params.w_k)),
            proj(store.value(params.w_v)),
        );
        let dk = d / heads;
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let mut s: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    (0..3)
                        .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                        .collect()
                })
                .collect();
            softmax_rows(&mut s);
            for i in 0..3 {
                for c in cols.clone() {
                    let want: f64 = (0..3).map(|j| s[i][j] * v[j][c]).sum();
                    assert!((got.get(i, c) - want).abs() < 1e-10, "heads {heads} [{i},{c}]");
                }
            }
        }
    }
}

#[test]
fn zero_sigma_bias_is_bitwise_baseline() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config(2), 9, &mut store, &mut Rng::new(4)).unwrap();
    let x = random(&mut Rng::new(5), 6, 8);
    let run = |noise: &mut Option<BiasSampler>| {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let out = self_attention(&mut tape, xv, &enc.blocks[0].attention, noise);
        tape.value(out).clone()
    };
    let base = run(&mut None);
    let zero = run(&mut Some(BiasSampler::new(0.0, Rng::new(6))));
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&base), bits(&zero));

    // Whole encoder too, with the bias nominally always on.
    let mut cfg = config(2);
    cfg.noise = NoiseConfig {
        sigma: 0.0,
        mode: NoiseMode::Always,
    };
    let mut tape = Tape::with_params(&store);
    let a = enc.encode(&mut tape, &[1, 2, 3, 4], &mut None).unwrap();
    let a = tape.value(a).clone();
    let mut tape = Tape::with_params(&store);
    let b = enc.encode(&mut tape, &[1, 2, 3, 4], &mut Some(BiasSampler::new(0.0, Rng::new(7)))).unwrap();
    assert_eq!(bits(&a), bits(tape.value(b)));
    assert!(cfg.noise.sampler(true, Rng::new(0)).is_none());
}

#[test]
fn evaluation_mode_draws_no_bias() {
    let noise = NoiseConfig::default();
    assert!(noise.sampler(false, Rng::new(1)).is_none());
    assert!(noise.sampler(true, Rng::new(1)).is_some());
    let mut store = ParamStore::new();
    let enc = Encoder::new(config(1), 9, &mut store, &mut Rng::new(8)).unwrap();
    let run = |seed: u64, training: bool| {
        let mut tape = Tape::with_params(&store);
        let out = enc.encode(&mut tape, &[3, 1, 4, 1, 5], &mut noise.sampler(training, Rng::new(seed))).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run(1, false), run(2, false));
    assert_ne!(run(1, true), run(2, true));
}

#[test]
fn zeroed_ffn_reduces_block_to_residual_norm() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config(1), 9, &mut store, &mut Rng::new(9)).unwrap();
    let b = enc.blocks[0].clone();
    let mut rng = Rng::new(10);
    for id in [b.w1, b.w2] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::zeros(&shape);
    }
    for id in [b.b2, b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias] {
        store.get_mut(id).value = random(&mut rng, 1, 8);
    }
    let a = random(&mut rng, 5, 8);
    let mut tape = Tape::with_params(&store);
    let av = tape.constant(a.clone());
    let attn = self_attention(&mut tape, av, &b.attention, &mut None);
    let attn = tape.value(attn).clone();
    let out = transformer_block(&mut tape, av, &b, &mut None);
    let h = layer_norm_rows(&a.add(&attn).unwrap(), store.value(b.ln1_gain), store.value(b.ln1_bias));
    let want = layer_norm_rows(&h.add_row(store.value(b.b2)).unwrap(), store.value(b.ln2_gain), store.value(b.ln2_bias));
    assert!(tape.value(out).max_abs_diff(&want) < 1e-10);
}

#[test]
fn no_blocks_means_encode_is_embed() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config(0), 9, &mut store, &mut Rng::new(11)).unwrap();
    let ids = [2, 7, 7, 0, 100];
    let mut tape = Tape::with_params(&store);
    let e = enc.encode(&mut tape, &ids, &mut None).unwrap();
    let m = enc.embed(&mut tape, &ids, &[0; 5], &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(tape.value(e), tape.value(m));

    // Embedding oracle: concatenated rows times the projection.
    let tables = &enc.embedding;
    let joint: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            let id = if id < 9 { id } else { 0 };
            let mut row = store.value(tables.token).row(id).to_vec();
            row.extend_from_slice(store.value(tables.segment).row(0));
            row.extend_from_slice(store.value(tables.position).row(p));
            row
        })
        .collect();
    let joint = Tensor::from_rows(&joint);
    let want = joint.matmul(store.value(tables.projection)).unwrap();
    assert!(tape.value(m).max_abs_diff(&want) < 1e-12);
}

#[test]
fn encoder_gradients_pass_central_differences() {
    let suite = gradient_suite();
    for (name, err) in suite.iter().filter(|(n, _)| {
        ["self_attention", "transformer_block", "encoder"].iter().any(|p| n.starts_with(p))
    }) {
        assert!(*err <= GRAD_TOL, "{name}: {err}");
    }
}
