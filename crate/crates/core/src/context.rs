//! BiLSTM context layer over the encoder's semantic vectors.
//!
//! The four gate weight matrices over `[h_{t-1}, x_t]` are stacked row-wise
//! in the order forget, input, candidate, output (`ω_f, ω_i, ω_c, ω_k`),
//! giving one `4h × (h + in)` matrix and one `1 × 4h` bias per direction.
//! A whole direction runs as a single tape op with hand-written
//! backpropagation through time.

use std::sync::OnceLock;

use iskg_numerics::{sigmoid, CustomOp, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    /// `4h × (h + in)`, gate blocks `[f; i; c; k]`.
    pub w: ParamId,
    /// `1 × 4h`.
    pub b: ParamId,
    pub hidden: usize,
    pub input: usize,
}

impl LstmParams {
    pub fn new(prefix: &str, input: usize, hidden: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let w = store.add_glorot(format!("{prefix}.w"), 4 * hidden, hidden + input, rng);
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 4 * hidden]));
        Self { w, b, hidden, input }
    }
}

/// Hidden and cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Gate activations of one step, kept for backpropagation.
#[derive(Clone, Debug)]
struct StepCache {
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    k: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One step of the gate equations:
/// `f, i, k = σ(ω·[h, x] + b)`, `C* = tanh(ω_c·[h, x] + b_c)`,
/// `C = f⊙C_prev + i⊙C*`, `h = k⊙tanh(C)`.
pub fn lstm_step(x: &[f64], state: &LstmState, w: &Tensor, b: &Tensor) -> LstmState {
    let hidden = state.h.len();
    let mut pre = b.data().to_vec();
    for (r, z) in pre.iter_mut().enumerate() {
        let row = w.row(r);
        *z += dot(&row[..hidden], &state.h) + dot(&row[hidden..], x);
    }
    step_from_preactivation(&pre, &state.c).1
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent accumulators so the adds pipeline.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn step_from_preactivation(pre: &[f64], c_prev: &[f64]) -> (StepCache, LstmState) {
    let h = c_prev.len();
    let f: Vec<f64> = pre[..h].iter().map(|&z| sigmoid(z)).collect();
    let i: Vec<f64> = pre[h..2 * h].iter().map(|&z| sigmoid(z)).collect();
    let g: Vec<f64> = pre[2 * h..3 * h].iter().map(|&z| z.tanh()).collect();
    let k: Vec<f64> = pre[3 * h..].iter().map(|&z| sigmoid(z)).collect();
    let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let out = LstmState {
        h: (0..h).map(|j| k[j] * tanh_c[j]).collect(),
        c: c.clone(),
    };
    (StepCache { f, i, g, k, c, tanh_c }, out)
}

/// One LSTM direction over a whole sequence. Inputs: `x (n × in)`,
/// `w (4h × (h + in))`, `b (1 × 4h)`. Output `n × h`, row `t` holding the
/// hidden state after reading token `t` (in reading order for `reverse`).
struct LstmOp {
    hidden: usize,
    reverse: bool,
    cache: OnceLock<Vec<StepCache>>,
}

impl LstmOp {
    fn order(&self, n: usize) -> Vec<usize> {
        if self.reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        }
    }

    fn run(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> (Tensor, Vec<StepCache>) {
        let hd = self.hidden;
        let n = x.rows();
        let w_x = w.slice_cols(hd, w.cols()).expect("input block");
        let xw = x.matmul_nt(&w_x).expect("x · W_xᵀ").add_row(b).expect("bias");
        let mut out = Tensor::zeros(&[n, hd]);
        let mut caches: Vec<Option<StepCache>> = vec![None; n];
        let mut state = LstmState::zeros(hd);
        // hd × 4hd: the recurrent term is a sum of scaled rows.
        let w_h_t = w.slice_cols(0, hd).expect("recurrent block").transpose();
        let mut pre = vec![0.0; 4 * hd];
        for t in self.order(n) {
            pre.copy_from_slice(xw.row(t));
            for (j, &hj) in state.h.iter().enumerate() {
                axpy(&mut pre, hj, w_h_t.row(j));
            }
            let (cache, next) = step_from_preactivation(&pre, &state.c);
            out.row_mut(t).copy_from_slice(&next.h);
            caches[t] = Some(cache);
            state = next;
        }
        (out, caches.into_iter().map(|c| c.expect("every step ran")).collect())
    }
}

impl CustomOp for LstmOp {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (out, caches) = self.run(inputs[0], inputs[1], inputs[2]);
        let _ = self.cache.set(caches);
        out
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let hd = self.hidden;
        let n = x.rows();
        let caches = self.cache.get_or_init(|| self.run(x, w, inputs[2]).1);
        let order = self.order(n);
        let w_h = w.slice_cols(0, hd).expect("recurrent block");

        let mut dz_all = Tensor::zeros(&[n, 4 * hd]);
        // Row t holds the hidden state that fed step t (zero for the first step).
        let mut h_prev_all = Tensor::zeros(&[n, hd]);
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let zeros = vec![0.0; hd];
        for (step, &t) in order.iter().enumerate().rev() {
            let s = &caches[t];
            let c_prev: &[f64] = if step == 0 {
                &zeros
            } else {
                let p = order[step - 1];
                h_prev_all.row_mut(t).copy_from_slice(output.row(p));
                &caches[p].c
            };
            let up = upstream.row(t);
            let dz = dz_all.row_mut(t);
            for j in 0..hd {
                let dh = up[j] + dh_next[j];
                let dc = dh * s.k[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                dz[j] = dc * c_prev[j] * s.f[j] * (1.0 - s.f[j]);
                dz[hd + j] = dc * s.g[j] * s.i[j] * (1.0 - s.i[j]);
                dz[2 * hd + j] = dc * s.i[j] * (1.0 - s.g[j] * s.g[j]);
                dz[3 * hd + j] = dh * s.tanh_c[j] * s.k[j] * (1.0 - s.k[j]);
                dc_next[j] = dc * s.f[j];
            }
            dh_next.iter_mut().for_each(|d| *d = 0.0);
            for (r, &dzr) in dz_all.row(t).iter().enumerate() {
                axpy(&mut dh_next, dzr, w_h.row(r));
            }
        }
        let w_x = w.slice_cols(hd, w.cols()).expect("input block");
        let dx = dz_all.matmul(&w_x).expect("dZ · W_x");
        let dw_h = dz_all.matmul_tn(&h_prev_all).expect("dZᵀ · H");
        let dw_x = dz_all.matmul_tn(x).expect("dZᵀ · x");
        let dw = Tensor::concat_cols(&[&dw_h, &dw_x]).expect("stacked gates");
        let db = Tensor::row_vector((0..4 * hd).map(|c| (0..n).map(|r| dz_all.get(r, c)).sum()).collect());
        vec![Some(dx), Some(dw), Some(db)]
    }
}

/// Runs one direction on the tape.
pub fn lstm_sequence(tape: &mut Tape, xs: Var, params: &LstmParams, reverse: bool) -> Var {
    let w = tape.param(params.w);
    let b = tape.param(params.b);
    tape.custom(
        Box::new(LstmOp {
            hidden: params.hidden,
            reverse,
            cache: OnceLock::new(),
        }),
        &[xs, w, b],
    )
}

/// Row `t` is `[h_fwd_t, h_bwd_t]`, width `2h`.
pub fn bilstm_encode(tape: &mut Tape, xs: Var, fwd: &LstmParams, bwd: &LstmParams) -> Var {
    assert!(tape.value(xs).rows() >= 1, "BiLSTM needs at least one vector");
    let f = lstm_sequence(tape, xs, fwd, false);
    let b = lstm_sequence(tape, xs, bwd, true);
    tape.concat_cols(&[f, b])
}
