//! Linear-chain CRF: path scores, the log partition function, Viterbi
//! decoding, and the MLE and IL training losses.
//!
//! Emissions are `n × L`. Transitions are `(L+2) × (L+2)` with the virtual
//! labels `START = L` and `STOP = L + 1`; entry `[i, j]` scores moving from
//! `i` to `j`.

use iskg_numerics::{log_sum_exp, sigmoid, CustomOp, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Stand-in for a forbidden (−∞) transition.
pub const FORBIDDEN: f64 = -1e4;

pub fn start(num_labels: usize) -> usize {
    num_labels
}

pub fn stop(num_labels: usize) -> usize {
    num_labels + 1
}

/// Zero transitions except the forbidden moves into START and out of STOP.
pub fn initial_transitions(num_labels: usize) -> Tensor {
    let m = num_labels + 2;
    let mut t = Tensor::zeros(&[m, m]);
    for i in 0..m {
        t.set(i, start(num_labels), FORBIDDEN);
        t.set(stop(num_labels), i, FORBIDDEN);
    }
    t
}

fn check_shapes(emissions: &Tensor, transitions: &Tensor) -> usize {
    let l = emissions.cols();
    assert_eq!(
        transitions.shape(),
        &[l + 2, l + 2],
        "transitions must be (L+2)x(L+2) for L = {l}"
    );
    assert!(emissions.rows() >= 1, "CRF needs at least one token");
    l
}

/// Σ emissions[t, y_t] + Σ transitions[y_{t-1}, y_t], with START before the
/// first label and STOP after the last.
pub fn score_path(emissions: &Tensor, transitions: &Tensor, y: &[usize]) -> f64 {
    let l = check_shapes(emissions, transitions);
    assert_eq!(y.len(), emissions.rows(), "label sequence length");
    let mut score = 0.0;
    let mut prev = start(l);
    for (t, &label) in y.iter().enumerate() {
        score += transitions.get(prev, label) + emissions.get(t, label);
        prev = label;
    }
    score + transitions.get(prev, stop(l))
}

/// Forward log-potentials: `alpha[t][j]` is the log-sum over prefixes
/// ending in `j` at `t`.
fn forward_table(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
    let l = emissions.cols();
    let n = emissions.rows();
    let mut alpha = vec![vec![0.0; l]; n];
    for j in 0..l {
        alpha[0][j] = transitions.get(start(l), j) + emissions.get(0, j);
    }
    let mut buf = vec![0.0; l];
    for t in 1..n {
        for j in 0..l {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = alpha[t - 1][i] + transitions.get(i, j);
            }
            alpha[t][j] = log_sum_exp(&buf) + emissions.get(t, j);
        }
    }
    alpha
}

fn backward_table(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
    let l = emissions.cols();
    let n = emissions.rows();
    let mut beta = vec![vec![0.0; l]; n];
    for i in 0..l {
        beta[n - 1][i] = transitions.get(i, stop(l));
    }
    let mut buf = vec![0.0; l];
    for t in (0..n - 1).rev() {
        for i in 0..l {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = transitions.get(i, j) + emissions.get(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&buf);
        }
    }
    beta
}

fn finish(alpha_last: &[f64], transitions: &Tensor) -> f64 {
    let l = alpha_last.len();
    let terms: Vec<f64> = (0..l).map(|j| alpha_last[j] + transitions.get(j, stop(l))).collect();
    log_sum_exp(&terms)
}

/// `log Σ_y exp(score_path(y))` by the forward algorithm.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> f64 {
    check_shapes(emissions, transitions);
    let alpha = forward_table(emissions, transitions);
    finish(alpha.last().expect("n >= 1"), transitions)
}

/// Posterior expectations under the CRF distribution.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub log_z: f64,
    /// `n × L` label marginals; these are the emission gradient of `log_z`.
    pub labels: Tensor,
    /// `(L+2) × (L+2)` expected transition counts; the transition gradient.
    pub transitions: Tensor,
}

pub fn marginals(emissions: &Tensor, transitions: &Tensor) -> Marginals {
    let l = check_shapes(emissions, transitions);
    let n = emissions.rows();
    let alpha = forward_table(emissions, transitions);
    let beta = backward_table(emissions, transitions);
    let log_z = finish(&alpha[n - 1], transitions);
    let mut labels = Tensor::zeros(&[n, l]);
    for t in 0..n {
        for j in 0..l {
            labels.set(t, j, (alpha[t][j] + beta[t][j] - log_z).exp());
        }
    }
    let mut counts = Tensor::zeros(&[l + 2, l + 2]);
    for j in 0..l {
        counts.set(start(l), j, labels.get(0, j));
        counts.set(j, stop(l), labels.get(n - 1, j));
    }
    for t in 1..n {
        for i in 0..l {
            for j in 0..l {
                let p = (alpha[t - 1][i] + transitions.get(i, j) + emissions.get(t, j) + beta[t][j] - log_z).exp();
                counts.set(i, j, counts.get(i, j) + p);
            }
        }
    }
    Marginals {
        log_z,
        labels,
        transitions: counts,
    }
}

/// Best label sequence and its score. Ties go to the lower label index.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> (Vec<usize>, f64) {
    let l = check_shapes(emissions, transitions);
    let n = emissions.rows();
    let mut score: Vec<f64> = (0..l)
        .map(|j| transitions.get(start(l), j) + emissions.get(0, j))
        .collect();
    let mut back = vec![vec![0usize; l]; n];
    let mut next = vec![0.0; l];
    for t in 1..n {
        for j in 0..l {
            let mut best = 0;
            let mut best_score = score[0] + transitions.get(0, j);
            for (i, &s) in score.iter().enumerate().skip(1) {
                let cand = s + transitions.get(i, j);
                if cand > best_score {
                    best = i;
                    best_score = cand;
                }
            }
            back[t][j] = best;
            next[j] = best_score + emissions.get(t, j);
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    let mut best_score = score[0] + transitions.get(0, stop(l));
    for (j, &s) in score.iter().enumerate().skip(1) {
        let cand = s + transitions.get(j, stop(l));
        if cand > best_score {
            last = j;
            best_score = cand;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    (path, best_score)
}

/// MLE loss `log_partition − score_path(gold)`; never negative.
pub fn loss_mle(emissions: &Tensor, transitions: &Tensor, gold: &[usize]) -> f64 {
    log_partition(emissions, transitions) - score_path(emissions, transitions, gold)
}

struct LogPartitionOp;

impl CustomOp for LogPartitionOp {
    fn name(&self) -> &'static str {
        "crf_log_partition"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(log_partition(inputs[0], inputs[1]))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let m = marginals(inputs[0], inputs[1]);
        let u = upstream.item();
        vec![Some(m.labels.scale(u)), Some(m.transitions.scale(u))]
    }
}

struct PathScoreOp {
    path: Vec<usize>,
}

impl CustomOp for PathScoreOp {
    fn name(&self) -> &'static str {
        "crf_path_score"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(score_path(inputs[0], inputs[1], &self.path))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let u = upstream.item();
        let l = inputs[0].cols();
        let mut de = Tensor::zeros(inputs[0].shape());
        let mut dt = Tensor::zeros(inputs[1].shape());
        let mut prev = start(l);
        for (t, &y) in self.path.iter().enumerate() {
            de.set(t, y, de.get(t, y) + u);
            dt.set(prev, y, dt.get(prev, y) + u);
            prev = y;
        }
        dt.set(prev, stop(l), dt.get(prev, stop(l)) + u);
        vec![Some(de), Some(dt)]
    }
}

/// Records `log_partition(emissions, transitions)` on the tape.
pub fn tape_log_partition(tape: &mut Tape, emissions: Var, transitions: Var) -> Var {
    tape.custom(Box::new(LogPartitionOp), &[emissions, transitions])
}

pub fn tape_score_path(tape: &mut Tape, emissions: Var, transitions: Var, path: &[usize]) -> Var {
    tape.custom(Box::new(PathScoreOp { path: path.to_vec() }), &[emissions, transitions])
}

pub fn tape_loss_mle(tape: &mut Tape, emissions: Var, transitions: Var, gold: &[usize]) -> Var {
    let log_z = tape_log_partition(tape, emissions, transitions);
    let gold_score = tape_score_path(tape, emissions, transitions, gold);
    tape.sub(log_z, gold_score)
}

/// Settings of the perturbed (IL) loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Initial value of the trainable threshold logit; `s = σ(s_raw)`.
    pub s_raw_init: f64,
    /// Standard deviation of the normal draws whose magnitudes perturb
    /// the emissions.
    pub noise_scale: f64,
    /// Temperature of the sigmoid blend that gives `s_raw` a gradient.
    pub temperature: f64,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.15,
            beta: 1.0,
            s_raw_init: 0.0,
            noise_scale: 0.1,
            temperature: 0.1,
        }
    }
}

impl IlConfig {
    /// α = β = 1 with no noise: the perturbation is the identity.
    pub fn identity() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            noise_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err("IL alpha and beta must be positive".into());
        }
        if !(self.noise_scale >= 0.0) || !(self.temperature > 0.0) || !self.s_raw_init.is_finite() {
            return Err("IL noise_scale must be >= 0, temperature > 0 and s_raw_init finite".into());
        }
        Ok(())
    }
}

/// Half-normal perturbation magnitudes for one step: `|N_α|` and `|N_β|`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlNoise {
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl IlNoise {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            alpha: Tensor::zeros(&[rows, cols]),
            beta: Tensor::zeros(&[rows, cols]),
        }
    }

    /// Fresh draws; all zero (and no draws consumed) when `scale` is 0.
    pub fn sample(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        if scale == 0.0 {
            return Self::zeros(rows, cols);
        }
        let mut draw = || {
            let data = (0..rows * cols).map(|_| rng.normal(0.0, scale).abs()).collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches")
        };
        let alpha = draw();
        let beta = draw();
        Self { alpha, beta }
    }
}

/// `τ = σ(mean of the emission scores along the Viterbi path)`.
pub fn il_tau(emissions: &Tensor, transitions: &Tensor) -> f64 {
    let (path, _) = viterbi(emissions, transitions);
    let mean = path.iter().enumerate().map(|(t, &y)| emissions.get(t, y)).sum::<f64>() / path.len() as f64;
    sigmoid(mean)
}

/// Which side of the threshold a step fell on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IlBranch {
    /// `τ > s`: `α·E + |N_α|`.
    Amplify,
    /// `τ ≤ s`: `β·E − |N_β|`.
    Dampen,
}

pub fn il_branch(tau: f64, s: f64) -> IlBranch {
    if tau > s {
        IlBranch::Amplify
    } else {
        IlBranch::Dampen
    }
}

/// The perturbed emissions `f(E)` for a given branch.
pub fn perturb(emissions: &Tensor, branch: IlBranch, il: &IlConfig, noise: &IlNoise) -> Tensor {
    let (k, n, sign) = match branch {
        IlBranch::Amplify => (il.alpha, &noise.alpha, 1.0),
        IlBranch::Dampen => (il.beta, &noise.beta, -1.0),
    };
    let mut out = emissions.scale(k);
    for (o, &z) in out.data_mut().iter_mut().zip(n.data()) {
        *o += sign * z;
    }
    out
}

/// Tape op for `f(E)`. Inputs are the emissions and the `1 × 1` threshold
/// logit `s_raw`. The value takes the hard branch; `s_raw` gets the
/// gradient of the blend `g·A + (1 − g)·B` with `g = σ((τ − s)/T)`.
struct IlPerturbOp {
    il: IlConfig,
    tau: f64,
    noise: IlNoise,
}

impl IlPerturbOp {
    fn branch(&self, s_raw: &Tensor) -> IlBranch {
        il_branch(self.tau, sigmoid(s_raw.item()))
    }
}

impl CustomOp for IlPerturbOp {
    fn name(&self) -> &'static str {
        "il_perturb"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        perturb(inputs[0], self.branch(inputs[1]), &self.il, &self.noise)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let e = inputs[0];
        let k = match self.branch(inputs[1]) {
            IlBranch::Amplify => self.il.alpha,
            IlBranch::Dampen => self.il.beta,
        };
        let de = upstream.scale(k);
        let s = sigmoid(inputs[1].item());
        let g = sigmoid((self.tau - s) / self.il.temperature);
        let dg_ds = -g * (1.0 - g) / self.il.temperature;
        let ds_draw = s * (1.0 - s);
        let a = perturb(e, IlBranch::Amplify, &self.il, &self.noise);
        let b = perturb(e, IlBranch::Dampen, &self.il, &self.noise);
        let dot: f64 = upstream
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(u, (x, y))| u * (x - y))
            .sum();
        vec![Some(de), Some(Tensor::scalar(dot * dg_ds * ds_draw))]
    }
}

pub fn tape_perturb(tape: &mut Tape, emissions: Var, s_raw: Var, il: &IlConfig, tau: f64, noise: IlNoise) -> Var {
    tape.custom(
        Box::new(IlPerturbOp {
            il: *il,
            tau,
            noise,
        }),
        &[emissions, s_raw],
    )
}

/// IL loss: log partition over the perturbed emissions minus the gold
/// path score over the unperturbed ones. May be negative.
pub fn tape_loss_il(
    tape: &mut Tape,
    emissions: Var,
    transitions: Var,
    s_raw: Var,
    gold: &[usize],
    il: &IlConfig,
    noise: IlNoise,
) -> Var {
    let tau = il_tau(tape.value(emissions), tape.value(transitions));
    let perturbed = tape_perturb(tape, emissions, s_raw, il, tau, noise);
    let log_z = tape_log_partition(tape, perturbed, transitions);
    let gold_score = tape_score_path(tape, emissions, transitions, gold);
    tape.sub(log_z, gold_score)
}

/// Value-only IL loss for a given threshold `s` and noise sample.
pub fn loss_il(emissions: &Tensor, transitions: &Tensor, gold: &[usize], il: &IlConfig, s: f64, noise: &IlNoise) -> f64 {
    let branch = il_branch(il_tau(emissions, transitions), s);
    let perturbed = perturb(emissions, branch, il, noise);
    log_partition(&perturbed, transitions) - score_path(emissions, transitions, gold)
}
