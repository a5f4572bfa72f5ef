//! Minimal deterministic numeric kernel.
//!
//! Everything downstream (model layers, loss, decoder) is built on the few
//! primitives in this module: dense affine maps, log-domain summation,
//! standard activations, and a seeded RNG with the Gumbel-softmax sampler
//! used by the vector quantizer. All math is `f64`; there is no SIMD, no
//! threading, and no platform-dependent path, so identical seeds produce
//! bitwise-identical results everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Fill with uniform(-scale, scale) entries drawn from `rng`.
    pub fn init_uniform(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// y = A x (no bias).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            y[r] = acc;
        }
        y
    }

    /// y += Aᵀ v, used when backpropagating through a linear map.
    pub fn matvec_transpose_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let vr = v[r];
            for (o, w) in out.iter_mut().zip(row) {
                *o += vr * w;
            }
        }
    }

    /// A += v xᵀ (outer-product accumulation for weight gradients).
    pub fn add_outer(&mut self, v: &[f64], x: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let vr = v[r];
            let row = self.row_mut(r);
            for (w, xv) in row.iter_mut().zip(x) {
                *w += vr * xv;
            }
        }
    }
}

/// Affine map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMap {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseMap { weight: Matrix::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    /// Uniform init with the usual 1/sqrt(fan_in) scale.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        DenseMap {
            weight: Matrix::init_uniform(out_dim, in_dim, scale, rng),
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    /// W·x + b. Errors when `x` does not match the input dimension.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Contract(format!(
                "dense map expects input of length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut y = self.weight.matvec(x);
        for (yv, b) in y.iter_mut().zip(&self.bias) {
            *yv += b;
        }
        Ok(y)
    }

    /// Backward pass: accumulates dW and db into `grads`, returns dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut DenseMap) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(dy.len(), self.out_dim());
        grads.weight.add_outer(dy, x);
        for (g, d) in grads.bias.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim()];
        self.weight.matvec_transpose_add(dy, &mut dx);
        dx
    }
}

/// log Σ exp(vᵢ) with max-shift; a list of all -∞ yields -∞.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("log_sum_exp over an empty list".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Two-argument log-sum-exp for hot paths (total over all finite/-∞ inputs).
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x).expect("log_softmax over empty slice");
    x.iter().map(|v| v - lse).collect()
}

/// Elementwise activation selector for the handful of nonlinearities used here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
}

pub fn apply_activation(kind: Activation, x: &[f64]) -> Vec<f64> {
    match kind {
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
        Activation::Softmax => softmax(x),
        Activation::LogSoftmax => log_softmax(x),
    }
}

const SPLITMIX_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded, cross-platform reproducible RNG.
///
/// The stream is xoshiro256++ (Blackman & Vigna), seeded by expanding the
/// 64-bit seed through SplitMix64 — both published algorithms with fixed
/// integer semantics, so the sample stream is identical on every platform
/// and Rust version. Gaussian variates use Box–Muller, Gumbel variates use
/// the inverse CDF; neither involves rejection, keeping stream consumption
/// deterministic.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
    seed: u64,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { state, seed, spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child RNG with an independent stream; used to give parallel tasks
    /// (per-utterance generation, per-split datasets) their own streams.
    pub fn derive(&self, stream: u64) -> SeededRng {
        let mut sm = self.seed ^ stream.wrapping_mul(SPLITMIX_GAMMA);
        SeededRng::new(splitmix64(&mut sm))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1); never returns exactly zero (safe under log).
    pub fn next_open_f64(&mut self) -> f64 {
        let u = self.next_f64();
        if u == 0.0 {
            1.0 / (1u64 << 53) as f64
        } else {
            u
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller; the spare variate is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Standard Gumbel variate: -ln(-ln U).
    pub fn gumbel(&mut self) -> f64 {
        -(-self.next_open_f64().ln()).ln()
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Result of a Gumbel-softmax draw.
///
/// `probs` is the relaxed distribution used as the gradient path; `index`
/// is the selected codebook entry. With `hard` set, the value consumed
/// downstream is the one-hot of `index` while gradients are taken as if
/// the output were `probs` (straight-through).
#[derive(Debug, Clone)]
pub struct GumbelSoftmax {
    pub probs: Vec<f64>,
    pub index: usize,
    pub hard: bool,
}

impl GumbelSoftmax {
    /// The vector consumed by the forward pass: one-hot when hard, `probs` otherwise.
    pub fn forward_value(&self) -> Vec<f64> {
        if self.hard {
            let mut v = vec![0.0; self.probs.len()];
            v[self.index] = 1.0;
            v
        } else {
            self.probs.clone()
        }
    }
}

/// Gumbel-softmax over `logits`.
///
/// With an RNG the logits are perturbed by Gumbel noise before the
/// temperature-scaled softmax and the index is the argmax of the perturbed
/// distribution. Without an RNG (inference) no noise is added and the index
/// is the plain argmax of the logits. Ties resolve to the lowest index.
pub fn gumbel_softmax(
    logits: &[f64],
    temperature: f64,
    hard: bool,
    rng: Option<&mut SeededRng>,
) -> Result<GumbelSoftmax> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Contract(format!(
            "gumbel_softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Contract("gumbel_softmax over empty logits".into()));
    }
    let (probs, index) = match rng {
        Some(rng) => {
            let perturbed: Vec<f64> = logits
                .iter()
                .map(|&l| (l + rng.gumbel()) / temperature)
                .collect();
            let probs = softmax(&perturbed);
            (probs, argmax(&perturbed))
        }
        None => {
            let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
            (softmax(&scaled), argmax(logits))
        }
    };
    Ok(GumbelSoftmax { probs, index, hard })
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// FNV-1a over raw bytes; used for vocabulary checksums and provenance hashes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
