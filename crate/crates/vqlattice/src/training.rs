//! Training loop: adaptive-moment optimizer with decoupled weight decay and
//! a single-cycle learning-rate schedule, plus the quantizer temperature
//! anneal. Utterances are processed one at a time with gradient accumulation
//! over small batches — no padded batching at desk scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::nll_gradient;
use crate::model::{LabelId, Model, ModelParams, QuantizeMode, Variant};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent ramping up to the peak rate.
    pub warmup_frac: f64,
    /// Peak / initial learning-rate ratio.
    pub div_factor: f64,
    /// Peak / final learning-rate ratio.
    pub final_div_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Quantizer Gumbel temperature anneals linearly start -> end.
    pub temp_start: f64,
    pub temp_end: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 4,
            peak_lr: 5e-4,
            weight_decay: 1e-4,
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            temp_start: 2.0,
            temp_end: 0.5,
            seed: 17,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset per model variant. The quantized variant gets more
    /// epochs and a hotter learning rate; its discrete states take longer to
    /// settle than the continuous baselines.
    pub fn toy(variant: Variant) -> Self {
        let mut cfg = TrainConfig { peak_lr: 8e-3, ..TrainConfig::default() };
        match variant {
            Variant::Baseline | Variant::Vlc => cfg.epochs = 12,
            Variant::Vq => cfg.epochs = 18,
        }
        cfg
    }
}

/// One training utterance.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<LabelId>,
}

/// Mean loss per epoch, written out as a plain-text two-column table.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub per_epoch: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn to_table(&self) -> String {
        let mut out = String::from("epoch\tmean_nll\n");
        for (epoch, nll) in &self.per_epoch {
            out.push_str(&format!("{epoch}\t{nll:.6}\n"));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.per_epoch.last().map(|&(_, l)| l)
    }
}

/// One-cycle learning rate at `step` of `total` steps: cosine ramp from
/// peak/div up to peak over the warmup fraction, cosine decay to
/// peak/final_div afterwards.
pub fn one_cycle_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64) * cfg.warmup_frac).max(1.0);
    let initial = cfg.peak_lr / cfg.div_factor;
    let final_lr = cfg.peak_lr / cfg.final_div_factor;
    let s = step as f64;
    let cos_interp = |from: f64, to: f64, p: f64| -> f64 {
        from + (to - from) * 0.5 * (1.0 - (std::f64::consts::PI * p.clamp(0.0, 1.0)).cos())
    };
    if s < warm {
        cos_interp(initial, cfg.peak_lr, s / warm)
    } else {
        let rest = (total as f64 - warm).max(1.0);
        cos_interp(cfg.peak_lr, final_lr, (s - warm) / rest)
    }
}

/// Linearly annealed quantizer temperature.
pub fn temperature_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let total = total.max(2);
    let p = (step as f64 / (total - 1) as f64).clamp(0.0, 1.0);
    cfg.temp_start + (cfg.temp_end - cfg.temp_start) * p
}

/// Adam with decoupled weight decay over the model's parameter blocks.
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(param_count: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            steps: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let gblocks: Vec<&[f64]> = grads.blocks();
        let mut offset = 0usize;
        let mut block_idx = 0usize;
        params.for_each_block_mut(&mut |block: &mut [f64]| {
            let g = gblocks[block_idx];
            debug_assert_eq!(block.len(), g.len());
            for (i, p) in block.iter_mut().enumerate() {
                let gi = g[i];
                let m = &mut self.m[offset + i];
                let v = &mut self.v[offset + i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
            offset += block.len();
            block_idx += 1;
        });
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
fn clip_gradients(grads: &mut ModelParams, max_norm: f64) {
    let mut sq = 0.0;
    for block in grads.blocks() {
        for g in block {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.for_each_block_mut(&mut |block| {
            for g in block.iter_mut() {
                *g *= scale;
            }
        });
    }
}

/// Train `model` in place. Deterministic given the config seed: shuffling,
/// quantizer sampling, and accumulation order are all fixed. Returns the
/// loss curve; a non-finite loss aborts with a diagnostic.
pub fn train(model: &mut Model, data: &[TrainExample], cfg: &TrainConfig) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut rng = SeededRng::new(cfg.seed).derive(0x747261696e);
    let mut grads = model.params.zeros_like();
    let mut optimizer = AdamW::new(model.params.param_count(), cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            grads.zero();
            let temperature = temperature_at(cfg, step, total_steps);
            for &idx in chunk {
                let ex = &data[idx];
                let mode = match model.variant() {
                    Variant::Vq => QuantizeMode::StraightThrough { temperature },
                    _ => QuantizeMode::Infer,
                };
                let fwd = model.forward_cached(&ex.features, &ex.labels, mode, Some(&mut rng))?;
                let (nll, dgrid) = nll_gradient(&fwd.grid, &ex.labels)?;
                if !nll.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, utterance {idx}"
                    )));
                }
                epoch_loss += nll;
                model.backward(&fwd, &dgrid, &mut grads);
            }
            let scale = 1.0 / chunk.len() as f64;
            grads.for_each_block_mut(&mut |block| {
                for g in block.iter_mut() {
                    *g *= scale;
                }
            });
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let lr = one_cycle_lr(cfg, step, total_steps);
            optimizer.step(&mut model.params, &grads, lr);
            step += 1;
        }
        curve.push((epoch, epoch_loss / data.len() as f64));
    }
    Ok(LossCurve { per_epoch: curve })
}
