//! Two-layer bidirectional LSTM encoder.
//!
//! Each layer runs one LSTM over the sequence left-to-right and another
//! right-to-left; the per-frame outputs are the concatenation of the two
//! directions, so the encoder output dimension is twice the per-direction
//! state size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::lstm::{LstmCell, LstmState, LstmStepCache};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmEncoder {
    pub layers: Vec<BiLstmLayer>,
}

/// Per-layer caches; both directions indexed by frame.
#[derive(Debug)]
pub struct EncoderCache {
    layers: Vec<DirectionCaches>,
}

#[derive(Debug)]
struct DirectionCaches {
    forward: Vec<LstmStepCache>,
    backward: Vec<LstmStepCache>,
}

impl BiLstmEncoder {
    /// `depth` stacked bidirectional layers with `state_dim` units per direction.
    pub fn init(feat_dim: usize, state_dim: usize, depth: usize, rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut input = feat_dim;
        for _ in 0..depth {
            layers.push(BiLstmLayer {
                forward: LstmCell::init(input, state_dim, rng),
                backward: LstmCell::init(input, state_dim, rng),
            });
            input = 2 * state_dim;
        }
        BiLstmEncoder { layers }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.layers.last().map(|l| l.forward.state_dim()).unwrap_or(0)
    }

    fn run_direction(
        cell: &LstmCell,
        inputs: &[Vec<f64>],
        reversed: bool,
        caches: Option<&mut Vec<LstmStepCache>>,
    ) -> Result<Vec<Vec<f64>>> {
        let frames = inputs.len();
        let mut outputs = vec![Vec::new(); frames];
        let mut state = LstmState::zeros(cell.state_dim());
        let mut cache_store = caches.map(|c| {
            c.clear();
            c.reserve(frames);
            c
        });
        for step in 0..frames {
            let t = if reversed { frames - 1 - step } else { step };
            if let Some(store) = cache_store.as_deref_mut() {
                let (next, cache) = cell.step_cached(&inputs[t], &state)?;
                store.push(cache);
                state = next;
            } else {
                state = cell.step(&inputs[t], &state)?;
            }
            outputs[t] = state.h.clone();
        }
        Ok(outputs)
    }

    fn concat(fwd: &[Vec<f64>], bwd: &[Vec<f64>]) -> Vec<Vec<f64>> {
        fwd.iter()
            .zip(bwd)
            .map(|(f, b)| {
                let mut v = Vec::with_capacity(f.len() + b.len());
                v.extend_from_slice(f);
                v.extend_from_slice(b);
                v
            })
            .collect()
    }

    /// Encode a `T × F` feature sequence into `T × out_dim` states.
    pub fn encode(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Err(Error::EmptyInput("encoder requires at least one frame".into()));
        }
        let mut current = features.to_vec();
        for layer in &self.layers {
            let fwd = Self::run_direction(&layer.forward, &current, false, None)?;
            let bwd = Self::run_direction(&layer.backward, &current, true, None)?;
            current = Self::concat(&fwd, &bwd);
        }
        Ok(current)
    }

    /// Encode and keep per-step caches for the backward pass.
    pub fn encode_cached(&self, features: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, EncoderCache)> {
        if features.is_empty() {
            return Err(Error::EmptyInput("encoder requires at least one frame".into()));
        }
        let mut current = features.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut fc = Vec::new();
            let mut bc = Vec::new();
            let fwd = Self::run_direction(&layer.forward, &current, false, Some(&mut fc))?;
            let bwd = Self::run_direction(&layer.backward, &current, true, Some(&mut bc))?;
            current = Self::concat(&fwd, &bwd);
            layers.push(DirectionCaches { forward: fc, backward: bc });
        }
        Ok((current, EncoderCache { layers }))
    }

    /// Backpropagate `dout` (gradient on the encoder outputs) through all
    /// layers, accumulating parameter gradients into `grads`. The gradient
    /// on the input features is discarded.
    pub fn backward(&self, cache: &EncoderCache, dout: &[Vec<f64>], grads: &mut BiLstmEncoder) {
        let frames = dout.len();
        let mut dcur: Vec<Vec<f64>> = dout.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let state_dim = layer.forward.state_dim();
            let in_dim = layer.forward.input_dim();
            let caches = &cache.layers[li];
            let mut dinput = vec![vec![0.0; in_dim]; frames];
            // Forward direction: caches[step] is frame `step`; BPTT runs
            // from the last frame back to the first.
            let mut dh_carry = vec![0.0; state_dim];
            let mut dc_carry = vec![0.0; state_dim];
            for t in (0..frames).rev() {
                let mut dh = dcur[t][..state_dim].to_vec();
                for (a, b) in dh.iter_mut().zip(&dh_carry) {
                    *a += b;
                }
                let (dx, dh_prev, dc_prev) =
                    layer.forward.backward_step(&caches.forward[t], &dh, &dc_carry, &mut grads.layers[li].forward);
                for (a, b) in dinput[t].iter_mut().zip(dx) {
                    *a += b;
                }
                dh_carry = dh_prev;
                dc_carry = dc_prev;
            }
            // Backward direction: processing order was t = T-1 .. 0, so its
            // cache for frame t sits at index T-1-t and BPTT runs t ascending.
            let mut dh_carry = vec![0.0; state_dim];
            let mut dc_carry = vec![0.0; state_dim];
            for t in 0..frames {
                let mut dh = dcur[t][state_dim..].to_vec();
                for (a, b) in dh.iter_mut().zip(&dh_carry) {
                    *a += b;
                }
                let cache_idx = frames - 1 - t;
                let (dx, dh_prev, dc_prev) = layer.backward.backward_step(
                    &caches.backward[cache_idx],
                    &dh,
                    &dc_carry,
                    &mut grads.layers[li].backward,
                );
                for (a, b) in dinput[t].iter_mut().zip(dx) {
                    *a += b;
                }
                dh_carry = dh_prev;
                dc_carry = dc_prev;
            }
            dcur = dinput;
        }
    }

    pub fn zeros_like(&self) -> BiLstmEncoder {
        BiLstmEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| BiLstmLayer {
                    forward: LstmCell::zeros(l.forward.input_dim(), l.forward.state_dim()),
                    backward: LstmCell::zeros(l.backward.input_dim(), l.backward.state_dim()),
                })
                .collect(),
        }
    }
}
