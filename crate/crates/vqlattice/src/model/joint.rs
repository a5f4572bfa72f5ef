//! Joint network: combines one encoder state and one prediction state into a
//! log-distribution over the vocabulary plus blank.
//!
//! Both inputs are projected to the joint dimension, multiplied elementwise,
//! passed through tanh and projected to `|Y| + 1` logits; the output is the
//! log-softmax of those logits, so every slice exp-sums to one.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{log_softmax, DenseMap, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointNetwork {
    pub enc_proj: DenseMap,
    pub pred_proj: DenseMap,
    pub out_proj: DenseMap,
}

impl JointNetwork {
    pub fn init(enc_dim: usize, pred_dim: usize, joint_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        JointNetwork {
            enc_proj: DenseMap::init(joint_dim, enc_dim, rng),
            pred_proj: DenseMap::init(joint_dim, pred_dim, rng),
            out_proj: DenseMap::init(out_dim, joint_dim, rng),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.enc_proj.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out_proj.out_dim()
    }

    pub fn project_enc(&self, enc_state: &[f64]) -> Result<Vec<f64>> {
        self.enc_proj.apply(enc_state)
    }

    pub fn project_pred(&self, pred_out: &[f64]) -> Result<Vec<f64>> {
        self.pred_proj.apply(pred_out)
    }

    /// Log-probabilities from already-projected inputs (decoder hot path).
    pub fn log_probs_projected(&self, enc_p: &[f64], pred_p: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = enc_p.iter().zip(pred_p).map(|(a, b)| (a * b).tanh()).collect();
        let logits = self.out_proj.apply(&z).expect("projected joint dims fixed at construction");
        log_softmax(&logits)
    }

    /// Full joint evaluation from raw encoder and prediction states.
    pub fn log_probs(&self, enc_state: &[f64], pred_out: &[f64]) -> Result<Vec<f64>> {
        let pe = self.project_enc(enc_state)?;
        let pg = self.project_pred(pred_out)?;
        Ok(self.log_probs_projected(&pe, &pg))
    }

    /// Backward through one joint cell.
    ///
    /// `log_probs` must be the forward output for (enc_p, pred_p) and
    /// `dlogprobs` the gradient on it. Accumulates the output-projection
    /// gradient and adds the cell's contributions into `denc_p` / `dpred_p`.
    pub fn backward_cell(
        &self,
        enc_p: &[f64],
        pred_p: &[f64],
        log_probs: &[f64],
        dlogprobs: &[f64],
        denc_p: &mut [f64],
        dpred_p: &mut [f64],
        grads: &mut JointNetwork,
    ) {
        // Through log-softmax: dlogit_j = d_j - p_j * Σ d.
        let dsum: f64 = dlogprobs.iter().sum();
        let dlogits: Vec<f64> = dlogprobs
            .iter()
            .zip(log_probs)
            .map(|(d, lp)| d - lp.exp() * dsum)
            .collect();
        // Recompute the tanh layer (cheaper than caching it per cell).
        let z: Vec<f64> = enc_p.iter().zip(pred_p).map(|(a, b)| (a * b).tanh()).collect();
        let dz = self.out_proj.backward(&z, &dlogits, &mut grads.out_proj);
        for k in 0..z.len() {
            let dq = dz[k] * (1.0 - z[k] * z[k]);
            denc_p[k] += dq * pred_p[k];
            dpred_p[k] += dq * enc_p[k];
        }
    }
}
