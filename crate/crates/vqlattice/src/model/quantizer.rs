//! Grouped vector quantizer over LSTM states.
//!
//! A `VqLayer` turns one D-dimensional vector into `groups` discrete indices
//! and the matching codebook reconstruction: a stack of fully-connected
//! layers projects the input to `groups * vars` logits, a Gumbel-softmax
//! picks one entry per group, and the reconstruction is the concatenation of
//! the selected codebook rows (each of dimension D / groups).
//!
//! Two independent layers — one for the hidden state, one for the cell
//! state — make up the `VectorQuantizer` used by the prediction network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, gumbel_softmax, DenseMap, Matrix, SeededRng};

/// How the quantizer selects and reconstructs.
///
/// * `StraightThrough`: sample with Gumbel noise when an RNG is supplied,
///   reconstruct from the hard one-hot; gradients flow through the soft
///   probabilities (training mode).
/// * `Soft`: no sampling, reconstruction is the probability-weighted mixture
///   of codebook rows; fully differentiable (used by gradient checks).
/// * `Infer`: plain argmax of the logits, hard reconstruction, deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantizeMode {
    StraightThrough { temperature: f64 },
    Soft { temperature: f64 },
    Infer,
}

/// Discrete state code: one index per group for the hidden state and one per
/// group for the cell state. With `groups = G` and `vars = V` the reachable
/// code space has V^(2G) elements.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiscreteCode {
    pub hidden: Vec<u16>,
    pub cell: Vec<u16>,
}

/// Quantizer for a single state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqLayer {
    /// Projection stack; hidden layers use tanh, the final layer is linear
    /// and emits `groups * vars` logits.
    pub projection: Vec<DenseMap>,
    /// `(groups * vars) × (dim / groups)` codebook, row `g * vars + v`.
    pub codebook: Matrix,
    pub groups: usize,
    pub vars: usize,
    pub dim: usize,
}

/// Forward values retained for the backward pass of one quantize call.
#[derive(Debug, Clone)]
pub struct VqLayerCache {
    pub input: Vec<f64>,
    /// Post-tanh activations of the hidden projection layers.
    pub hidden_acts: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub indices: Vec<u16>,
    pub hard: bool,
    pub temperature: f64,
}

impl VqLayer {
    pub fn init(dim: usize, groups: usize, vars: usize, depth: usize, rng: &mut SeededRng) -> Result<Self> {
        if groups == 0 || vars == 0 || depth == 0 {
            return Err(Error::Contract("vq layer needs groups, vars, depth >= 1".into()));
        }
        if dim % groups != 0 {
            return Err(Error::Contract(format!(
                "state dimension {dim} must be divisible by vq groups {groups}"
            )));
        }
        let mut projection = Vec::with_capacity(depth);
        for layer in 0..depth {
            let out = if layer + 1 == depth { groups * vars } else { dim };
            projection.push(DenseMap::init(out, dim, rng));
        }
        let codebook = Matrix::init_uniform(groups * vars, dim / groups, 0.5, rng);
        Ok(VqLayer { projection, codebook, groups, vars, dim })
    }

    fn logits(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut hidden_acts = Vec::new();
        let mut cur = x.to_vec();
        for (i, map) in self.projection.iter().enumerate() {
            let pre = map.apply(&cur)?;
            if i + 1 == self.projection.len() {
                return Ok((pre, hidden_acts));
            }
            cur = pre.iter().map(|v| v.tanh()).collect();
            hidden_acts.push(cur.clone());
        }
        unreachable!("projection stack is nonempty")
    }

    fn reconstruct_hard(&self, indices: &[u16]) -> Vec<f64> {
        let sub = self.dim / self.groups;
        let mut out = vec![0.0; self.dim];
        for (g, &idx) in indices.iter().enumerate() {
            let row = self.codebook.row(g * self.vars + idx as usize);
            out[g * sub..(g + 1) * sub].copy_from_slice(row);
        }
        out
    }

    fn reconstruct_soft(&self, probs: &[f64]) -> Vec<f64> {
        let sub = self.dim / self.groups;
        let mut out = vec![0.0; self.dim];
        for g in 0..self.groups {
            let dst = &mut out[g * sub..(g + 1) * sub];
            for v in 0..self.vars {
                let p = probs[g * self.vars + v];
                let row = self.codebook.row(g * self.vars + v);
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += p * r;
                }
            }
        }
        out
    }

    /// Quantize without keeping backward state.
    pub fn quantize(
        &self,
        x: &[f64],
        mode: QuantizeMode,
        rng: Option<&mut SeededRng>,
    ) -> Result<(Vec<u16>, Vec<f64>)> {
        let (indices, recon, _) = self.quantize_impl(x, mode, rng, false)?;
        Ok((indices, recon))
    }

    /// Quantize and keep the cache needed for `backward`.
    pub fn quantize_cached(
        &self,
        x: &[f64],
        mode: QuantizeMode,
        rng: Option<&mut SeededRng>,
    ) -> Result<(Vec<u16>, Vec<f64>, VqLayerCache)> {
        let (indices, recon, cache) = self.quantize_impl(x, mode, rng, true)?;
        Ok((indices, recon, cache.expect("cache requested")))
    }

    fn quantize_impl(
        &self,
        x: &[f64],
        mode: QuantizeMode,
        mut rng: Option<&mut SeededRng>,
        keep_cache: bool,
    ) -> Result<(Vec<u16>, Vec<f64>, Option<VqLayerCache>)> {
        let (logits, hidden_acts) = self.logits(x)?;
        let mut indices = Vec::with_capacity(self.groups);
        let mut probs = vec![0.0; self.groups * self.vars];
        let (hard, temperature) = match mode {
            QuantizeMode::StraightThrough { temperature } => (true, temperature),
            QuantizeMode::Soft { temperature } => (false, temperature),
            QuantizeMode::Infer => (true, 1.0),
        };
        for g in 0..self.groups {
            let group_logits = &logits[g * self.vars..(g + 1) * self.vars];
            match mode {
                QuantizeMode::Infer => {
                    indices.push(argmax(group_logits) as u16);
                }
                QuantizeMode::StraightThrough { temperature } => {
                    let sample = gumbel_softmax(group_logits, temperature, true, rng.as_deref_mut())?;
                    indices.push(sample.index as u16);
                    probs[g * self.vars..(g + 1) * self.vars].copy_from_slice(&sample.probs);
                }
                QuantizeMode::Soft { temperature } => {
                    let sample = gumbel_softmax(group_logits, temperature, false, None)?;
                    indices.push(sample.index as u16);
                    probs[g * self.vars..(g + 1) * self.vars].copy_from_slice(&sample.probs);
                }
            }
        }
        let recon = if hard {
            self.reconstruct_hard(&indices)
        } else {
            self.reconstruct_soft(&probs)
        };
        let cache = keep_cache.then(|| VqLayerCache {
            input: x.to_vec(),
            hidden_acts,
            probs,
            indices: indices.clone(),
            hard,
            temperature,
        });
        Ok((indices, recon, cache))
    }

    /// Backward through the quantizer given the gradient on the reconstruction.
    ///
    /// For a hard (straight-through) forward only the selected codebook row
    /// receives the reconstruction gradient; for a soft forward every row is
    /// weighted by its probability. In both cases the gradient w.r.t. the
    /// probabilities flows back through the temperature-scaled softmax into
    /// the projection stack. Returns the gradient w.r.t. the input vector.
    pub fn backward(&self, cache: &VqLayerCache, drecon: &[f64], grads: &mut VqLayer) -> Vec<f64> {
        let sub = self.dim / self.groups;
        let mut dlogits = vec![0.0; self.groups * self.vars];
        for g in 0..self.groups {
            let dslice = &drecon[g * sub..(g + 1) * sub];
            let probs = &cache.probs[g * self.vars..(g + 1) * self.vars];
            // Codebook gradient.
            if cache.hard {
                let sel = g * self.vars + cache.indices[g] as usize;
                let row = grads.codebook.row_mut(sel);
                for (r, d) in row.iter_mut().zip(dslice) {
                    *r += d;
                }
            } else {
                for v in 0..self.vars {
                    let p = probs[v];
                    let row = grads.codebook.row_mut(g * self.vars + v);
                    for (r, d) in row.iter_mut().zip(dslice) {
                        *r += p * d;
                    }
                }
            }
            // dL/dprobs then through the softmax Jacobian (scaled by 1/τ).
            let mut dprobs = vec![0.0; self.vars];
            for v in 0..self.vars {
                let row = self.codebook.row(g * self.vars + v);
                dprobs[v] = row.iter().zip(dslice).map(|(r, d)| r * d).sum();
            }
            let dot: f64 = probs.iter().zip(&dprobs).map(|(p, d)| p * d).sum();
            for v in 0..self.vars {
                dlogits[g * self.vars + v] = probs[v] * (dprobs[v] - dot) / cache.temperature;
            }
        }
        // Back through the projection stack.
        let depth = self.projection.len();
        let mut grad = dlogits;
        for layer in (0..depth).rev() {
            let input: &[f64] = if layer == 0 {
                &cache.input
            } else {
                &cache.hidden_acts[layer - 1]
            };
            let dpre = if layer + 1 == depth {
                grad
            } else {
                // Hidden layers apply tanh after the affine map.
                let act = &cache.hidden_acts[layer];
                grad.iter().zip(act).map(|(g, a)| g * (1.0 - a * a)).collect()
            };
            grad = self.projection[layer].backward(input, &dpre, &mut grads.projection[layer]);
        }
        grad
    }

    pub fn zeros_like(&self) -> VqLayer {
        VqLayer {
            projection: self
                .projection
                .iter()
                .map(|m| DenseMap::zeros(m.out_dim(), m.in_dim()))
                .collect(),
            codebook: Matrix::zeros(self.codebook.rows, self.codebook.cols),
            groups: self.groups,
            vars: self.vars,
            dim: self.dim,
        }
    }
}

/// Paired quantizers for the hidden and cell states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorQuantizer {
    pub hidden: VqLayer,
    pub cell: VqLayer,
}

impl VectorQuantizer {
    pub fn init(dim: usize, groups: usize, vars: usize, depth: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(VectorQuantizer {
            hidden: VqLayer::init(dim, groups, vars, depth, rng)?,
            cell: VqLayer::init(dim, groups, vars, depth, rng)?,
        })
    }

    /// Quantize a raw (h, c) pair into a discrete code and its reconstructions.
    pub fn quantize(
        &self,
        h_raw: &[f64],
        c_raw: &[f64],
        mode: QuantizeMode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(DiscreteCode, Vec<f64>, Vec<f64>)> {
        let (h_idx, h_q) = self.hidden.quantize(h_raw, mode, rng.as_deref_mut())?;
        let (c_idx, c_q) = self.cell.quantize(c_raw, mode, rng)?;
        Ok((DiscreteCode { hidden: h_idx, cell: c_idx }, h_q, c_q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(dim: usize, groups: usize, vars: usize, depth: usize, seed: u64) -> VqLayer {
        let mut rng = SeededRng::new(seed);
        VqLayer::init(dim, groups, vars, depth, &mut rng).unwrap()
    }

    /// Recompute the projection logits with plain nested loops.
    fn oracle_logits(layer: &VqLayer, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (i, map) in layer.projection.iter().enumerate() {
            let mut next = vec![0.0; map.out_dim()];
            for r in 0..map.out_dim() {
                let mut acc = map.bias[r];
                for (j, xv) in cur.iter().enumerate() {
                    acc += map.weight.get(r, j) * xv;
                }
                next[r] = acc;
            }
            if i + 1 < layer.projection.len() {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn single_entry_codebook_ignores_input() {
        let layer = layer(4, 2, 1, 1, 21);
        let (idx_a, rec_a) = layer.quantize(&[1.0, -1.0, 0.5, 2.0], QuantizeMode::Infer, None).unwrap();
        let (idx_b, rec_b) = layer.quantize(&[-3.0, 0.0, 0.0, 9.0], QuantizeMode::Infer, None).unwrap();
        assert_eq!(idx_a, vec![0, 0]);
        assert_eq!(idx_b, vec![0, 0]);
        assert_eq!(rec_a, rec_b);
        let mut expected = layer.codebook.row(0).to_vec();
        expected.extend_from_slice(layer.codebook.row(1));
        assert_eq!(rec_a, expected);
    }

    #[test]
    fn infer_code_matches_logit_oracle() {
        let layer = layer(6, 2, 4, 2, 22);
        let mut rng = SeededRng::new(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let (idx, _) = layer.quantize(&x, QuantizeMode::Infer, None).unwrap();
            let logits = oracle_logits(&layer, &x);
            for g in 0..2 {
                let group = &logits[g * 4..(g + 1) * 4];
                assert_eq!(idx[g] as usize, argmax(group));
            }
        }
    }

    #[test]
    fn infer_is_deterministic() {
        let layer = layer(4, 2, 3, 1, 23);
        let x = [0.25, -0.5, 1.5, 0.0];
        let a = layer.quantize(&x, QuantizeMode::Infer, None).unwrap();
        let b = layer.quantize(&x, QuantizeMode::Infer, None).unwrap();
        assert_eq!(a.0, b.0);
        for (p, q) in a.1.iter().zip(&b.1) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn soft_backward_matches_finite_differences() {
        let layer = layer(4, 2, 3, 2, 24);
        let mut rng = SeededRng::new(6);
        let x: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let dout: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mode = QuantizeMode::Soft { temperature: 0.8 };
        let loss = |l: &VqLayer, x: &[f64]| -> f64 {
            let (_, rec) = l.quantize(x, mode, None).unwrap();
            rec.iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let (_, _, cache) = layer.quantize_cached(&x, mode, None).unwrap();
        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &dout, &mut grads);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx[j]).abs() < 1e-6, "dx[{j}] fd {fd} vs {}", dx[j]);
        }
        // Codebook and projection gradients, spot checks.
        let mut lp = layer.clone();
        lp.codebook.data[1] += h;
        let mut lm = layer.clone();
        lm.codebook.data[1] -= h;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((fd - grads.codebook.data[1]).abs() < 1e-6);
        let mut lp = layer.clone();
        lp.projection[0].weight.data[2] += h;
        let mut lm = layer.clone();
        lm.projection[0].weight.data[2] -= h;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((fd - grads.projection[0].weight.data[2]).abs() < 1e-6);
    }

    #[test]
    fn dimension_must_divide_by_groups() {
        let mut rng = SeededRng::new(1);
        assert!(VqLayer::init(5, 2, 4, 1, &mut rng).is_err());
    }

    #[test]
    fn pair_quantizer_produces_both_codes() {
        let mut rng = SeededRng::new(31);
        let q = VectorQuantizer::init(4, 2, 3, 1, &mut rng).unwrap();
        let (code, h_q, c_q) = q
            .quantize(&[0.1, 0.2, 0.3, 0.4], &[-0.1, -0.2, -0.3, -0.4], QuantizeMode::Infer, None)
            .unwrap();
        assert_eq!(code.hidden.len(), 2);
        assert_eq!(code.cell.len(), 2);
        assert_eq!(h_q.len(), 4);
        assert_eq!(c_q.len(), 4);
    }
}
