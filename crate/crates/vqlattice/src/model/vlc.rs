//! Very-limited-context prediction network.
//!
//! Two parallel width-2 convolutions over label embeddings — one gated by a
//! tanh nonlinearity, one a bias-free linear skip — summed into the
//! prediction output. Because the kernel width is two, the output depends on
//! exactly the last two labels, which is what makes context-keyed hypothesis
//! merging exact for this network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMap, Matrix, SeededRng};

/// Context window: (second-to-last label, last label); 0 is the padding /
/// start slot used for prefixes shorter than two labels.
pub type ContextWindow = (u16, u16);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlcNet {
    /// `(labels + 1) × embed_dim`; row 0 is the learned padding embedding.
    pub embed: Matrix,
    /// Gated branch: affine over the concatenated window, then tanh.
    pub conv_gate: DenseMap,
    /// Skip branch: bias-free linear over the same window.
    pub conv_skip: Matrix,
}

#[derive(Debug, Clone)]
pub struct VlcCache {
    pub window: ContextWindow,
    pub concat: Vec<f64>,
    pub gate_out: Vec<f64>,
}

impl VlcNet {
    pub fn init(label_count: usize, embed_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (2.0 * embed_dim as f64).sqrt();
        VlcNet {
            embed: Matrix::init_uniform(label_count + 1, embed_dim, 0.1, rng),
            conv_gate: DenseMap::init(out_dim, 2 * embed_dim, rng),
            conv_skip: Matrix::init_uniform(out_dim, 2 * embed_dim, scale, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.cols
    }

    pub fn out_dim(&self) -> usize {
        self.conv_gate.out_dim()
    }

    fn concat_window(&self, window: ContextWindow) -> Result<Vec<f64>> {
        let (a, b) = window;
        if a as usize >= self.embed.rows || b as usize >= self.embed.rows {
            return Err(Error::Contract(format!("context window ({a}, {b}) out of vocabulary range")));
        }
        let mut concat = Vec::with_capacity(2 * self.embed_dim());
        concat.extend_from_slice(self.embed.row(a as usize));
        concat.extend_from_slice(self.embed.row(b as usize));
        Ok(concat)
    }

    /// Prediction output for a two-label window: tanh branch plus skip branch.
    pub fn output(&self, window: ContextWindow) -> Result<Vec<f64>> {
        Ok(self.output_cached(window)?.0)
    }

    pub fn output_cached(&self, window: ContextWindow) -> Result<(Vec<f64>, VlcCache)> {
        let concat = self.concat_window(window)?;
        let gate_out: Vec<f64> = self.conv_gate.apply(&concat)?.iter().map(|v| v.tanh()).collect();
        let skip = self.conv_skip.matvec(&concat);
        let out = gate_out.iter().zip(&skip).map(|(g, s)| g + s).collect();
        Ok((out, VlcCache { window, concat, gate_out }))
    }

    pub fn backward(&self, cache: &VlcCache, dout: &[f64], grads: &mut VlcNet) {
        // Gate branch.
        let dpre: Vec<f64> = dout
            .iter()
            .zip(&cache.gate_out)
            .map(|(d, g)| d * (1.0 - g * g))
            .collect();
        let mut dconcat = self.conv_gate.backward(&cache.concat, &dpre, &mut grads.conv_gate);
        // Skip branch.
        grads.conv_skip.add_outer(dout, &cache.concat);
        self.conv_skip.matvec_transpose_add(dout, &mut dconcat);
        // Into the two embedding rows.
        let e = self.embed_dim();
        let (a, b) = cache.window;
        for (g, d) in grads.embed.row_mut(a as usize).iter_mut().zip(&dconcat[..e]) {
            *g += d;
        }
        for (g, d) in grads.embed.row_mut(b as usize).iter_mut().zip(&dconcat[e..]) {
            *g += d;
        }
    }

    pub fn zeros_like(&self) -> VlcNet {
        VlcNet {
            embed: Matrix::zeros(self.embed.rows, self.embed.cols),
            conv_gate: DenseMap::zeros(self.conv_gate.out_dim(), self.conv_gate.in_dim()),
            conv_skip: Matrix::zeros(self.conv_skip.rows, self.conv_skip.cols),
        }
    }
}

/// Context window for position `u` of a label sequence, padded with the
/// start slot (0) for short prefixes.
pub fn window_at(labels: &[u16], u: usize) -> ContextWindow {
    debug_assert!(u <= labels.len());
    let last = if u >= 1 { labels[u - 1] } else { 0 };
    let second = if u >= 2 { labels[u - 2] } else { 0 };
    (second, last)
}
