//! Transducer negative log-likelihood.
//!
//! The probability of a label sequence marginalizes every interleaving of
//! T blank steps (advancing the frame index) and U label steps (advancing
//! the output position), terminated by the blank emitted at the last frame
//! with all labels consumed. `forward_backward_nll` computes it in O(T·U);
//! `brute_force_nll` enumerates alignments outright and exists as the
//! independent reference for small instances; `nll_gradient` produces the
//! exact gradient with respect to every grid entry via alpha/beta
//! occupancies.

use crate::error::{Error, Result};
use crate::model::{LabelId, BLANK};
use crate::numerics::{log_add, log_sum_exp};

/// Per-utterance `T × (U+1) × (|Y|+1)` grid of output log-probabilities.
///
/// Entry `(t, u, k)` is the log-probability of emitting symbol `k` (blank at
/// index 0) at frame `t` after `u` labels have been produced. Every `(t, u)`
/// slice of a grid built from the joint network exp-sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrid {
    frames: usize,
    positions: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl LogProbGrid {
    pub fn minus_inf(frames: usize, positions: usize, vocab: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::ImpossibleAlignment { frames: 0, labels: positions.saturating_sub(1) });
        }
        if positions == 0 || vocab < 2 {
            return Err(Error::Contract(
                "grid needs at least one label position and a two-symbol output".into(),
            ));
        }
        Ok(LogProbGrid {
            frames,
            positions,
            vocab,
            data: vec![f64::NEG_INFINITY; frames * positions * vocab],
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of label positions (U + 1).
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    #[inline]
    fn offset(&self, t: usize, u: usize) -> usize {
        (t * self.positions + u) * self.vocab
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[self.offset(t, u) + k]
    }

    #[inline]
    pub fn set(&mut self, t: usize, u: usize, k: usize, value: f64) {
        let o = self.offset(t, u);
        self.data[o + k] = value;
    }

    #[inline]
    pub fn slice(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.data[o..o + self.vocab]
    }

    pub fn set_slice(&mut self, t: usize, u: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.vocab);
        let o = self.offset(t, u);
        self.data[o..o + self.vocab].copy_from_slice(values);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Check that each (t, u) slice exp-sums to one within `tol`.
    pub fn validate_normalized(&self, tol: f64) -> Result<()> {
        for t in 0..self.frames {
            for u in 0..self.positions {
                let total: f64 = self.slice(t, u).iter().map(|v| v.exp()).sum();
                if (total - 1.0).abs() > tol {
                    return Err(Error::Contract(format!(
                        "grid slice ({t}, {u}) exp-sums to {total}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[LabelId]) -> Result<()> {
        if labels.len() + 1 != self.positions {
            return Err(Error::Contract(format!(
                "grid has {} label positions but sequence has {} labels",
                self.positions,
                labels.len()
            )));
        }
        for &l in labels {
            if l == BLANK || l as usize >= self.vocab {
                return Err(Error::Contract(format!("label id {l} outside grid vocabulary")));
            }
        }
        Ok(())
    }
}

/// Forward/backward log-mass tables over the alignment trellis.
///
/// `alpha[t][u]` is the log-probability of reaching frame `t` with `u`
/// labels emitted; `beta[t][u]` the log-probability of completing from
/// there (including the terminal blank). For every anti-diagonal
/// `t + u = i` the log-sum of `alpha + beta` equals the sequence
/// log-likelihood.
#[derive(Debug, Clone)]
pub struct AlignmentTrellis {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

fn build_trellis(grid: &LogProbGrid, labels: &[LabelId]) -> Result<AlignmentTrellis> {
    grid.check_labels(labels)?;
    let frames = grid.frames();
    let positions = grid.positions();
    let blank = BLANK as usize;
    let mut alpha = vec![vec![f64::NEG_INFINITY; positions]; frames];
    alpha[0][0] = 0.0;
    for t in 0..frames {
        for u in 0..positions {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = log_add(acc, alpha[t - 1][u] + grid.get(t - 1, u, blank));
            }
            if u > 0 {
                acc = log_add(acc, alpha[t][u - 1] + grid.get(t, u - 1, labels[u - 1] as usize));
            }
            alpha[t][u] = acc;
        }
    }
    let mut beta = vec![vec![f64::NEG_INFINITY; positions]; frames];
    beta[frames - 1][positions - 1] = grid.get(frames - 1, positions - 1, blank);
    for t in (0..frames).rev() {
        for u in (0..positions).rev() {
            if t == frames - 1 && u == positions - 1 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < frames {
                acc = log_add(acc, grid.get(t, u, blank) + beta[t + 1][u]);
            }
            if u + 1 < positions {
                acc = log_add(acc, grid.get(t, u, labels[u] as usize) + beta[t][u + 1]);
            }
            beta[t][u] = acc;
        }
    }
    let log_likelihood = alpha[frames - 1][positions - 1] + grid.get(frames - 1, positions - 1, blank);
    Ok(AlignmentTrellis { alpha, beta, log_likelihood })
}

/// Exact negative log-likelihood via the forward recursion.
pub fn forward_backward_nll(grid: &LogProbGrid, labels: &[LabelId]) -> Result<f64> {
    Ok(-build_trellis(grid, labels)?.log_likelihood)
}

/// Forward/backward tables for inspection and invariant tests.
pub fn alignment_trellis(grid: &LogProbGrid, labels: &[LabelId]) -> Result<AlignmentTrellis> {
    build_trellis(grid, labels)
}

/// Log-probabilities of every individual alignment, by explicit enumeration.
///
/// An alignment interleaves `frames - 1` blanks with the `U` labels and ends
/// with the terminal blank, so there are C(frames - 1 + U, U) of them.
/// Guarded to `frames + U <= 12`.
pub fn enumerate_alignment_logprobs(grid: &LogProbGrid, labels: &[LabelId]) -> Result<Vec<f64>> {
    grid.check_labels(labels)?;
    let frames = grid.frames();
    let u_len = labels.len();
    if frames + u_len > 12 {
        return Err(Error::SizeGuard(format!(
            "alignment enumeration refused for T + U = {} > 12",
            frames + u_len
        )));
    }
    let blank = BLANK as usize;
    let mut out = Vec::new();
    // Depth-first walk over (t, u) trellis moves.
    fn walk(
        grid: &LogProbGrid,
        labels: &[LabelId],
        blank: usize,
        t: usize,
        u: usize,
        acc: f64,
        out: &mut Vec<f64>,
    ) {
        let frames = grid.frames();
        if t == frames - 1 && u == labels.len() {
            out.push(acc + grid.get(t, u, blank));
            return;
        }
        if t + 1 < frames {
            walk(grid, labels, blank, t + 1, u, acc + grid.get(t, u, blank), out);
        }
        if u < labels.len() {
            walk(grid, labels, blank, t, u + 1, acc + grid.get(t, u, labels[u] as usize), out);
        }
    }
    walk(grid, labels, blank, 0, 0, 0.0, &mut out);
    Ok(out)
}

/// Reference implementation of the loss by explicit alignment enumeration.
pub fn brute_force_nll(grid: &LogProbGrid, labels: &[LabelId]) -> Result<f64> {
    let alignments = enumerate_alignment_logprobs(grid, labels)?;
    Ok(-log_sum_exp(&alignments)?)
}

/// NLL and its gradient with respect to every grid entry.
///
/// Only blank entries and the entries of the next target label carry
/// gradient; everything else is exactly zero. Treating the grid entries as
/// free variables, the gradient of `-log p` at `(t, u, k)` is the negated
/// posterior occupancy of the corresponding trellis transition.
pub fn nll_gradient(grid: &LogProbGrid, labels: &[LabelId]) -> Result<(f64, LogProbGrid)> {
    let trellis = build_trellis(grid, labels)?;
    let frames = grid.frames();
    let positions = grid.positions();
    let blank = BLANK as usize;
    let log_p = trellis.log_likelihood;
    let mut dgrid = LogProbGrid::minus_inf(frames, positions, grid.vocab_size())?;
    dgrid.data_mut().fill(0.0);
    for t in 0..frames {
        for u in 0..positions {
            let a = trellis.alpha[t][u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            // Blank transition: (t, u) -> (t+1, u), or termination.
            let beta_next = if t + 1 < frames {
                trellis.beta[t + 1][u]
            } else if u == positions - 1 {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            if beta_next != f64::NEG_INFINITY {
                let occ = (a + grid.get(t, u, blank) + beta_next - log_p).exp();
                dgrid.set(t, u, blank, -occ);
            }
            // Label transition: (t, u) -> (t, u+1).
            if u + 1 < positions {
                let k = labels[u] as usize;
                let occ = (a + grid.get(t, u, k) + trellis.beta[t][u + 1] - log_p).exp();
                dgrid.set(t, u, k, -occ);
            }
        }
    }
    Ok((-log_p, dgrid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    /// Random normalized grid.
    fn random_grid(frames: usize, u_len: usize, vocab: usize, rng: &mut SeededRng) -> LogProbGrid {
        let mut grid = LogProbGrid::minus_inf(frames, u_len + 1, vocab).unwrap();
        for t in 0..frames {
            for u in 0..=u_len {
                let logits: Vec<f64> = (0..vocab).map(|_| rng.uniform(-2.0, 2.0)).collect();
                grid.set_slice(t, u, &crate::numerics::log_softmax(&logits));
            }
        }
        grid
    }

    fn uniform_grid(frames: usize, u_len: usize, vocab: usize) -> LogProbGrid {
        let mut grid = LogProbGrid::minus_inf(frames, u_len + 1, vocab).unwrap();
        let v = -(vocab as f64).ln();
        grid.data_mut().fill(v);
        grid
    }

    #[test]
    fn single_frame_no_labels() {
        let mut rng = SeededRng::new(71);
        let grid = random_grid(1, 0, 3, &mut rng);
        let nll = forward_backward_nll(&grid, &[]).unwrap();
        assert!((nll + grid.get(0, 0, 0)).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_marginalizes_two_alignments() {
        let mut rng = SeededRng::new(72);
        let grid = random_grid(2, 1, 3, &mut rng);
        let labels = [2u16];
        let alignments = enumerate_alignment_logprobs(&grid, &labels).unwrap();
        assert_eq!(alignments.len(), 2);
        let expected = -log_sum_exp(&alignments).unwrap();
        let nll = forward_backward_nll(&grid, &labels).unwrap();
        assert!((nll - expected).abs() < 1e-10);
    }

    #[test]
    fn uniform_grid_hand_enumeration() {
        // T = 2, U = 1, |Y| = 1: two alignments, each of probability (1/2)^3.
        let grid = uniform_grid(2, 1, 2);
        let nll = forward_backward_nll(&grid, &[1]).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_count_is_binomial() {
        let mut rng = SeededRng::new(73);
        let grid = random_grid(3, 2, 3, &mut rng);
        let alignments = enumerate_alignment_logprobs(&grid, &[1, 2]).unwrap();
        assert_eq!(alignments.len(), 6); // C(4, 2)
    }

    #[test]
    fn brute_force_size_guard() {
        let grid = uniform_grid(10, 3, 2);
        assert!(matches!(
            brute_force_nll(&grid, &[1, 1, 1]),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn zero_frames_is_impossible_alignment() {
        assert!(matches!(
            LogProbGrid::minus_inf(0, 2, 3),
            Err(Error::ImpossibleAlignment { .. })
        ));
    }

    #[test]
    fn label_count_mismatch_is_error() {
        let grid = uniform_grid(2, 1, 3);
        assert!(forward_backward_nll(&grid, &[1, 2]).is_err());
    }

    #[test]
    fn forward_backward_agrees_with_brute_force_on_random_grids() {
        let mut rng = SeededRng::new(74);
        for _ in 0..100 {
            let frames = 1 + rng.index(4);
            let u_len = rng.index(4);
            let vocab = 2 + rng.index(3);
            let grid = random_grid(frames, u_len, vocab, &mut rng);
            let labels: Vec<u16> = (0..u_len).map(|_| 1 + rng.index(vocab - 1) as u16).collect();
            let fb = forward_backward_nll(&grid, &labels).unwrap();
            let bf = brute_force_nll(&grid, &labels).unwrap();
            assert!((fb - bf).abs() < 1e-6, "fb {fb} vs bf {bf}");
            assert!(fb >= -1e-12, "nll must be nonnegative, got {fb}");
        }
    }

    #[test]
    fn antidiagonal_alpha_beta_consistency() {
        let mut rng = SeededRng::new(75);
        let grid = random_grid(4, 3, 3, &mut rng);
        let labels = [1u16, 2, 1];
        let trellis = alignment_trellis(&grid, &labels).unwrap();
        for diag in 0..(4 + 3) {
            let mut terms = Vec::new();
            for t in 0..4usize {
                if diag >= t {
                    let u = diag - t;
                    if u < 4 {
                        terms.push(trellis.alpha[t][u] + trellis.beta[t][u]);
                    }
                }
            }
            if terms.is_empty() {
                continue;
            }
            let total = log_sum_exp(&terms).unwrap();
            assert!(
                (total - trellis.log_likelihood).abs() < 1e-8,
                "diag {diag}: {total} vs {}",
                trellis.log_likelihood
            );
        }
        // Forward and backward totals agree.
        assert!((trellis.beta[0][0] - trellis.log_likelihood).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = SeededRng::new(76);
        let grid = random_grid(3, 2, 3, &mut rng);
        let labels = [1u16, 2];
        let (nll, dgrid) = nll_gradient(&grid, &labels).unwrap();
        assert!(nll > 0.0);
        let h = 1e-5;
        for idx in 0..grid.data().len() {
            let mut gp = grid.clone();
            gp.data_mut()[idx] += h;
            let mut gm = grid.clone();
            gm.data_mut()[idx] -= h;
            let fd = (forward_backward_nll(&gp, &labels).unwrap()
                - forward_backward_nll(&gm, &labels).unwrap())
                / (2.0 * h);
            let analytic = dgrid.data()[idx];
            let denom = fd.abs().max(analytic.abs()).max(1e-3);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "entry {idx}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn gradient_zero_outside_path_symbols() {
        let mut rng = SeededRng::new(77);
        let grid = random_grid(3, 2, 4, &mut rng);
        let labels = [2u16, 3];
        let (_, dgrid) = nll_gradient(&grid, &labels).unwrap();
        for t in 0..3 {
            for u in 0..3 {
                for k in 0..4 {
                    let on_path = k == 0 || (u < 2 && k == labels[u] as usize);
                    if !on_path {
                        assert_eq!(dgrid.get(t, u, k), 0.0);
                    }
                }
            }
        }
        // At u = U no label transition exists: only blank carries gradient.
        for t in 0..3 {
            for k in 1..4 {
                assert_eq!(dgrid.get(t, 2, k), 0.0);
            }
        }
    }

    #[test]
    fn logit_space_gradient_sums_to_zero_per_slice() {
        // Converting the grid gradient to logit space through the softmax
        // Jacobian must sum to zero in every slice.
        let mut rng = SeededRng::new(78);
        let grid = random_grid(3, 1, 3, &mut rng);
        let labels = [1u16];
        let (_, dgrid) = nll_gradient(&grid, &labels).unwrap();
        for t in 0..3 {
            for u in 0..2 {
                let lp = grid.slice(t, u);
                let d = dgrid.slice(t, u);
                let dsum: f64 = d.iter().sum();
                let logit_grad: Vec<f64> =
                    d.iter().zip(lp).map(|(dv, l)| dv - l.exp() * dsum).collect();
                let total: f64 = logit_grad.iter().sum();
                assert!(total.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nll_invariant_under_consistent_vocabulary_permutation() {
        let mut rng = SeededRng::new(79);
        let grid = random_grid(3, 2, 4, &mut rng);
        let labels = [1u16, 3];
        let nll = forward_backward_nll(&grid, &labels).unwrap();
        // Swap symbols 1 and 3 everywhere (blank stays at 0).
        let mut permuted = LogProbGrid::minus_inf(3, 3, 4).unwrap();
        let perm = [0usize, 3, 2, 1];
        for t in 0..3 {
            for u in 0..3 {
                for k in 0..4 {
                    permuted.set(t, u, perm[k], grid.get(t, u, k));
                }
            }
        }
        let relabeled: Vec<u16> = labels.iter().map(|&l| perm[l as usize] as u16).collect();
        let nll_p = forward_backward_nll(&permuted, &relabeled).unwrap();
        assert!((nll - nll_p).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fb_equals_brute_force(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let frames = 1 + rng.index(4);
            let u_len = rng.index(4);
            let vocab = 2 + rng.index(2);
            let grid = random_grid(frames, u_len, vocab, &mut rng);
            let labels: Vec<u16> = (0..u_len).map(|_| 1 + rng.index(vocab - 1) as u16).collect();
            let fb = forward_backward_nll(&grid, &labels).unwrap();
            let bf = brute_force_nll(&grid, &labels).unwrap();
            prop_assert!((fb - bf).abs() < 1e-6);
        }
    }
}
