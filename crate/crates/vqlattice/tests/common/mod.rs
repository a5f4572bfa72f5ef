//! Shared helpers for integration tests.

use vqlattice::loss::nll_gradient;
use vqlattice::model::{LabelId, Model, ModelParams, QuantizeMode};
use vqlattice::numerics::SeededRng;

pub fn random_features(frames: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..frames)
        .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect()
}

/// Analytic parameter gradient of the utterance NLL.
pub fn analytic_gradient(
    model: &Model,
    features: &[Vec<f64>],
    labels: &[LabelId],
    mode: QuantizeMode,
) -> (f64, ModelParams) {
    let fwd = model.forward_cached(features, labels, mode, None).unwrap();
    let (nll, dgrid) = nll_gradient(&fwd.grid, labels).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&fwd, &dgrid, &mut grads);
    (nll, grads)
}

/// Central finite differences on a deterministic sample of coordinates from
/// every parameter block. Returns paired (analytic, numeric) values.
pub fn finite_difference_sample(
    model: &Model,
    features: &[Vec<f64>],
    labels: &[LabelId],
    mode: QuantizeMode,
    per_block: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let (_, grads) = analytic_gradient(model, features, labels, mode);
    let grad_blocks: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
    let mut rng = SeededRng::new(seed);
    // Pick coordinates per block.
    let picks: Vec<Vec<usize>> = grad_blocks
        .iter()
        .map(|b| {
            let mut idx: Vec<usize> = (0..b.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(per_block.min(b.len()));
            idx.sort_unstable();
            idx
        })
        .collect();
    let mut pairs = Vec::new();
    let mut probe = model.clone();
    let nll_of = |m: &Model| m.nll(features, labels, mode, None).unwrap();
    let mut block_idx = 0;
    // Walk blocks in the canonical order, perturbing the chosen coordinates.
    let n_blocks = grad_blocks.len();
    for b in 0..n_blocks {
        for &coord in &picks[b] {
            let h = 1e-5;
            let mut set = |m: &mut Model, delta: f64| {
                let mut i = 0;
                m.params.for_each_block_mut(&mut |block: &mut [f64]| {
                    if i == b {
                        block[coord] += delta;
                    }
                    i += 1;
                });
            };
            set(&mut probe, h);
            let up = nll_of(&probe);
            set(&mut probe, -2.0 * h);
            let down = nll_of(&probe);
            set(&mut probe, h);
            let numeric = (up - down) / (2.0 * h);
            pairs.push((grad_blocks[b][coord], numeric));
        }
        block_idx += 1;
    }
    assert_eq!(block_idx, n_blocks);
    pairs
}

/// Relative error between the analytic and numeric gradient samples,
/// aggregated over the whole sampled vector.
pub fn relative_gradient_error(pairs: &[(f64, f64)]) -> f64 {
    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for &(a, b) in pairs {
        diff += (a - b) * (a - b);
        norm_a += a * a;
        norm_b += b * b;
    }
    diff.sqrt() / norm_a.sqrt().max(norm_b.sqrt()).max(1e-12)
}
