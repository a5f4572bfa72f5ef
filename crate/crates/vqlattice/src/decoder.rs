//! Alignment-length synchronous beam search with hypothesis merging.
//!
//! All hypotheses expanded at step `i` share `t + u = i` (frames consumed
//! plus labels emitted). Each step expands every beam entry over blank and
//! the full vocabulary, merges hypotheses whose merge keys coincide
//! (summing their posteriors), prunes to the beam size, and records the
//! surviving emissions in the lattice. Hypotheses that consume the final
//! frame through a blank move to the final set.
//!
//! Merge keys come from the strategy: the discrete quantizer code for
//! VQ models, the last-k-label window for limited-context merging, or the
//! full label sequence. Identical label sequences always recombine
//! score-wise (that is what makes exhaustive-beam scores equal forward
//! probabilities); under `MergeStrategy::None` those recombinations keep the
//! lattice a plain prefix tree instead of adding parallel arcs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{update_lattice, ArcRecord, FinalRecord, HypUpdate, Lattice, NodeId, StepResults};
use crate::model::{DiscreteCode, LabelId, Model, PredNetState, Variant, BLANK};
use crate::numerics::log_add;

/// How hypotheses are keyed for merging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeStrategy {
    /// Tree beam search: label sequences still recombine score-wise, but the
    /// lattice stays a prefix tree.
    None,
    /// Merge hypotheses with identical label sequences (exactness baseline).
    SameLabelSequence,
    /// Merge on the discrete quantizer code. `include_length` additionally
    /// conditions on the output length so merged hypotheses share their
    /// frame index; disabling it merges on the code alone.
    VqState { include_length: bool },
    /// Merge on the last `context` labels (plus output length).
    LimitedContext { context: usize },
}

impl MergeStrategy {
    pub fn vq() -> Self {
        MergeStrategy::VqState { include_length: true }
    }

    pub fn limited(context: usize) -> Self {
        MergeStrategy::LimitedContext { context }
    }
}

impl std::fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeStrategy::None => write!(f, "none"),
            MergeStrategy::SameLabelSequence => write!(f, "same-label"),
            MergeStrategy::VqState { include_length: true } => write!(f, "vq-state"),
            MergeStrategy::VqState { include_length: false } => write!(f, "vq-state-nolen"),
            MergeStrategy::LimitedContext { context } => write!(f, "limited-context:{context}"),
        }
    }
}

impl std::str::FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MergeStrategy::None),
            "same-label" => Ok(MergeStrategy::SameLabelSequence),
            "vq-state" => Ok(MergeStrategy::VqState { include_length: true }),
            "vq-state-nolen" => Ok(MergeStrategy::VqState { include_length: false }),
            other => {
                if let Some(k) = other.strip_prefix("limited-context:") {
                    let context: usize = k
                        .parse()
                        .map_err(|_| Error::Config(format!("bad context size in {other:?}")))?;
                    Ok(MergeStrategy::LimitedContext { context })
                } else {
                    Err(Error::Config(format!(
                        "unknown merge strategy {other:?} (none, same-label, vq-state, vq-state-nolen, limited-context:K)"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub beam: usize,
    /// `U_max = ceil(u_max_ratio * T)`.
    pub u_max_ratio: f64,
    pub strategy: MergeStrategy,
    pub emit_lattice: bool,
    /// Keep per-merge diagnostics in the result.
    pub record_merges: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam: 8,
            u_max_ratio: 1.0,
            strategy: MergeStrategy::None,
            emit_lattice: false,
            record_merges: false,
        }
    }
}

/// A finished hypothesis. `score` is the summed (log) posterior of all
/// alignments recombined into it; `viterbi_*` track its best single
/// alignment, which by construction equals the best lattice path through
/// its final arcs.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalHypothesis {
    pub labels: Vec<LabelId>,
    pub score: f64,
    pub viterbi_score: f64,
    pub viterbi_labels: Vec<LabelId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestPath {
    pub labels: Vec<LabelId>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeMember {
    pub labels: Vec<LabelId>,
    pub score: f64,
    pub code: Option<DiscreteCode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeEvent {
    pub step: usize,
    pub members: Vec<MergeMember>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeStats {
    pub frames: usize,
    pub steps: usize,
    pub expansions: usize,
    pub merge_events: usize,
    pub finals: usize,
}

#[derive(Debug)]
pub struct DecodeResult {
    /// Final hypotheses sorted by posterior score, best first.
    pub nbest: Vec<FinalHypothesis>,
    /// Best single alignment overall; equals the lattice's best path.
    pub best_path: BestPath,
    pub lattice: Option<Lattice>,
    pub merge_events: Vec<MergeEvent>,
    pub stats: DecodeStats,
}

impl DecodeResult {
    pub fn transcript(&self) -> &[LabelId] {
        &self.nbest[0].labels
    }
}

/// In-flight hypothesis.
#[derive(Debug, Clone)]
struct Hyp {
    node: NodeId,
    labels: Vec<LabelId>,
    /// Frames consumed so far; the next decision conditions on frame `t`.
    frames: usize,
    state: PredNetState,
    /// Cached joint-network projection of the prediction output.
    pred_proj: Vec<f64>,
    /// Summed log posterior of all alignments recombined into this hypothesis.
    score: f64,
    /// Blank log-probs accumulated since the last emission (pending arc mass).
    pending_blank: f64,
    /// Best single-alignment mass and its spelling.
    viterbi: f64,
    viterbi_labels: Vec<LabelId>,
}

#[derive(Debug, Clone)]
struct Candidate {
    hyp: Hyp,
    /// `Some` for label expansions: the pending arc into the (not yet
    /// assigned) target node. `None` for blank continuations.
    emission: Option<ArcRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum MergeKey {
    Labels(Vec<LabelId>),
    Code {
        length: Option<usize>,
        code: DiscreteCode,
    },
    Context {
        length: usize,
        window: Vec<LabelId>,
    },
}

fn merge_key(strategy: &MergeStrategy, hyp: &Hyp) -> Result<MergeKey> {
    Ok(match strategy {
        MergeStrategy::None | MergeStrategy::SameLabelSequence => MergeKey::Labels(hyp.labels.clone()),
        MergeStrategy::VqState { include_length } => {
            let code = hyp
                .state
                .code()
                .ok_or_else(|| Error::Incompatible("vq-state merging needs a vq model".into()))?
                .clone();
            MergeKey::Code { length: include_length.then(|| hyp.labels.len()), code }
        }
        MergeStrategy::LimitedContext { context } => {
            let start = hyp.labels.len().saturating_sub(*context);
            MergeKey::Context { length: hyp.labels.len(), window: hyp.labels[start..].to_vec() }
        }
    })
}

/// Beam ordering: score descending, then shorter label sequence, then
/// lexicographically smaller labels. Total and deterministic.
fn rank(a_score: f64, a_labels: &[LabelId], b_score: f64, b_labels: &[LabelId]) -> std::cmp::Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_labels.len().cmp(&b_labels.len()))
        .then_with(|| a_labels.cmp(b_labels))
}

struct MergedCandidate {
    hyp: Hyp,
    update: HypUpdate,
    event: Option<Vec<MergeMember>>,
}

/// Combine one merge group: sum posteriors, pick the maximum-score member as
/// representative, and assemble the lattice update.
///
/// When the group contains a blank continuation, the merged hypothesis keeps
/// that member's pending blank mass and the new member arcs are shifted by
/// it, so that every path sum through the shared node telescopes to a true
/// alignment log-probability.
fn combine_group(strategy: &MergeStrategy, members: Vec<Candidate>, record_event: bool) -> Result<MergedCandidate> {
    debug_assert!(!members.is_empty());
    let event = (record_event && members.len() > 1).then(|| {
        members
            .iter()
            .map(|c| MergeMember {
                labels: c.hyp.labels.clone(),
                score: c.hyp.score,
                code: c.hyp.state.code().cloned(),
            })
            .collect()
    });
    let mut score = f64::NEG_INFINITY;
    for c in &members {
        score = log_add(score, c.hyp.score);
    }
    let rep = members
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| rank(a.hyp.score, &a.hyp.labels, b.hyp.score, &b.hyp.labels))
        .map(|(i, _)| i)
        .expect("nonempty group");
    let blank_member: Vec<usize> = members
        .iter()
        .enumerate()
        .filter(|(_, c)| c.emission.is_none())
        .map(|(i, _)| i)
        .collect();
    if blank_member.len() > 1 {
        return Err(Error::InvalidLattice(
            "two blank continuations share a merge key; they should have merged earlier".into(),
        ));
    }
    let blank_idx = blank_member.first().copied();
    let drop_label_arcs = matches!(strategy, MergeStrategy::None) && blank_idx.is_some();
    // Viterbi bookkeeping follows the lattice: members whose arcs are not
    // recorded cannot contribute a representable path.
    let viterbi_src = members
        .iter()
        .filter(|c| !(drop_label_arcs && c.emission.is_some()))
        .min_by(|a, b| rank(a.hyp.viterbi, &a.hyp.viterbi_labels, b.hyp.viterbi, &b.hyp.viterbi_labels))
        .expect("at least one representable member");
    let viterbi = viterbi_src.hyp.viterbi;
    let viterbi_labels = viterbi_src.hyp.viterbi_labels.clone();

    let (pending, node, update) = match blank_idx {
        Some(bi) => {
            let pending = members[bi].hyp.pending_blank;
            let node = members[bi].hyp.node;
            if drop_label_arcs {
                (pending, node, HypUpdate::BlankOnly)
            } else {
                let arcs: Vec<ArcRecord> = members
                    .iter()
                    .filter_map(|c| c.emission.clone())
                    .map(|mut a| {
                        a.weight -= pending;
                        a
                    })
                    .collect();
                if arcs.is_empty() {
                    (pending, node, HypUpdate::BlankOnly)
                } else {
                    (pending, node, HypUpdate::Emission { adopted: Some(node), arcs })
                }
            }
        }
        None => {
            let arcs: Vec<ArcRecord> = members.iter().filter_map(|c| c.emission.clone()).collect();
            debug_assert!(!arcs.is_empty());
            (0.0, members[rep].hyp.node, HypUpdate::Emission { adopted: None, arcs })
        }
    };
    let rep = &members[rep].hyp;
    Ok(MergedCandidate {
        hyp: Hyp {
            node,
            labels: rep.labels.clone(),
            frames: rep.frames,
            state: rep.state.clone(),
            pred_proj: rep.pred_proj.clone(),
            score,
            pending_blank: pending,
            viterbi,
            viterbi_labels,
        },
        update,
        event,
    })
}

/// Keep the top `beam` hypotheses under the deterministic ranking.
fn prune_beam(mut merged: Vec<MergedCandidate>, beam: usize) -> Vec<MergedCandidate> {
    merged.sort_by(|a, b| rank(a.hyp.score, &a.hyp.labels, b.hyp.score, &b.hyp.labels));
    merged.truncate(beam);
    merged
}

fn check_compatibility(model: &Model, cfg: &DecoderConfig) -> Result<()> {
    if cfg.beam == 0 {
        return Err(Error::Contract("beam size must be >= 1".into()));
    }
    if let MergeStrategy::LimitedContext { context } = cfg.strategy {
        if context == 0 {
            return Err(Error::Contract("limited-context merging needs context >= 1".into()));
        }
    }
    if matches!(cfg.strategy, MergeStrategy::VqState { .. }) && model.variant() != Variant::Vq {
        return Err(Error::Incompatible(format!(
            "vq-state merging requires the vq model variant, got {}",
            model.variant()
        )));
    }
    Ok(())
}

/// Decode one utterance.
pub fn decode(model: &Model, features: &[Vec<f64>], cfg: &DecoderConfig) -> Result<DecodeResult> {
    check_compatibility(model, cfg)?;
    if features.is_empty() {
        return Err(Error::EmptyInput("decoding needs at least one frame".into()));
    }
    let enc = model.encode(features)?;
    let frames = enc.len();
    let joint = model.joint();
    let enc_proj: Vec<Vec<f64>> = enc.iter().map(|m| joint.project_enc(m)).collect::<Result<_>>()?;
    let u_max = (cfg.u_max_ratio * frames as f64).ceil().max(0.0) as usize;
    let label_count = model.vocab.label_count();

    let mut lattice = Lattice::new(frames);
    let initial_state = model.initial_pred_state()?;
    let initial_g = model.pred_output(&initial_state)?;
    let mut beam: Vec<Hyp> = vec![Hyp {
        node: lattice.start(),
        labels: Vec::new(),
        frames: 0,
        state: initial_state,
        pred_proj: joint.project_pred(&initial_g)?,
        score: 0.0,
        pending_blank: 0.0,
        viterbi: 0.0,
        viterbi_labels: Vec::new(),
    }];

    // Finals keyed by label sequence; repeated arrivals recombine.
    let mut finals: BTreeMap<Vec<LabelId>, FinalHypothesis> = BTreeMap::new();
    let mut merge_events = Vec::new();
    let mut stats = DecodeStats { frames, ..DecodeStats::default() };

    for step in 1..=(frames + u_max) {
        if beam.is_empty() {
            break;
        }
        stats.steps = step;
        let mut candidates: Vec<Candidate> = Vec::new();
        let mut final_records: Vec<FinalRecord> = Vec::new();
        for hyp in &beam {
            debug_assert_eq!(hyp.frames + hyp.labels.len() + 1, step);
            let log_probs = joint.log_probs_projected(&enc_proj[hyp.frames], &hyp.pred_proj);
            let blank_lp = log_probs[BLANK as usize];
            stats.expansions += 1;
            if hyp.frames + 1 == frames {
                // Terminal blank: route to the final set.
                let labels = hyp.labels.clone();
                let score = hyp.score + blank_lp;
                let viterbi = hyp.viterbi + blank_lp;
                if cfg.emit_lattice {
                    final_records.push(FinalRecord {
                        node: hyp.node,
                        weight: hyp.pending_blank + blank_lp,
                    });
                }
                finals
                    .entry(labels.clone())
                    .and_modify(|f| {
                        f.score = log_add(f.score, score);
                        if rank(viterbi, &hyp.viterbi_labels, f.viterbi_score, &f.viterbi_labels)
                            == std::cmp::Ordering::Less
                        {
                            f.viterbi_score = viterbi;
                            f.viterbi_labels = hyp.viterbi_labels.clone();
                        }
                    })
                    .or_insert_with(|| FinalHypothesis {
                        labels,
                        score,
                        viterbi_score: viterbi,
                        viterbi_labels: hyp.viterbi_labels.clone(),
                    });
            } else {
                let mut next = hyp.clone();
                next.frames += 1;
                next.score += blank_lp;
                next.pending_blank += blank_lp;
                next.viterbi += blank_lp;
                candidates.push(Candidate { hyp: next, emission: None });
            }
            if hyp.labels.len() < u_max {
                for label in 1..=label_count as LabelId {
                    // The extra prediction-network forward pass per expansion:
                    // for the vq variant it yields the discrete code merging
                    // keys on.
                    let state = model.pred_step(&hyp.state, label)?;
                    let g = model.pred_output(&state)?;
                    let lp = log_probs[label as usize];
                    let mut labels = hyp.labels.clone();
                    labels.push(label);
                    let mut viterbi_labels = hyp.viterbi_labels.clone();
                    viterbi_labels.push(label);
                    candidates.push(Candidate {
                        hyp: Hyp {
                            node: hyp.node,
                            labels,
                            frames: hyp.frames,
                            state,
                            pred_proj: joint.project_pred(&g)?,
                            score: hyp.score + lp,
                            pending_blank: 0.0,
                            viterbi: hyp.viterbi + lp,
                            viterbi_labels,
                        },
                        emission: Some(ArcRecord {
                            src: hyp.node,
                            label,
                            weight: hyp.pending_blank + lp,
                            emit_time: hyp.frames as u32,
                        }),
                    });
                }
            }
        }
        // Merge hypotheses sharing a key (deterministic key order).
        let mut groups: BTreeMap<MergeKey, Vec<Candidate>> = BTreeMap::new();
        for cand in candidates {
            let key = merge_key(&cfg.strategy, &cand.hyp)?;
            groups.entry(key).or_default().push(cand);
        }
        let mut merged = Vec::with_capacity(groups.len());
        for (_, members) in groups {
            if members.len() > 1 {
                stats.merge_events += 1;
            }
            merged.push(combine_group(&cfg.strategy, members, cfg.record_merges)?);
        }
        let mut survivors = prune_beam(merged, cfg.beam);
        for m in &survivors {
            if let Some(event) = &m.event {
                merge_events.push(MergeEvent { step, members: event.clone() });
            }
        }
        if cfg.emit_lattice {
            let step_results = StepResults {
                updates: survivors.iter().map(|m| m.update.clone()).collect(),
                finals: final_records,
            };
            let assigned = update_lattice(&mut lattice, &step_results)?;
            for (m, node) in survivors.iter_mut().zip(assigned) {
                if let Some(node) = node {
                    m.hyp.node = node;
                }
            }
        }
        beam = survivors.into_iter().map(|m| m.hyp).collect();
    }

    if finals.is_empty() {
        return Err(Error::NoHypothesis);
    }
    stats.finals = finals.len();
    let mut nbest: Vec<FinalHypothesis> = finals.into_values().collect();
    nbest.sort_by(|a, b| rank(a.score, &a.labels, b.score, &b.labels));
    let best = nbest
        .iter()
        .min_by(|a, b| rank(a.viterbi_score, &a.viterbi_labels, b.viterbi_score, &b.viterbi_labels))
        .expect("nonempty finals");
    let best_path = BestPath { labels: best.viterbi_labels.clone(), score: best.viterbi_score };
    let lattice = if cfg.emit_lattice {
        lattice.trim()?;
        Some(lattice)
    } else {
        None
    };
    Ok(DecodeResult { nbest, best_path, lattice, merge_events, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::forward_backward_nll;
    use crate::model::{ModelConfig, QuantizeMode, Vocabulary};
    use crate::numerics::SeededRng;

    fn small_model(variant: Variant, seed: u64) -> Model {
        Model::new(ModelConfig::small(variant), Vocabulary::letters(2).unwrap(), seed).unwrap()
    }

    fn random_feats(frames: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..frames)
            .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    }

    #[test]
    fn beam_must_be_positive() {
        let model = small_model(Variant::Baseline, 1);
        let cfg = DecoderConfig { beam: 0, ..DecoderConfig::default() };
        assert!(decode(&model, &random_feats(2, 4, 1), &cfg).is_err());
    }

    #[test]
    fn empty_features_is_error() {
        let model = small_model(Variant::Baseline, 1);
        assert!(matches!(
            decode(&model, &[], &DecoderConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn vq_strategy_needs_vq_model() {
        let model = small_model(Variant::Baseline, 1);
        let cfg = DecoderConfig { strategy: MergeStrategy::vq(), ..DecoderConfig::default() };
        assert!(matches!(
            decode(&model, &random_feats(2, 4, 1), &cfg),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn strategy_parsing_roundtrip() {
        for s in ["none", "same-label", "vq-state", "vq-state-nolen", "limited-context:2"] {
            let strat: MergeStrategy = s.parse().unwrap();
            assert_eq!(strat.to_string(), s);
        }
        assert!("bogus".parse::<MergeStrategy>().is_err());
    }

    #[test]
    fn single_frame_best_is_argmax_over_two_step_paths() {
        // T = 1: candidates are the blank-only path and single-label+blank
        // paths; an exhaustive beam must rank them by their exact scores.
        let model = small_model(Variant::Baseline, 2);
        let feats = random_feats(1, 4, 2);
        let cfg = DecoderConfig { beam: 1000, ..DecoderConfig::default() };
        let result = decode(&model, &feats, &cfg).unwrap();
        let enc = model.encode(&feats).unwrap();
        let g0 = model.pred_output(&model.initial_pred_state().unwrap()).unwrap();
        let lp0 = model.joint().log_probs(&enc[0], &g0).unwrap();
        let mut expected: Vec<(Vec<LabelId>, f64)> = vec![(vec![], lp0[0])];
        for l in 1..=2u16 {
            let st = model.pred_step(&model.initial_pred_state().unwrap(), l).unwrap();
            let g = model.pred_output(&st).unwrap();
            let lp1 = model.joint().log_probs(&enc[0], &g).unwrap();
            expected.push((vec![l], lp0[l as usize] + lp1[0]));
        }
        expected.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        assert_eq!(result.nbest.len(), expected.len());
        for (got, (labels, score)) in result.nbest.iter().zip(&expected) {
            assert_eq!(&got.labels, labels);
            assert!((got.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy_path() {
        let model = small_model(Variant::Baseline, 3);
        let feats = random_feats(3, 4, 3);
        let cfg = DecoderConfig { beam: 1, ..DecoderConfig::default() };
        let result = decode(&model, &feats, &cfg).unwrap();
        assert!(result.nbest.len() >= 1);
        // With beam 1 the machine carries exactly one hypothesis per step,
        // so the returned transcript is the greedy trajectory.
        assert_eq!(result.stats.expansions, result.stats.steps.min(result.stats.expansions));
    }

    /// Exhaustive-beam scores must equal the forward probabilities computed
    /// independently by the loss recursion, for every final sequence.
    #[test]
    fn exhaustive_beam_scores_equal_forward_probabilities() {
        for (variant, seed) in [
            (Variant::Baseline, 10u64),
            (Variant::Vq, 11),
            (Variant::Vlc, 12),
        ] {
            let model = small_model(variant, seed);
            let feats = random_feats(3, 4, seed);
            let cfg = DecoderConfig {
                beam: 100_000,
                u_max_ratio: 2.0 / 3.0, // U_max = 2
                strategy: MergeStrategy::SameLabelSequence,
                ..DecoderConfig::default()
            };
            let result = decode(&model, &feats, &cfg).unwrap();
            // Every sequence of length <= 2 over the 2-symbol vocabulary.
            assert_eq!(result.nbest.len(), 1 + 2 + 4);
            for f in &result.nbest {
                let grid = model
                    .log_prob_grid(&feats, &f.labels, QuantizeMode::Infer, None)
                    .unwrap();
                let nll = forward_backward_nll(&grid, &f.labels).unwrap();
                assert!(
                    (f.score + nll).abs() < 1e-6,
                    "{variant}: sequence {:?}: decoder {} vs forward {}",
                    f.labels,
                    f.score,
                    -nll
                );
            }
        }
    }

    #[test]
    fn merge_combines_scores_and_keeps_max_member() {
        let model = small_model(Variant::Baseline, 4);
        let st = model.initial_pred_state().unwrap();
        let g = model.pred_output(&st).unwrap();
        let pg = model.joint().project_pred(&g).unwrap();
        let mk = |labels: Vec<LabelId>, score: f64, emission: Option<ArcRecord>| Candidate {
            hyp: Hyp {
                node: 0,
                labels: labels.clone(),
                frames: 2,
                state: st.clone(),
                pred_proj: pg.clone(),
                score,
                pending_blank: 0.0,
                viterbi: score,
                viterbi_labels: labels,
            },
            emission,
        };
        let members = vec![
            mk(vec![1], (0.2f64).ln(), Some(ArcRecord { src: 0, label: 1, weight: (0.2f64).ln(), emit_time: 1 })),
            mk(vec![2], (0.3f64).ln(), Some(ArcRecord { src: 0, label: 2, weight: (0.3f64).ln(), emit_time: 1 })),
        ];
        let merged = combine_group(&MergeStrategy::vq(), members, true).unwrap();
        assert!((merged.hyp.score - (0.5f64).ln()).abs() < 1e-12);
        assert_eq!(merged.hyp.labels, vec![2]); // representative = max score
        match merged.update {
            HypUpdate::Emission { adopted: None, ref arcs } => assert_eq!(arcs.len(), 2),
            _ => panic!("expected a fresh-node emission"),
        }
        assert!(merged.event.is_some());
    }

    #[test]
    fn prune_keeps_top_scores_with_lexicographic_tie_break() {
        let model = small_model(Variant::Baseline, 5);
        let st = model.initial_pred_state().unwrap();
        let g = model.pred_output(&st).unwrap();
        let pg = model.joint().project_pred(&g).unwrap();
        let mk = |labels: Vec<LabelId>, score: f64| MergedCandidate {
            hyp: Hyp {
                node: 0,
                labels: labels.clone(),
                frames: 0,
                state: st.clone(),
                pred_proj: pg.clone(),
                score,
                pending_blank: 0.0,
                viterbi: score,
                viterbi_labels: labels,
            },
            update: HypUpdate::BlankOnly,
            event: None,
        };
        let pruned = prune_beam(vec![mk(vec![2], -1.0), mk(vec![1], -3.0), mk(vec![1, 1], -2.0)], 2);
        assert_eq!(pruned.len(), 2);
        assert_eq!(pruned[0].hyp.score, -1.0);
        assert_eq!(pruned[1].hyp.score, -2.0);
        // Tie at the cutoff: lexicographically smaller sequence survives.
        let pruned = prune_beam(vec![mk(vec![2], -1.0), mk(vec![1], -1.0)], 1);
        assert_eq!(pruned[0].hyp.labels, vec![1]);
    }

    #[test]
    fn alignment_step_invariant_holds() {
        // Checked by the debug_assert in the loop; run a decode with
        // assertions on to exercise it.
        let model = small_model(Variant::Vq, 6);
        let feats = random_feats(4, 4, 6);
        let cfg = DecoderConfig {
            beam: 4,
            strategy: MergeStrategy::vq(),
            emit_lattice: true,
            ..DecoderConfig::default()
        };
        let result = decode(&model, &feats, &cfg).unwrap();
        assert!(!result.nbest.is_empty());
    }

    #[test]
    fn merging_never_decreases_scores() {
        let model = small_model(Variant::Vq, 7);
        let feats = random_feats(4, 4, 7);
        let merged_cfg = DecoderConfig {
            beam: 8,
            strategy: MergeStrategy::vq(),
            ..DecoderConfig::default()
        };
        let tree_cfg = DecoderConfig { beam: 8, ..DecoderConfig::default() };
        let merged = decode(&model, &feats, &merged_cfg).unwrap();
        let tree = decode(&model, &feats, &tree_cfg).unwrap();
        // The merged run's best posterior is at least the tree run's best.
        assert!(merged.nbest[0].score >= tree.nbest[0].score - 1e-12);
    }

    #[test]
    fn monotone_beam_property_on_trained_model() {
        // Growing the beam must not lose the best path once the model is
        // peaked enough to rank hypotheses meaningfully. (On untrained,
        // near-uniform models plain beam search has no such guarantee.)
        let mut model = small_model(Variant::Baseline, 8);
        let feats = random_feats(5, 4, 8);
        let data = vec![crate::training::TrainExample { features: feats.clone(), labels: vec![1, 2] }];
        let cfg = crate::training::TrainConfig {
            epochs: 120,
            batch_size: 1,
            peak_lr: 2e-2,
            weight_decay: 0.0,
            ..crate::training::TrainConfig::default()
        };
        crate::training::train(&mut model, &data, &cfg).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for beam in [1usize, 2, 4, 8, 16] {
            let cfg = DecoderConfig { beam, ..DecoderConfig::default() };
            let result = decode(&model, &feats, &cfg).unwrap();
            assert!(
                result.nbest[0].score >= prev - 1e-12,
                "beam {beam}: {} < {prev}",
                result.nbest[0].score
            );
            prev = result.nbest[0].score;
        }
    }

    #[test]
    fn blank_expansion_keeps_code_unchanged() {
        let model = small_model(Variant::Vq, 9);
        let feats = random_feats(3, 4, 9);
        let cfg = DecoderConfig {
            beam: 6,
            strategy: MergeStrategy::vq(),
            emit_lattice: true,
            record_merges: true,
            ..DecoderConfig::default()
        };
        // Covered structurally: blank candidates clone the state (and code).
        // Here we just confirm decoding is deterministic end to end.
        let a = decode(&model, &feats, &cfg).unwrap();
        let b = decode(&model, &feats, &cfg).unwrap();
        assert_eq!(a.nbest, b.nbest);
        assert_eq!(a.best_path, b.best_path);
        assert_eq!(
            a.lattice.as_ref().unwrap().write_text(&model.vocab),
            b.lattice.as_ref().unwrap().write_text(&model.vocab)
        );
    }

    #[test]
    fn label_expansion_code_matches_independent_quantization() {
        let model = small_model(Variant::Vq, 14);
        let st = model.initial_pred_state().unwrap();
        let stepped = model.pred_step(&st, 2).unwrap();
        // Recompute the code through the quantizer directly.
        let (embed, cell, quantizer) = match &model.params.prednet {
            crate::model::PredNetParams::VqLstm { embed, cell, quantizer } => (embed, cell, quantizer),
            _ => unreachable!(),
        };
        let st0 = match &st {
            PredNetState::VqLstm { state, .. } => state.clone(),
            _ => unreachable!(),
        };
        let raw = cell.step(embed.row(1), &st0).unwrap();
        let (code, _, _) = quantizer.quantize(&raw.h, &raw.c, QuantizeMode::Infer, None).unwrap();
        assert_eq!(stepped.code(), Some(&code));
    }

    #[test]
    fn tree_lattice_is_prefix_tree() {
        let model = small_model(Variant::Baseline, 15);
        let feats = random_feats(4, 4, 15);
        let cfg = DecoderConfig { beam: 6, emit_lattice: true, ..DecoderConfig::default() };
        let result = decode(&model, &feats, &cfg).unwrap();
        let lat = result.lattice.unwrap();
        assert!(lat.validate().passed());
        // Prefix tree: every non-end node has at most one labeled in-arc.
        let mut in_count = std::collections::BTreeMap::new();
        for arc in lat.arcs() {
            if arc.label.is_some() {
                *in_count.entry(arc.dst).or_insert(0usize) += 1;
            }
        }
        for (&node, &count) in &in_count {
            assert!(count <= 1, "node {node} has {count} labeled in-arcs");
        }
    }

    #[test]
    fn final_viterbi_equals_lattice_best_path() {
        for (variant, strategy) in [
            (Variant::Baseline, MergeStrategy::None),
            (Variant::Baseline, MergeStrategy::SameLabelSequence),
            (Variant::Vq, MergeStrategy::vq()),
            (Variant::Vlc, MergeStrategy::limited(2)),
        ] {
            let model = small_model(variant, 16);
            for seed in 0..6u64 {
                let feats = random_feats(4, 4, 20 + seed);
                let cfg = DecoderConfig {
                    beam: 8,
                    strategy: strategy.clone(),
                    emit_lattice: true,
                    ..DecoderConfig::default()
                };
                let result = decode(&model, &feats, &cfg).unwrap();
                let lat = result.lattice.unwrap();
                let best = lat.best_path().unwrap();
                assert_eq!(best.labels, result.best_path.labels, "{variant} seed {seed}");
                assert!(
                    (best.weight - result.best_path.score).abs() < 1e-9,
                    "{variant} seed {seed}: lattice {} vs decoder {}",
                    best.weight,
                    result.best_path.score
                );
            }
        }
    }

    /// Replay oracle: every complete lattice path must sum to the exact
    /// log-probability of the alignment it traces (labels at their recorded
    /// emission frames, blanks filling the gaps).
    #[test]
    fn lattice_paths_replay_to_alignment_log_probs() {
        for (variant, strategy) in [
            (Variant::Baseline, MergeStrategy::SameLabelSequence),
            (Variant::Vq, MergeStrategy::vq()),
            (Variant::Vlc, MergeStrategy::limited(2)),
        ] {
            let model = small_model(variant, 17);
            let feats = random_feats(4, 4, 37);
            let cfg = DecoderConfig {
                beam: 8,
                strategy: strategy.clone(),
                emit_lattice: true,
                ..DecoderConfig::default()
            };
            let result = decode(&model, &feats, &cfg).unwrap();
            let lat = result.lattice.unwrap();
            let enc = model.encode(&feats).unwrap();
            let frames = enc.len();
            for path in lat.enumerate_paths(10_000).unwrap() {
                // Reconstruct the alignment from emission times.
                let mut expected = 0.0;
                let mut state = model.initial_pred_state().unwrap();
                let mut t = 0usize;
                for &ai in &path.arc_indices {
                    let arc = &lat.arcs()[ai];
                    let Some(label) = arc.label else { break };
                    let emit_t = arc.emit_time.expect("fresh lattice keeps emit times") as usize;
                    while t < emit_t {
                        let g = model.pred_output(&state).unwrap();
                        expected += model.joint().log_probs(&enc[t], &g).unwrap()[0];
                        t += 1;
                    }
                    let g = model.pred_output(&state).unwrap();
                    expected += model.joint().log_probs(&enc[t], &g).unwrap()[label as usize];
                    state = model.pred_step(&state, label).unwrap();
                }
                while t < frames {
                    let g = model.pred_output(&state).unwrap();
                    expected += model.joint().log_probs(&enc[t], &g).unwrap()[0];
                    t += 1;
                }
                assert!(
                    (path.weight - expected).abs() < 1e-9,
                    "{variant}/{strategy}: path {:?} weight {} vs replay {}",
                    path.labels,
                    path.weight,
                    expected
                );
            }
        }
    }

    /// Per-sequence posteriors equal the total lattice mass of the
    /// sequence's paths under exact (same-label) merging.
    #[test]
    fn final_scores_equal_lattice_sequence_mass() {
        let model = small_model(Variant::Baseline, 18);
        let feats = random_feats(4, 4, 41);
        let cfg = DecoderConfig {
            beam: 64,
            strategy: MergeStrategy::SameLabelSequence,
            emit_lattice: true,
            ..DecoderConfig::default()
        };
        let result = decode(&model, &feats, &cfg).unwrap();
        let lat = result.lattice.unwrap();
        let entries = lat.extract_nbest(1000).unwrap();
        for f in &result.nbest {
            let entry = entries.iter().find(|e| e.labels == f.labels).unwrap();
            assert!(
                (entry.acoustic - f.score).abs() < 1e-9,
                "sequence {:?}: lattice mass {} vs decoder {}",
                f.labels,
                entry.acoustic,
                f.score
            );
        }
        // And the top n-best entry is the decoder's best sequence.
        assert_eq!(entries[0].labels, result.nbest[0].labels);
        assert!((entries[0].acoustic - result.nbest[0].score).abs() < 1e-9);
    }

    #[test]
    fn vq_merging_produces_merge_events_and_valid_lattice() {
        let model = small_model(Variant::Vq, 19);
        let mut total_merges = 0;
        for seed in 0..8u64 {
            let feats = random_feats(5, 4, 50 + seed);
            let cfg = DecoderConfig {
                beam: 8,
                strategy: MergeStrategy::vq(),
                emit_lattice: true,
                record_merges: true,
                ..DecoderConfig::default()
            };
            let result = decode(&model, &feats, &cfg).unwrap();
            let lat = result.lattice.unwrap();
            assert!(lat.validate().passed());
            total_merges += result.stats.merge_events;
            // Any recorded cross-sequence merge must carry matching codes.
            for event in &result.merge_events {
                let codes: Vec<_> = event.members.iter().map(|m| m.code.clone()).collect();
                assert!(codes.windows(2).all(|w| w[0] == w[1]));
            }
        }
        assert!(total_merges > 0, "small codebooks should force merges");
    }
}
