//! Transducer model: encoder, prediction-network variants, quantizer, joint.
//!
//! Three prediction networks are supported behind one state interface:
//! a full-context LSTM, the same LSTM with vector-quantized states (whose
//! discrete codes drive hypothesis merging during decoding), and a
//! two-label-context convolutional network. Gradients are hand-derived per
//! layer; there is no autodiff graph.

pub mod checkpoint;
pub mod encoder;
pub mod joint;
pub mod lstm;
pub mod quantizer;
pub mod vlc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LogProbGrid;
use crate::numerics::{fnv1a, Matrix, SeededRng};

pub use encoder::BiLstmEncoder;
pub use joint::JointNetwork;
pub use lstm::{LstmCell, LstmState};
pub use quantizer::{DiscreteCode, QuantizeMode, VectorQuantizer};
pub use vlc::{window_at, VlcNet};

/// Label identifier; 0 is reserved for blank.
pub type LabelId = u16;

/// The blank symbol's fixed index.
pub const BLANK: LabelId = 0;

/// Output vocabulary. Real labels occupy ids `1..=label_count()`; blank is
/// id 0 and never appears in label sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Contract("vocabulary must be nonempty".into()));
        }
        for s in &symbols {
            if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Contract(format!("bad vocabulary symbol {s:?}")));
            }
        }
        let mut sorted = symbols.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != symbols.len() {
            return Err(Error::Contract("vocabulary symbols must be unique".into()));
        }
        Ok(Vocabulary { symbols })
    }

    /// Convenience constructor: first `n` lowercase letters.
    pub fn letters(n: usize) -> Result<Self> {
        let symbols = (0..n)
            .map(|i| char::from(b'a' + (i % 26) as u8).to_string())
            .collect();
        Vocabulary::new(symbols)
    }

    pub fn label_count(&self) -> usize {
        self.symbols.len()
    }

    /// Vocabulary size including blank = model output dimension.
    pub fn output_dim(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbol(&self, id: LabelId) -> Option<&str> {
        if id == BLANK {
            return None;
        }
        self.symbols.get(id as usize - 1).map(|s| s.as_str())
    }

    pub fn id(&self, symbol: &str) -> Option<LabelId> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|p| (p + 1) as LabelId)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn checksum(&self) -> u64 {
        let joined = self.symbols.join("\u{1f}");
        fnv1a(joined.as_bytes())
    }

    pub fn parse_labels(&self, text: &str) -> Result<Vec<LabelId>> {
        text.split_whitespace()
            .map(|tok| self.id(tok).ok_or_else(|| Error::UnknownSymbol(tok.to_string())))
            .collect()
    }

    pub fn format_labels(&self, labels: &[LabelId]) -> String {
        labels
            .iter()
            .filter_map(|&l| self.symbol(l))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Which vector feeds the joint network for the VQ variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointInput {
    /// The codebook reconstruction of the hidden state (default). Merged
    /// hypotheses then share joint inputs exactly.
    Quantized,
    /// The raw pre-quantization LSTM output; kept as an ablation switch.
    PreQuantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub groups: usize,
    pub vars: usize,
    pub depth: usize,
    pub joint_input: JointInput,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { groups: 2, vars: 8, depth: 1, joint_input: JointInput::Quantized }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain LSTM prediction network.
    Baseline,
    /// Very-limited-context convolutional prediction network.
    Vlc,
    /// Vector-quantized LSTM prediction network.
    Vq,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Vlc => write!(f, "vlc"),
            Variant::Vq => write!(f, "vq"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feat_dim: usize,
    /// Per-direction encoder state size; encoder output is twice this.
    pub enc_state_dim: usize,
    pub enc_depth: usize,
    /// Prediction-network state/output dimension.
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub vlc_embed_dim: usize,
    pub vq: Option<VqConfig>,
}

impl ModelConfig {
    /// Desk-scale preset used throughout the examples and reports.
    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            variant,
            feat_dim: 16,
            enc_state_dim: 32,
            enc_depth: 2,
            pred_dim: 32,
            joint_dim: 64,
            vlc_embed_dim: 64,
            vq: (variant == Variant::Vq).then(VqConfig::default),
        }
    }

    /// Tiny dimensions for unit tests and gradient checks.
    pub fn small(variant: Variant) -> Self {
        ModelConfig {
            feat_dim: 4,
            enc_state_dim: 4,
            enc_depth: 2,
            pred_dim: 8,
            joint_dim: 8,
            vlc_embed_dim: 6,
            vq: (variant == Variant::Vq).then(|| VqConfig {
                groups: 2,
                vars: 3,
                depth: 1,
                joint_input: JointInput::Quantized,
            }),
            variant,
        }
    }

    /// Production-scale quantizer preset (2 groups of 640 entries over a
    /// 768-dimensional state, depth-1 projection). Constructible for
    /// inspection; far too large to train at desk scale.
    pub fn full_scale_vq() -> Self {
        ModelConfig {
            variant: Variant::Vq,
            feat_dim: 16,
            enc_state_dim: 640,
            enc_depth: 2,
            pred_dim: 768,
            joint_dim: 256,
            vlc_embed_dim: 256,
            vq: Some(VqConfig { groups: 2, vars: 640, depth: 1, joint_input: JointInput::Quantized }),
        }
    }

    pub fn enc_out_dim(&self) -> usize {
        2 * self.enc_state_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.enc_state_dim == 0 || self.pred_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.enc_depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        match (self.variant, &self.vq) {
            (Variant::Vq, None) => {
                return Err(Error::Config("vq variant requires quantizer settings".into()))
            }
            (Variant::Vq, Some(vq)) => {
                if vq.groups == 0 || vq.vars == 0 || vq.depth == 0 {
                    return Err(Error::Config("vq groups, vars, depth must be >= 1".into()));
                }
                if self.pred_dim % vq.groups != 0 {
                    return Err(Error::Config(format!(
                        "pred_dim {} must be divisible by vq groups {}",
                        self.pred_dim, vq.groups
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Learnable parameters of the prediction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredNetParams {
    Lstm {
        /// `label_count × pred_dim`; row `id - 1` embeds label `id`.
        embed: Matrix,
        cell: LstmCell,
    },
    VqLstm {
        embed: Matrix,
        cell: LstmCell,
        quantizer: VectorQuantizer,
    },
    Vlc(VlcNet),
}

/// All learnable tensors of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: BiLstmEncoder,
    pub prednet: PredNetParams,
    pub joint: JointNetwork,
}

/// Decoding-time prediction-network state.
///
/// For the VQ variant the state vectors are always codebook reconstructions
/// (never raw LSTM outputs), so the state is a pure function of
/// (code, labels consumed since) — the property hypothesis merging relies on.
#[derive(Debug, Clone, PartialEq)]
pub enum PredNetState {
    Lstm {
        state: LstmState,
    },
    VqLstm {
        state: LstmState,
        code: DiscreteCode,
        /// Pre-quantization LSTM output of the step that produced this state;
        /// only consumed when `JointInput::PreQuantized` is configured.
        raw_out: Vec<f64>,
    },
    Vlc {
        window: (LabelId, LabelId),
    },
}

impl PredNetState {
    pub fn code(&self) -> Option<&DiscreteCode> {
        match self {
            PredNetState::VqLstm { code, .. } => Some(code),
            _ => None,
        }
    }
}

/// Caches kept by a training forward pass of the prediction network.
#[derive(Debug)]
pub enum PredTrainCache {
    Lstm {
        steps: Vec<lstm::LstmStepCache>,
    },
    VqLstm {
        initial_h: quantizer::VqLayerCache,
        initial_c: quantizer::VqLayerCache,
        steps: Vec<VqStepCache>,
    },
    Vlc {
        steps: Vec<vlc::VlcCache>,
    },
}

#[derive(Debug)]
pub struct VqStepCache {
    pub lstm: lstm::LstmStepCache,
    pub qh: quantizer::VqLayerCache,
    pub qc: quantizer::VqLayerCache,
}

/// Everything a training backward pass needs from the forward pass.
pub struct TrainForward {
    pub enc_states: Vec<Vec<f64>>,
    pub pred_outs: Vec<Vec<f64>>,
    pub enc_proj: Vec<Vec<f64>>,
    pub pred_proj: Vec<Vec<f64>>,
    pub grid: LogProbGrid,
    pub labels: Vec<LabelId>,
    enc_cache: encoder::EncoderCache,
    pred_cache: PredTrainCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Model {
    /// Build a model with seeded parameter initialization. The parameter
    /// blocks are initialized in a fixed order from a single derived stream,
    /// so equal seeds give bitwise-equal models.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = SeededRng::new(seed).derive(0x6d6f64656c);
        let encoder = BiLstmEncoder::init(config.feat_dim, config.enc_state_dim, config.enc_depth, &mut rng);
        let prednet = match config.variant {
            Variant::Baseline => PredNetParams::Lstm {
                embed: Matrix::init_uniform(vocab.label_count(), config.pred_dim, 0.1, &mut rng),
                cell: LstmCell::init(config.pred_dim, config.pred_dim, &mut rng),
            },
            Variant::Vq => {
                let vq = config.vq.as_ref().expect("validated above");
                PredNetParams::VqLstm {
                    embed: Matrix::init_uniform(vocab.label_count(), config.pred_dim, 0.1, &mut rng),
                    cell: LstmCell::init(config.pred_dim, config.pred_dim, &mut rng),
                    quantizer: VectorQuantizer::init(config.pred_dim, vq.groups, vq.vars, vq.depth, &mut rng)?,
                }
            }
            Variant::Vlc => PredNetParams::Vlc(VlcNet::init(
                vocab.label_count(),
                config.vlc_embed_dim,
                config.pred_dim,
                &mut rng,
            )),
        };
        let joint = JointNetwork::init(
            config.enc_out_dim(),
            config.pred_dim,
            config.joint_dim,
            vocab.output_dim(),
            &mut rng,
        );
        Ok(Model { config, vocab, params: ModelParams { encoder, prednet, joint } })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn check_label(&self, label: LabelId) -> Result<()> {
        if label == BLANK || label as usize > self.vocab.label_count() {
            return Err(Error::Contract(format!(
                "label id {label} out of range 1..={}",
                self.vocab.label_count()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.params.encoder.encode(features)
    }

    /// Initial prediction-network state (inference quantization for VQ).
    ///
    /// For the VQ variant the zero state is quantized once, so the initial
    /// state is itself a codebook reconstruction with a concrete code.
    pub fn initial_pred_state(&self) -> Result<PredNetState> {
        Ok(match &self.params.prednet {
            PredNetParams::Lstm { cell, .. } => PredNetState::Lstm {
                state: LstmState::zeros(cell.state_dim()),
            },
            PredNetParams::VqLstm { cell, quantizer, .. } => {
                let zeros = vec![0.0; cell.state_dim()];
                let (code, h_q, c_q) = quantizer.quantize(&zeros, &zeros, QuantizeMode::Infer, None)?;
                PredNetState::VqLstm {
                    state: LstmState { h: h_q, c: c_q },
                    code,
                    raw_out: zeros,
                }
            }
            PredNetParams::Vlc(_) => PredNetState::Vlc { window: (0, 0) },
        })
    }

    /// Advance the prediction network by one label (inference mode;
    /// deterministic). The VQ variant runs the LSTM step and then quantizes,
    /// carrying the codebook reconstructions forward.
    pub fn pred_step(&self, state: &PredNetState, label: LabelId) -> Result<PredNetState> {
        self.check_label(label)?;
        Ok(match (&self.params.prednet, state) {
            (PredNetParams::Lstm { embed, cell }, PredNetState::Lstm { state }) => {
                let x = embed.row(label as usize - 1);
                PredNetState::Lstm { state: cell.step(x, state)? }
            }
            (PredNetParams::VqLstm { embed, cell, quantizer }, PredNetState::VqLstm { state, .. }) => {
                let x = embed.row(label as usize - 1);
                let raw = cell.step(x, state)?;
                let (code, h_q, c_q) = quantizer.quantize(&raw.h, &raw.c, QuantizeMode::Infer, None)?;
                PredNetState::VqLstm {
                    state: LstmState { h: h_q, c: c_q },
                    code,
                    raw_out: raw.h,
                }
            }
            (PredNetParams::Vlc(_), PredNetState::Vlc { window }) => {
                PredNetState::Vlc { window: (window.1, label) }
            }
            _ => return Err(Error::Contract("prediction state does not match model variant".into())),
        })
    }

    /// The vector the joint network consumes for a given prediction state.
    pub fn pred_output(&self, state: &PredNetState) -> Result<Vec<f64>> {
        Ok(match (&self.params.prednet, state) {
            (PredNetParams::Lstm { .. }, PredNetState::Lstm { state }) => state.h.clone(),
            (PredNetParams::VqLstm { .. }, PredNetState::VqLstm { state, raw_out, .. }) => {
                match self.joint_input() {
                    JointInput::Quantized => state.h.clone(),
                    JointInput::PreQuantized => raw_out.clone(),
                }
            }
            (PredNetParams::Vlc(net), PredNetState::Vlc { window }) => net.output(*window)?,
            _ => return Err(Error::Contract("prediction state does not match model variant".into())),
        })
    }

    fn joint_input(&self) -> JointInput {
        self.config
            .vq
            .as_ref()
            .map(|v| v.joint_input)
            .unwrap_or(JointInput::Quantized)
    }

    pub fn joint(&self) -> &JointNetwork {
        &self.params.joint
    }

    /// Prediction outputs g_0..g_U for a teacher-forced label sequence.
    ///
    /// g_0 is the output before any real label is consumed: the zero state
    /// for the LSTM, the quantized zero state for VQ, and the padded window
    /// for the convolutional network. No start-token embedding exists.
    fn pred_forward(
        &self,
        labels: &[LabelId],
        mode: QuantizeMode,
        mut rng: Option<&mut SeededRng>,
        want_cache: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<PredTrainCache>)> {
        for &l in labels {
            self.check_label(l)?;
        }
        let positions = labels.len() + 1;
        match &self.params.prednet {
            PredNetParams::Lstm { embed, cell } => {
                let mut outs = Vec::with_capacity(positions);
                let mut steps = Vec::new();
                let mut state = LstmState::zeros(cell.state_dim());
                outs.push(state.h.clone());
                for &label in labels {
                    let x = embed.row(label as usize - 1);
                    if want_cache {
                        let (next, cache) = cell.step_cached(x, &state)?;
                        steps.push(cache);
                        state = next;
                    } else {
                        state = cell.step(x, &state)?;
                    }
                    outs.push(state.h.clone());
                }
                Ok((outs, want_cache.then_some(PredTrainCache::Lstm { steps })))
            }
            PredNetParams::VqLstm { embed, cell, quantizer } => {
                let dim = cell.state_dim();
                let zeros = vec![0.0; dim];
                let (_, h0, cache_h0) = quantizer.hidden.quantize_cached(&zeros, mode, rng.as_deref_mut())?;
                let (_, c0, cache_c0) = quantizer.cell.quantize_cached(&zeros, mode, rng.as_deref_mut())?;
                let mut state = LstmState { h: h0, c: c0 };
                let joint_input = self.joint_input();
                let mut outs = Vec::with_capacity(positions);
                outs.push(match joint_input {
                    JointInput::Quantized => state.h.clone(),
                    // No LSTM step has produced a raw output yet.
                    JointInput::PreQuantized => zeros.clone(),
                });
                let mut steps = Vec::new();
                for &label in labels {
                    let x = embed.row(label as usize - 1);
                    let (raw, lstm_cache) = cell.step_cached(x, &state)?;
                    let (_, h_q, qh) = quantizer.hidden.quantize_cached(&raw.h, mode, rng.as_deref_mut())?;
                    let (_, c_q, qc) = quantizer.cell.quantize_cached(&raw.c, mode, rng.as_deref_mut())?;
                    outs.push(match joint_input {
                        JointInput::Quantized => h_q.clone(),
                        JointInput::PreQuantized => raw.h.clone(),
                    });
                    state = LstmState { h: h_q, c: c_q };
                    if want_cache {
                        steps.push(VqStepCache { lstm: lstm_cache, qh, qc });
                    }
                }
                Ok((
                    outs,
                    want_cache.then_some(PredTrainCache::VqLstm {
                        initial_h: cache_h0,
                        initial_c: cache_c0,
                        steps,
                    }),
                ))
            }
            PredNetParams::Vlc(net) => {
                let mut outs = Vec::with_capacity(positions);
                let mut steps = Vec::new();
                for u in 0..positions {
                    let (g, cache) = net.output_cached(window_at(labels, u))?;
                    outs.push(g);
                    if want_cache {
                        steps.push(cache);
                    }
                }
                Ok((outs, want_cache.then_some(PredTrainCache::Vlc { steps })))
            }
        }
    }

    /// Full `T × (U+1) × (|Y|+1)` grid of output log-probabilities for one
    /// utterance under teacher forcing.
    pub fn log_prob_grid(
        &self,
        features: &[Vec<f64>],
        labels: &[LabelId],
        mode: QuantizeMode,
        rng: Option<&mut SeededRng>,
    ) -> Result<LogProbGrid> {
        let enc = self.encode(features)?;
        let (gs, _) = self.pred_forward(labels, mode, rng, false)?;
        self.grid_from_states(&enc, &gs)
    }

    fn grid_from_states(&self, enc: &[Vec<f64>], gs: &[Vec<f64>]) -> Result<LogProbGrid> {
        let joint = &self.params.joint;
        let pe: Vec<Vec<f64>> = enc.iter().map(|m| joint.project_enc(m)).collect::<Result<_>>()?;
        let pg: Vec<Vec<f64>> = gs.iter().map(|g| joint.project_pred(g)).collect::<Result<_>>()?;
        let mut grid = LogProbGrid::minus_inf(enc.len(), gs.len(), self.vocab.output_dim())?;
        for (t, pet) in pe.iter().enumerate() {
            for (u, pgu) in pg.iter().enumerate() {
                grid.set_slice(t, u, &joint.log_probs_projected(pet, pgu));
            }
        }
        Ok(grid)
    }

    /// Forward pass retaining every cache the backward pass needs.
    pub fn forward_cached(
        &self,
        features: &[Vec<f64>],
        labels: &[LabelId],
        mode: QuantizeMode,
        rng: Option<&mut SeededRng>,
    ) -> Result<TrainForward> {
        let (enc_states, enc_cache) = self.params.encoder.encode_cached(features)?;
        let (pred_outs, pred_cache) = self.pred_forward(labels, mode, rng, true)?;
        let pred_cache = pred_cache.expect("cache requested");
        let joint = &self.params.joint;
        let enc_proj: Vec<Vec<f64>> =
            enc_states.iter().map(|m| joint.project_enc(m)).collect::<Result<_>>()?;
        let pred_proj: Vec<Vec<f64>> =
            pred_outs.iter().map(|g| joint.project_pred(g)).collect::<Result<_>>()?;
        let mut grid = LogProbGrid::minus_inf(enc_states.len(), pred_outs.len(), self.vocab.output_dim())?;
        for (t, pet) in enc_proj.iter().enumerate() {
            for (u, pgu) in pred_proj.iter().enumerate() {
                grid.set_slice(t, u, &joint.log_probs_projected(pet, pgu));
            }
        }
        Ok(TrainForward {
            enc_states,
            pred_outs,
            enc_proj,
            pred_proj,
            grid,
            labels: labels.to_vec(),
            enc_cache,
            pred_cache,
        })
    }

    /// Backward pass: push a gradient on the log-prob grid through the joint
    /// network, the prediction network, and the encoder, accumulating into
    /// `grads` (same shapes as the parameters).
    pub fn backward(&self, fwd: &TrainForward, dgrid: &LogProbGrid, grads: &mut ModelParams) {
        let frames = fwd.enc_states.len();
        let positions = fwd.pred_outs.len();
        let joint_dim = self.config.joint_dim;
        let joint = &self.params.joint;
        let mut dpe = vec![vec![0.0; joint_dim]; frames];
        let mut dpg = vec![vec![0.0; joint_dim]; positions];
        for t in 0..frames {
            for u in 0..positions {
                joint.backward_cell(
                    &fwd.enc_proj[t],
                    &fwd.pred_proj[u],
                    fwd.grid.slice(t, u),
                    dgrid.slice(t, u),
                    &mut dpe[t],
                    &mut dpg[u],
                    &mut grads.joint,
                );
            }
        }
        let mut denc = Vec::with_capacity(frames);
        for t in 0..frames {
            denc.push(joint.enc_proj.backward(&fwd.enc_states[t], &dpe[t], &mut grads.joint.enc_proj));
        }
        let mut dgs = Vec::with_capacity(positions);
        for u in 0..positions {
            dgs.push(joint.pred_proj.backward(&fwd.pred_outs[u], &dpg[u], &mut grads.joint.pred_proj));
        }
        self.params.encoder.backward(&fwd.enc_cache, &denc, &mut grads.encoder);
        self.pred_backward(fwd, &dgs, grads);
    }

    fn pred_backward(&self, fwd: &TrainForward, dgs: &[Vec<f64>], grads: &mut ModelParams) {
        let labels = &fwd.labels;
        match (&self.params.prednet, &fwd.pred_cache) {
            (PredNetParams::Lstm { cell, .. }, PredTrainCache::Lstm { steps }) => {
                let (gembed, gcell) = match &mut grads.prednet {
                    PredNetParams::Lstm { embed, cell } => (embed, cell),
                    _ => unreachable!("grads mirror the model variant"),
                };
                let dim = cell.state_dim();
                let mut dh_carry = vec![0.0; dim];
                let mut dc_carry = vec![0.0; dim];
                for u in (1..=labels.len()).rev() {
                    let mut dh = dgs[u].clone();
                    for (a, b) in dh.iter_mut().zip(&dh_carry) {
                        *a += b;
                    }
                    let (dx, dh_prev, dc_prev) =
                        cell.backward_step(&steps[u - 1], &dh, &dc_carry, gcell);
                    let row = gembed.row_mut(labels[u - 1] as usize - 1);
                    for (g, d) in row.iter_mut().zip(dx) {
                        *g += d;
                    }
                    dh_carry = dh_prev;
                    dc_carry = dc_prev;
                }
                // dgs[0] lands on the constant zero initial state.
            }
            (PredNetParams::VqLstm { cell, quantizer, .. }, PredTrainCache::VqLstm { initial_h, initial_c, steps }) => {
                let (gembed, gcell, gquant) = match &mut grads.prednet {
                    PredNetParams::VqLstm { embed, cell, quantizer } => (embed, cell, quantizer),
                    _ => unreachable!("grads mirror the model variant"),
                };
                let joint_input = self.joint_input();
                let dim = cell.state_dim();
                let mut dh_carry = vec![0.0; dim];
                let mut dc_carry = vec![0.0; dim];
                for u in (1..=labels.len()).rev() {
                    // Gradient on the quantized state (recurrent carry plus,
                    // in the default wiring, the joint's view of g_u).
                    let mut dh_q = dh_carry.clone();
                    if joint_input == JointInput::Quantized {
                        for (a, b) in dh_q.iter_mut().zip(&dgs[u]) {
                            *a += b;
                        }
                    }
                    let step = &steps[u - 1];
                    let mut dh_raw = quantizer.hidden.backward(&step.qh, &dh_q, &mut gquant.hidden);
                    let dc_raw = quantizer.cell.backward(&step.qc, &dc_carry, &mut gquant.cell);
                    if joint_input == JointInput::PreQuantized {
                        for (a, b) in dh_raw.iter_mut().zip(&dgs[u]) {
                            *a += b;
                        }
                    }
                    let (dx, dh_prev, dc_prev) =
                        cell.backward_step(&step.lstm, &dh_raw, &dc_raw, gcell);
                    let row = gembed.row_mut(labels[u - 1] as usize - 1);
                    for (g, d) in row.iter_mut().zip(dx) {
                        *g += d;
                    }
                    dh_carry = dh_prev;
                    dc_carry = dc_prev;
                }
                // Initial state: the quantized zero state also has parameters.
                let mut dh0 = dh_carry;
                if joint_input == JointInput::Quantized {
                    for (a, b) in dh0.iter_mut().zip(&dgs[0]) {
                        *a += b;
                    }
                }
                // Input gradient lands on the constant zero vector; drop it.
                let _ = quantizer.hidden.backward(initial_h, &dh0, &mut gquant.hidden);
                let _ = quantizer.cell.backward(initial_c, &dc_carry, &mut gquant.cell);
            }
            (PredNetParams::Vlc(net), PredTrainCache::Vlc { steps }) => {
                let gnet = match &mut grads.prednet {
                    PredNetParams::Vlc(n) => n,
                    _ => unreachable!("grads mirror the model variant"),
                };
                for (u, cache) in steps.iter().enumerate() {
                    net.backward(cache, &dgs[u], gnet);
                }
            }
            _ => unreachable!("cache mirrors the model variant"),
        }
    }

    /// Negative log-likelihood of one utterance (forward only).
    pub fn nll(
        &self,
        features: &[Vec<f64>],
        labels: &[LabelId],
        mode: QuantizeMode,
        rng: Option<&mut SeededRng>,
    ) -> Result<f64> {
        let grid = self.log_prob_grid(features, labels, mode, rng)?;
        crate::loss::forward_backward_nll(&grid, labels)
    }
}

impl ModelParams {
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            prednet: match &self.prednet {
                PredNetParams::Lstm { embed, cell } => PredNetParams::Lstm {
                    embed: Matrix::zeros(embed.rows, embed.cols),
                    cell: LstmCell::zeros(cell.input_dim(), cell.state_dim()),
                },
                PredNetParams::VqLstm { embed, cell, quantizer } => PredNetParams::VqLstm {
                    embed: Matrix::zeros(embed.rows, embed.cols),
                    cell: LstmCell::zeros(cell.input_dim(), cell.state_dim()),
                    quantizer: VectorQuantizer {
                        hidden: quantizer.hidden.zeros_like(),
                        cell: quantizer.cell.zeros_like(),
                    },
                },
                PredNetParams::Vlc(net) => PredNetParams::Vlc(net.zeros_like()),
            },
            joint: JointNetwork {
                enc_proj: crate::numerics::DenseMap::zeros(self.joint.enc_proj.out_dim(), self.joint.enc_proj.in_dim()),
                pred_proj: crate::numerics::DenseMap::zeros(self.joint.pred_proj.out_dim(), self.joint.pred_proj.in_dim()),
                out_proj: crate::numerics::DenseMap::zeros(self.joint.out_proj.out_dim(), self.joint.out_proj.in_dim()),
            },
        }
    }

    /// Immutable views of every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.encoder.layers {
            for cell in [&layer.forward, &layer.backward] {
                for map in cell.maps() {
                    out.push(&map.weight.data);
                    out.push(&map.bias);
                }
            }
        }
        match &self.prednet {
            PredNetParams::Lstm { embed, cell } => {
                out.push(&embed.data);
                for map in cell.maps() {
                    out.push(&map.weight.data);
                    out.push(&map.bias);
                }
            }
            PredNetParams::VqLstm { embed, cell, quantizer } => {
                out.push(&embed.data);
                for map in cell.maps() {
                    out.push(&map.weight.data);
                    out.push(&map.bias);
                }
                for layer in [&quantizer.hidden, &quantizer.cell] {
                    for map in &layer.projection {
                        out.push(&map.weight.data);
                        out.push(&map.bias);
                    }
                    out.push(&layer.codebook.data);
                }
            }
            PredNetParams::Vlc(net) => {
                out.push(&net.embed.data);
                out.push(&net.conv_gate.weight.data);
                out.push(&net.conv_gate.bias);
                out.push(&net.conv_skip.data);
            }
        }
        for map in [&self.joint.enc_proj, &self.joint.pred_proj, &self.joint.out_proj] {
            out.push(&map.weight.data);
            out.push(&map.bias);
        }
        out
    }

    /// Visit every parameter block mutably, in the same order as `blocks`.
    pub fn for_each_block_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for layer in &mut self.encoder.layers {
            for cell in [&mut layer.forward, &mut layer.backward] {
                for map in cell.maps_mut() {
                    f(&mut map.weight.data);
                    f(&mut map.bias);
                }
            }
        }
        match &mut self.prednet {
            PredNetParams::Lstm { embed, cell } => {
                f(&mut embed.data);
                for map in cell.maps_mut() {
                    f(&mut map.weight.data);
                    f(&mut map.bias);
                }
            }
            PredNetParams::VqLstm { embed, cell, quantizer } => {
                f(&mut embed.data);
                for map in cell.maps_mut() {
                    f(&mut map.weight.data);
                    f(&mut map.bias);
                }
                for layer in [&mut quantizer.hidden, &mut quantizer.cell] {
                    for map in &mut layer.projection {
                        f(&mut map.weight.data);
                        f(&mut map.bias);
                    }
                    f(&mut layer.codebook.data);
                }
            }
            PredNetParams::Vlc(net) => {
                f(&mut net.embed.data);
                f(&mut net.conv_gate.weight.data);
                f(&mut net.conv_gate.bias);
                f(&mut net.conv_skip.data);
            }
        }
        for map in [
            &mut self.joint.enc_proj,
            &mut self.joint.pred_proj,
            &mut self.joint.out_proj,
        ] {
            f(&mut map.weight.data);
            f(&mut map.bias);
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn zero(&mut self) {
        self.for_each_block_mut(&mut |block| block.fill(0.0));
    }
}
