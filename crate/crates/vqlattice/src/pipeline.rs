//! End-to-end pipeline commands: data generation, training, decoding,
//! lattice evaluation, and rescoring. The CLI binary is a thin wrapper over
//! these functions; the runnable examples call them directly.
//!
//! Every artifact is reproducible from config plus seed: reports carry a
//! provenance header (config hash, seed, checkpoint hash) and contain no
//! timestamps or absolute paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::decoder::{decode, DecoderConfig, MergeStrategy};
use crate::error::{Error, Result};
use crate::lattice::{edit_distance, NBestEntry};
use crate::lm::{rescore, NGramLm};
use crate::model::{checkpoint, LabelId, Model, ModelConfig, Variant};
use crate::numerics::fnv1a;
use crate::synthdata::{generate, Dataset, SynthTask};
use crate::training::{train, LossCurve, TrainConfig, TrainExample};

/// Merge a JSON config file over an argument struct: fields present in the
/// file replace the flag values.
pub fn apply_config_overrides<T: Serialize + DeserializeOwned>(
    args: T,
    config_path: Option<&Path>,
) -> Result<T> {
    let Some(path) = config_path else { return Ok(args) };
    let mut base = serde_json::to_value(&args)?;
    let overlay: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("bad config file {}: {e}", path.display())))?;
    merge_json(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| Error::Config(format!("config merge failed: {e}")))
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) => merge_json(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

fn config_hash<T: Serialize>(args: &T) -> u64 {
    fnv1a(serde_json::to_string(args).expect("serializable args").as_bytes())
}

fn file_hash(path: &Path) -> Result<u64> {
    Ok(fnv1a(&fs::read(path)?))
}

fn provenance(config_hash: u64, seed: u64, checkpoint_hash: Option<u64>) -> String {
    let ckpt = checkpoint_hash
        .map(|h| format!(" checkpoint_hash={h:016x}"))
        .unwrap_or_default();
    format!("# config_hash={config_hash:016x} seed={seed}{ckpt}\n")
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataArgs {
    pub out_dir: PathBuf,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    #[serde(flatten)]
    pub task: SynthTask,
}

impl Default for GenDataArgs {
    fn default() -> Self {
        GenDataArgs {
            out_dir: PathBuf::from("data"),
            train: 320,
            dev: 120,
            test: 200,
            task: SynthTask::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenDataSummary {
    pub paths: Vec<PathBuf>,
    pub utterances: usize,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<GenDataSummary> {
    fs::create_dir_all(&args.out_dir)?;
    let mut paths = Vec::new();
    let mut total = 0;
    for (split, count) in [("train", args.train), ("dev", args.dev), ("test", args.test)] {
        if count == 0 {
            continue;
        }
        let data = generate(&args.task, count, split)?;
        let path = args.out_dir.join(format!("{split}.data"));
        data.save(&path)?;
        total += data.utterances.len();
        paths.push(path);
    }
    if paths.is_empty() {
        return Err(Error::Config("all split sizes are zero".into()));
    }
    Ok(GenDataSummary { paths, utterances: total })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub loss_curve_out: Option<PathBuf>,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub peak_lr: Option<f64>,
    pub weight_decay: Option<f64>,
}

impl TrainArgs {
    pub fn new(data: PathBuf, out: PathBuf, variant: Variant) -> Self {
        TrainArgs {
            data,
            out,
            loss_curve_out: None,
            variant,
            seed: 17,
            epochs: None,
            batch_size: None,
            peak_lr: None,
            weight_decay: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub curve: LossCurve,
}

pub fn dataset_examples(data: &Dataset) -> Vec<TrainExample> {
    data.utterances
        .iter()
        .map(|u| TrainExample { features: u.features.clone(), labels: u.labels.clone() })
        .collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let data = Dataset::load(&args.data)?;
    let mut model_cfg = ModelConfig::toy(args.variant);
    model_cfg.feat_dim = data.feat_dim;
    let mut train_cfg = TrainConfig::toy(args.variant);
    train_cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train_cfg.batch_size = b;
    }
    if let Some(lr) = args.peak_lr {
        train_cfg.peak_lr = lr;
    }
    if let Some(wd) = args.weight_decay {
        train_cfg.weight_decay = wd;
    }
    let mut model = Model::new(model_cfg, data.vocab.clone(), args.seed)?;
    let curve = train(&mut model, &dataset_examples(&data), &train_cfg)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    checkpoint::save(&model, &args.out)?;
    if let Some(curve_path) = &args.loss_curve_out {
        fs::write(curve_path, curve.to_table())?;
    }
    Ok(TrainSummary { checkpoint: args.out.clone(), curve })
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub beam: usize,
    pub strategy: MergeStrategy,
    pub u_max_ratio: f64,
    pub lattices: bool,
    pub seed: u64,
}

impl DecodeArgs {
    pub fn new(model: PathBuf, data: PathBuf, out_dir: PathBuf) -> Self {
        DecodeArgs {
            model,
            data,
            out_dir,
            beam: 8,
            strategy: MergeStrategy::None,
            u_max_ratio: 1.0,
            lattices: false,
            seed: 17,
        }
    }

    fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            beam: self.beam,
            u_max_ratio: self.u_max_ratio,
            strategy: self.strategy.clone(),
            emit_lattice: self.lattices,
            record_merges: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeSummary {
    pub transcripts: PathBuf,
    pub lattice_dir: Option<PathBuf>,
    pub wer: f64,
    pub utterances: usize,
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<DecodeSummary> {
    let model = checkpoint::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;
    let lattice_dir = args.lattices.then(|| args.out_dir.join("lattices"));
    if let Some(dir) = &lattice_dir {
        fs::create_dir_all(dir)?;
    }
    let decoder_cfg = args.decoder_config();
    let mut transcripts = String::new();
    transcripts.push_str("# vqlattice transcripts\n");
    transcripts.push_str(&provenance(config_hash(args), args.seed, Some(file_hash(&args.model)?)));
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for utt in &data.utterances {
        let result = decode(&model, &utt.features, &decoder_cfg)?;
        let hyp = result.transcript();
        edits += edit_distance(hyp, &utt.labels);
        ref_len += utt.labels.len();
        transcripts.push_str(&format!(
            "{}\t{}\t{:.9}\n",
            utt.id,
            model.vocab.format_labels(hyp),
            result.nbest[0].score
        ));
        if let (Some(dir), Some(lattice)) = (&lattice_dir, &result.lattice) {
            fs::write(dir.join(format!("{}.lat", utt.id)), lattice.write_text(&model.vocab))?;
        }
    }
    let transcripts_path = args.out_dir.join("transcripts.txt");
    fs::write(&transcripts_path, transcripts)?;
    Ok(DecodeSummary {
        transcripts: transcripts_path,
        lattice_dir,
        wer: edits as f64 / ref_len.max(1) as f64,
        utterances: data.utterances.len(),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub beams: Vec<usize>,
    pub strategy: MergeStrategy,
    pub u_max_ratio: f64,
    pub seed: u64,
}

impl EvalArgs {
    pub fn new(model: PathBuf, data: PathBuf, out: PathBuf) -> Self {
        EvalArgs {
            model,
            data,
            out,
            beams: vec![1, 2, 4, 8, 16],
            strategy: MergeStrategy::None,
            u_max_ratio: 1.0,
            seed: 17,
        }
    }
}

/// Per-beam evaluation metrics over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub beam: usize,
    pub wer: f64,
    pub oracle_wer: f64,
    pub density: f64,
    pub merge_events: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub report: PathBuf,
}

/// Decode a whole split with lattices and aggregate quality metrics.
pub fn evaluate_split(model: &Model, data: &Dataset, beam: usize, strategy: &MergeStrategy, u_max_ratio: f64) -> Result<EvalRow> {
    let cfg = DecoderConfig {
        beam,
        u_max_ratio,
        strategy: strategy.clone(),
        emit_lattice: true,
        record_merges: false,
    };
    let mut edits = 0usize;
    let mut oracle_edits = 0usize;
    let mut ref_len = 0usize;
    let mut arcs = 0usize;
    let mut frames = 0usize;
    let mut merges = 0usize;
    for utt in &data.utterances {
        let result = decode(model, &utt.features, &cfg)?;
        let lattice = result.lattice.as_ref().expect("lattices requested");
        edits += edit_distance(result.transcript(), &utt.labels);
        let (oracle, _) = lattice.oracle_wer(&utt.labels)?;
        oracle_edits += (oracle * utt.labels.len() as f64).round() as usize;
        ref_len += utt.labels.len();
        arcs += lattice.arcs().iter().filter(|a| a.label.is_some()).count();
        frames += lattice.frames();
        merges += result.stats.merge_events;
    }
    Ok(EvalRow {
        beam,
        wer: edits as f64 / ref_len.max(1) as f64,
        oracle_wer: oracle_edits as f64 / ref_len.max(1) as f64,
        density: arcs as f64 / frames.max(1) as f64,
        merge_events: merges,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    if args.beams.is_empty() {
        return Err(Error::Config("eval needs at least one beam size".into()));
    }
    let model = checkpoint::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let mut rows = Vec::new();
    for &beam in &args.beams {
        rows.push(evaluate_split(&model, &data, beam, &args.strategy, args.u_max_ratio)?);
    }
    let mut report = String::new();
    report.push_str("# vqlattice eval report\n");
    report.push_str(&provenance(config_hash(args), args.seed, Some(file_hash(&args.model)?)));
    report.push_str(&format!(
        "# model={} strategy={} utterances={}\n",
        model.variant(),
        args.strategy,
        data.utterances.len()
    ));
    report.push_str("beam\twer\toracle_wer\tdensity\tmerge_events\n");
    for row in &rows {
        report.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.3}\t{}\n",
            row.beam, row.wer, row.oracle_wer, row.density, row.merge_events
        ));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, report)?;
    Ok(EvalSummary { rows, report: args.out.clone() })
}

// ---------------------------------------------------------------------------
// rescore
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RescoreArgs {
    pub model: PathBuf,
    /// Dataset whose references train the n-gram model.
    pub lm_corpus: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub out: PathBuf,
    pub lm_order: usize,
    pub lm_k: f64,
    pub beam: usize,
    pub strategy: MergeStrategy,
    pub u_max_ratio: f64,
    pub nbest: usize,
    pub prune_margin: f64,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
}

impl RescoreArgs {
    pub fn new(model: PathBuf, lm_corpus: PathBuf, dev: PathBuf, test: PathBuf, out: PathBuf) -> Self {
        RescoreArgs {
            model,
            lm_corpus,
            dev,
            test,
            out,
            lm_order: 2,
            lm_k: 0.5,
            beam: 8,
            strategy: MergeStrategy::None,
            u_max_ratio: 1.0,
            nbest: 100,
            prune_margin: 0.1,
            lambda_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RescoreSummary {
    pub lambda: f64,
    pub dev_sweep: Vec<(f64, f64)>,
    pub test_wer_baseline: f64,
    pub test_wer_rescored: f64,
    pub report: PathBuf,
}

/// Pruned n-best lists for a split, plus its references.
fn split_nbest(
    model: &Model,
    data: &Dataset,
    args: &RescoreArgs,
) -> Result<Vec<(Vec<LabelId>, Vec<NBestEntry>)>> {
    let cfg = DecoderConfig {
        beam: args.beam,
        u_max_ratio: args.u_max_ratio,
        strategy: args.strategy.clone(),
        emit_lattice: true,
        record_merges: false,
    };
    let mut out = Vec::with_capacity(data.utterances.len());
    for utt in &data.utterances {
        let result = decode(model, &utt.features, &cfg)?;
        let mut lattice = result.lattice.expect("lattices requested");
        lattice.prune(args.prune_margin)?;
        let entries = lattice.extract_nbest(args.nbest)?;
        out.push((utt.labels.clone(), entries));
    }
    Ok(out)
}

fn wer_at_lambda(nbests: &[(Vec<LabelId>, Vec<NBestEntry>)], lm: &NGramLm, lambda: f64) -> Result<f64> {
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (reference, entries) in nbests {
        let ranked = rescore(entries, lm, lambda)?;
        edits += edit_distance(&ranked[0].labels, reference);
        ref_len += reference.len();
    }
    Ok(edits as f64 / ref_len.max(1) as f64)
}

pub fn cmd_rescore(args: &RescoreArgs) -> Result<RescoreSummary> {
    if args.lambda_grid.is_empty() || args.lambda_grid.iter().any(|&l| l < 0.0) {
        return Err(Error::Config("lambda grid must be nonempty and nonnegative".into()));
    }
    let model = checkpoint::load(&args.model)?;
    let corpus_data = Dataset::load(&args.lm_corpus)?;
    let corpus: Vec<Vec<LabelId>> = corpus_data.utterances.iter().map(|u| u.labels.clone()).collect();
    let lm = NGramLm::train(&corpus, &model.vocab, args.lm_order, args.lm_k)?;

    let dev = Dataset::load(&args.dev)?;
    let test = Dataset::load(&args.test)?;
    let dev_nbest = split_nbest(&model, &dev, args)?;
    let test_nbest = split_nbest(&model, &test, args)?;

    // Grid search on dev. The weight only moves off zero when it strictly
    // improves the dev error rate; ties prefer the smaller weight.
    let mut dev_sweep = Vec::with_capacity(args.lambda_grid.len());
    for &lambda in &args.lambda_grid {
        dev_sweep.push((lambda, wer_at_lambda(&dev_nbest, &lm, lambda)?));
    }
    let baseline_dev = wer_at_lambda(&dev_nbest, &lm, 0.0)?;
    let mut best_lambda = 0.0;
    let mut best_dev = baseline_dev;
    for &(lambda, wer) in &dev_sweep {
        if wer < best_dev - 1e-12 {
            best_dev = wer;
            best_lambda = lambda;
        }
    }

    let test_baseline = wer_at_lambda(&test_nbest, &lm, 0.0)?;
    let test_rescored = wer_at_lambda(&test_nbest, &lm, best_lambda)?;

    let mut report = String::new();
    report.push_str("# vqlattice rescore report\n");
    report.push_str(&provenance(config_hash(args), args.seed, Some(file_hash(&args.model)?)));
    report.push_str(&format!(
        "# lm_order={} lm_k={} beam={} strategy={} nbest={} prune_margin={}\n",
        args.lm_order, args.lm_k, args.beam, args.strategy, args.nbest, args.prune_margin
    ));
    report.push_str("lambda\tdev_wer\n");
    for (lambda, wer) in &dev_sweep {
        report.push_str(&format!("{lambda:.1}\t{wer:.6}\n"));
    }
    report.push_str(&format!("chosen_lambda\t{best_lambda:.1}\n"));
    report.push_str("test_wer_baseline\ttest_wer_rescored\tdelta\n");
    report.push_str(&format!(
        "{:.6}\t{:.6}\t{:.6}\n",
        test_baseline,
        test_rescored,
        test_baseline - test_rescored
    ));
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, report)?;
    Ok(RescoreSummary {
        lambda: best_lambda,
        dev_sweep,
        test_wer_baseline: test_baseline,
        test_wer_rescored: test_rescored,
        report: args.out.clone(),
    })
}
