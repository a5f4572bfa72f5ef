//! Add-k smoothed n-gram language model and n-best rescoring.
//!
//! A small closed-vocabulary model over the transducer's label symbols, used
//! to rerank lattice n-best lists. Sentences are padded with begin markers
//! and every sequence is scored including its end-of-sentence event, so each
//! conditional distribution ranges over `labels + eos` and sums to one after
//! smoothing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice::NBestEntry;
use crate::model::{LabelId, Vocabulary};

/// Token space used internally: labels are their vocabulary ids, `BOS`
/// appears only in contexts, `EOS` only as a predicted event.
const BOS: u32 = u32::MAX - 1;
const EOS: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    pub order: usize,
    pub k: f64,
    vocab: Vocabulary,
    /// context -> (symbol -> count); contexts have length `order - 1`.
    counts: BTreeMap<Vec<u32>, BTreeMap<u32, u64>>,
    /// context -> total count.
    totals: BTreeMap<Vec<u32>, u64>,
}

impl NGramLm {
    /// Estimate from a corpus of label sequences.
    pub fn train(corpus: &[Vec<LabelId>], vocab: &Vocabulary, order: usize, k: f64) -> Result<NGramLm> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("language model corpus is empty".into()));
        }
        if !(1..=3).contains(&order) {
            return Err(Error::Contract(format!("n-gram order must be 1..=3, got {order}")));
        }
        if !(k > 0.0) {
            return Err(Error::Contract("smoothing constant k must be > 0".into()));
        }
        let mut lm = NGramLm {
            order,
            k,
            vocab: vocab.clone(),
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        };
        for sentence in corpus {
            for &l in sentence {
                lm.check_label(l)?;
            }
            let mut context = vec![BOS; order - 1];
            for &label in sentence {
                lm.bump(&context, label as u32);
                push_context(&mut context, label as u32, order);
            }
            lm.bump(&context, EOS);
        }
        Ok(lm)
    }

    fn check_label(&self, label: LabelId) -> Result<()> {
        if label == 0 || label as usize > self.vocab.label_count() {
            return Err(Error::UnknownSymbol(format!("label id {label}")));
        }
        Ok(())
    }

    fn bump(&mut self, context: &[u32], symbol: u32) {
        *self
            .counts
            .entry(context.to_vec())
            .or_default()
            .entry(symbol)
            .or_insert(0) += 1;
        *self.totals.entry(context.to_vec()).or_insert(0) += 1;
    }

    /// Outcome count of each conditional: all labels plus end-of-sentence.
    fn outcome_count(&self) -> f64 {
        (self.vocab.label_count() + 1) as f64
    }

    fn conditional(&self, context: &[u32], symbol: u32) -> f64 {
        let count = self
            .counts
            .get(context)
            .and_then(|m| m.get(&symbol))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.totals.get(context).copied().unwrap_or(0) as f64;
        (count + self.k) / (total + self.k * self.outcome_count())
    }

    /// Probability of `symbol` (or end-of-sentence for `None`) after the
    /// given label history.
    pub fn prob(&self, history: &[LabelId], symbol: Option<LabelId>) -> Result<f64> {
        for &l in history {
            self.check_label(l)?;
        }
        let sym = match symbol {
            Some(l) => {
                self.check_label(l)?;
                l as u32
            }
            None => EOS,
        };
        let mut context = vec![BOS; self.order - 1];
        for &l in history {
            push_context(&mut context, l as u32, self.order);
        }
        Ok(self.conditional(&context, sym))
    }

    /// Log-probability of a full sequence, including the end-of-sentence
    /// event. Unknown symbols are an error (closed vocabulary).
    pub fn score(&self, sequence: &[LabelId]) -> Result<f64> {
        let mut context = vec![BOS; self.order - 1];
        let mut total = 0.0;
        for &label in sequence {
            self.check_label(label)?;
            total += self.conditional(&context, label as u32).ln();
            push_context(&mut context, label as u32, self.order);
        }
        total += self.conditional(&context, EOS).ln();
        Ok(total)
    }

    /// Serialize as a line-oriented counts table.
    pub fn write_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("vqlattice-ngram v1 order={} k={:e}\n", self.order, self.k));
        out.push_str(&format!("vocab {}\n", self.vocab.symbols().join(" ")));
        let fmt_tok = |t: u32| -> String {
            match t {
                BOS => "<s>".into(),
                EOS => "</s>".into(),
                l => self.vocab.symbol(l as LabelId).unwrap_or("?").to_string(),
            }
        };
        for (context, symbols) in &self.counts {
            for (&sym, &count) in symbols {
                let ctx: Vec<String> = context.iter().map(|&c| fmt_tok(c)).collect();
                out.push_str(&format!("count {} {} {}\n", ctx.join(" "), fmt_tok(sym), count));
            }
        }
        out
    }

    pub fn read_text(text: &str) -> Result<NGramLm> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty lm file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("vqlattice-ngram") || fields.next() != Some("v1") {
            return Err(Error::Format("missing n-gram header tag".into()));
        }
        let mut order = None;
        let mut k = None;
        for field in fields {
            match field.split_once('=') {
                Some(("order", v)) => order = Some(v.parse().map_err(|_| Error::Format("bad order".into()))?),
                Some(("k", v)) => k = Some(v.parse().map_err(|_| Error::Format("bad k".into()))?),
                _ => return Err(Error::Format(format!("unknown lm header field {field:?}"))),
            }
        }
        let vocab_line = lines.next().ok_or_else(|| Error::Format("missing vocab line".into()))?;
        let symbols: Vec<String> = vocab_line
            .strip_prefix("vocab ")
            .ok_or_else(|| Error::Format("missing vocab line".into()))?
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        let vocab = Vocabulary::new(symbols)?;
        let order: usize = order.ok_or_else(|| Error::Format("header missing order".into()))?;
        let mut lm = NGramLm {
            order,
            k: k.ok_or_else(|| Error::Format("header missing k".into()))?,
            vocab,
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        };
        let parse_tok = |lm: &NGramLm, tok: &str| -> Result<u32> {
            match tok {
                "<s>" => Ok(BOS),
                "</s>" => Ok(EOS),
                s => lm
                    .vocab
                    .id(s)
                    .map(|l| l as u32)
                    .ok_or_else(|| Error::UnknownSymbol(s.to_string())),
            }
        };
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.first() != Some(&"count") || parts.len() != order + 2 {
                return Err(Error::Format(format!("bad count line {line:?}")));
            }
            let mut context = Vec::with_capacity(order - 1);
            for tok in &parts[1..order] {
                context.push(parse_tok(&lm, tok)?);
            }
            let sym = parse_tok(&lm, parts[order])?;
            let count: u64 = parts[order + 1]
                .parse()
                .map_err(|_| Error::Format("bad count value".into()))?;
            *lm.counts.entry(context.clone()).or_default().entry(sym).or_insert(0) += count;
            *lm.totals.entry(context).or_insert(0) += count;
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.write_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NGramLm> {
        NGramLm::read_text(&fs::read_to_string(path)?)
    }
}

fn push_context(context: &mut Vec<u32>, symbol: u32, order: usize) {
    if order > 1 {
        context.push(symbol);
        if context.len() > order - 1 {
            context.remove(0);
        }
    }
}

/// Rescore an n-best list: `combined = acoustic + weight * lm`, re-sorted
/// descending. With `weight = 0` the input ranking is reproduced exactly
/// (stable sort on equal combined scores).
pub fn rescore(nbest: &[NBestEntry], lm: &NGramLm, weight: f64) -> Result<Vec<NBestEntry>> {
    if weight < 0.0 {
        return Err(Error::Contract("rescoring weight must be nonnegative".into()));
    }
    let mut out = Vec::with_capacity(nbest.len());
    for entry in nbest {
        let lm_score = lm.score(&entry.labels)?;
        out.push(NBestEntry {
            labels: entry.labels.clone(),
            acoustic: entry.acoustic,
            lm: Some(lm_score),
            combined: entry.acoustic + weight * lm_score,
        });
    }
    out.sort_by(|a, b| b.combined.total_cmp(&a.combined));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::letters(2).unwrap()
    }

    fn seqs(texts: &[&str]) -> Vec<Vec<LabelId>> {
        let v = vocab();
        texts.iter().map(|t| v.parse_labels(t).unwrap()).collect()
    }

    #[test]
    fn unigram_counts_dominate_as_k_vanishes() {
        // Corpus "a a b" (one sentence): events a, a, b, eos.
        let lm = NGramLm::train(&seqs(&["a a b"]), &vocab(), 1, 1e-9).unwrap();
        let pa = lm.prob(&[], Some(1)).unwrap();
        let pb = lm.prob(&[], Some(2)).unwrap();
        // Relative label frequencies: a appears twice as often as b.
        assert!((pa / pb - 2.0).abs() < 1e-6);
        // Including the sentence-end event, p(a) tends to 2/4.
        assert!((pa - 0.5).abs() < 1e-6);
    }

    #[test]
    fn add_k_formula_matches_hand_counts() {
        // Bigram on "a b", "a a": contexts and counts by hand.
        let lm = NGramLm::train(&seqs(&["a b", "a a"]), &vocab(), 2, 0.5).unwrap();
        // count(a | <s>) = 2, total(<s>) = 2, outcomes = 3 (a, b, eos).
        let p = lm.prob(&[], Some(1)).unwrap();
        assert!((p - (2.0 + 0.5) / (2.0 + 0.5 * 3.0)).abs() < 1e-12);
        // count(b | a) = 1, count(a | a) = 1, total(a) = 2 within sentences,
        // plus eos after the final a of "a a": total(a) = 3, count(eos|a) = 1.
        let p = lm.prob(&[1], Some(2)).unwrap();
        assert!((p - (1.0 + 0.5) / (3.0 + 0.5 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let lm = NGramLm::train(&seqs(&["a a"]), &vocab(), 2, 0.5).unwrap();
        // Context "b" never occurred: uniform over 3 outcomes.
        for sym in [Some(1), Some(2), None] {
            let p = lm.prob(&[2], sym).unwrap();
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditionals_sum_to_one() {
        let lm = NGramLm::train(&seqs(&["a b a", "b b"]), &vocab(), 2, 0.7).unwrap();
        for history in [vec![], vec![1], vec![2], vec![1, 2]] {
            let mut total = lm.prob(&history, None).unwrap();
            for l in 1..=2 {
                total += lm.prob(&history, Some(l)).unwrap();
            }
            assert!((total - 1.0).abs() < 1e-9, "history {history:?}: {total}");
        }
    }

    #[test]
    fn score_is_chain_rule_product() {
        let lm = NGramLm::train(&seqs(&["a b", "b a", "a a b"]), &vocab(), 2, 0.3).unwrap();
        let seq = vec![1u16, 2];
        let direct = lm.prob(&[], Some(1)).unwrap()
            * lm.prob(&[1], Some(2)).unwrap()
            * lm.prob(&[1, 2], None).unwrap();
        let score = lm.score(&seq).unwrap();
        assert!((score - direct.ln()).abs() < 1e-12);
        // Deterministic across calls.
        assert_eq!(score.to_bits(), lm.score(&seq).unwrap().to_bits());
    }

    #[test]
    fn empty_sequence_scores_eos_after_bos() {
        let lm = NGramLm::train(&seqs(&["a", "b a"]), &vocab(), 2, 0.5).unwrap();
        let expected = lm.prob(&[], None).unwrap().ln();
        assert!((lm.score(&[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn unknown_symbol_is_error() {
        let lm = NGramLm::train(&seqs(&["a b"]), &vocab(), 1, 0.5).unwrap();
        assert!(matches!(lm.score(&[7]), Err(Error::UnknownSymbol(_))));
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(matches!(
            NGramLm::train(&[], &vocab(), 2, 0.5),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = NGramLm::train(&seqs(&["a b a", "b b", "a"]), &vocab(), 2, 0.25).unwrap();
        let path = dir.path().join("toy.lm");
        lm.save(&path).unwrap();
        let loaded = NGramLm::load(&path).unwrap();
        assert_eq!(lm, loaded);
        // Byte-stable re-serialization.
        assert_eq!(lm.write_text(), loaded.write_text());
    }

    fn entries(items: &[(&[LabelId], f64)]) -> Vec<NBestEntry> {
        items
            .iter()
            .map(|(labels, acoustic)| NBestEntry {
                labels: labels.to_vec(),
                acoustic: *acoustic,
                lm: None,
                combined: *acoustic,
            })
            .collect()
    }

    #[test]
    fn zero_weight_reproduces_acoustic_ranking() {
        let lm = NGramLm::train(&seqs(&["a b", "a"]), &vocab(), 2, 0.5).unwrap();
        let nbest = entries(&[(&[1, 2], -1.0), (&[2], -2.0), (&[1], -3.0)]);
        let rescored = rescore(&nbest, &lm, 0.0).unwrap();
        let order: Vec<_> = rescored.iter().map(|e| e.labels.clone()).collect();
        assert_eq!(order, vec![vec![1, 2], vec![2], vec![1]]);
        for (a, b) in rescored.iter().zip(&nbest) {
            assert_eq!(a.combined, b.acoustic);
        }
    }

    #[test]
    fn huge_weight_ranks_by_lm_alone() {
        let lm = NGramLm::train(&seqs(&["a a", "a a", "a a", "b b"]), &vocab(), 2, 0.1).unwrap();
        let nbest = entries(&[(&[2, 2], -0.5), (&[1, 1], -5.0)]);
        let rescored = rescore(&nbest, &lm, 1e9).unwrap();
        // "a a" dominates under the LM despite the worse acoustic score.
        assert_eq!(rescored[0].labels, vec![1, 1]);
        // Same order as sorting by the LM score alone.
        assert!(rescored[0].lm.unwrap() > rescored[1].lm.unwrap());
    }

    #[test]
    fn raising_lm_score_never_lowers_rank() {
        let lm = NGramLm::train(&seqs(&["a b", "b a", "a"]), &vocab(), 2, 0.5).unwrap();
        let nbest = entries(&[(&[1], -1.0), (&[2], -1.1), (&[1, 2], -1.2)]);
        for weight in [0.0, 0.25, 0.5, 1.0] {
            let rescored = rescore(&nbest, &lm, weight).unwrap();
            // Monotone in (acoustic, lm): an entry dominating another in both
            // components must stay ahead.
            for i in 0..rescored.len() {
                for j in i + 1..rescored.len() {
                    let (a, b) = (&rescored[i], &rescored[j]);
                    assert!(!(b.acoustic > a.acoustic && b.lm.unwrap() > a.lm.unwrap()));
                }
            }
        }
    }
}
