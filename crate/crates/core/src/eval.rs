//! Answer normalization, exact-match accuracy, sentence BLEU and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::VqaData;
use crate::error::{Error, Result};
use crate::model::VqaModel;
use crate::params::ParamSet;
use crate::text::{words, Vocabulary};

/// Lowercase, punctuation to spaces, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    words(text)
}

pub fn answers_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

pub fn exact_match_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!("{} predictions for {} gold answers", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("no answers to score".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| answers_match(p.as_ref(), g.as_ref())).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the number of prediction n-grams.
pub fn clipped_precision<S: AsRef<str>>(pred: &[S], gold: &[S], n: usize) -> (usize, usize) {
    let p = ngram_counts(pred, n);
    let g = ngram_counts(gold, n);
    let matched = p.iter().map(|(k, &c)| c.min(g.get(k).copied().unwrap_or(0))).sum();
    (matched, pred.len().saturating_sub(n - 1))
}

/// Smoothed sentence BLEU: geometric mean of clipped precisions for `1..=max_n`, add-one
/// smoothed for `n ≥ 2`, times the brevity penalty. An empty prediction scores 0.
pub fn sentence_bleu<S: AsRef<str>>(pred: &[S], gold: &[S], max_n: usize) -> f64 {
    if pred.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, total) = clipped_precision(pred, gold, n);
        let (num, den) = if n == 1 { (m as f64, total as f64) } else { (m as f64 + 1.0, total as f64 + 1.0) };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let (c, r) = (pred.len() as f64, gold.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / max_n as f64).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub question_id: String,
    pub prediction: String,
    pub gold: String,
    pub matched: bool,
    pub bleu: f64,
    /// Generation ran into the length cap.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_examples: usize,
    pub vqa_accuracy: f64,
    pub mean_bleu: f64,
    pub records: Vec<ExampleRecord>,
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl EvalReport {
    pub fn from_records(records: Vec<ExampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("no examples to report".into()));
        }
        let n = records.len();
        let hits = records.iter().filter(|r| r.matched).count();
        let bleu = records.iter().map(|r| r.bleu).sum::<f64>();
        Ok(Self { n_examples: n, vqa_accuracy: hits as f64 / n as f64, mean_bleu: bleu / n as f64, records })
    }

    /// Score one prediction per gold answer.
    pub fn score(items: impl IntoIterator<Item = (String, String, String, bool)>) -> Result<Self> {
        let records = items
            .into_iter()
            .map(|(question_id, prediction, gold, truncated)| {
                let (p, g) = (normalize_answer(&prediction), normalize_answer(&gold));
                ExampleRecord { bleu: sentence_bleu(&p, &g, 4), matched: p == g, question_id, prediction, gold, truncated }
            })
            .collect();
        Self::from_records(records)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_examples\t{}", self.n_examples);
        let _ = writeln!(s, "vqa_accuracy\t{:.6}", self.vqa_accuracy);
        let _ = writeln!(s, "mean_bleu\t{:.6}", self.mean_bleu);
        let _ = writeln!(s, "truncated\t{}", self.records.iter().filter(|r| r.truncated).count());
        s.push('\n');
        s.push_str("question_id\tprediction\tgold\tmatch\tbleu\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.6}", clean(&r.question_id), clean(&r.prediction), clean(&r.gold), u8::from(r.matched), r.bleu);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `question_id<TAB>answer` per example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    pub truncated: bool,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let body: String = preds.iter().map(|p| format!("{}\t{}\n", clean(&p.question_id), clean(&p.answer))).collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((q, a)) if !a.contains('\t') => Ok(Prediction { question_id: q.to_string(), answer: a.to_string(), truncated: false }),
            _ => Err(Error::Parse { path: path.into(), line: i + 1, msg: "expected `question_id<TAB>answer`".into() }),
        })
        .collect()
}

/// Greedy answers for every item, in item order. Runs on the current rayon pool.
pub fn generate_predictions(model: &VqaModel, params: &ParamSet<f32>, vocab: &Vocabulary, data: &VqaData, max_len: usize) -> Result<Vec<Prediction>> {
    data.items
        .par_iter()
        .map(|it| {
            let ans = model.answer(params, &data.visuals[it.visual], &it.question, max_len)?;
            Ok(Prediction { question_id: it.question_id.clone(), answer: vocab.detokenize(ans.body()), truncated: ans.truncated })
        })
        .collect()
}

/// Generate and score against each item's gold answer.
pub fn evaluate_model(model: &VqaModel, params: &ParamSet<f32>, vocab: &Vocabulary, data: &VqaData, max_len: usize) -> Result<EvalReport> {
    let preds = generate_predictions(model, params, vocab, data, max_len)?;
    EvalReport::score(preds.into_iter().zip(&data.items).map(|(p, it)| (p.question_id, p.answer, it.gold.clone(), p.truncated)))
}

/// Score a predictions file against gold answers keyed by question id, in gold order.
pub fn evaluate_predictions(preds: &[Prediction], golds: &[(String, String)]) -> Result<EvalReport> {
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in preds {
        if by_id.insert(&p.question_id, p).is_some() {
            return Err(Error::Invalid(format!("duplicate prediction for question `{}`", p.question_id)));
        }
    }
    let missing: Vec<&str> = golds.iter().filter(|(q, _)| !by_id.contains_key(q.as_str())).map(|(q, _)| q.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("no prediction for question(s) {}", missing.join(", "))));
    }
    EvalReport::score(golds.iter().map(|(q, g)| {
        let p = by_id[q.as_str()];
        (q.clone(), p.answer.clone(), g.clone(), p.truncated)
    }))
}
