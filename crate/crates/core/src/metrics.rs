//! Task metrics: accuracy and macro-F1 for labels, ROUGE-1/ROUGE-L for
//! text, MAE/RMSE for ratings.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{pre_tokenize, TaskKind};
use crate::error::{Error, Result};

/// Rating assigned to a prediction that does not parse as a number.
pub const UNPARSEABLE_RATING: f64 = 3.0;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            what: "predictions vs references",
            expected: b,
            found: a,
        });
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of exact matches after trimming.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], golds: &[T]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().trim() == g.as_ref().trim())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-label F1 averaged over `label_set`; a label that never occurs in
/// predictions or references scores 0.
pub fn f1_macro<S: AsRef<str>, T: AsRef<str>>(preds: &[S], golds: &[T], label_set: &[String]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    if label_set.is_empty() {
        return Err(Error::Invalid("macro-F1 needs a label set".into()));
    }
    let mut total = 0.0;
    for label in label_set {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(golds) {
            let (p, g) = (p.as_ref().trim() == label, g.as_ref().trim() == label);
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    Ok(total / label_set.len() as f64)
}

/// Lowercased, trimmed tokenizer pieces; empty pieces dropped.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    pre_tokenize(text)
        .into_iter()
        .map(|p| p.trim().to_lowercase())
        .filter(|p| !p.is_empty())
        .collect()
}

fn f_measure(overlap: f64, cand: usize, reference: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / reference as f64;
    2.0 * p * r / (p + r)
}

/// Unigram overlap F1 with clipped counts.
pub fn rouge_1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap as f64, c.len(), r.len())
}

/// Length of the longest common subsequence, in two rolling rows.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    f_measure(lcs_len(&c, &r) as f64, c.len(), r.len())
}

/// Parses a rating; `None` when the text is not a finite number.
pub fn parse_rating(text: &str) -> Option<f64> {
    text.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let mse = preds.iter().zip(golds).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Metrics of one group of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n_examples: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Rating predictions that did not parse and were scored as 3.
    #[serde(skip_serializing_if = "is_zero", default)]
    pub unparseable: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// The metrics of `kind` for paired predictions and references.
pub fn score<S: AsRef<str>, T: AsRef<str>>(
    kind: TaskKind,
    label_set: Option<&[String]>,
    preds: &[S],
    golds: &[T],
) -> Result<Scores> {
    check_lengths(preds.len(), golds.len())?;
    let mut metrics = BTreeMap::new();
    let mut unparseable = 0;
    match kind {
        TaskKind::Classification => {
            metrics.insert("accuracy".into(), accuracy(preds, golds)?);
            let labels = label_set.ok_or_else(|| Error::Config("classification needs a label set".into()))?;
            metrics.insert("f1_macro".into(), f1_macro(preds, golds, labels)?);
        }
        TaskKind::Generation => {
            let n = preds.len() as f64;
            let pairs = preds.iter().zip(golds);
            let r1: f64 = pairs.clone().map(|(p, g)| rouge_1(p.as_ref(), g.as_ref())).sum();
            let rl: f64 = pairs.map(|(p, g)| rouge_l(p.as_ref(), g.as_ref())).sum();
            metrics.insert("rouge_1".into(), r1 / n);
            metrics.insert("rouge_l".into(), rl / n);
        }
        TaskKind::Rating => {
            let p: Vec<f64> = preds
                .iter()
                .map(|s| {
                    parse_rating(s.as_ref()).unwrap_or_else(|| {
                        unparseable += 1;
                        UNPARSEABLE_RATING
                    })
                })
                .collect();
            let g = golds
                .iter()
                .map(|s| {
                    parse_rating(s.as_ref())
                        .ok_or_else(|| Error::Invalid(format!("reference rating {:?} is not a number", s.as_ref())))
                })
                .collect::<Result<Vec<f64>>>()?;
            if unparseable > 0 {
                warn!("{unparseable} rating predictions did not parse; scored as {UNPARSEABLE_RATING}");
            }
            metrics.insert("mae".into(), mae(&p, &g)?);
            metrics.insert("rmse".into(), rmse(&p, &g)?);
            metrics.insert("accuracy".into(), accuracy(preds, golds)?);
        }
    }
    Ok(Scores {
        n_examples: preds.len(),
        metrics,
        unparseable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScores {
    pub user_id: String,
    pub task_id: String,
    pub history_len: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    /// Example-weighted mean of each metric over tasks that report it.
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub tasks: BTreeMap<String, Scores>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_user: Vec<UserScores>,
}

impl MetricReport {
    pub fn new(method: &str, tasks: BTreeMap<String, Scores>, per_user: Vec<UserScores>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in tasks.values() {
            for (k, v) in &s.metrics {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v * s.n_examples as f64;
                e.1 += s.n_examples;
            }
        }
        Self {
            method: method.to_string(),
            metrics: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            n_examples: tasks.values().map(|s| s.n_examples).sum(),
            tasks,
            per_user,
        }
    }

    /// The headline number: accuracy, ROUGE-L, or negated MAE.
    pub fn primary(&self) -> f64 {
        if let Some(a) = self.metrics.get("accuracy") {
            *a
        } else if let Some(r) = self.metrics.get("rouge_l") {
            *r
        } else {
            -self.metrics.get("mae").copied().unwrap_or(f64::NAN)
        }
    }
}
