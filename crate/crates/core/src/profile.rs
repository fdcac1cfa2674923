//! Profile text `p = [summary || retrieved history]`.
//!
//! The summary is extractive: the top TF-IDF terms of the user's outputs
//! plus either the modal answer or the most frequent output bigrams, in a
//! fixed template. Retrieval is BM25 over the pre-target history.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use serde::Serialize;

use crate::corpus::{terms, Interaction, TaskKind, UserRecord};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 2;
pub const MAX_PROFILE_CHARS: usize = 2000;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
/// Number of TF-IDF terms listed in a summary.
pub const SUMMARY_TERMS: usize = 5;
const SUMMARY_BIGRAMS: usize = 3;
/// Line placed between the parts of a profile or prompt.
pub const SEPARATOR: &str = "### history ###";

/// Joins two blocks with the separator line.
pub fn join_blocks(head: &str, tail: &str) -> String {
    format!("{head}\n{SEPARATOR}\n{tail}")
}

/// How a retrieved interaction appears in profiles and prompts.
pub fn item_text(i: &Interaction) -> String {
    format!("{} => {}", i.input, i.output)
}

/// Okapi BM25 over the documents of one user.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    tf: Vec<HashMap<String, usize>>,
    lens: Vec<usize>,
    avgdl: f64,
    df: HashMap<String, usize>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[S], k1: f64, b: f64) -> Self {
        let mut tf = Vec::with_capacity(docs.len());
        let mut lens = Vec::with_capacity(docs.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let ts = terms(d.as_ref());
            lens.push(ts.len());
            let mut counts: HashMap<String, usize> = HashMap::new();
            for t in ts {
                *counts.entry(t).or_default() += 1;
            }
            for t in counts.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            tf.push(counts);
        }
        let total: usize = lens.iter().sum();
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Self {
            tf,
            lens,
            avgdl,
            df,
            k1,
            b,
        }
    }

    /// `ln((N − df + 0.5) / (df + 0.5))`, floored at 0.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.tf.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    /// Score of every document, in document order. Repeated query terms
    /// count repeatedly.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = terms(query);
        let idf: Vec<f64> = q.iter().map(|t| self.idf(t)).collect();
        self.tf
            .iter()
            .zip(&self.lens)
            .map(|(tf, &len)| {
                let norm = if self.avgdl > 0.0 {
                    self.k1 * (1.0 - self.b + self.b * len as f64 / self.avgdl)
                } else {
                    self.k1
                };
                q.iter()
                    .zip(&idf)
                    .map(|(t, &w)| {
                        let f = tf.get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            0.0
                        } else {
                            w * f * (self.k1 + 1.0) / (f + norm)
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// The `k` best history items for `query`: descending score, earlier
/// `seq_index` first on ties.
pub fn bm25_rank<'a>(query: &str, history: &'a [Interaction], k: usize) -> Vec<(&'a Interaction, f64)> {
    if k == 0 || history.is_empty() {
        return Vec::new();
    }
    let docs: Vec<String> = history.iter().map(item_text).collect();
    let scores = Bm25Index::new(&docs, BM25_K1, BM25_B).scores(query);
    let mut ranked: Vec<(&Interaction, f64)> = history.iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.seq_index.cmp(&b.0.seq_index)));
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub text: String,
    /// Set when there was no history to summarize.
    pub empty: bool,
}

/// Smoothed TF-IDF of output terms, each output one document:
/// `tf · (ln((1+N)/(1+df)) + 1)`. Highest first, ties alphabetical.
pub fn output_term_scores(outputs: &[&str]) -> Vec<(String, f64)> {
    let n = outputs.len() as f64;
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for o in outputs {
        let ts = terms(o);
        for t in &ts {
            *tf.entry(t.clone()).or_default() += 1;
        }
        let mut uniq = ts;
        uniq.sort();
        uniq.dedup();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut scored: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(t, c)| {
            let idf = ((1.0 + n) / (1.0 + df[&t] as f64)).ln() + 1.0;
            (t, c as f64 * idf)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

fn top_counted(counts: BTreeMap<String, usize>, n: usize) -> Vec<String> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(s, _)| s).collect()
}

/// Deterministic extractive summary of a history.
pub fn summarize(history: &[Interaction], kind: TaskKind) -> Summary {
    if history.is_empty() {
        warn!("summarizing an empty history");
        return Summary {
            text: String::new(),
            empty: true,
        };
    }
    let outputs: Vec<&str> = history.iter().map(|i| i.output.as_str()).collect();
    let top: Vec<String> = output_term_scores(&outputs)
        .into_iter()
        .take(SUMMARY_TERMS)
        .map(|(t, _)| t)
        .collect();
    let tail = match kind {
        TaskKind::Classification | TaskKind::Rating => {
            let mut counts = BTreeMap::new();
            for o in &outputs {
                *counts.entry(o.trim().to_string()).or_default() += 1;
            }
            let modal = top_counted(counts, 1).pop().unwrap_or_default();
            format!("typical answer: {modal}.")
        }
        TaskKind::Generation => {
            let mut counts = BTreeMap::new();
            for o in &outputs {
                let ts = terms(o);
                for w in ts.windows(2) {
                    *counts.entry(format!("{} {}", w[0], w[1])).or_default() += 1;
                }
            }
            format!("frequent phrases: {}.", top_counted(counts, SUMMARY_BIGRAMS).join(", "))
        }
    };
    Summary {
        text: format!("user summary. frequent terms: {}. {tail}", top.join(" ")),
        empty: false,
    }
}

/// Which parts of a profile to show; the ablation views are exact
/// substrings of the full rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileView {
    Full,
    SummaryOnly,
    RetrievedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileText {
    pub summary: String,
    /// Retrieved item texts with their BM25 scores, best first.
    pub retrieved: Vec<(String, f64)>,
    pub k: usize,
    /// `None` unless the user brought a pre-existing profile.
    pub passthrough: Option<String>,
    pub rendered: String,
    /// Retrieved items dropped to respect the length budget.
    pub dropped: usize,
}

fn render_parts(summary: &str, items: &[(String, f64)]) -> String {
    if items.is_empty() {
        return summary.to_string();
    }
    let body: Vec<&str> = items.iter().map(|(t, _)| t.as_str()).collect();
    join_blocks(summary, &body.join("\n"))
}

impl ProfileText {
    pub fn view(&self, view: ProfileView) -> String {
        if let Some(p) = &self.passthrough {
            return p.clone();
        }
        match view {
            ProfileView::Full => self.rendered.clone(),
            ProfileView::SummaryOnly => self.summary.clone(),
            ProfileView::RetrievedOnly => self
                .retrieved
                .iter()
                .map(|(t, _)| t.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

/// Knobs of profile construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ProfileConfig {
    pub k: usize,
    pub max_chars: usize,
    pub kind: TaskKind,
}

impl ProfileConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            k: DEFAULT_K,
            max_chars: MAX_PROFILE_CHARS,
            kind,
        }
    }
}

/// Builds the profile for `query` from `user`'s pre-target history, reusing
/// a precomputed summary of that history.
pub fn build_profile_with(
    query: &str,
    user: &UserRecord,
    summary: &Summary,
    config: &ProfileConfig,
) -> Result<ProfileText> {
    if let Some(p) = &user.profile_text {
        return Ok(ProfileText {
            summary: String::new(),
            retrieved: Vec::new(),
            k: config.k,
            passthrough: Some(p.clone()),
            rendered: p.clone(),
            dropped: 0,
        });
    }
    let history = user.profile_history();
    if history.is_empty() {
        return Err(Error::ColdUser(user.user_id.clone()));
    }
    let mut retrieved: Vec<(String, f64)> = bm25_rank(query, history, config.k)
        .into_iter()
        .map(|(i, s)| (item_text(i), s))
        .collect();
    let mut rendered = render_parts(&summary.text, &retrieved);
    let mut dropped = 0;
    while rendered.chars().count() > config.max_chars && !retrieved.is_empty() {
        retrieved.pop();
        dropped += 1;
        rendered = render_parts(&summary.text, &retrieved);
    }
    Ok(ProfileText {
        summary: summary.text.clone(),
        retrieved,
        k: config.k,
        passthrough: None,
        rendered,
        dropped,
    })
}

/// `build_profile_with` after summarizing the user's pre-target history.
/// An empty query gives the per-user profile.
pub fn build_profile(query: &str, user: &UserRecord, config: &ProfileConfig) -> Result<ProfileText> {
    let summary = summarize(user.profile_history(), config.kind);
    build_profile_with(query, user, &summary, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inter(i: usize, input: &str, output: &str) -> Interaction {
        Interaction {
            input: input.into(),
            output: output.into(),
            seq_index: i,
        }
    }

    fn user(items: Vec<Interaction>) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            task_id: "t".into(),
            profile_text: None,
            history: items,
        }
    }

    fn history() -> Vec<Interaction> {
        vec![
            inter(0, "red apples in the basket", "fruit"),
            inter(1, "engines and wheels", "cars"),
            inter(2, "green pears ripen", "fruit"),
            inter(3, "a fast red car", "cars"),
            inter(4, "wheels spin", "cars"),
        ]
    }

    #[test]
    fn k_zero_and_no_overlap() {
        let h = history();
        assert!(bm25_rank("apples", &h, 0).is_empty());
        let r = bm25_rank("zebra", &h, 5);
        assert!(r.iter().all(|(_, s)| *s == 0.0));
        let order: Vec<usize> = r.iter().map(|(i, _)| i.seq_index).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn exact_copy_ranks_first() {
        let h = history();
        let r = bm25_rank("green pears ripen", &h, 2);
        assert_eq!(r[0].0.seq_index, 2);
        assert!(r[0].1 > r[1].1);
    }

    #[test]
    fn permutation_does_not_change_ranking() {
        let h = history();
        let mut p = h.clone();
        p.reverse();
        let a: Vec<usize> = bm25_rank("red wheels", &h, 3).iter().map(|x| x.0.seq_index).collect();
        let b: Vec<usize> = bm25_rank("red wheels", &p, 3).iter().map(|x| x.0.seq_index).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn summary_names_the_modal_label() {
        let h: Vec<Interaction> = (0..4).map(|i| inter(i, "x", "sports")).collect();
        let s = summarize(&h, TaskKind::Classification);
        assert!(s.text.contains("sports"));
        assert_eq!(s, summarize(&h, TaskKind::Classification));
        assert!(summarize(&[], TaskKind::Classification).empty);
    }

    #[test]
    fn generation_summary_lists_bigrams() {
        let h = vec![inter(0, "x", "hey red apple"), inter(1, "y", "hey red car")];
        let s = summarize(&h, TaskKind::Generation);
        assert!(s.text.contains("hey red"), "{}", s.text);
    }

    #[test]
    fn default_k_retrieves_two() {
        let mut h = history();
        h.extend((5..8).map(|i| inter(i, "filler", "cars")));
        let u = user(h);
        let p = build_profile("red apples", &u, &ProfileConfig::new(TaskKind::Classification)).unwrap();
        assert_eq!(p.retrieved.len(), 2);
        assert!(p.rendered.starts_with(&p.summary));
        assert!(p.rendered.contains(SEPARATOR));
        assert!(p.rendered.ends_with(&p.view(ProfileView::RetrievedOnly)));
    }

    #[test]
    fn large_k_takes_whole_profile_history() {
        let u = user(history());
        let cfg = ProfileConfig {
            k: 50,
            ..ProfileConfig::new(TaskKind::Classification)
        };
        let p = build_profile("", &u, &cfg).unwrap();
        assert_eq!(p.retrieved.len(), u.profile_history().len());
    }

    #[test]
    fn passthrough_and_cold_users() {
        let mut u = user(vec![]);
        let cfg = ProfileConfig::new(TaskKind::Classification);
        assert!(matches!(build_profile("q", &u, &cfg), Err(Error::ColdUser(_))));
        u.profile_text = Some("likes tea".into());
        assert_eq!(build_profile("q", &u, &cfg).unwrap().rendered, "likes tea");
    }

    #[test]
    fn truncation_drops_low_scored_items_first() {
        let u = user(history());
        let cfg = ProfileConfig {
            k: 3,
            max_chars: 100,
            kind: TaskKind::Classification,
        };
        let full = build_profile("red", &u, &ProfileConfig { max_chars: 10_000, ..cfg }).unwrap();
        let p = build_profile("red", &u, &cfg).unwrap();
        assert!(p.dropped > 0);
        assert!(p.rendered.chars().count() <= 100 || p.retrieved.is_empty());
        assert_eq!(p.retrieved[..], full.retrieved[..p.retrieved.len()]);
    }
}
