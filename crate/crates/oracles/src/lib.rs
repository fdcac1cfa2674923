//! Slow reference implementations for cross-checking the main library.
//!
//! Nothing here depends on `p2p-core`: every formula is written out again
//! from its definition, on plain vectors, and favours obviousness over
//! speed.

use std::fmt;

/// Why an oracle refused its input.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    Shape(String),
    Undefined(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::Shape(m) => write!(f, "shape mismatch: {m}"),
            OracleError::Undefined(m) => write!(f, "undefined: {m}"),
        }
    }
}

impl std::error::Error for OracleError {}

/// One comparison between a main-path value and its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub main: f64,
    pub oracle: f64,
    pub abs_diff: f64,
    pub rel_diff: f64,
}

impl OracleReport {
    pub fn new(case: impl Into<String>, main: f64, oracle: f64) -> Self {
        let abs_diff = (main - oracle).abs();
        let denom = main.abs().max(oracle.abs());
        let rel_diff = if denom == 0.0 { 0.0 } else { abs_diff / denom };
        Self {
            case: case.into(),
            main,
            oracle,
            abs_diff,
            rel_diff,
        }
    }

    /// Worst entry of an elementwise comparison.
    pub fn worst(case: impl Into<String>, main: &[f64], oracle: &[f64]) -> Self {
        assert_eq!(main.len(), oracle.len(), "compared vectors differ in length");
        let mut best = OracleReport::new("", 0.0, 0.0);
        for (m, o) in main.iter().zip(oracle) {
            let r = OracleReport::new("", *m, *o);
            if r.abs_diff > best.abs_diff || r.abs_diff.is_nan() {
                best = r;
            }
        }
        best.case = case.into();
        best
    }

    pub fn within(&self, abs_tol: f64) -> bool {
        self.abs_diff <= abs_tol
    }

    /// One JSON object, numbers printed with full round-trip precision.
    pub fn to_json(&self) -> String {
        let num = |x: f64| {
            if x.is_finite() {
                format!("{x:?}")
            } else {
                "null".to_string()
            }
        };
        let mut case = String::new();
        for c in self.case.chars() {
            match c {
                '"' => case.push_str("\\\""),
                '\\' => case.push_str("\\\\"),
                c if (c as u32) < 0x20 => case.push_str(&format!("\\u{:04x}", c as u32)),
                c => case.push(c),
            }
        }
        format!(
            "{{\"case\":\"{}\",\"main\":{},\"oracle\":{},\"abs_diff\":{},\"rel_diff\":{}}}",
            case,
            num(self.main),
            num(self.oracle),
            num(self.abs_diff),
            num(self.rel_diff)
        )
    }
}

/// Row-major dense matrix as nested rows.
pub type Matrix = Vec<Vec<f64>>;

fn dims(m: &Matrix, what: &str) -> Result<(usize, usize), OracleError> {
    let cols = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != cols) {
        return Err(OracleError::Shape(format!("{what} is ragged")));
    }
    Ok((m.len(), cols))
}

/// `(W0 + (alpha/r) B A) x`, materializing the full updated matrix first.
/// `w0` is d_out×d_in, `a` is r×d_in, `b` is d_out×r.
pub fn dense_lora_oracle(w0: &Matrix, a: &Matrix, b: &Matrix, alpha: f64, x: &[f64]) -> Result<Vec<f64>, OracleError> {
    let (d_out, d_in) = dims(w0, "W0")?;
    let (r, a_in) = dims(a, "A")?;
    let (b_out, b_r) = dims(b, "B")?;
    if a_in != d_in || b_out != d_out || b_r != r || x.len() != d_in || r == 0 {
        return Err(OracleError::Shape(format!(
            "W0 {d_out}x{d_in}, A {r}x{a_in}, B {b_out}x{b_r}, x {}",
            x.len()
        )));
    }
    let scale = alpha / r as f64;
    let mut w = w0.clone();
    for i in 0..d_out {
        for j in 0..d_in {
            let mut ba = 0.0;
            for k in 0..r {
                ba += b[i][k] * a[k][j];
            }
            w[i][j] += scale * ba;
        }
    }
    Ok(w.iter()
        .map(|row| row.iter().zip(x).map(|(wij, xj)| wij * xj).sum())
        .collect())
}

/// Lowercased maximal runs of alphanumerics and underscores.
pub fn oracle_terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(cur.to_lowercase());
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push(cur.to_lowercase());
    }
    out
}

/// Okapi BM25 score of every document, summed term by term straight from
/// the formula. IDF is `ln((N - df + 0.5)/(df + 0.5))` clipped at zero;
/// repeated query terms count once per occurrence.
pub fn bm25_oracle(query: &str, docs: &[&str], k1: f64, b: f64) -> Vec<f64> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| oracle_terms(d)).collect();
    let n = docs.len() as f64;
    let avgdl = if docs.is_empty() {
        0.0
    } else {
        tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n
    };
    let mut scores = vec![0.0; docs.len()];
    for term in oracle_terms(query) {
        let df = tokenized.iter().filter(|d| d.contains(&term)).count() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
        for (s, d) in scores.iter_mut().zip(&tokenized) {
            let f = d.iter().filter(|t| **t == term).count() as f64;
            if f == 0.0 {
                continue;
            }
            let len_norm = if avgdl > 0.0 {
                1.0 - b + b * d.len() as f64 / avgdl
            } else {
                1.0
            };
            *s += idf * f * (k1 + 1.0) / (f + k1 * len_norm);
        }
    }
    scores
}

/// Indices of `scores` by descending score, lower index first on ties.
pub fn rank_oracle(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Insertion sort: stable and obviously correct.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j]] > scores[idx[j - 1]] {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx
}

/// Smoothed TF-IDF of every term, one document per entry:
/// `count · (ln((1+N)/(1+df)) + 1)`. Sorted by score, then alphabetically.
pub fn tfidf_oracle(docs: &[&str]) -> Vec<(String, f64)> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| oracle_terms(d)).collect();
    let mut vocab: Vec<String> = tokenized.iter().flatten().cloned().collect();
    vocab.sort();
    vocab.dedup();
    let n = docs.len() as f64;
    let mut out: Vec<(String, f64)> = vocab
        .into_iter()
        .map(|t| {
            let count = tokenized.iter().flatten().filter(|x| **x == t).count() as f64;
            let df = tokenized.iter().filter(|d| d.contains(&t)).count() as f64;
            let score = count * (((1.0 + n) / (1.0 + df)).ln() + 1.0);
            (t, score)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

/// Longest common subsequence length by the full (n+1)×(m+1) table.
pub fn lcs_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

/// ROUGE-L F1 over pre-split token lists.
pub fn rouge_l_oracle<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_oracle(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

/// Mean silhouette from pairwise distances. A point alone in its cluster
/// scores 0 by convention; fewer than two distinct labels is undefined.
pub fn silhouette_oracle(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64, OracleError> {
    if points.len() != assignments.len() {
        return Err(OracleError::Shape(format!(
            "{} points, {} assignments",
            points.len(),
            assignments.len()
        )));
    }
    let mut labels: Vec<usize> = assignments.to_vec();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(OracleError::Undefined("silhouette needs two clusters".into()));
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let mean_to = |c: usize| {
            let others: Vec<f64> = (0..points.len())
                .filter(|&j| j != i && assignments[j] == c)
                .map(|j| euclid(&points[i], &points[j]))
                .collect();
            if others.is_empty() {
                None
            } else {
                Some(others.iter().sum::<f64>() / others.len() as f64)
            }
        };
        let Some(a) = mean_to(assignments[i]) else {
            continue;
        };
        let b = labels
            .iter()
            .filter(|&&c| c != assignments[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

/// Central-difference gradient of `f` at `x` for the given coordinates.
pub fn central_difference_oracle<F>(mut f: F, x: &[f64], coords: &[usize], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let mut plus = x.to_vec();
            plus[i] += eps;
            let mut minus = x.to_vec();
            minus[i] -= eps;
            (f(&plus) - f(&minus)) / (2.0 * eps)
        })
        .collect()
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
