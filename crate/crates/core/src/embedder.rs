//! Frozen profile encoders mapping profile text to a unit vector.
//!
//! The built-in backend hashes TF-IDF weighted terms into signed buckets and
//! applies a fixed Gaussian projection. The external backend serves
//! precomputed vectors keyed by the hash of the canonical text.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::terms;
use crate::error::{Error, Result};
use crate::profile::MAX_PROFILE_CHARS;

pub const DEFAULT_D_EMB: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserEmbedding {
    pub vector: Vec<f64>,
    pub backend_id: String,
    pub source_hash: u64,
    /// The canonical text was empty and the vector is all zeros.
    pub empty: bool,
}

/// Trailing whitespace removed, then cut to `max_chars` characters.
pub fn canonicalize(text: &str, max_chars: usize) -> &str {
    let t = text.trim_end();
    match t.char_indices().nth(max_chars) {
        Some((i, _)) => &t[..i],
        None => t,
    }
}

fn fnv64(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
    }
    h.finish()
}

/// Hash of the canonical profile text; keys external embedding files.
pub fn source_hash(text: &str, max_chars: usize) -> u64 {
    fnv64(&[canonicalize(text, max_chars).as_bytes()])
}

pub trait ProfileEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn backend_id(&self) -> String;
    /// Checksum of everything that determines the output.
    fn state_checksum(&self) -> u32;
    fn encode(&self, text: &str) -> Result<UserEmbedding>;
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Document frequencies fitted on a profile corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut df = BTreeMap::new();
        for d in docs {
            let mut ts = terms(d.as_ref());
            ts.sort();
            ts.dedup();
            for t in ts {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Self {
            n_docs: docs.len(),
            df,
        }
    }

    /// `ln((1+N)/(1+df)) + 1`; unseen terms get the largest weight.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((1.0 + self.n_docs as f64) / (1.0 + df)).ln() + 1.0
    }
}

/// Serializable state of [`HashedTfidf`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedTfidfConfig {
    pub d_emb: usize,
    pub seed: u64,
    pub max_chars: usize,
    pub idf: Option<IdfTable>,
}

impl HashedTfidfConfig {
    pub fn new(d_emb: usize, seed: u64) -> Self {
        Self {
            d_emb,
            seed,
            max_chars: MAX_PROFILE_CHARS,
            idf: None,
        }
    }
}

/// Signed feature hashing into `2·d_emb` buckets followed by a seeded
/// Gaussian projection to `d_emb` dimensions.
#[derive(Debug, Clone)]
pub struct HashedTfidf {
    config: HashedTfidfConfig,
    /// Row-major `[d_emb, 2·d_emb]`.
    projection: Vec<f64>,
    checksum: u32,
}

impl HashedTfidf {
    pub fn new(config: HashedTfidfConfig) -> Result<Self> {
        if config.d_emb == 0 || config.max_chars == 0 {
            return Err(Error::Config("d_emb and max_chars must be positive".into()));
        }
        let buckets = 2 * config.d_emb;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let projection: Vec<f64> = (0..config.d_emb * buckets)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let state = serde_json::to_vec(&config).expect("config serializes");
        let mut h = crc32fast::Hasher::new();
        h.update(&state);
        for p in &projection {
            h.update(&p.to_le_bytes());
        }
        Ok(Self {
            checksum: h.finalize(),
            config,
            projection,
        })
    }

    /// An encoder whose IDF weights come from `docs`.
    pub fn fitted<S: AsRef<str>>(d_emb: usize, seed: u64, docs: &[S]) -> Result<Self> {
        let mut c = HashedTfidfConfig::new(d_emb, seed);
        c.idf = Some(IdfTable::fit(docs));
        Self::new(c)
    }

    pub fn config(&self) -> &HashedTfidfConfig {
        &self.config
    }

    /// The hashed sparse feature vector before projection.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let buckets = 2 * self.config.d_emb;
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in terms(canonicalize(text, self.config.max_chars)) {
            *tf.entry(t).or_insert(0) += 1;
        }
        let seed = self.config.seed.to_le_bytes();
        let mut f = vec![0.0; buckets];
        for (t, c) in tf {
            let idf = self.config.idf.as_ref().map_or(1.0, |i| i.idf(&t));
            let w = (1.0 + (c as f64).ln()) * idf;
            let h = fnv64(&[&seed, t.as_bytes()]);
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            f[(h % buckets as u64) as usize] += sign * w;
        }
        f
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config = serde_json::from_str(&text).map_err(|e| Error::Format {
            kind: "embedder",
            msg: e.to_string(),
        })?;
        Self::new(config)
    }
}

impl ProfileEncoder for HashedTfidf {
    fn dim(&self) -> usize {
        self.config.d_emb
    }

    fn backend_id(&self) -> String {
        format!("hashed-tfidf-{:08x}", self.checksum)
    }

    fn state_checksum(&self) -> u32 {
        self.checksum
    }

    fn encode(&self, text: &str) -> Result<UserEmbedding> {
        let f = self.features(text);
        let cols = f.len();
        let mut v: Vec<f64> = self
            .projection
            .chunks_exact(cols)
            .map(|row| row.iter().zip(&f).map(|(p, x)| p * x).sum())
            .collect();
        let ok = normalize(&mut v);
        if !ok {
            warn!("profile text has no terms; using the zero embedding");
        }
        Ok(UserEmbedding {
            vector: v,
            backend_id: self.backend_id(),
            source_hash: source_hash(text, self.config.max_chars),
            empty: !ok,
        })
    }
}

/// Precomputed vectors loaded from lines `hex_hash v1 ... v_d`.
#[derive(Debug, Clone)]
pub struct ExternalEmbeddings {
    table: HashMap<u64, Vec<f64>>,
    dim: usize,
    max_chars: usize,
    checksum: u32,
}

impl ExternalEmbeddings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        let mut crc = crc32fast::Hasher::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            let mut parts = line.split_whitespace();
            let key = parts.next().expect("non-empty line");
            let hash = u64::from_str_radix(key, 16).map_err(|e| perr(format!("bad hash {key:?}: {e}")))?;
            let mut v = parts
                .map(|s| s.parse::<f64>().map_err(|e| perr(format!("bad value {s:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(perr("embedding must be non-empty and finite".into()));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(perr(format!("expected {d} values, found {}", v.len())));
                }
                _ => {}
            }
            normalize(&mut v);
            crc.update(&hash.to_le_bytes());
            for x in &v {
                crc.update(&x.to_le_bytes());
            }
            if table.insert(hash, v).is_some() {
                return Err(perr(format!("duplicate hash {hash:016x}")));
            }
        }
        let dim = dim.ok_or_else(|| Error::Invalid("embedding file has no entries".into()))?;
        Ok(Self {
            table,
            dim,
            max_chars: MAX_PROFILE_CHARS,
            checksum: crc.finalize(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl ProfileEncoder for ExternalEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> String {
        format!("external-{:08x}", self.checksum)
    }

    fn state_checksum(&self) -> u32 {
        self.checksum
    }

    fn encode(&self, text: &str) -> Result<UserEmbedding> {
        let canon = canonicalize(text, self.max_chars);
        let hash = source_hash(text, self.max_chars);
        if canon.is_empty() {
            warn!("empty profile text; using the zero embedding");
            return Ok(UserEmbedding {
                vector: vec![0.0; self.dim],
                backend_id: self.backend_id(),
                source_hash: hash,
                empty: true,
            });
        }
        let v = self.table.get(&hash).ok_or(Error::UnknownProfile(hash))?;
        Ok(UserEmbedding {
            vector: v.clone(),
            backend_id: self.backend_id(),
            source_hash: hash,
            empty: false,
        })
    }
}

/// Lines `hex_hash<TAB>canonical text` for preparing an external file.
/// Newlines inside the text are escaped as `\n`.
pub fn hash_profiles<S: AsRef<str>>(texts: &[S], max_chars: usize) -> String {
    let mut out = String::new();
    for t in texts {
        let canon = canonicalize(t.as_ref(), max_chars);
        out.push_str(&format!(
            "{:016x}\t{}\n",
            source_hash(t.as_ref(), max_chars),
            canon.replace('\\', "\\\\").replace('\n', "\\n")
        ));
    }
    out
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> HashedTfidf {
        HashedTfidf::new(HashedTfidfConfig::new(16, 3)).unwrap()
    }

    #[test]
    fn unit_norm_and_deterministic() {
        let e = enc();
        let a = e.encode("likes red apples and long walks").unwrap();
        let n: f64 = a.vector.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(a, e.encode("likes red apples and long walks").unwrap());
        assert_eq!(a.vector.len(), 16);
    }

    #[test]
    fn trailing_whitespace_does_not_matter() {
        let e = enc();
        assert_eq!(e.encode("tea time").unwrap(), e.encode("tea time \n\t").unwrap());
    }

    #[test]
    fn empty_text_gives_zero_vector() {
        let z = enc().encode("  ").unwrap();
        assert!(z.empty);
        assert!(z.vector.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn truncation_at_max_chars() {
        let mut c = HashedTfidfConfig::new(16, 3);
        c.max_chars = 10;
        let e = HashedTfidf::new(c).unwrap();
        let long = "abcdefghij klmnop";
        assert_eq!(e.encode(long).unwrap().vector, e.encode("abcdefghij").unwrap().vector);
        assert_eq!(canonicalize("héllo wörld", 4), "héll");
    }

    #[test]
    fn idf_downweights_common_terms() {
        let docs = ["common alpha", "common beta", "common gamma"];
        let t = IdfTable::fit(&docs);
        assert!(t.idf("common") < t.idf("alpha"));
        assert!(t.idf("unseen") > t.idf("alpha"));
    }

    #[test]
    fn external_file_round_trip() {
        let h = source_hash("likes tea", MAX_PROFILE_CHARS);
        let file = format!("{h:x} 3 4\n");
        let ext = ExternalEmbeddings::parse(&file).unwrap();
        let e = ext.encode("likes tea  ").unwrap();
        assert_eq!(e.vector, vec![0.6, 0.8]);
        assert!(matches!(ext.encode("other"), Err(Error::UnknownProfile(_))));
        assert!(ExternalEmbeddings::parse("zz 1 2").is_err());
        assert!(ExternalEmbeddings::parse("1 1 2\n2 1").is_err());
        assert!(hash_profiles(&["likes tea"], MAX_PROFILE_CHARS).starts_with(&format!("{h:016x}\t")));
    }

    #[test]
    fn checksum_is_stable_and_seed_dependent() {
        assert_eq!(enc().state_checksum(), enc().state_checksum());
        let other = HashedTfidf::new(HashedTfidfConfig::new(16, 4)).unwrap();
        assert_ne!(enc().state_checksum(), other.state_checksum());
    }
}
