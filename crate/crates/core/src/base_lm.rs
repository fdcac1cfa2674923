//! The frozen decoder-only language model and its LoRA injection points.
//!
//! Pre-norm transformer blocks: `h += Attn(RMSNorm(h))`, then
//! `h += FFN(RMSNorm(h))`, with learned absolute positions and an untied
//! output head. Every linear map is stored as a `d_out×d_in` matrix and
//! applied as `x·Wᵀ`; an adapted map adds `s·(x·Aᵀ)·Bᵀ`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::corpus::{Vocab, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, PositionIndex};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::tensor::{Graph, Tensor, Var};

const MAGIC: &[u8; 6] = b"P2PLM1";
const NORM_EPS: f64 = 1e-6;

/// A projection that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleName {
    QProj,
    KProj,
    VProj,
    OProj,
    FfUp,
    FfDown,
}

impl ModuleName {
    pub const ALL: [ModuleName; 6] = [
        ModuleName::QProj,
        ModuleName::KProj,
        ModuleName::VProj,
        ModuleName::OProj,
        ModuleName::FfUp,
        ModuleName::FfDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleName::QProj => "q_proj",
            ModuleName::KProj => "k_proj",
            ModuleName::VProj => "v_proj",
            ModuleName::OProj => "o_proj",
            ModuleName::FfUp => "ff_up",
            ModuleName::FfDown => "ff_down",
        }
    }

    /// `(d_in, d_out)` of this projection under `config`.
    pub fn dims(self, config: &LMConfig) -> (usize, usize) {
        match self {
            ModuleName::FfUp => (config.d_model, config.d_ff),
            ModuleName::FfDown => (config.d_ff, config.d_model),
            _ => (config.d_model, config.d_model),
        }
    }
}

impl FromStr for ModuleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown module {s:?} (expected one of q_proj, k_proj, v_proj, o_proj, ff_up, ff_down)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub target_modules: Vec<ModuleName>,
}

impl LMConfig {
    /// Four layers, width 128, four heads, FFN width 256, context 256,
    /// adapters on `q_proj` and `v_proj`.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq: 256,
            target_modules: vec![ModuleName::QProj, ModuleName::VProj],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq < 2 {
            return bad("layer count, widths and max_seq must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size <= SEP {
            return bad("vocabulary too small");
        }
        if self.target_modules.is_empty() {
            return bad("at least one target module is required");
        }
        let mut sorted = self.target_modules.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.target_modules.len() {
            return bad("duplicate target module");
        }
        Ok(())
    }

    /// The index set `I`: every target module at every layer, in the
    /// canonical (layer, module name) order.
    pub fn positions(&self) -> Vec<PositionIndex> {
        let mut p: Vec<PositionIndex> = (0..self.n_layers)
            .flat_map(|l| {
                self.target_modules
                    .iter()
                    .map(move |&m| PositionIndex::new(m, l))
            })
            .collect();
        p.sort();
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Arc<Tensor>,
    pub q_proj: Arc<Tensor>,
    pub k_proj: Arc<Tensor>,
    pub v_proj: Arc<Tensor>,
    pub o_proj: Arc<Tensor>,
    pub ffn_norm: Arc<Tensor>,
    pub ff_up: Arc<Tensor>,
    pub ff_down: Arc<Tensor>,
}

impl LayerWeights {
    pub fn module(&self, m: ModuleName) -> &Arc<Tensor> {
        match m {
            ModuleName::QProj => &self.q_proj,
            ModuleName::KProj => &self.k_proj,
            ModuleName::VProj => &self.v_proj,
            ModuleName::OProj => &self.o_proj,
            ModuleName::FfUp => &self.ff_up,
            ModuleName::FfDown => &self.ff_down,
        }
    }

    fn module_mut(&mut self, m: ModuleName) -> &mut Arc<Tensor> {
        match m {
            ModuleName::QProj => &mut self.q_proj,
            ModuleName::KProj => &mut self.k_proj,
            ModuleName::VProj => &mut self.v_proj,
            ModuleName::OProj => &mut self.o_proj,
            ModuleName::FfUp => &mut self.ff_up,
            ModuleName::FfDown => &mut self.ff_down,
        }
    }

    fn arrays(&self) -> [&Arc<Tensor>; 8] {
        [
            &self.attn_norm,
            &self.q_proj,
            &self.k_proj,
            &self.v_proj,
            &self.o_proj,
            &self.ffn_norm,
            &self.ff_up,
            &self.ff_down,
        ]
    }
}

const LAYER_ARRAYS: [&str; 8] = [
    "attn_norm", "q_proj", "k_proj", "v_proj", "o_proj", "ffn_norm", "ff_up", "ff_down",
];

/// Frozen weights `Ψ` together with the tokenizer they were trained with.
/// Immutable once built; `checksum` is a CRC32 over every array.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    config: LMConfig,
    vocab: Vocab,
    tok_emb: Arc<Tensor>,
    pos_emb: Arc<Tensor>,
    layers: Vec<LayerWeights>,
    final_norm: Arc<Tensor>,
    head: Arc<Tensor>,
    checksum: u32,
}

/// Graph handles for one binding of [`BaseWeights`].
#[derive(Debug, Clone)]
pub struct BoundBase {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<[Var; 8]>,
    final_norm: Var,
    head: Var,
}

impl BoundBase {
    /// Every bound array, in declaration order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v.push(self.final_norm);
        v.push(self.head);
        v
    }
}

/// Adapter factors already placed on a graph, with their common scale.
#[derive(Debug, Clone, Default)]
pub struct AdapterVars {
    pub factors: BTreeMap<PositionIndex, (Var, Var)>,
    pub scale: f64,
}

impl AdapterVars {
    /// Places an adapter set on `g` as constants.
    pub fn constants(g: &mut Graph, set: &AdapterSet) -> Self {
        let factors = set
            .entries()
            .iter()
            .map(|(p, f)| (*p, (g.constant(f.a.clone()), g.constant(f.b.clone()))))
            .collect();
        Self {
            factors,
            scale: set.alpha() / set.rank() as f64,
        }
    }
}

/// One supervised pair, already tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl SftExample {
    pub fn from_text(vocab: &Vocab, input: &str, target: &str) -> Self {
        Self {
            input: vocab.encode(input),
            target: vocab.encode(target),
        }
    }
}

/// Which next-token predictions count towards a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpan {
    /// The target tokens and the closing EOS.
    Target,
    /// Every position of the sequence.
    All,
}

/// Teacher-forced sequence: model input tokens, the first row that carries
/// a loss, and the targets of rows `first..`.
struct Sequence {
    tokens: Vec<usize>,
    first: usize,
    targets: Vec<Option<usize>>,
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl BaseWeights {
    /// Random initialization with a fixed seed.
    pub fn init(config: LMConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the tokenizer's {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |shape: &[usize], std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| n.sample(&mut rng))
        };
        let w_std = 1.0 / (d as f64).sqrt();
        let resid_std = w_std / (2.0 * config.n_layers as f64).sqrt();
        let mut arrays = vec![
            normal(&[config.vocab_size, d], 0.1),
            normal(&[config.max_seq, d], 0.02),
        ];
        for _ in 0..config.n_layers {
            arrays.push(Tensor::from_fn(&[d], |_| 1.0));
            arrays.push(normal(&[d, d], w_std));
            arrays.push(normal(&[d, d], w_std));
            arrays.push(normal(&[d, d], w_std));
            arrays.push(normal(&[d, d], resid_std));
            arrays.push(Tensor::from_fn(&[d], |_| 1.0));
            arrays.push(normal(&[config.d_ff, d], w_std));
            arrays.push(normal(&[d, config.d_ff], resid_std / 2f64.sqrt()));
        }
        arrays.push(Tensor::from_fn(&[d], |_| 1.0));
        arrays.push(normal(&[config.vocab_size, d], w_std));
        Self::from_arrays(config, vocab, arrays)
    }

    /// Array names in declaration order.
    pub fn array_names(config: &LMConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..config.n_layers {
            names.extend(LAYER_ARRAYS.iter().map(|n| format!("layers.{l}.{n}")));
        }
        names.push("final_norm".into());
        names.push("head".into());
        names
    }

    fn array_shapes(config: &LMConfig) -> Vec<Vec<usize>> {
        let (d, f) = (config.d_model, config.d_ff);
        let mut shapes = vec![vec![config.vocab_size, d], vec![config.max_seq, d]];
        for _ in 0..config.n_layers {
            shapes.extend([
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![f, d],
                vec![d, f],
            ]);
        }
        shapes.push(vec![d]);
        shapes.push(vec![config.vocab_size, d]);
        shapes
    }

    /// Builds weights from arrays in declaration order.
    pub fn from_arrays(config: LMConfig, vocab: Vocab, arrays: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::array_shapes(&config);
        let names = Self::array_names(&config);
        if arrays.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} weight arrays, got {}",
                shapes.len(),
                arrays.len()
            )));
        }
        for ((t, s), n) in arrays.iter().zip(&shapes).zip(&names) {
            if t.shape() != s.as_slice() {
                return Err(Error::Config(format!(
                    "array {n} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("array {n} has non-finite entries")));
            }
        }
        let mut crc = crc32fast::Hasher::new();
        for t in &arrays {
            for x in t.data() {
                crc.update(&x.to_le_bytes());
            }
        }
        let checksum = crc.finalize();
        let mut it = arrays.into_iter().map(Arc::new);
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                q_proj: next(),
                k_proj: next(),
                v_proj: next(),
                o_proj: next(),
                ffn_norm: next(),
                ff_up: next(),
                ff_down: next(),
            })
            .collect();
        let final_norm = next();
        let head = next();
        Ok(Self {
            config,
            vocab,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
            checksum,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    /// Every array in declaration order.
    pub fn arrays(&self) -> Vec<&Arc<Tensor>> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend(l.arrays());
        }
        v.push(&self.final_norm);
        v.push(&self.head);
        v
    }

    /// Copy with every adapter folded into its frozen weight.
    pub fn merged(&self, adapters: &AdapterSet) -> Result<BaseWeights> {
        adapters.validate_for(&self.config)?;
        let mut layers = self.layers.clone();
        for (p, f) in adapters.entries() {
            let slot = layers[p.layer].module_mut(p.module);
            *slot = Arc::new(crate::lora::merge(slot, f)?);
        }
        let mut out = self.clone();
        out.layers = layers;
        let arrays = out.arrays().into_iter().map(|a| (**a).clone()).collect();
        Self::from_arrays(self.config.clone(), self.vocab.clone(), arrays)
    }

    /// Places the weights on `g`, trainable only when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBase {
        let mut put = |t: &Arc<Tensor>| {
            if trainable {
                g.param(Arc::clone(t))
            } else {
                g.constant(Arc::clone(t))
            }
        };
        let tok_emb = put(&self.tok_emb);
        let pos_emb = put(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let a = l.arrays();
                [
                    put(a[0]),
                    put(a[1]),
                    put(a[2]),
                    put(a[3]),
                    put(a[4]),
                    put(a[5]),
                    put(a[6]),
                    put(a[7]),
                ]
            })
            .collect();
        let final_norm = put(&self.final_norm);
        let head = put(&self.head);
        BoundBase {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token id {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// Logits for rows `from_row..tokens.len()` of a causal forward pass.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundBase,
        tokens: &[usize],
        adapters: Option<&AdapterVars>,
        from_row: usize,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        if from_row >= t {
            return Err(Error::Invalid(format!("row {from_row} outside a sequence of {t}")));
        }
        let d = self.config.d_model;
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.embedding(bound.tok_emb, tokens)?;
        let pos = g.embedding(bound.pos_emb, &positions)?;
        let mut h = g.add(tok, pos)?;
        for (l, w) in bound.layers.iter().enumerate() {
            let [attn_norm, q_w, k_w, v_w, o_w, ffn_norm, up_w, down_w] = *w;
            let lin = |g: &mut Graph, x: Var, w: Var, m: ModuleName| -> Result<Var> {
                let y = g.matmul_t(x, w)?;
                let slot = adapters.and_then(|a| {
                    a.factors
                        .get(&PositionIndex::new(m, l))
                        .map(|&(fa, fb)| (fa, fb, a.scale))
                });
                let Some((fa, fb, s)) = slot else {
                    return Ok(y);
                };
                let ax = g.matmul_t(x, fa)?;
                let bax = g.matmul_t(ax, fb)?;
                let delta = g.scale(bax, s)?;
                Ok(g.add(y, delta)?)
            };
            let a = g.rms_norm(h, attn_norm, NORM_EPS)?;
            let q = lin(g, a, q_w, ModuleName::QProj)?;
            let k = lin(g, a, k_w, ModuleName::KProj)?;
            let v = lin(g, a, v_w, ModuleName::VProj)?;
            let att = g.causal_attention(q, k, v, self.config.n_heads)?;
            let o = lin(g, att, o_w, ModuleName::OProj)?;
            h = g.add(h, o)?;
            let f = g.rms_norm(h, ffn_norm, NORM_EPS)?;
            let up = lin(g, f, up_w, ModuleName::FfUp)?;
            let act = g.gelu(up)?;
            let down = lin(g, act, down_w, ModuleName::FfDown)?;
            h = g.add(h, down)?;
        }
        let rows = if from_row == 0 {
            h
        } else {
            g.segment(h, from_row * d, &[t - from_row, d])?
        };
        let normed = g.rms_norm(rows, bound.final_norm, NORM_EPS)?;
        Ok(g.matmul_t(normed, bound.head)?)
    }

    fn checked_adapters<'a>(&self, adapters: Option<&'a AdapterSet>) -> Result<Option<&'a AdapterSet>> {
        if let Some(a) = adapters {
            a.validate_for(&self.config)?;
        }
        Ok(adapters)
    }

    /// Full `[len, vocab]` logits.
    pub fn forward(&self, tokens: &[usize], adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let adapters = self.checked_adapters(adapters)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let av = adapters.map(|a| AdapterVars::constants(&mut g, a));
        let out = self.forward_graph(&mut g, &bound, tokens, av.as_ref(), 0)?;
        Ok(g.value(out).clone())
    }

    fn sequence(&self, ex: &SftExample, span: LossSpan) -> Result<Sequence> {
        if ex.target.is_empty() {
            return Err(Error::Invalid("example has no target tokens".into()));
        }
        let max = self.config.max_seq;
        if ex.target.len() + 2 > max {
            return Err(Error::TooLong {
                len: ex.target.len() + 2,
                max,
            });
        }
        let keep = ex.input.len().min(max - 2 - ex.target.len());
        let input = &ex.input[ex.input.len() - keep..];
        let mut full = Vec::with_capacity(keep + ex.target.len() + 3);
        full.push(BOS);
        full.extend_from_slice(input);
        full.push(SEP);
        full.extend_from_slice(&ex.target);
        full.push(EOS);
        let first = match span {
            LossSpan::Target => 1 + keep,
            LossSpan::All => 0,
        };
        let targets = full[first + 1..].iter().map(|&t| Some(t)).collect();
        full.pop();
        Ok(Sequence {
            tokens: full,
            first,
            targets,
        })
    }

    /// Mean cross-entropy of one example, recorded on `g`.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        bound: &BoundBase,
        ex: &SftExample,
        adapters: Option<&AdapterVars>,
        span: LossSpan,
    ) -> Result<Var> {
        let seq = self.sequence(ex, span)?;
        let logits = self.forward_graph(g, bound, &seq.tokens, adapters, seq.first)?;
        Ok(g.cross_entropy(logits, &seq.targets)?)
    }

    /// Mean over examples of the per-example target-span cross-entropy.
    pub fn sft_loss(&self, batch: &[SftExample], adapters: Option<&AdapterSet>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("batch with zero target tokens".into()));
        }
        let adapters = self.checked_adapters(adapters)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let av = adapters.map(|a| AdapterVars::constants(&mut g, a));
        let losses = batch
            .iter()
            .map(|ex| self.example_loss(&mut g, &bound, ex, av.as_ref(), LossSpan::Target))
            .collect::<Result<Vec<_>>>()?;
        let mean = g.mean_scalars(&losses)?;
        Ok(g.value(mean).item())
    }

    /// `[BOS] input [SEP]`, dropping the oldest input tokens so that
    /// `max_new` tokens still fit.
    pub fn prompt(&self, input: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let room = self
            .config
            .max_seq
            .checked_sub(max_new + 2)
            .ok_or(Error::TooLong {
                len: max_new + 2,
                max: self.config.max_seq,
            })?;
        let keep = input.len().min(room);
        let mut p = Vec::with_capacity(keep + 2);
        p.push(BOS);
        p.extend_from_slice(&input[input.len() - keep..]);
        p.push(SEP);
        Ok(p)
    }

    /// Greedy decoding: argmax (lowest id on ties) until EOS or `max_new`
    /// tokens. The EOS itself is not returned.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        adapters: Option<&AdapterSet>,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.config.max_seq {
            return Err(Error::TooLong {
                len: prompt.len() + max_new,
                max: self.config.max_seq,
            });
        }
        let adapters = self.checked_adapters(adapters)?;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let av = adapters.map(|a| AdapterVars::constants(&mut g, a));
            let logits = self.forward_graph(&mut g, &bound, &tokens, av.as_ref(), tokens.len() - 1)?;
            let next = argmax_lowest(g.value(logits).data());
            if next == EOS {
                break;
            }
            tokens.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Decodes a greedy answer to `input` as text.
    pub fn answer(&self, input: &str, adapters: Option<&AdapterSet>, max_new: usize) -> Result<String> {
        let prompt = self.prompt(&self.vocab.encode(input), max_new)?;
        let ids = self.generate_greedy(&prompt, adapters, max_new)?;
        Ok(self.vocab.decode(&ids).trim().to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(MAGIC);
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq] {
            w.usize(v);
        }
        w.usize(c.target_modules.len());
        for m in &c.target_modules {
            w.str(m.as_str());
        }
        w.usize(self.vocab.pieces().len());
        for p in self.vocab.pieces() {
            w.str(p);
        }
        let names = Self::array_names(c);
        w.usize(names.len());
        for (n, t) in names.iter().zip(self.arrays()) {
            w.tensor(n, t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, "base checkpoint")?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let n_mod = r.usize()?;
        let target_modules = (0..n_mod)
            .map(|_| r.str()?.parse())
            .collect::<Result<Vec<ModuleName>>>()?;
        let config = LMConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_ff: dims[3],
            vocab_size: dims[4],
            max_seq: dims[5],
            target_modules,
        };
        config.validate()?;
        let n_pieces = r.usize()?;
        let pieces = (0..n_pieces).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_pieces(pieces)?;
        let names = Self::array_names(&config);
        if r.usize()? != names.len() {
            return Err(r.error("array count does not match the configuration"));
        }
        let arrays = names.iter().map(|n| r.tensor(n)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_arrays(config, vocab, arrays)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            seed: 0,
            grad_clip: 1.0,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Next-token training of every base weight over whole sequences; returns
/// the trained weights and the per-step losses.
pub fn pretrain(
    init: BaseWeights,
    examples: &[SftExample],
    config: &PretrainConfig,
) -> Result<(BaseWeights, Vec<f64>)> {
    if examples.is_empty() || config.batch == 0 {
        return Err(Error::Invalid("pretraining needs examples and a positive batch".into()));
    }
    let model_config = init.config.clone();
    let vocab = init.vocab.clone();
    let mut params: Vec<Tensor> = init.arrays().into_iter().map(|a| (**a).clone()).collect();
    drop(init);
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let mut opt = AdamW::new(config.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let weights = BaseWeights::from_arrays(model_config.clone(), vocab.clone(), params)?;
        let mut g = Graph::new();
        let bound = weights.bind(&mut g, true);
        let parts = (0..config.batch)
            .map(|_| {
                let ex = &examples[rng.random_range(0..examples.len())];
                weights.example_loss(&mut g, &bound, ex, None, LossSpan::All)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = g.mean_scalars(&parts)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                user: "pretraining".into(),
            });
        }
        losses.push(value);
        let mut grads = g.backward(loss)?;
        let mut gs: Vec<Tensor> = bound
            .vars()
            .into_iter()
            .map(|v| grads.take(v).expect("trainable leaf"))
            .collect();
        drop(g);
        clip_global_norm(&mut gs, config.grad_clip);
        params = weights
            .arrays()
            .into_iter()
            .map(|a| (**a).clone())
            .collect();
        drop(weights);
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        let grefs: Vec<&Tensor> = gs.iter().collect();
        opt.step(&mut refs, &grefs);
    }
    let weights = BaseWeights::from_arrays(model_config, vocab, params)?;
    Ok((weights, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraFactors;

    fn tiny() -> BaseWeights {
        let vocab = Vocab::build(["a b c d e f g h"], 300).unwrap();
        let config = LMConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: vocab.len(),
            max_seq: 32,
            target_modules: vec![ModuleName::QProj, ModuleName::VProj],
        };
        BaseWeights::init(config, vocab, 11).unwrap()
    }

    fn random_adapters(base: &BaseWeights, seed: u64) -> AdapterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = base
            .config()
            .positions()
            .into_iter()
            .map(|p| {
                let (d_in, d_out) = p.module.dims(base.config());
                let a = Tensor::from_fn(&[4, d_in], |_| rng.random_range(-0.5..0.5));
                let b = Tensor::from_fn(&[d_out, 4], |_| rng.random_range(-0.5..0.5));
                (p, LoraFactors::new(a, b, 8.0).unwrap())
            })
            .collect();
        AdapterSet::new(entries, base.checksum()).unwrap()
    }

    #[test]
    fn positions_cover_targets_times_layers() {
        let c = LMConfig::toy(400);
        assert_eq!(c.positions().len(), 8);
        assert_eq!(c.positions()[1], PositionIndex::new(ModuleName::VProj, 0));
    }

    #[test]
    fn config_validation() {
        let mut c = LMConfig::toy(400);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!("bogus".parse::<ModuleName>().is_err());
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(tiny().forward(&[], None), Err(Error::EmptyInput)));
    }

    #[test]
    fn zero_b_adapters_are_bitwise_identity() {
        let base = tiny();
        let zeros = AdapterSet::zeros(base.config(), 4, 8.0, base.checksum()).unwrap();
        let toks = [1, 262, 263, 3, 264];
        assert_eq!(base.forward(&toks, None).unwrap(), base.forward(&toks, Some(&zeros)).unwrap());
    }

    #[test]
    fn merged_matches_unmerged() {
        let base = tiny();
        let set = random_adapters(&base, 5);
        let toks = [1, 265, 266, 267, 3, 268];
        let a = base.forward(&toks, Some(&set)).unwrap();
        let b = base.merged(&set).unwrap().forward(&toks, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        assert!(a.max_abs_diff(&base.forward(&toks, None).unwrap()) > 1e-6);
    }

    #[test]
    fn causal_rows_ignore_the_future() {
        let base = tiny();
        let a = base.forward(&[1, 265, 266, 267], None).unwrap();
        let b = base.forward(&[1, 265, 262, 263], None).unwrap();
        for c in 0..a.cols() {
            assert_eq!(a.row(1)[c], b.row(1)[c]);
        }
    }

    #[test]
    fn unknown_position_is_rejected() {
        let base = tiny();
        let mut entries = random_adapters(&base, 1).entries().clone();
        let f = entries.values().next().unwrap().clone();
        entries.insert(PositionIndex::new(ModuleName::KProj, 0), f);
        let set = AdapterSet::new(entries, base.checksum()).unwrap();
        assert!(matches!(
            base.forward(&[1, 2], Some(&set)),
            Err(Error::UnknownPosition(_))
        ));
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let base = tiny();
        let p = base.prompt(&[265, 266], 5).unwrap();
        let a = base.generate_greedy(&p, None, 5).unwrap();
        assert_eq!(a, base.generate_greedy(&p, None, 5).unwrap());
        assert!(a.len() <= 5);
        assert!(base.generate_greedy(&p, None, 0).unwrap().is_empty());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let base = tiny();
        let bytes = base.to_bytes();
        let back = BaseWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, base);
        assert!(BaseWeights::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn input_is_left_truncated() {
        let base = tiny();
        let ex = SftExample {
            input: vec![265; 100],
            target: vec![266, 267],
        };
        let seq = base.sequence(&ex, LossSpan::Target).unwrap();
        assert_eq!(seq.tokens.len(), 32);
        assert_eq!(seq.targets, vec![Some(266), Some(267), Some(EOS)]);
    }
}
