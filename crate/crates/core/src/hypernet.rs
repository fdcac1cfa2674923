//! The hypernetwork `H_θ`: one shared MLP that maps a user embedding and a
//! position embedding to the flattened LoRA factors of that position.
//!
//! For position `(m, l)` the input is `φ = [e ‖ E_mod[m] ‖ E_dep[l]]` and
//! the output vector is cut into `A` (`r×d_in`, row-major) followed by `B`
//! (`d_out×r`, row-major). Modules whose factor shapes differ get separate
//! output heads.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::base_lm::{AdapterVars, LMConfig, ModuleName};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraFactors, PositionIndex, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::tensor::{Graph, Tensor, Var};

const MAGIC: &[u8; 6] = b"P2PHN1";
const POS_EMB_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub d_emb: usize,
    pub d_mod: usize,
    pub d_dep: usize,
    pub hidden: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Shape of the model the adapters are generated for.
    pub lm: LMConfig,
}

impl HyperConfig {
    pub fn new(d_emb: usize, lm: LMConfig) -> Self {
        Self {
            d_emb,
            d_mod: 16,
            d_dep: 16,
            hidden: 256,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            lm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d_emb + self.d_mod + self.d_dep
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if [self.d_emb, self.d_mod, self.d_dep, self.hidden, self.rank].contains(&0) {
            return Err(Error::Config("hypernetwork dimensions must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        for &m in &self.lm.target_modules {
            let (d_in, d_out) = m.dims(&self.lm);
            if self.rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(d_in, d_out) for {}",
                    self.rank,
                    m.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Distinct `(d_in, d_out)` shapes in order of first appearance, and the
    /// head used by each target module.
    fn heads(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        let mut shapes: Vec<(usize, usize)> = Vec::new();
        let mut of_module = Vec::new();
        for &m in &self.lm.target_modules {
            let s = m.dims(&self.lm);
            let idx = match shapes.iter().position(|&x| x == s) {
                Some(i) => i,
                None => {
                    shapes.push(s);
                    shapes.len() - 1
                }
            };
            of_module.push(idx);
        }
        (shapes, of_module)
    }

    fn module_index(&self, m: ModuleName) -> Option<usize> {
        self.lm.target_modules.iter().position(|&x| x == m)
    }

    fn array_specs(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut v = vec![
            ("e_mod".to_string(), vec![self.lm.target_modules.len(), self.d_mod]),
            ("e_dep".to_string(), vec![self.lm.n_layers, self.d_dep]),
            ("w1".to_string(), vec![h, self.input_dim()]),
            ("b1".to_string(), vec![h]),
            ("w2".to_string(), vec![h, h]),
            ("b2".to_string(), vec![h]),
        ];
        for (i, (d_in, d_out)) in self.heads().0.into_iter().enumerate() {
            let out = self.rank * (d_in + d_out);
            v.push((format!("head{i}_w"), vec![out, h]));
            v.push((format!("head{i}_b"), vec![out]));
        }
        v
    }
}

/// Splits a generated vector into `A` (`r×d_in`) and `B` (`d_out×r`).
pub fn unflatten(v: &[f64], d_in: usize, d_out: usize, r: usize) -> Result<(Tensor, Tensor)> {
    let n_a = r * d_in;
    if v.len() != n_a + d_out * r {
        return Err(Error::Dimension {
            what: "generated adapter vector",
            expected: n_a + d_out * r,
            found: v.len(),
        });
    }
    Ok((
        Tensor::new(&[r, d_in], v[..n_a].to_vec())?,
        Tensor::new(&[d_out, r], v[n_a..].to_vec())?,
    ))
}

/// Inverse of [`unflatten`].
pub fn flatten(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut v = a.data().to_vec();
    v.extend_from_slice(b.data());
    v
}

/// Trainable parameters `θ`, `E_mod` and `E_dep`, bound to one base model.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    config: HyperConfig,
    base_checksum: u32,
    arrays: Vec<Arc<Tensor>>,
}

/// Graph handles for one binding of a [`HyperNet`].
#[derive(Debug, Clone)]
pub struct BoundHyper {
    vars: Vec<Var>,
}

impl BoundHyper {
    /// Handles in the order of [`HyperNet::arrays`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl HyperNet {
    /// Fresh parameters. The final layer has zero weights, a zero bias on
    /// the `B` slice and a small random bias on the `A` slice, so every
    /// generated `B` is zero and the adapted model equals the base.
    pub fn init(config: HyperConfig, base_checksum: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| n.sample(&mut rng))
        };
        let (shapes, _) = config.heads();
        let mut arrays = Vec::new();
        for (name, shape) in config.array_specs() {
            let t = match name.as_str() {
                "e_mod" | "e_dep" => normal(&shape, POS_EMB_STD),
                "w1" | "w2" => normal(&shape, 1.0 / (shape[1] as f64).sqrt()),
                n if n.ends_with("_b") && n.starts_with("head") => {
                    let idx: usize = n[4..n.len() - 2].parse().expect("head index");
                    let d_in = shapes[idx].0;
                    let n_a = config.rank * d_in;
                    let a = normal(&[n_a], 1.0 / (d_in as f64).sqrt());
                    let mut data = a.into_data();
                    data.resize(shape[0], 0.0);
                    Tensor::new(&shape, data)?
                }
                _ => Tensor::zeros(&shape),
            };
            arrays.push(Arc::new(t));
        }
        Ok(Self {
            config,
            base_checksum,
            arrays,
        })
    }

    pub fn config(&self) -> &HyperConfig {
        &self.config
    }

    pub fn base_checksum(&self) -> u32 {
        self.base_checksum
    }

    pub fn array_names(&self) -> Vec<String> {
        self.config.array_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn arrays(&self) -> &[Arc<Tensor>] {
        &self.arrays
    }

    /// Mutable access for the optimizer; copies an array only while a
    /// graph still shares it.
    pub fn arrays_mut(&mut self) -> Vec<&mut Tensor> {
        self.arrays.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn n_params(&self) -> usize {
        self.arrays.iter().map(|t| t.len()).sum()
    }

    /// Every parameter in array order.
    pub fn flat(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::Dimension {
                what: "hypernetwork parameters",
                expected: self.n_params(),
                found: v.len(),
            });
        }
        let mut off = 0;
        for t in self.arrays_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// CRC32 over every parameter.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in &self.arrays {
            for x in t.data() {
                h.update(&x.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHyper {
        let vars = self
            .arrays
            .iter()
            .map(|t| {
                if trainable {
                    g.param(Arc::clone(t))
                } else {
                    g.constant(Arc::clone(t))
                }
            })
            .collect();
        BoundHyper { vars }
    }

    /// `φ` for one position, for inspection and tests.
    pub fn position_input(&self, e: &[f64], m: ModuleName, l: usize) -> Result<Vec<f64>> {
        self.check_embedding(e)?;
        let mi = self
            .config
            .module_index(m)
            .ok_or_else(|| Error::UnknownPosition(PositionIndex::new(m, l).to_string()))?;
        if l >= self.config.lm.n_layers {
            return Err(Error::UnknownPosition(PositionIndex::new(m, l).to_string()));
        }
        let mut phi = e.to_vec();
        phi.extend_from_slice(self.arrays[0].row(mi));
        phi.extend_from_slice(self.arrays[1].row(l));
        Ok(phi)
    }

    fn check_embedding(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.config.d_emb {
            return Err(Error::Dimension {
                what: "user embedding",
                expected: self.config.d_emb,
                found: e.len(),
            });
        }
        if !e.iter().all(|x| x.is_finite()) {
            return Err(Error::Invalid("non-finite user embedding".into()));
        }
        Ok(())
    }

    /// Records adapter generation for several users on `g`; one
    /// [`AdapterVars`] per embedding.
    pub fn adapters_graph(&self, g: &mut Graph, bound: &BoundHyper, embeddings: &[&[f64]]) -> Result<Vec<AdapterVars>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        for e in embeddings {
            self.check_embedding(e)?;
        }
        let c = &self.config;
        let positions = c.lm.positions();
        let (shapes, head_of) = c.heads();
        let per_user = positions.len();
        let rows = embeddings.len() * per_user;
        let mut e_rows = Vec::with_capacity(rows * c.d_emb);
        let mut mod_ids = Vec::with_capacity(rows);
        let mut dep_ids = Vec::with_capacity(rows);
        for e in embeddings {
            for p in &positions {
                e_rows.extend_from_slice(e);
                mod_ids.push(c.module_index(p.module).expect("target module"));
                dep_ids.push(p.layer);
            }
        }
        let v = &bound.vars;
        let e_var = g.constant(Tensor::new(&[rows, c.d_emb], e_rows)?);
        let em = g.embedding(v[0], &mod_ids)?;
        let ed = g.embedding(v[1], &dep_ids)?;
        let phi = g.concat(&[e_var, em, ed])?;
        let z1 = g.matmul_t(phi, v[2])?;
        let z1 = g.add(z1, v[3])?;
        let h1 = g.gelu(z1)?;
        let z2 = g.matmul_t(h1, v[4])?;
        let z2 = g.add(z2, v[5])?;
        let h2 = g.gelu(z2)?;

        // Rows of each head's output, and where every position's row lives.
        let mut slot = vec![(0usize, 0usize); rows];
        let mut outs = Vec::with_capacity(shapes.len());
        for hi in 0..shapes.len() {
            let ids: Vec<usize> = (0..rows).filter(|&r| head_of[mod_ids[r]] == hi).collect();
            for (k, &r) in ids.iter().enumerate() {
                slot[r] = (hi, k);
            }
            let input = if shapes.len() == 1 { h2 } else { g.embedding(h2, &ids)? };
            let o = g.matmul_t(input, v[6 + 2 * hi])?;
            outs.push(g.add(o, v[7 + 2 * hi])?);
        }

        let scale = c.alpha / c.rank as f64;
        let mut result = Vec::with_capacity(embeddings.len());
        for u in 0..embeddings.len() {
            let mut factors = BTreeMap::new();
            for (pi, p) in positions.iter().enumerate() {
                let r = u * per_user + pi;
                let (hi, k) = slot[r];
                let (d_in, d_out) = shapes[hi];
                let width = c.rank * (d_in + d_out);
                let a = g.segment(outs[hi], k * width, &[c.rank, d_in])?;
                let b = g.segment(outs[hi], k * width + c.rank * d_in, &[d_out, c.rank])?;
                factors.insert(*p, (a, b));
            }
            result.push(AdapterVars { factors, scale });
        }
        Ok(result)
    }

    /// Adapters for several users in one pass.
    pub fn generate_batch(&self, embeddings: &[&[f64]]) -> Result<Vec<AdapterSet>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let vars = self.adapters_graph(&mut g, &bound, embeddings)?;
        vars.into_iter()
            .map(|av| {
                let entries = av
                    .factors
                    .into_iter()
                    .map(|(p, (a, b))| {
                        let f = LoraFactors::new(g.value(a).clone(), g.value(b).clone(), self.config.alpha)?;
                        Ok((p, f))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                AdapterSet::new(entries, self.base_checksum)
            })
            .collect()
    }

    /// `Δ_u = H_θ(e_u)`.
    pub fn generate(&self, e: &[f64]) -> Result<AdapterSet> {
        Ok(self.generate_batch(&[e])?.pop().expect("one adapter set"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(MAGIC);
        for v in [c.d_emb, c.d_mod, c.d_dep, c.hidden, c.rank] {
            w.usize(v);
        }
        w.f64(c.alpha);
        for v in [c.lm.n_layers, c.lm.d_model, c.lm.n_heads, c.lm.d_ff, c.lm.vocab_size, c.lm.max_seq] {
            w.usize(v);
        }
        w.usize(c.lm.target_modules.len());
        for m in &c.lm.target_modules {
            w.str(m.as_str());
        }
        w.u32(self.base_checksum);
        let names = self.array_names();
        w.usize(names.len());
        for (n, t) in names.iter().zip(&self.arrays) {
            w.tensor(n, t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, "hypernetwork checkpoint")?;
        let mut h = [0usize; 5];
        for x in &mut h {
            *x = r.usize()?;
        }
        let alpha = r.f64()?;
        let mut d = [0usize; 6];
        for x in &mut d {
            *x = r.usize()?;
        }
        let n_mod = r.usize()?;
        let target_modules = (0..n_mod)
            .map(|_| r.str()?.parse())
            .collect::<Result<Vec<ModuleName>>>()?;
        let config = HyperConfig {
            d_emb: h[0],
            d_mod: h[1],
            d_dep: h[2],
            hidden: h[3],
            rank: h[4],
            alpha,
            lm: LMConfig {
                n_layers: d[0],
                d_model: d[1],
                n_heads: d[2],
                d_ff: d[3],
                vocab_size: d[4],
                max_seq: d[5],
                target_modules,
            },
        };
        config.validate()?;
        let base_checksum = r.u32()?;
        let specs = config.array_specs();
        if r.usize()? != specs.len() {
            return Err(r.error("array count does not match the configuration"));
        }
        let mut arrays = Vec::with_capacity(specs.len());
        for (name, shape) in &specs {
            let t = r.tensor(name)?;
            if t.shape() != &shape[..] {
                return Err(r.error(format!("array {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(r.error(format!("array {name} has non-finite values")));
            }
            arrays.push(Arc::new(t));
        }
        r.finish()?;
        Ok(Self {
            config,
            base_checksum,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
