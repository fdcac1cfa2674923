//! Comparators: prompt-augmentation baselines that only rewrite the input,
//! and directly trained LoRA adapters (one shared, or one per user).

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::{AdapterVars, BaseWeights, LossSpan, SftExample};
use crate::corpus::{UserRecord, Vocab};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraFactors, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::profile::{bm25_rank, build_profile_with, item_text, join_blocks, summarize, ProfileConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Base,
    Rag,
    Pag,
    FullHistory,
    MtLora,
    Oppu,
    P2p,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::Base,
        BaselineKind::Rag,
        BaselineKind::Pag,
        BaselineKind::FullHistory,
        BaselineKind::MtLora,
        BaselineKind::Oppu,
        BaselineKind::P2p,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Base => "base",
            BaselineKind::Rag => "rag",
            BaselineKind::Pag => "pag",
            BaselineKind::FullHistory => "full_history",
            BaselineKind::MtLora => "mt_lora",
            BaselineKind::Oppu => "oppu",
            BaselineKind::P2p => "p2p",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown baseline {s:?} (expected base, rag, pag, full_history, mt_lora, oppu or p2p)"
                ))
            })
    }
}

/// Token budget for an augmented input.
#[derive(Debug, Clone, Copy)]
pub struct Budget<'a> {
    pub vocab: &'a Vocab,
    pub max_tokens: usize,
}

impl Budget<'_> {
    fn fits(&self, text: &str) -> bool {
        self.vocab.encode(text).len() <= self.max_tokens
    }
}

/// Context lines before the query; the query alone when there is no
/// context.
fn with_context(lines: &[String], query: &str) -> String {
    if lines.is_empty() {
        query.to_string()
    } else {
        join_blocks(&lines.join("\n"), query)
    }
}

/// `[R(x, H, k) ‖ x]`: the best `k` earlier interactions, then the query.
/// Low-scored items are dropped until the text fits the budget; the query
/// is always kept whole.
pub fn rag_input(query: &str, user: &UserRecord, k: usize, budget: Budget) -> String {
    let mut items: Vec<String> = bm25_rank(query, user.profile_history(), k)
        .into_iter()
        .map(|(i, _)| item_text(i))
        .collect();
    let mut text = with_context(&items, query);
    while !items.is_empty() && !budget.fits(&text) {
        items.pop();
        text = with_context(&items, query);
    }
    text
}

/// `[s ‖ R(x, H, k) ‖ x]`: the user's profile for this query followed by
/// the query. A stored profile text takes the place of summary and items.
pub fn pag_input(query: &str, user: &UserRecord, config: &ProfileConfig, budget: Budget) -> Result<String> {
    let summary = summarize(user.profile_history(), config.kind);
    let mut cfg = *config;
    loop {
        let p = build_profile_with(query, user, &summary, &cfg)?;
        let text = join_blocks(&p.rendered, query);
        if cfg.k == 0 || p.retrieved.is_empty() || p.passthrough.is_some() || budget.fits(&text) {
            return Ok(text);
        }
        cfg.k = p.retrieved.len() - 1;
    }
}

/// `[Flatten(H) ‖ x]`, oldest first, dropping the oldest items on overflow.
pub fn full_history_input(query: &str, user: &UserRecord, budget: Budget) -> String {
    let mut items: Vec<String> = user.profile_history().iter().map(item_text).collect();
    let mut text = with_context(&items, query);
    while !items.is_empty() && !budget.fits(&text) {
        items.remove(0);
        text = with_context(&items, query);
    }
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub rank: usize,
    pub alpha: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl LoraTrainConfig {
    /// One adapter per user: three epochs over the user's own history.
    pub fn oppu() -> Self {
        Self {
            epochs: 3,
            batch: 1,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            grad_clip: 1.0,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }

    /// One adapter shared by every user.
    pub fn mt_lora() -> Self {
        Self {
            epochs: 2,
            batch: 16,
            ..Self::oppu()
        }
    }
}

/// Fresh `A ~ N(0, 0.02²)`, `B = 0` factors at every position.
pub fn init_adapters(base: &BaseWeights, rank: usize, alpha: f64, seed: u64) -> Result<AdapterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = base.config();
    let entries = cfg
        .positions()
        .into_iter()
        .map(|p| {
            let (d_in, d_out) = p.module.dims(cfg);
            Ok((p, LoraFactors::standard_init(rank, d_in, d_out, alpha, &mut rng)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    AdapterSet::new(entries, base.checksum())
}

/// Supervised training of adapter factors on `examples`; returns the
/// trained set and the per-step losses.
pub fn train_adapters(
    base: &BaseWeights,
    init: AdapterSet,
    examples: &[SftExample],
    config: &LoraTrainConfig,
) -> Result<(AdapterSet, Vec<f64>)> {
    init.validate_for(base.config())?;
    if config.epochs == 0 {
        return Ok((init, Vec::new()));
    }
    if examples.is_empty() || config.batch == 0 {
        return Err(Error::EmptyInput);
    }
    let positions: Vec<_> = init.entries().keys().copied().collect();
    let mut params: Vec<Tensor> = init
        .entries()
        .values()
        .flat_map(|f| [f.a.clone(), f.b.clone()])
        .collect();
    let alpha = init.alpha();
    let scale = alpha / init.rank() as f64;
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let mut opt = AdamW::new(config.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let mut g = Graph::new();
            let bb = base.bind(&mut g, false);
            let vars: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
            let av = AdapterVars {
                factors: positions
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (*p, (vars[2 * i], vars[2 * i + 1])))
                    .collect(),
                scale,
            };
            let parts = chunk
                .iter()
                .map(|&i| base.example_loss(&mut g, &bb, &examples[i], Some(&av), LossSpan::Target))
                .collect::<Result<Vec<_>>>()?;
            let loss = g.mean_scalars(&parts)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: losses.len(),
                    user: "adapter training".into(),
                });
            }
            losses.push(value);
            let mut grads = g.backward(loss)?;
            let mut gs: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).expect("trainable leaf"))
                .collect();
            clip_global_norm(&mut gs, config.grad_clip);
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            let grefs: Vec<&Tensor> = gs.iter().collect();
            opt.step(&mut refs, &grefs);
        }
    }
    let entries = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let f = LoraFactors::new(params[2 * i].clone(), params[2 * i + 1].clone(), alpha)?;
            Ok((*p, f))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((AdapterSet::new(entries, base.checksum())?, losses))
}

/// One shared adapter trained on every interaction of the training users,
/// without any profile.
pub fn mtlora_train(base: &BaseWeights, users: &[UserRecord], config: &LoraTrainConfig) -> Result<AdapterSet> {
    let examples: Vec<SftExample> = users
        .iter()
        .flat_map(|u| u.history.iter())
        .map(|i| SftExample::from_text(base.vocab(), &i.input, &i.output))
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let init = init_adapters(base, config.rank, config.alpha, config.seed)?;
    Ok(train_adapters(base, init, &examples, config)?.0)
}

/// A user's own adapter, trained on the interactions before the held-out
/// suffix only.
pub fn oppu_train(base: &BaseWeights, user: &UserRecord, config: &LoraTrainConfig) -> Result<AdapterSet> {
    let history = user.profile_history();
    if history.is_empty() {
        return Err(Error::ColdUser(user.user_id.clone()));
    }
    let examples: Vec<SftExample> = history
        .iter()
        .map(|i| SftExample::from_text(base.vocab(), &i.input, &i.output))
        .collect();
    let init = init_adapters(base, config.rank, config.alpha, config.seed)?;
    Ok(train_adapters(base, init, &examples, config)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_lm::{LMConfig, ModuleName};
    use crate::corpus::{Interaction, TaskKind};
    use crate::profile::SEPARATOR;

    fn user(n: usize) -> UserRecord {
        UserRecord {
            user_id: "u1".into(),
            task_id: "t".into(),
            profile_text: None,
            history: (0..n)
                .map(|i| Interaction {
                    input: format!("item {i} about topic{}", i % 3),
                    output: format!("label{}", i % 2),
                    seq_index: i,
                })
                .collect(),
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["item about topic0 topic1 topic2 label0 label1 => ###"], 400).unwrap()
    }

    fn tiny_base() -> BaseWeights {
        let v = Vocab::build(["alpha beta gamma delta"], 300).unwrap();
        let config = LMConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            vocab_size: v.len(),
            max_seq: 24,
            target_modules: vec![ModuleName::QProj, ModuleName::VProj],
        };
        BaseWeights::init(config, v, 4).unwrap()
    }

    #[test]
    fn rag_with_k_zero_is_the_query() {
        let v = vocab();
        let b = Budget { vocab: &v, max_tokens: 200 };
        assert_eq!(rag_input("item about topic1", &user(8), 0, b), "item about topic1");
    }

    #[test]
    fn rag_truncation_keeps_the_query() {
        let v = vocab();
        let q = "item 99 about topic1";
        let full = rag_input(q, &user(8), 3, Budget { vocab: &v, max_tokens: 1000 });
        let cut = rag_input(q, &user(8), 3, Budget { vocab: &v, max_tokens: 30 });
        assert!(full.ends_with(q) && cut.ends_with(q));
        assert!(cut.len() < full.len());
        let tiny = rag_input(q, &user(8), 3, Budget { vocab: &v, max_tokens: 1 });
        assert_eq!(tiny, q);
    }

    #[test]
    fn pag_is_profile_then_query() {
        let v = vocab();
        let u = user(8);
        let cfg = ProfileConfig::new(TaskKind::Classification);
        let b = Budget { vocab: &v, max_tokens: 10_000 };
        let text = pag_input("topic2", &u, &cfg, b).unwrap();
        let p = crate::profile::build_profile("topic2", &u, &cfg).unwrap();
        assert_eq!(text, join_blocks(&p.rendered, "topic2"));
        let k0 = pag_input("topic2", &u, &ProfileConfig { k: 0, ..cfg }, b).unwrap();
        assert_eq!(k0, format!("{}\n{SEPARATOR}\ntopic2", p.summary));
    }

    #[test]
    fn full_history_drops_oldest_first() {
        let v = vocab();
        let u = user(8);
        let all = full_history_input("q", &u, Budget { vocab: &v, max_tokens: 10_000 });
        assert!(all.starts_with("item 0 about"));
        let cut = full_history_input("q", &u, Budget { vocab: &v, max_tokens: 25 });
        assert!(!cut.contains("item 0 about"));
        assert!(cut.contains("item 5 about"));
        assert!(v.encode(&cut).len() <= 25);
    }

    #[test]
    fn zero_epochs_leave_b_at_zero() {
        let base = tiny_base();
        let cfg = LoraTrainConfig {
            epochs: 0,
            ..LoraTrainConfig::oppu()
        };
        let set = oppu_train(&base, &user(4), &cfg).unwrap();
        assert!(set.entries().values().all(|f| f.b.data().iter().all(|&x| x == 0.0)));
        assert!(oppu_train(&base, &user(1), &cfg).is_err());
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in BaselineKind::ALL {
            assert_eq!(b.as_str().parse::<BaselineKind>().unwrap(), b);
        }
        assert!("nope".parse::<BaselineKind>().is_err());
    }
}
