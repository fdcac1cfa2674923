//! Pipelines shared by the command line and the test suites: building the
//! frozen base model, training the hypernetwork, and scoring every method
//! on held-out interactions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_lm::{BaseWeights, LMConfig, ModuleName, PretrainConfig, SftExample};
use crate::baselines::{
    full_history_input, oppu_train, pag_input, rag_input, BaselineKind, Budget, LoraTrainConfig,
};
use crate::corpus::{synth_population, ProfileStyle, SynthConfig, TaskKind, TaskSpec, UserRecord, Vocab, GRID_PARTS};
use crate::embedder::{HashedTfidf, ProfileEncoder, DEFAULT_D_EMB};
use crate::error::{Error, Result};
use crate::hypernet::{HyperConfig, HyperNet};
use crate::lora::AdapterSet;
use crate::metrics::{score, MetricReport, Scores, UserScores};
use crate::profile::{bm25_rank, item_text, join_blocks, ProfileConfig, ProfileView, MAX_PROFILE_CHARS};
use crate::trainer::{train, ProfileCache, ProfileMode, TaskPopulation, TrainConfig, TrainReport};

/// Shape of the base model; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub target_modules: Vec<ModuleName>,
    pub vocab_cap: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let toy = LMConfig::toy(0);
        Self {
            n_layers: toy.n_layers,
            d_model: toy.d_model,
            n_heads: toy.n_heads,
            d_ff: toy.d_ff,
            max_seq: toy.max_seq,
            target_modules: toy.target_modules,
            vocab_cap: 600,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> LMConfig {
        LMConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq: self.max_seq,
            target_modules: self.target_modules.clone(),
        }
    }
}

/// How the frozen base model is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub shape: ModelShape,
    pub users_per_cell: usize,
    pub history_len: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape::default(),
            users_per_cell: 4,
            history_len: 8,
            seed: 0,
            pretrain: PretrainConfig {
                steps: 800,
                ..PretrainConfig::default()
            },
        }
    }
}

/// A generic population covering every grid cell for each task kind; the
/// base model learns the output formats from it, not any particular
/// user's behaviour.
pub fn generic_corpus(kinds: &[TaskKind], config: &BaseConfig) -> Result<Vec<TaskPopulation>> {
    let cells: Vec<(usize, usize)> = (0..GRID_PARTS)
        .flat_map(|a| (0..GRID_PARTS).map(move |b| (a, b)))
        .collect();
    kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let cfg = SynthConfig::new(cells.len(), config.users_per_cell, config.history_len, kind, config.seed ^ 0x5eed_0000 ^ i as u64)
                .with_cells(cells.clone());
            let pop = synth_population(&cfg)?;
            Ok(TaskPopulation {
                spec: pop.task,
                users: pop.users,
            })
        })
        .collect()
}

/// Texts the tokenizer is built from.
pub fn corpus_texts(tasks: &[TaskPopulation]) -> Vec<String> {
    let mut texts = vec![
        "user summary. frequent terms: typical answer: frequent phrases: => ### history ###".to_string(),
    ];
    for t in tasks {
        for u in &t.users {
            if let Some(p) = &u.profile_text {
                texts.push(p.clone());
            }
            for i in &u.history {
                texts.push(i.input.clone());
                texts.push(i.output.clone());
            }
        }
    }
    texts
}

/// Plain and retrieval-augmented examples. Each interaction appears once
/// as-is and once behind `k ∈ {1, 2, 4}` items retrieved from the same
/// user's other interactions, so the base can both answer and copy from
/// context.
pub fn pretraining_examples(tasks: &[TaskPopulation], vocab: &Vocab, max_tokens: usize) -> Vec<SftExample> {
    let mut out = Vec::new();
    let budget = Budget { vocab, max_tokens };
    for t in tasks {
        for u in &t.users {
            for (j, it) in u.history.iter().enumerate() {
                out.push(SftExample::from_text(vocab, &it.input, &it.output));
                let others: Vec<_> = u.history.iter().filter(|o| o.seq_index != it.seq_index).cloned().collect();
                let k = [1, 2, 4][j % 3];
                let mut items: Vec<String> = bm25_rank(&it.input, &others, k).into_iter().map(|(i, _)| item_text(i)).collect();
                let mut text = join_blocks(&items.join("\n"), &it.input);
                while items.len() > 1 && vocab.encode(&text).len() > budget.max_tokens {
                    items.pop();
                    text = join_blocks(&items.join("\n"), &it.input);
                }
                out.push(SftExample::from_text(vocab, &text, &it.output));
            }
        }
    }
    out
}

/// Builds the tokenizer and pretrains the frozen base.
pub fn build_base(kinds: &[TaskKind], config: &BaseConfig) -> Result<(BaseWeights, Vec<f64>)> {
    let corpus = generic_corpus(kinds, config)?;
    let texts = corpus_texts(&corpus);
    let vocab = Vocab::build(texts.iter().map(String::as_str), config.shape.vocab_cap)?;
    let lm = config.shape.config(vocab.len());
    lm.validate()?;
    let examples = pretraining_examples(&corpus, &vocab, lm.max_seq - 24);
    let init = BaseWeights::init(lm, vocab, config.seed)?;
    let mut pc = config.pretrain;
    pc.seed = config.seed;
    crate::base_lm::pretrain(init, &examples, &pc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2pConfig {
    pub d_emb: usize,
    pub embed_seed: u64,
    pub d_mod: usize,
    pub d_dep: usize,
    pub hidden: usize,
    pub rank: usize,
    pub alpha: f64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for P2pConfig {
    fn default() -> Self {
        Self {
            d_emb: DEFAULT_D_EMB,
            embed_seed: 0,
            d_mod: 16,
            d_dep: 16,
            hidden: 256,
            rank: 8,
            alpha: 16.0,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl P2pConfig {
    /// Derives every seed from one.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.embed_seed = seed;
        self.init_seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
        self
    }

    pub fn hyper_config(&self, lm: &LMConfig) -> HyperConfig {
        HyperConfig {
            d_emb: self.d_emb,
            d_mod: self.d_mod,
            d_dep: self.d_dep,
            hidden: self.hidden,
            rank: self.rank,
            alpha: self.alpha,
            lm: lm.clone(),
        }
    }

    pub fn profile_config(&self, kind: TaskKind) -> ProfileConfig {
        ProfileConfig {
            k: self.train.k,
            max_chars: self.train.max_profile_chars,
            kind,
        }
    }
}

/// Frozen encoder with IDF fitted on the training users' per-user profiles.
pub fn fit_encoder(tasks: &[TaskPopulation], config: &P2pConfig) -> Result<HashedTfidf> {
    let mut docs = Vec::new();
    for t in tasks {
        let cache = ProfileCache::new(&t.users, config.profile_config(t.spec.kind), ProfileMode::PerUser);
        for i in 0..t.users.len() {
            if let Ok(p) = cache.profile(i, "") {
                docs.push(p.rendered);
            }
        }
    }
    HashedTfidf::fitted(config.d_emb, config.embed_seed, &docs)
}

/// Fits the encoder, initializes and trains the hypernetwork.
pub fn train_p2p(
    base: &BaseWeights,
    tasks: &[TaskPopulation],
    config: &P2pConfig,
) -> Result<(HyperNet, HashedTfidf, TrainReport)> {
    let encoder = fit_encoder(tasks, config)?;
    let (hyper, report) = train_p2p_with(base, tasks, config, &encoder)?;
    Ok((hyper, encoder, report))
}

/// Trains against a given encoder; `d_emb` follows the encoder.
pub fn train_p2p_with(
    base: &BaseWeights,
    tasks: &[TaskPopulation],
    config: &P2pConfig,
    encoder: &dyn ProfileEncoder,
) -> Result<(HyperNet, TrainReport)> {
    let mut hc = config.hyper_config(base.config());
    hc.d_emb = encoder.dim();
    let mut hyper = HyperNet::init(hc, base.checksum(), config.init_seed)?;
    let report = train(base, encoder, tasks, &mut hyper, &config.train)?;
    Ok((hyper, report))
}

/// Profile perturbations for the ablation study.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// User `i` receives the profile of user `perm[i]`; the permutation
    /// must cover every evaluated user of each task.
    Shuffle(Vec<usize>),
    /// A permutation per task, drawn from this seed.
    ShuffleSeed(u64),
    /// Each example gets the profile of a uniformly drawn other user.
    Random(u64),
    SummaryOnly,
    RetrievedOnly,
    FullHistoryOnly,
}

pub const ABLATION_MODES: [&str; 5] =
    ["shuffle_profile", "random_profile", "summary_only", "retrieved_only", "full_history_only"];

impl Ablation {
    /// The named ablation; `seed` fixes any random re-pairing.
    pub fn from_mode(mode: &str, seed: u64) -> Result<Self> {
        Ok(match mode {
            "shuffle_profile" => Ablation::ShuffleSeed(seed),
            "random_profile" => Ablation::Random(seed),
            "summary_only" => Ablation::SummaryOnly,
            "retrieved_only" => Ablation::RetrievedOnly,
            "full_history_only" => Ablation::FullHistoryOnly,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (expected one of {})",
                    ABLATION_MODES.join(", ")
                )))
            }
        })
    }
}

/// A method to score.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Base,
    Rag,
    Pag,
    FullHistory,
    MtLora(&'a AdapterSet),
    Oppu(&'a LoraTrainConfig),
    P2p {
        hyper: &'a HyperNet,
        encoder: &'a dyn ProfileEncoder,
        ablation: &'a Ablation,
    },
}

impl Method<'_> {
    pub fn kind(&self) -> BaselineKind {
        match self {
            Method::Base => BaselineKind::Base,
            Method::Rag => BaselineKind::Rag,
            Method::Pag => BaselineKind::Pag,
            Method::FullHistory => BaselineKind::FullHistory,
            Method::MtLora(_) => BaselineKind::MtLora,
            Method::Oppu(_) => BaselineKind::Oppu,
            Method::P2p { .. } => BaselineKind::P2p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub max_profile_chars: usize,
    pub profile_mode: ProfileMode,
    pub max_new: usize,
    pub per_user: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: crate::profile::DEFAULT_K,
            max_profile_chars: MAX_PROFILE_CHARS,
            profile_mode: ProfileMode::PerQuery,
            max_new: 16,
            per_user: false,
        }
    }
}

impl EvalSettings {
    pub fn from_train(train: &TrainConfig) -> Self {
        Self {
            k: train.k,
            max_profile_chars: train.max_profile_chars,
            profile_mode: train.profile_mode,
            ..Self::default()
        }
    }
}

fn flattened_history(user: &UserRecord, max_chars: usize) -> String {
    let mut items: Vec<String> = user.profile_history().iter().map(item_text).collect();
    let mut text = items.join("\n");
    while text.chars().count() > max_chars && !items.is_empty() {
        items.remove(0);
        text = items.join("\n");
    }
    text
}

/// The permutation `ShuffleSeed(seed)` applies to `n` users.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// The profile text P2P sees for user `idx` answering `query`.
fn p2p_profile(cache: &ProfileCache, ablation: &Ablation, idx: usize, ex: usize, query: &str) -> Result<String> {
    let users = cache.users();
    Ok(match ablation {
        Ablation::None => cache.profile(idx, query)?.rendered,
        Ablation::SummaryOnly => cache.profile(idx, query)?.view(ProfileView::SummaryOnly),
        Ablation::RetrievedOnly => cache.profile(idx, query)?.view(ProfileView::RetrievedOnly),
        Ablation::FullHistoryOnly => match &users[idx].profile_text {
            Some(p) => p.clone(),
            None => flattened_history(&users[idx], cache.config().max_chars),
        },
        Ablation::Shuffle(perm) => {
            if perm.len() != users.len() {
                return Err(Error::Invalid(format!(
                    "permutation of {} users applied to {}",
                    perm.len(),
                    users.len()
                )));
            }
            cache.profile(perm[idx], query)?.rendered
        }
        Ablation::ShuffleSeed(seed) => cache.profile(shuffled(users.len(), *seed)[idx], query)?.rendered,
        Ablation::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((idx as u64) << 32) ^ ex as u64);
            let other = if users.len() < 2 {
                idx
            } else {
                let o = rng.random_range(0..users.len() - 1);
                if o >= idx {
                    o + 1
                } else {
                    o
                }
            };
            cache.profile(other, query)?.rendered
        }
    })
}

/// Predictions for every held-out interaction of one user.
fn predict_user(
    base: &BaseWeights,
    method: Method,
    cache: &ProfileCache,
    idx: usize,
    settings: &EvalSettings,
) -> Result<Vec<String>> {
    let user = &cache.users()[idx];
    let budget = Budget {
        vocab: base.vocab(),
        max_tokens: base.config().max_seq.saturating_sub(settings.max_new + 2),
    };
    let oppu = match method {
        Method::Oppu(cfg) => Some(oppu_train(base, user, cfg)?),
        _ => None,
    };
    let mut preds = Vec::new();
    for (ex, t) in user.targets().iter().enumerate() {
        let x = t.input.as_str();
        let pred = match method {
            Method::Base => base.answer(x, None, settings.max_new)?,
            Method::Rag => base.answer(&rag_input(x, user, settings.k, budget), None, settings.max_new)?,
            Method::Pag => base.answer(&pag_input(x, user, cache.config(), budget)?, None, settings.max_new)?,
            Method::FullHistory => base.answer(&full_history_input(x, user, budget), None, settings.max_new)?,
            Method::MtLora(set) => base.answer(x, Some(set), settings.max_new)?,
            Method::Oppu(_) => base.answer(x, oppu.as_ref(), settings.max_new)?,
            Method::P2p {
                hyper,
                encoder,
                ablation,
            } => {
                let text = p2p_profile(cache, ablation, idx, ex, x)?;
                let e = encoder.encode(&text)?;
                let set = hyper.generate(&e.vector)?;
                base.answer(x, Some(&set), settings.max_new)?
            }
        };
        preds.push(pred);
    }
    Ok(preds)
}

/// Scores `method` on the held-out suffix of every user. Users are
/// processed on the rayon pool; results are assembled in input order.
pub fn evaluate(base: &BaseWeights, tasks: &[TaskPopulation], method: Method, settings: &EvalSettings) -> Result<MetricReport> {
    let mut task_scores = BTreeMap::new();
    let mut per_user = Vec::new();
    for t in tasks {
        let users: Vec<UserRecord> = t
            .users
            .iter()
            .filter(|u| !u.targets().is_empty())
            .cloned()
            .collect();
        if users.is_empty() {
            continue;
        }
        let pc = ProfileConfig {
            k: settings.k,
            max_chars: settings.max_profile_chars,
            kind: t.spec.kind,
        };
        let cache = ProfileCache::new(&users, pc, settings.profile_mode);
        let preds: Vec<Vec<String>> = (0..users.len())
            .into_par_iter()
            .map(|i| predict_user(base, method, &cache, i, settings))
            .collect::<Result<_>>()?;
        let labels = t.spec.label_set.as_deref();
        let mut all_p = Vec::new();
        let mut all_g = Vec::new();
        for (u, p) in users.iter().zip(&preds) {
            let golds: Vec<&str> = u.targets().iter().map(|i| i.output.as_str()).collect();
            if settings.per_user {
                per_user.push(UserScores {
                    user_id: u.user_id.clone(),
                    task_id: t.spec.task_id.clone(),
                    history_len: u.history.len(),
                    scores: score(t.spec.kind, labels, p, &golds)?,
                });
            }
            all_p.extend(p.iter().cloned());
            all_g.extend(golds);
        }
        let s: Scores = score(t.spec.kind, labels, &all_p, &all_g)?;
        task_scores.insert(t.spec.task_id.clone(), s);
    }
    if task_scores.is_empty() {
        return Err(Error::Invalid("nothing to evaluate: no user has held-out interactions".into()));
    }
    Ok(MetricReport::new(method.kind().as_str(), task_scores, per_user))
}

/// Splits `tasks` by user id into the users listed in `ids` and the rest.
pub fn select_users(tasks: &[TaskPopulation], ids: &std::collections::BTreeSet<String>) -> (Vec<TaskPopulation>, Vec<TaskPopulation>) {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for t in tasks {
        let (a, b): (Vec<UserRecord>, Vec<UserRecord>) = t.users.iter().cloned().partition(|u| ids.contains(&u.user_id));
        inside.push(TaskPopulation {
            spec: t.spec.clone(),
            users: a,
        });
        outside.push(TaskPopulation {
            spec: t.spec.clone(),
            users: b,
        });
    }
    (inside, outside)
}

/// Single-task population of a synthetic config.
pub fn synth_task(config: &SynthConfig) -> Result<(TaskPopulation, Vec<usize>)> {
    let pop = synth_population(config)?;
    Ok((
        TaskPopulation {
            spec: pop.task,
            users: pop.users,
        },
        pop.clusters,
    ))
}

/// Criterion-4 style population: 4 clusters of 25 users, history 8.
pub fn reference_population(seed: u64, style: ProfileStyle) -> SynthConfig {
    SynthConfig::new(4, 25, 8, TaskKind::Classification, seed).with_style(style)
}

/// Task spec lookup by id.
pub fn spec_of<'a>(tasks: &'a [TaskPopulation], task_id: &str) -> Option<&'a TaskSpec> {
    tasks.iter().map(|t| &t.spec).find(|s| s.task_id == task_id)
}
