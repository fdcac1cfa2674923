//! End-to-end optimization of the hypernetwork: profile, embed, generate,
//! then next-token loss on a held-out interaction of the same user.

use std::time::Instant;

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::{BaseWeights, LossSpan, SftExample};
use crate::corpus::{TaskSpec, UserRecord};
use crate::embedder::ProfileEncoder;
use crate::error::{Error, Result};
use crate::hypernet::HyperNet;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::profile::{build_profile_with, summarize, ProfileConfig, ProfileText, Summary, DEFAULT_K, MAX_PROFILE_CHARS};
use crate::tensor::{Graph, Tensor, TensorError};

/// Learning rate used at full scale, kept in the config echo.
pub const REFERENCE_LR: f64 = 2e-5;

/// Whether retrieval is conditioned on the query being answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    PerQuery,
    PerUser,
}

impl std::str::FromStr for ProfileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_query" => Ok(ProfileMode::PerQuery),
            "per_user" => Ok(ProfileMode::PerUser),
            _ => Err(Error::Config(format!("unknown profile mode {s:?} (per_query or per_user)"))),
        }
    }
}

/// One task's users.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPopulation {
    pub spec: TaskSpec,
    pub users: Vec<UserRecord>,
}

/// Per-user summaries computed once, and profile construction on top.
#[derive(Debug, Clone)]
pub struct ProfileCache<'a> {
    users: &'a [UserRecord],
    summaries: Vec<Summary>,
    config: ProfileConfig,
    mode: ProfileMode,
}

impl<'a> ProfileCache<'a> {
    pub fn new(users: &'a [UserRecord], config: ProfileConfig, mode: ProfileMode) -> Self {
        let summaries = users
            .iter()
            .map(|u| summarize(u.profile_history(), config.kind))
            .collect();
        Self {
            users,
            summaries,
            config,
            mode,
        }
    }

    pub fn users(&self) -> &'a [UserRecord] {
        self.users
    }

    pub fn config(&self) -> &ProfileConfig {
        &self.config
    }

    /// Profile of user `idx` for answering `query`.
    pub fn profile(&self, idx: usize, query: &str) -> Result<ProfileText> {
        let q = match self.mode {
            ProfileMode::PerQuery => query,
            ProfileMode::PerUser => "",
        };
        build_profile_with(q, &self.users[idx], &self.summaries[idx], &self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_users: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub k: usize,
    pub max_profile_chars: usize,
    pub profile_mode: ProfileMode,
    pub log_every: usize,
    pub reference_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_users: 32,
            seed: 0,
            grad_clip: 1.0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            k: DEFAULT_K,
            max_profile_chars: MAX_PROFILE_CHARS,
            profile_mode: ProfileMode::PerQuery,
            log_every: 10,
            reference_lr: REFERENCE_LR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_users == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_users and log_every must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) || !self.optimizer.lr.is_finite() || self.optimizer.lr < 0.0 {
            return Err(Error::Config("grad_clip must be positive and lr finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean batch loss)` every `log_every` steps and at the last step.
    pub losses: Vec<(usize, f64)>,
    pub wall_time_s: f64,
    pub theta_checksum: String,
    pub base_checksum: String,
    pub embedder: String,
    pub n_users: usize,
    pub config: TrainConfig,
}

/// One sampled training example: user `user` of task `task`, answering
/// `history[target]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub task: usize,
    pub user: usize,
    pub target: usize,
}

/// Task sampling weights `∝ √(number of users)`.
pub fn task_weights(sizes: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = sizes.iter().map(|&n| (n as f64).sqrt()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Draws a task with probability `∝ √size`, then up to `batch` distinct
/// users of that task, each with one target from its held-out suffix.
pub fn sample_batch(tasks: &[TaskPopulation], batch: usize, rng: &mut impl Rng) -> Result<Vec<BatchItem>> {
    let sizes: Vec<usize> = tasks.iter().map(|t| t.users.len()).collect();
    if sizes.iter().all(|&n| n == 0) || batch == 0 {
        return Err(Error::EmptyInput);
    }
    let weights = task_weights(&sizes);
    let mut x: f64 = rng.random();
    let mut task = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        task = i;
        if x < *w {
            break;
        }
        x -= w;
    }
    let users = &tasks[task].users;
    let picks = sample(rng, users.len(), batch.min(users.len())).into_vec();
    let mut items = Vec::with_capacity(picks.len());
    for u in picks {
        let user = &users[u];
        let start = user.split_point();
        let n_targets = user.history.len() - start;
        if n_targets == 0 {
            return Err(Error::InvalidRecord {
                user: user.user_id.clone(),
                msg: "no held-out interactions to train on".into(),
            });
        }
        items.push(BatchItem {
            task,
            user: u,
            target: start + rng.random_range(0..n_targets),
        });
    }
    Ok(items)
}

/// Users that can contribute a training example: at least one target and
/// a non-empty profile source.
pub fn trainable_users(users: &[UserRecord]) -> Vec<UserRecord> {
    users
        .iter()
        .filter(|u| {
            let ok = !u.targets().is_empty() && (u.profile_text.is_some() || !u.profile_history().is_empty());
            if !ok {
                warn!("skipping user {}: nothing to profile or nothing to predict", u.user_id);
            }
            ok
        })
        .cloned()
        .collect()
}

/// Mean target loss of a batch of (embedding, example) pairs and its
/// gradient with respect to every hypernetwork array. This is the exact
/// objective [`train`] descends.
pub fn batch_loss(base: &BaseWeights, hyper: &HyperNet, items: &[(&[f64], &SftExample)]) -> Result<(f64, Vec<Tensor>)> {
    loss_with_grads(base, hyper, items).map_err(|(e, _)| e)
}

/// Failures carry the index of the item that caused them.
fn loss_with_grads(
    base: &BaseWeights,
    hyper: &HyperNet,
    items: &[(&[f64], &SftExample)],
) -> std::result::Result<(f64, Vec<Tensor>), (Error, usize)> {
    if items.is_empty() {
        return Err((Error::EmptyInput, 0));
    }
    let mut g = Graph::new();
    let bb = base.bind(&mut g, false);
    let bh = hyper.bind(&mut g, true);
    let embeddings: Vec<&[f64]> = items.iter().map(|(e, _)| *e).collect();
    let adapters = hyper.adapters_graph(&mut g, &bh, &embeddings).map_err(|e| (e, 0))?;
    let mut parts = Vec::with_capacity(items.len());
    for (i, ((_, ex), av)) in items.iter().zip(&adapters).enumerate() {
        let l = base
            .example_loss(&mut g, &bb, ex, Some(av), LossSpan::Target)
            .map_err(|e| (e, i))?;
        if !g.value(l).item().is_finite() {
            return Err((Error::NonFiniteLoss { step: 0, user: String::new() }, i));
        }
        parts.push(l);
    }
    let loss = g.mean_scalars(&parts).map_err(|e| (e.into(), 0))?;
    let mean = g.value(loss).item();
    let mut grads = g.backward(loss).map_err(|e| (e.into(), 0))?;
    let sum = bh
        .vars()
        .iter()
        .zip(hyper.arrays())
        .map(|(&v, a)| grads.take(v).unwrap_or_else(|| Tensor::zeros(a.shape())))
        .collect();
    Ok((mean, sum))
}

/// Optimizes `hyper` in place; `base` and `encoder` are only read. Each
/// step records one graph holding the whole batch.
pub fn train(
    base: &BaseWeights,
    encoder: &dyn ProfileEncoder,
    tasks: &[TaskPopulation],
    hyper: &mut HyperNet,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if hyper.base_checksum() != base.checksum() {
        return Err(Error::BaseChecksum {
            file: hyper.base_checksum(),
            base: base.checksum(),
        });
    }
    if hyper.config().d_emb != encoder.dim() {
        return Err(Error::Dimension {
            what: "embedding width",
            expected: hyper.config().d_emb,
            found: encoder.dim(),
        });
    }
    let start = Instant::now();
    let tasks: Vec<TaskPopulation> = tasks
        .iter()
        .map(|t| TaskPopulation {
            spec: t.spec.clone(),
            users: trainable_users(&t.users),
        })
        .collect();
    let n_users: usize = tasks.iter().map(|t| t.users.len()).sum();
    if n_users == 0 {
        return Err(Error::EmptyInput);
    }
    let caches: Vec<ProfileCache> = tasks
        .iter()
        .map(|t| {
            let pc = ProfileConfig {
                k: config.k,
                max_chars: config.max_profile_chars,
                kind: t.spec.kind,
            };
            ProfileCache::new(&t.users, pc, config.profile_mode)
        })
        .collect();
    let sizes: Vec<usize> = hyper.arrays().iter().map(|a| a.len()).collect();
    let mut opt = AdamW::new(config.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::new();
    let vocab = base.vocab().clone();

    for step in 0..config.steps {
        let batch = sample_batch(&tasks, config.batch_users, &mut rng)?;
        let prepared = batch
            .iter()
            .map(|it| {
                let user = &tasks[it.task].users[it.user];
                let target = &user.history[it.target];
                let profile = caches[it.task].profile(it.user, &target.input)?;
                let emb = encoder.encode(&profile.rendered)?;
                let ex = SftExample::from_text(&vocab, &target.input, &target.output);
                Ok((emb.vector, ex))
            })
            .collect::<Result<Vec<_>>>()?;
        let offender = |i: usize| {
            let it = &batch[i];
            tasks[it.task].users[it.user].user_id.clone()
        };
        let items: Vec<(&[f64], &SftExample)> = prepared.iter().map(|(e, x)| (e.as_slice(), x)).collect();
        let (mean, mut sum) = loss_with_grads(base, hyper, &items).map_err(|(e, i)| match e {
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteLoss { .. } => {
                Error::NonFiniteLoss { step, user: offender(i) }
            }
            other => other,
        })?;
        if step % config.log_every == 0 || step + 1 == config.steps {
            losses.push((step, mean));
            if step % (config.log_every * 50) == 0 {
                info!("step {step}: loss {mean:.4}");
            }
        }
        clip_global_norm(&mut sum, config.grad_clip);
        let grefs: Vec<&Tensor> = sum.iter().collect();
        opt.step(&mut hyper.arrays_mut(), &grefs);
    }
    Ok(TrainReport {
        losses,
        wall_time_s: start.elapsed().as_secs_f64(),
        theta_checksum: format!("{:08x}", hyper.checksum()),
        base_checksum: format!("{:08x}", base.checksum()),
        embedder: encoder.backend_id(),
        n_users,
        config: config.clone(),
    })
}
