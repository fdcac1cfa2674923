//! Run settings: defaults, overridden by a `key = value` file, overridden by
//! `--set key=value` flags. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use p2p_core::baselines::LoraTrainConfig;
use p2p_core::bench::BenchConfig;
use p2p_core::corpus::{ProfileStyle, TaskKind};
use p2p_core::experiments::{BaseConfig, EvalSettings, P2pConfig};
use p2p_core::splits::SplitMode;
use p2p_core::sweep::SweepConfig;
use p2p_core::trainer::ProfileMode;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthOptions {
    pub kind: TaskKind,
    pub clusters: usize,
    pub users_per_cluster: usize,
    pub history_len: usize,
    pub style: ProfileStyle,
    pub distractor_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitOptions {
    pub mode: SplitMode,
    /// Test users; `None` means a fifth of the population.
    pub n_test: Option<usize>,
    pub k_min: usize,
    pub k_max: Option<usize>,
    pub permissive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub synth: SynthOptions,
    pub split: SplitOptions,
    pub base: BaseConfig,
    pub p2p: P2pConfig,
    pub eval: EvalSettings,
    pub oppu: LoraTrainConfig,
    pub mt_lora: LoraTrainConfig,
    pub bench: BenchConfig,
    pub bench_users: usize,
    pub sweep: SweepConfig,
}

impl Settings {
    fn defaults(seed: u64) -> Self {
        let p2p = P2pConfig::default().seeded(seed);
        let base = BaseConfig {
            seed,
            ..BaseConfig::default()
        };
        let mut oppu = LoraTrainConfig::oppu();
        oppu.seed = seed;
        let mut mt_lora = LoraTrainConfig::mt_lora();
        mt_lora.seed = seed;
        Self {
            seed,
            synth: SynthOptions {
                kind: TaskKind::Classification,
                clusters: 4,
                users_per_cluster: 25,
                history_len: 8,
                style: ProfileStyle::None,
                distractor_rate: 0.5,
            },
            split: SplitOptions {
                mode: SplitMode::Ood,
                n_test: None,
                k_min: 2,
                k_max: None,
                permissive: false,
            },
            base,
            eval: EvalSettings::from_train(&p2p.train),
            p2p,
            oppu,
            mt_lora,
            bench: BenchConfig::default(),
            bench_users: 50,
            sweep: SweepConfig {
                seed,
                ..SweepConfig::default()
            },
        }
    }

    /// Resolves the seed (`--seed`, then `P2P_SEED`, then the `seed` key)
    /// and applies `pairs` in order.
    pub fn resolve(pairs: &[(String, String)], seed_flag: Option<u64>, env_seed: Option<&str>) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in pairs {
            map.insert(k.clone(), v.clone());
        }
        let seed = match (seed_flag, env_seed) {
            (Some(s), _) => s,
            (None, Some(e)) => e.trim().parse().with_context(|| format!("P2P_SEED={e:?} is not an integer"))?,
            (None, None) => map.get("seed").map(|s| s.parse()).transpose().context("seed")?.unwrap_or(0),
        };
        map.remove("seed");
        let mut s = Settings::defaults(seed);
        let mut t = Taker { map };
        s.apply(&mut t)?;
        if let Some((k, _)) = t.map.into_iter().next() {
            bail!("unknown config key {k:?}");
        }
        s.check()?;
        Ok(s)
    }

    fn apply(&mut self, t: &mut Taker) -> Result<()> {
        let sy = &mut self.synth;
        t.set("kind", &mut sy.kind)?;
        t.set("clusters", &mut sy.clusters)?;
        t.set("users_per_cluster", &mut sy.users_per_cluster)?;
        t.set("history_len", &mut sy.history_len)?;
        t.set("profile_style", &mut sy.style)?;
        t.set("distractor_rate", &mut sy.distractor_rate)?;

        let sp = &mut self.split;
        if let Some(m) = t.take("split_mode") {
            sp.mode = match m.as_str() {
                "ood" => SplitMode::Ood,
                "random" => SplitMode::Random,
                other => bail!("unknown split_mode {other:?} (ood or random)"),
            };
        }
        if let Some(n) = t.parse::<usize>("n_test")? {
            sp.n_test = Some(n);
        }
        t.set("k_min", &mut sp.k_min)?;
        if let Some(k) = t.parse::<usize>("k_max")? {
            sp.k_max = Some(k);
        }
        t.set("permissive", &mut sp.permissive)?;

        let b = &mut self.base;
        t.set("base_steps", &mut b.pretrain.steps)?;
        t.set("base_batch", &mut b.pretrain.batch)?;
        t.set("base_lr", &mut b.pretrain.optimizer.lr)?;
        t.set("base_users_per_cell", &mut b.users_per_cell)?;
        t.set("base_history_len", &mut b.history_len)?;
        t.set("n_layers", &mut b.shape.n_layers)?;
        t.set("d_model", &mut b.shape.d_model)?;
        t.set("n_heads", &mut b.shape.n_heads)?;
        t.set("d_ff", &mut b.shape.d_ff)?;
        t.set("max_seq", &mut b.shape.max_seq)?;
        t.set("vocab_cap", &mut b.shape.vocab_cap)?;
        if let Some(list) = t.take("target_modules") {
            b.shape.target_modules = list
                .split(',')
                .map(|m| m.trim().parse().map_err(|e| anyhow!("{e}")))
                .collect::<Result<_>>()?;
        }

        let p = &mut self.p2p;
        t.set("d_emb", &mut p.d_emb)?;
        t.set("d_mod", &mut p.d_mod)?;
        t.set("d_dep", &mut p.d_dep)?;
        t.set("hidden", &mut p.hidden)?;
        t.set("rank", &mut p.rank)?;
        t.set("alpha", &mut p.alpha)?;
        let tr = &mut p.train;
        t.set("steps", &mut tr.steps)?;
        t.set("batch_users", &mut tr.batch_users)?;
        t.set("lr", &mut tr.optimizer.lr)?;
        t.set("weight_decay", &mut tr.optimizer.weight_decay)?;
        t.set("grad_clip", &mut tr.grad_clip)?;
        t.set("k", &mut tr.k)?;
        t.set("max_profile_chars", &mut tr.max_profile_chars)?;
        t.set("profile_mode", &mut tr.profile_mode)?;
        t.set("log_every", &mut tr.log_every)?;
        self.eval = EvalSettings {
            max_new: self.eval.max_new,
            per_user: self.eval.per_user,
            ..EvalSettings::from_train(tr)
        };
        t.set("max_new", &mut self.eval.max_new)?;

        t.set("oppu_epochs", &mut self.oppu.epochs)?;
        t.set("oppu_lr", &mut self.oppu.optimizer.lr)?;
        t.set("mt_lora_epochs", &mut self.mt_lora.epochs)?;
        t.set("mt_lora_batch", &mut self.mt_lora.batch)?;
        t.set("mt_lora_lr", &mut self.mt_lora.optimizer.lr)?;
        self.oppu.rank = p.rank;
        self.oppu.alpha = p.alpha;
        self.mt_lora.rank = p.rank;
        self.mt_lora.alpha = p.alpha;

        t.set("bench_repeats", &mut self.bench.repeats)?;
        t.set("bench_warmup", &mut self.bench.warmup)?;
        t.set("bench_users", &mut self.bench_users)?;

        let sw = &mut self.sweep;
        t.set("sweep_user_budget", &mut sw.user_budget)?;
        t.set("sweep_fixed_clusters", &mut sw.fixed_clusters)?;
        t.set("sweep_test_users_per_cell", &mut sw.test_users_per_cell)?;
        t.set("sweep_holdout_per_cluster", &mut sw.holdout_per_cluster)?;
        sw.history_len = self.synth.history_len;
        sw.p2p = self.p2p.clone();
        Ok(())
    }

    fn check(&self) -> Result<()> {
        self.p2p.train.validate()?;
        if self.eval.profile_mode == ProfileMode::PerUser && self.p2p.train.k > 0 {
            log::info!("per_user profiles: retrieval ignores the query");
        }
        Ok(())
    }
}

struct Taker {
    map: BTreeMap<String, String>,
}

impl Taker {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key}: {e}")))
            .transpose()
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_set(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
