//! Loading populations, splits and trained models from disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;
use p2p_core::base_lm::BaseWeights;
use p2p_core::corpus::{load_jsonl, load_tasks, validate_population, TaskSpec, UserRecord};
use p2p_core::embedder::{ExternalEmbeddings, HashedTfidf, ProfileEncoder};
use p2p_core::hypernet::HyperNet;
use p2p_core::splits::SplitResult;
use p2p_core::trainer::TaskPopulation;

pub const USERS_FILE: &str = "users.jsonl";
pub const TASKS_FILE: &str = "tasks.json";
pub const BASE_FILE: &str = "base.p2plm";
pub const THETA_FILE: &str = "theta.p2phn";
pub const EMBEDDER_FILE: &str = "embedder.json";
pub const EXTERNAL_FILE: &str = "embeddings.txt";

/// Users grouped by task, tasks ordered by id. Specs come from `tasks`,
/// else from a `tasks.json` beside the data, else are inferred.
pub fn load_populations(data: &Path, tasks: Option<&Path>) -> Result<Vec<TaskPopulation>> {
    let users = load_jsonl(data).with_context(|| format!("loading {}", data.display()))?;
    validate_population(&users)?;
    let sibling = data.with_file_name(TASKS_FILE);
    let specs: Vec<TaskSpec> = match tasks {
        Some(p) => load_tasks(p).with_context(|| format!("loading {}", p.display()))?,
        None if sibling.exists() => load_tasks(&sibling)?,
        None => Vec::new(),
    };
    let mut grouped: BTreeMap<String, Vec<UserRecord>> = BTreeMap::new();
    for u in users {
        grouped.entry(u.task_id.clone()).or_default().push(u);
    }
    grouped
        .into_iter()
        .map(|(tid, users)| {
            let spec = match specs.iter().find(|s| s.task_id == tid) {
                Some(s) => s.clone(),
                None => {
                    let s = TaskSpec::infer(&tid, &users);
                    warn!("no description for task {tid}; inferred {}", s.kind.as_str());
                    s
                }
            };
            Ok(TaskPopulation { spec, users })
        })
        .collect()
}

pub fn load_split(path: &Path) -> Result<SplitResult> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Keeps only the users whose id is in `ids`; tasks left empty are dropped.
pub fn restrict(pops: &[TaskPopulation], ids: &[String]) -> Vec<TaskPopulation> {
    let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    pops.iter()
        .map(|t| TaskPopulation {
            spec: t.spec.clone(),
            users: t.users.iter().filter(|u| keep.contains(u.user_id.as_str())).cloned().collect(),
        })
        .filter(|t| !t.users.is_empty())
        .collect()
}

pub fn count_users(pops: &[TaskPopulation]) -> usize {
    pops.iter().map(|t| t.users.len()).sum()
}

/// The encoder a model was trained with.
pub enum Encoder {
    Hashed(HashedTfidf),
    External(ExternalEmbeddings),
}

impl Encoder {
    pub fn as_dyn(&self) -> &dyn ProfileEncoder {
        match self {
            Encoder::Hashed(e) => e,
            Encoder::External(e) => e,
        }
    }
}

pub struct Model {
    pub base: BaseWeights,
    pub hyper: HyperNet,
    pub encoder: Encoder,
}

/// Base weights from `explicit`, else from `dir/base.p2plm`.
pub fn base_path(dir: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| dir.join(BASE_FILE), Path::to_path_buf)
}

pub fn load_base(path: &Path) -> Result<BaseWeights> {
    if !path.exists() {
        bail!("missing base checkpoint {}", path.display());
    }
    BaseWeights::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn load_model(dir: &Path, base: Option<&Path>) -> Result<Model> {
    let base = load_base(&base_path(dir, base))?;
    let theta = dir.join(THETA_FILE);
    if !theta.exists() {
        bail!("missing checkpoint {}", theta.display());
    }
    let hyper = HyperNet::load(&theta).with_context(|| format!("loading {}", theta.display()))?;
    if hyper.base_checksum() != base.checksum() {
        bail!(
            "{} was trained against base {:08x}, not {:08x}",
            theta.display(),
            hyper.base_checksum(),
            base.checksum()
        );
    }
    let external = dir.join(EXTERNAL_FILE);
    let encoder = if external.exists() {
        Encoder::External(ExternalEmbeddings::load(&external)?)
    } else {
        Encoder::Hashed(HashedTfidf::load(&dir.join(EMBEDDER_FILE)).context("loading the embedder")?)
    };
    if encoder.as_dyn().dim() != hyper.config().d_emb {
        bail!(
            "embedder produces {} dims, the hypernetwork expects {}",
            encoder.as_dyn().dim(),
            hyper.config().d_emb
        );
    }
    Ok(Model { base, hyper, encoder })
}
