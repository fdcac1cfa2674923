//! Analysis sweeps: how held-out accuracy moves with the number of training
//! clusters, the number of training users, and the retrieval depth.

use std::collections::BTreeSet;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::base_lm::BaseWeights;
use crate::corpus::{ProfileStyle, SynthConfig, TaskKind};
use crate::error::{Error, Result};
use crate::experiments::{
    evaluate, reference_population, select_users, synth_task, train_p2p, Ablation, EvalSettings, Method, P2pConfig,
};
use crate::trainer::TaskPopulation;

/// Side of the grid the diversity sweeps draw cells from.
pub const SWEEP_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Clusters,
    Users,
    RetrievalK,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Clusters => "clusters",
            SweepAxis::Users => "users",
            SweepAxis::RetrievalK => "retrieval_k",
        }
    }

    pub fn default_grid(self) -> Vec<usize> {
        match self {
            SweepAxis::Clusters => vec![2, 4, 8],
            SweepAxis::Users => vec![50, 100, 200],
            SweepAxis::RetrievalK => vec![0, 2, 8],
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clusters" => Ok(SweepAxis::Clusters),
            "users" => Ok(SweepAxis::Users),
            "retrieval_k" => Ok(SweepAxis::RetrievalK),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected clusters, users or retrieval_k)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub p2p: P2pConfig,
    pub seed: u64,
    pub history_len: usize,
    /// Training users on the clusters axis.
    pub user_budget: usize,
    /// Training clusters on the users axis.
    pub fixed_clusters: usize,
    pub test_users_per_cell: usize,
    /// Unseen test users per cluster on the retrieval axis.
    pub holdout_per_cluster: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            p2p: P2pConfig::default(),
            seed: 0,
            history_len: 8,
            user_budget: 100,
            fixed_clusters: 2,
            test_users_per_cell: 4,
            holdout_per_cluster: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub x: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub n_train_users: usize,
    pub n_examples: usize,
}

/// Training cells in the order clusters are added: the main diagonal of the
/// grid, then the diagonal above it. Every row and column is covered once
/// four clusters are in.
pub fn diversity_cells(n: usize) -> Result<Vec<(usize, usize)>> {
    let all: Vec<(usize, usize)> = (0..SWEEP_SIDE)
        .map(|i| (i, i))
        .chain((0..SWEEP_SIDE).map(|i| (i, (i + 1) % SWEEP_SIDE)))
        .collect();
    if n == 0 || n > all.len() {
        return Err(Error::Config(format!("cluster count must lie in 1..={}", all.len())));
    }
    Ok(all[..n].to_vec())
}

/// The cells never used for training: the OOD test population.
pub fn ood_cells() -> Vec<(usize, usize)> {
    let train = diversity_cells(2 * SWEEP_SIDE).expect("full list");
    (0..SWEEP_SIDE)
        .flat_map(|a| (0..SWEEP_SIDE).map(move |b| (a, b)))
        .filter(|c| !train.contains(c))
        .collect()
}

fn traits_population(cells: Vec<(usize, usize)>, per_cell: usize, history: usize, seed: u64) -> Result<TaskPopulation> {
    let cfg = SynthConfig::new(cells.len(), per_cell, history, TaskKind::Classification, seed)
        .with_style(ProfileStyle::Traits)
        .with_cells(cells);
    Ok(synth_task(&cfg)?.0)
}

/// `n_users` training users spread as evenly as possible over `n_clusters`
/// diversity cells.
pub fn diversity_train_set(n_clusters: usize, n_users: usize, config: &SweepConfig) -> Result<TaskPopulation> {
    let cells = diversity_cells(n_clusters)?;
    let per = n_users.div_ceil(n_clusters);
    let mut pop = traits_population(cells, per, config.history_len, config.seed)?;
    // Drop the surplus round-robin from the back of each cluster.
    let mut keep = vec![true; pop.users.len()];
    let mut surplus = per * n_clusters - n_users;
    let mut c = n_clusters;
    while surplus > 0 {
        c = if c == 0 { n_clusters - 1 } else { c - 1 };
        let slot = (0..per).rev().map(|j| c * per + j).find(|&i| keep[i]);
        if let Some(i) = slot {
            keep[i] = false;
            surplus -= 1;
        }
    }
    let mut it = keep.iter();
    pop.users.retain(|_| *it.next().expect("aligned"));
    Ok(pop)
}

pub fn ood_test_set(config: &SweepConfig) -> Result<TaskPopulation> {
    traits_population(ood_cells(), config.test_users_per_cell, config.history_len, config.seed ^ 0x00d_7e57)
}

/// Holds out the first `per_cluster` users of every cluster; returns
/// `(test, train)`.
pub fn unseen_user_split(
    task: TaskPopulation,
    clusters: &[usize],
    per_cluster: usize,
) -> (Vec<TaskPopulation>, Vec<TaskPopulation>) {
    let mut taken = std::collections::BTreeMap::new();
    let mut ids = BTreeSet::new();
    for (u, &c) in task.users.iter().zip(clusters) {
        let n = taken.entry(c).or_insert(0usize);
        if *n < per_cluster {
            ids.insert(u.user_id.clone());
            *n += 1;
        }
    }
    select_users(&[task], &ids)
}

fn point(axis: SweepAxis, x: usize, method: &str, report: &crate::metrics::MetricReport, n_train: usize) -> SweepPoint {
    SweepPoint {
        axis,
        x,
        method: method.to_string(),
        metric: "accuracy".into(),
        value: report.primary(),
        n_train_users: n_train,
        n_examples: report.n_examples,
    }
}

/// Retrains and evaluates at every grid value.
pub fn sweep(base: &BaseWeights, axis: SweepAxis, grid: &[usize], config: &SweepConfig) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let none = Ablation::None;
    let mut out = Vec::new();
    match axis {
        SweepAxis::Clusters | SweepAxis::Users => {
            let test = [ood_test_set(config)?];
            for &x in grid {
                let (clusters, users) = match axis {
                    SweepAxis::Clusters => (x, config.user_budget),
                    _ => (config.fixed_clusters, x),
                };
                let train = [diversity_train_set(clusters, users, config)?];
                let cfg = config.p2p.clone().seeded(config.seed);
                let (hyper, encoder, _) = train_p2p(base, &train, &cfg)?;
                let method = Method::P2p {
                    hyper: &hyper,
                    encoder: &encoder,
                    ablation: &none,
                };
                let r = evaluate(base, &test, method, &EvalSettings::from_train(&cfg.train))?;
                info!("{} = {x}: OOD accuracy {:.3}", axis.as_str(), r.primary());
                out.push(point(axis, x, "p2p", &r, train[0].users.len()));
            }
        }
        SweepAxis::RetrievalK => {
            let (task, clusters) = synth_task(&reference_population(config.seed, ProfileStyle::None))?;
            let (test, train) = unseen_user_split(task, &clusters, config.holdout_per_cluster);
            let n_train = train.iter().map(|t| t.users.len()).sum();
            for &k in grid {
                let mut cfg = config.p2p.clone().seeded(config.seed);
                cfg.train.k = k;
                let settings = EvalSettings::from_train(&cfg.train);
                let (hyper, encoder, _) = train_p2p(base, &train, &cfg)?;
                let method = Method::P2p {
                    hyper: &hyper,
                    encoder: &encoder,
                    ablation: &none,
                };
                let p = evaluate(base, &test, method, &settings)?;
                let r = evaluate(base, &test, Method::Rag, &settings)?;
                info!("k = {k}: p2p {:.3}, rag {:.3}", p.primary(), r.primary());
                out.push(point(axis, k, "p2p", &p, n_train));
                out.push(point(axis, k, "rag", &r, n_train));
            }
        }
    }
    Ok(out)
}

/// `axis,x,method,metric,value,n_train_users,n_examples` rows.
pub fn to_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("axis,x,method,metric,value,n_train_users,n_examples\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.axis.as_str(),
            p.x,
            p.method,
            p.metric,
            p.value,
            p.n_train_users,
            p.n_examples
        ));
    }
    s
}

/// `max − min` of the values reported for `method`.
pub fn range_of(points: &[SweepPoint], method: &str) -> f64 {
    let v: Vec<f64> = points.iter().filter(|p| p.method == method).map(|p| p.value).collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}
