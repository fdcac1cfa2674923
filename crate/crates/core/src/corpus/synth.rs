//! Synthetic populations with hidden per-cluster behaviour.
//!
//! Every cluster sits on a cell `(a, b)` of a small grid. The two
//! coordinates drive the cluster's rule independently: a classification
//! label is the word pair `PART_A[a] PART_B[b]`, a generation style wraps
//! the output in `STYLE_OPEN[a] … STYLE_CLOSE[b]`, and a rating offset
//! follows the cluster index. Trait profiles describe a cell through a
//! second, unrelated word pair, so a model has to learn the association
//! rather than copy a label out of the profile. Because attributes compose,
//! a cluster held out of training can still be described in terms of
//! attributes seen in other clusters.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Interaction, TaskKind, TaskSpec, UserRecord};
use crate::error::{Error, Result};

/// Number of values each grid coordinate can take.
pub const GRID_PARTS: usize = 5;

const PART_A: [&str; GRID_PARTS] = ["amber", "cobalt", "jade", "crimson", "ivory"];
const PART_B: [&str; GRID_PARTS] = ["north", "south", "east", "west", "center"];
const TRAIT_A: [&str; GRID_PARTS] = ["sunsets", "oceans", "meadows", "volcanoes", "glaciers"];
const TRAIT_B: [&str; GRID_PARTS] = ["mornings", "winters", "springs", "autumns", "nights"];
const STYLE_OPEN: [&str; GRID_PARTS] = ["hey", "well", "so", "oh", "look"];
const STYLE_CLOSE: [&str; GRID_PARTS] = ["indeed", "truly", "friend", "cheers", "thanks"];
const SENTIMENT: [&str; 5] = ["awful", "poor", "fine", "good", "superb"];
const RATING_OFFSET: [i32; 5] = [0, 1, -1, 2, -2];
const PERSONA: [&str; 12] = [
    "quiet", "curious", "busy", "careful", "cheerful", "patient", "bold", "gentle", "clever",
    "steady", "restless", "modest",
];
const NOISE: [&str; 8] = ["really", "often", "very", "also", "maybe", "quite", "still", "just"];
const CONTENT: [&str; 40] = [
    "apple", "river", "window", "pencil", "bridge", "candle", "ladder", "basket", "guitar",
    "mirror", "saddle", "teapot", "lantern", "anchor", "button", "carpet", "dragon", "feather",
    "hammer", "island", "jacket", "kettle", "lemon", "magnet", "needle", "orange", "pillow",
    "rocket", "spoon", "tunnel", "violin", "wallet", "yogurt", "zipper", "bottle", "cactus",
    "helmet", "puzzle", "rabbit", "tomato",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileStyle {
    /// No pre-existing profile; profiles are built from history.
    None,
    /// Profiles verbalize the traits tied to the cluster's grid cell.
    Traits,
    /// Profiles carry cluster-specific persona words unrelated to the rule.
    Opaque,
}

impl std::str::FromStr for ProfileStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ProfileStyle::None),
            "traits" => Ok(ProfileStyle::Traits),
            "opaque" => Ok(ProfileStyle::Opaque),
            other => Err(Error::Invalid(format!(
                "unknown profile style {other:?} (expected none, traits or opaque)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub users_per_cluster: usize,
    pub history_len: usize,
    pub task_kind: TaskKind,
    pub seed: u64,
    pub profile_style: ProfileStyle,
    /// Probability that a classification input mentions a random label word.
    pub distractor_rate: f64,
    /// Explicit grid cells, one per cluster. Defaults to filling the
    /// diagonals of the smallest square grid that holds `n_clusters`.
    pub cells: Option<Vec<(usize, usize)>>,
}

impl SynthConfig {
    pub fn new(
        n_clusters: usize,
        users_per_cluster: usize,
        history_len: usize,
        task_kind: TaskKind,
        seed: u64,
    ) -> Self {
        Self {
            n_clusters,
            users_per_cluster,
            history_len,
            task_kind,
            seed,
            profile_style: ProfileStyle::None,
            distractor_rate: 0.5,
            cells: None,
        }
    }

    pub fn with_style(mut self, style: ProfileStyle) -> Self {
        self.profile_style = style;
        self
    }

    pub fn with_cells(mut self, cells: Vec<(usize, usize)>) -> Self {
        self.n_clusters = cells.len();
        self.cells = Some(cells);
        self
    }
}

/// Default cell layout: diagonals of an `s×s` grid, main diagonal first,
/// so every row and column is used as evenly as possible.
pub fn default_cells(n: usize) -> Vec<(usize, usize)> {
    let side = (1..).find(|s| s * s >= n).unwrap_or(1);
    let mut cells = Vec::with_capacity(side * side);
    for d in 0..side {
        for i in 0..side {
            cells.push((i, (i + d) % side));
        }
    }
    cells.truncate(n);
    cells
}

/// The hidden behaviour of one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRule {
    pub cell: (usize, usize),
    pub kind: TaskKind,
    pub rating_offset: i32,
}

impl ClusterRule {
    pub fn label(&self) -> String {
        format!("{} {}", PART_A[self.cell.0], PART_B[self.cell.1])
    }

    pub fn traits(&self) -> (&'static str, &'static str) {
        (TRAIT_A[self.cell.0], TRAIT_B[self.cell.1])
    }

    fn persona(&self) -> (&'static str, &'static str) {
        let (a, b) = self.cell;
        (PERSONA[(a * 7 + b * 3) % 12], PERSONA[(a * 5 + b * 11 + 1) % 12])
    }

    /// Output this cluster's users give for `input`.
    pub fn apply(&self, input: &str) -> String {
        match self.kind {
            TaskKind::Classification => self.label(),
            TaskKind::Generation => {
                let words: Vec<&str> = input.split_whitespace().skip(1).take(2).collect();
                format!(
                    "{} {} {}",
                    STYLE_OPEN[self.cell.0],
                    words.join(" "),
                    STYLE_CLOSE[self.cell.1]
                )
            }
            TaskKind::Rating => {
                let base = input
                    .split_whitespace()
                    .find_map(|w| SENTIMENT.iter().position(|s| *s == w))
                    .map_or(3, |p| p as i32 + 1);
                (base + self.rating_offset).clamp(1, 5).to_string()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPopulation {
    pub config: SynthConfig,
    pub users: Vec<UserRecord>,
    /// Cluster index of each user, aligned with `users`.
    pub clusters: Vec<usize>,
    pub rules: Vec<ClusterRule>,
    pub task: TaskSpec,
}

fn task_id(kind: TaskKind) -> String {
    format!("synth_{}", kind.as_str())
}

fn sample_input(kind: TaskKind, side: usize, distractor_rate: f64, rng: &mut ChaCha8Rng) -> String {
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<&'static str> {
        CONTENT.choose_multiple(rng, n).copied().collect()
    };
    match kind {
        TaskKind::Classification => {
            let mut words = pick(4, rng);
            if rng.random_bool(distractor_rate) {
                let pool = if rng.random_bool(0.5) { &PART_A } else { &PART_B };
                let w = pool[rng.random_range(0..side)];
                let at = rng.random_range(0..=words.len());
                words.insert(at, w);
            }
            format!("item: {}", words.join(" "))
        }
        TaskKind::Generation => format!("note: {}", pick(3, rng).join(" ")),
        TaskKind::Rating => format!(
            "review: {} {}",
            SENTIMENT.choose(rng).expect("non-empty"),
            pick(2, rng).join(" ")
        ),
    }
}

fn with_noise(words: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    let mut out = Vec::with_capacity(words.len() + 4);
    for w in words {
        out.push(w);
        if rng.random_bool(0.1) {
            out.push(NOISE.choose(rng).expect("non-empty").to_string());
        }
    }
    out.join(" ")
}

fn profile_text(rule: &ClusterRule, style: ProfileStyle, rng: &mut ChaCha8Rng) -> Option<String> {
    let sentences: Vec<String> = match style {
        ProfileStyle::None => return None,
        ProfileStyle::Traits => {
            let (ta, tb) = rule.traits();
            let a = ["enjoys {}", "loves photos of {}", "often writes about {}"];
            let b = ["feels best in {}", "plans trips for {}", "remembers {}"];
            let mut s = vec![
                a.choose(rng).expect("non-empty").replace("{}", ta),
                b.choose(rng).expect("non-empty").replace("{}", tb),
            ];
            s.shuffle(rng);
            s
        }
        ProfileStyle::Opaque => {
            let (p, q) = rule.persona();
            let mut s = vec![format!("a {p} person"), format!("known to be {q}")];
            s.shuffle(rng);
            s
        }
    };
    let words: Vec<String> = sentences
        .join(" . ")
        .split_whitespace()
        .map(str::to_string)
        .collect();
    Some(with_noise(words, rng) + " .")
}

/// Generates a population; a pure function of `config`.
pub fn synth_population(config: &SynthConfig) -> Result<SynthPopulation> {
    if config.n_clusters == 0 || config.users_per_cluster == 0 || config.history_len == 0 {
        return Err(Error::Config(
            "clusters, users per cluster and history length must all be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.distractor_rate) {
        return Err(Error::Config("distractor_rate must lie in [0, 1]".into()));
    }
    let cells = match &config.cells {
        Some(c) if c.len() != config.n_clusters => {
            return Err(Error::Config("one grid cell per cluster required".into()))
        }
        Some(c) => c.clone(),
        None if config.n_clusters > GRID_PARTS * GRID_PARTS => {
            return Err(Error::Config(format!(
                "at most {} clusters",
                GRID_PARTS * GRID_PARTS
            )))
        }
        None => default_cells(config.n_clusters),
    };
    if cells.iter().any(|&(a, b)| a >= GRID_PARTS || b >= GRID_PARTS) {
        return Err(Error::Config(format!("grid cells must lie below {GRID_PARTS}")));
    }
    let mut unique = cells.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != cells.len() {
        return Err(Error::Config("grid cells must be distinct".into()));
    }
    let side = cells.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1);
    let rules: Vec<ClusterRule> = cells
        .iter()
        .enumerate()
        .map(|(c, &cell)| ClusterRule {
            cell,
            kind: config.task_kind,
            rating_offset: RATING_OFFSET[c % RATING_OFFSET.len()],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tid = task_id(config.task_kind);
    let mut users = Vec::with_capacity(config.n_clusters * config.users_per_cluster);
    let mut clusters = Vec::with_capacity(users.capacity());
    for (c, rule) in rules.iter().enumerate() {
        for _ in 0..config.users_per_cluster {
            let profile = profile_text(rule, config.profile_style, &mut rng);
            let history = (0..config.history_len)
                .map(|seq_index| {
                    let input =
                        sample_input(config.task_kind, side, config.distractor_rate, &mut rng);
                    let output = rule.apply(&input);
                    Interaction {
                        input,
                        output,
                        seq_index,
                    }
                })
                .collect();
            users.push(UserRecord {
                user_id: format!("u{:05}", users.len()),
                task_id: tid.clone(),
                profile_text: profile,
                history,
            });
            clusters.push(c);
        }
    }
    let label_set = match config.task_kind {
        TaskKind::Classification => Some(rules.iter().map(ClusterRule::label).collect()),
        TaskKind::Rating => Some((1..=5).map(|r| r.to_string()).collect()),
        TaskKind::Generation => None,
    };
    Ok(SynthPopulation {
        config: config.clone(),
        users,
        clusters,
        rules,
        task: TaskSpec {
            task_id: tid,
            kind: config.task_kind,
            label_set,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, HashSet};

    fn cls(n: usize, per: usize, len: usize, seed: u64) -> SynthPopulation {
        synth_population(&SynthConfig::new(n, per, len, TaskKind::Classification, seed)).unwrap()
    }

    #[test]
    fn same_seed_same_population() {
        assert_eq!(cls(2, 1, 4, 7), cls(2, 1, 4, 7));
        assert_ne!(cls(2, 1, 4, 7).users, cls(2, 1, 4, 8).users);
    }

    #[test]
    fn default_cells_fill_diagonals() {
        assert_eq!(default_cells(2), vec![(0, 0), (1, 1)]);
        assert_eq!(default_cells(4), vec![(0, 0), (1, 1), (0, 1), (1, 0)]);
        assert_eq!(default_cells(8).len(), 8);
    }

    #[test]
    fn same_input_maps_to_different_labels_across_clusters() {
        let pop = cls(4, 1, 1, 1);
        for kind in [TaskKind::Classification, TaskKind::Generation] {
            let labels: HashSet<String> = pop
                .rules
                .iter()
                .map(|r| ClusterRule { kind, ..r.clone() }.apply("item: apple river lemon"))
                .collect();
            assert_eq!(labels.len(), 4);
        }
    }

    #[test]
    fn bayes_accuracy_with_and_without_cluster_identity() {
        let pop = cls(4, 10, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = pop.rules.len() as f64;
        let (mut with_cluster, mut without) = (0.0, 0.0);
        let trials = 500;
        for _ in 0..trials {
            let input = sample_input(TaskKind::Classification, 2, 0.5, &mut rng);
            let mut votes: BTreeMap<String, usize> = BTreeMap::new();
            for r in &pop.rules {
                *votes.entry(r.apply(&input)).or_default() += 1;
            }
            // Clusters are equally likely; the rule table is deterministic.
            with_cluster += 1.0;
            without += *votes.values().max().unwrap() as f64 / n;
        }
        assert_eq!(with_cluster / trials as f64, 1.0);
        assert!(without / trials as f64 <= 1.0 / n + 1e-12);
    }

    #[test]
    fn label_marginals_are_uniform() {
        let pop = cls(4, 50, 10, 5);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for u in &pop.users {
            for i in &u.history {
                *counts.entry(i.output.as_str()).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        assert!(total >= 1000);
        for &c in counts.values() {
            assert!((c as f64 / total as f64 - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn trait_profiles_name_traits_not_labels() {
        let cfg = SynthConfig::new(4, 3, 4, TaskKind::Classification, 2).with_style(ProfileStyle::Traits);
        let pop = synth_population(&cfg).unwrap();
        for (u, &c) in pop.users.iter().zip(&pop.clusters) {
            let p = u.profile_text.as_deref().unwrap();
            let (ta, tb) = pop.rules[c].traits();
            assert!(p.contains(ta) && p.contains(tb), "{p}");
            assert!(!p.contains(PART_A[pop.rules[c].cell.0]));
        }
    }

    #[test]
    fn ratings_stay_in_range() {
        let pop = synth_population(&SynthConfig::new(5, 4, 6, TaskKind::Rating, 1)).unwrap();
        for u in &pop.users {
            for i in &u.history {
                let r: i32 = i.output.parse().unwrap();
                assert!((1..=5).contains(&r));
            }
        }
        pop.task.validate().unwrap();
    }

    #[test]
    fn invalid_configs_error() {
        assert!(synth_population(&SynthConfig::new(0, 1, 1, TaskKind::Rating, 0)).is_err());
        let dup = SynthConfig::new(2, 1, 1, TaskKind::Rating, 0).with_cells(vec![(0, 0), (0, 0)]);
        assert!(synth_population(&dup).is_err());
    }
}
