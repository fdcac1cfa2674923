//! Users, their interaction histories, and the text that flows through them.
//!
//! A population is a list of [`UserRecord`]s that all belong to one task.
//! Each history is split once, per user, into a profile source (the older
//! part, `H<t`) and a target part (`H≥t`, the newest quarter, rounded up).

mod jsonl;
mod synth;
mod vocab;

pub use jsonl::{load_jsonl, load_tasks, parse_jsonl, save_jsonl, save_tasks, to_jsonl};
pub use synth::{
    default_cells, synth_population, ClusterRule, ProfileStyle, SynthConfig, SynthPopulation,
    GRID_PARTS,
};
pub use vocab::{pre_tokenize, terms, Vocab, BOS, EOS, N_RESERVED, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of each history held out as training/evaluation targets.
pub const TARGET_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub input: String,
    pub output: String,
    pub seq_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub task_id: String,
    pub profile_text: Option<String>,
    pub history: Vec<Interaction>,
}

impl UserRecord {
    /// Index of the first target interaction: the last `⌈25%⌉` of the
    /// history are targets.
    pub fn split_point(&self) -> usize {
        let n = self.history.len();
        let n_targets = (n as f64 * TARGET_FRACTION).ceil() as usize;
        n - n_targets
    }

    /// `H<t`: the part a profile may be built from.
    pub fn profile_history(&self) -> &[Interaction] {
        &self.history[..self.split_point()]
    }

    /// `H≥t`: the interactions used as supervision and evaluation targets.
    pub fn targets(&self) -> &[Interaction] {
        &self.history[self.split_point()..]
    }

    /// Checks the record invariants: non-empty id, sorted and unique
    /// `seq_index`, non-empty outputs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidRecord {
            user: self.user_id.clone(),
            msg,
        };
        if self.user_id.is_empty() {
            return Err(bad("empty user_id".into()));
        }
        for pair in self.history.windows(2) {
            if pair[1].seq_index <= pair[0].seq_index {
                return Err(bad(format!(
                    "seq_index {} does not follow {}",
                    pair[1].seq_index, pair[0].seq_index
                )));
            }
        }
        if let Some(i) = self.history.iter().find(|i| i.output.is_empty()) {
            return Err(bad(format!("empty output at seq_index {}", i.seq_index)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
    Rating,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Generation => "generation",
            TaskKind::Rating => "rating",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "generation" => Ok(TaskKind::Generation),
            "rating" => Ok(TaskKind::Rating),
            other => Err(Error::Invalid(format!(
                "unknown task kind {other:?} (expected classification, generation or rating)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_set: Option<Vec<String>>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let labels = match (self.kind, &self.label_set) {
            (TaskKind::Generation, _) => return Ok(()),
            (_, None) => {
                return Err(Error::Config(format!(
                    "task {} is {} and needs a label_set",
                    self.task_id,
                    self.kind.as_str()
                )))
            }
            (_, Some(l)) => l,
        };
        if labels.is_empty() {
            return Err(Error::Config(format!("task {} has an empty label_set", self.task_id)));
        }
        if self.kind == TaskKind::Rating {
            let expected: Vec<String> = (1..=5).map(|r| r.to_string()).collect();
            if *labels != expected {
                return Err(Error::Config(format!(
                    "rating task {} must use labels 1..5",
                    self.task_id
                )));
            }
        }
        Ok(())
    }

    /// Guesses a task description from the outputs of a population: all
    /// outputs in `1..=5` make a rating task, at most 32 distinct outputs a
    /// classification task, anything else a generation task.
    pub fn infer(task_id: &str, users: &[UserRecord]) -> TaskSpec {
        let outputs: std::collections::BTreeSet<&str> = users
            .iter()
            .flat_map(|u| u.history.iter().map(|i| i.output.as_str()))
            .collect();
        let rating = !outputs.is_empty()
            && outputs
                .iter()
                .all(|o| matches!(o.trim().parse::<u8>(), Ok(1..=5)));
        let (kind, label_set) = if rating {
            (
                TaskKind::Rating,
                Some((1..=5).map(|r| r.to_string()).collect()),
            )
        } else if !outputs.is_empty() && outputs.len() <= 32 {
            (
                TaskKind::Classification,
                Some(outputs.iter().map(|s| s.to_string()).collect()),
            )
        } else {
            (TaskKind::Generation, None)
        };
        TaskSpec {
            task_id: task_id.to_string(),
            kind,
            label_set,
        }
    }
}

/// Checks every record and rejects duplicate ids.
pub fn validate_population(users: &[UserRecord]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for u in users {
        u.validate()?;
        if !seen.insert(u.user_id.as_str()) {
            return Err(Error::DuplicateUser(u.user_id.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(n: usize) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            task_id: "t".into(),
            profile_text: None,
            history: (0..n)
                .map(|i| Interaction {
                    input: format!("in {i}"),
                    output: format!("out {i}"),
                    seq_index: i,
                })
                .collect(),
        }
    }

    #[test]
    fn quarter_of_history_is_held_out_rounding_up() {
        assert_eq!(user(8).split_point(), 6);
        assert_eq!(user(5).split_point(), 3);
        assert_eq!(user(1).split_point(), 0);
        assert_eq!(user(0).split_point(), 0);
        assert_eq!(user(8).targets().len(), 2);
    }

    #[test]
    fn unsorted_history_is_rejected() {
        let mut u = user(3);
        u.history.swap(0, 1);
        assert!(u.validate().is_err());
    }

    #[test]
    fn rating_inference() {
        let mut u = user(2);
        u.history[0].output = "4".into();
        u.history[1].output = "2".into();
        let spec = TaskSpec::infer("r", &[u]);
        assert_eq!(spec.kind, TaskKind::Rating);
        spec.validate().unwrap();
    }

    #[test]
    fn classification_needs_labels() {
        let spec = TaskSpec {
            task_id: "c".into(),
            kind: TaskKind::Classification,
            label_set: None,
        };
        assert!(spec.validate().is_err());
    }
}
