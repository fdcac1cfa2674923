use std::collections::HashSet;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Interaction, TaskSpec, UserRecord};
use crate::error::{Error, Result};

const USER_KEYS: [&str; 4] = ["user_id", "task_id", "profile", "history"];
const ITEM_KEYS: [&str; 2] = ["input", "output"];

#[derive(Serialize, Deserialize)]
struct ItemLine {
    input: String,
    output: String,
}

#[derive(Serialize, Deserialize)]
struct UserLine {
    user_id: String,
    #[serde(default = "default_task")]
    task_id: String,
    profile: Option<String>,
    history: Vec<ItemLine>,
}

fn default_task() -> String {
    "default".into()
}

fn warn_unknown(obj: &Map<String, Value>, known: &[&str], line: usize) {
    for k in obj.keys().filter(|k| !known.contains(&k.as_str())) {
        warn!("line {line}: ignoring unknown key {k:?}");
    }
}

fn parse_line(text: &str, line: usize) -> Result<UserRecord> {
    let err = |msg: String| Error::Parse { line, msg };
    let value: Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record is not a JSON object".into()))?;
    warn_unknown(obj, &USER_KEYS, line);
    if let Some(items) = obj.get("history").and_then(Value::as_array) {
        for item in items.iter().filter_map(Value::as_object) {
            warn_unknown(item, &ITEM_KEYS, line);
        }
    }
    let rec: UserLine = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
    let user = UserRecord {
        user_id: rec.user_id,
        task_id: rec.task_id,
        profile_text: rec.profile,
        history: rec
            .history
            .into_iter()
            .enumerate()
            .map(|(seq_index, i)| Interaction {
                input: i.input,
                output: i.output,
                seq_index,
            })
            .collect(),
    };
    user.validate().map_err(|e| err(e.to_string()))?;
    Ok(user)
}

/// Parses a population from JSONL text, one user per non-blank line.
/// History order in the file is the temporal order.
pub fn parse_jsonl(text: &str) -> Result<Vec<UserRecord>> {
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let user = parse_line(raw, i + 1)?;
        if !seen.insert(user.user_id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: Error::DuplicateUser(user.user_id).to_string(),
            });
        }
        users.push(user);
    }
    Ok(users)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<UserRecord>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

/// Canonical serialization: keys in a fixed order, one user per line.
pub fn to_jsonl(users: &[UserRecord]) -> String {
    let mut out = String::new();
    for u in users {
        let line = UserLine {
            user_id: u.user_id.clone(),
            task_id: u.task_id.clone(),
            profile: u.profile_text.clone(),
            history: u
                .history
                .iter()
                .map(|i| ItemLine {
                    input: i.input.clone(),
                    output: i.output.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain strings serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(users: &[UserRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(users))?;
    Ok(())
}

/// Task descriptions are stored as a JSON array next to the population.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path)?;
    let tasks: Vec<TaskSpec> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

pub fn save_tasks(tasks: &[TaskSpec], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(tasks).expect("task specs serialize");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = concat!(
        r#"{"user_id":"a","task_id":"t","profile":null,"history":[{"input":"x","output":"y"}]}"#,
        "\n",
        r#"{"user_id":"b","task_id":"t","profile":"likes tea","history":[]}"#,
        "\n"
    );

    #[test]
    fn two_users_load_and_reserialize_identically() {
        let users = parse_jsonl(TWO).unwrap();
        assert_eq!(users.len(), 2);
        assert_eq!(users[1].profile_text.as_deref(), Some("likes tea"));
        assert_eq!(to_jsonl(&users), TWO);
    }

    #[test]
    fn key_order_does_not_matter() {
        let shuffled = r#"{"history":[{"output":"y","input":"x"}],"profile":null,"task_id":"t","user_id":"a"}"#;
        let users = parse_jsonl(shuffled).unwrap();
        assert_eq!(to_jsonl(&users), TWO.lines().next().unwrap().to_string() + "\n");
    }

    #[test]
    fn missing_user_id_reports_line() {
        let text = format!("{}\n{}", TWO.lines().next().unwrap(), r#"{"task_id":"t","history":[]}"#);
        match parse_jsonl(&text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("user_id"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_user_is_rejected() {
        let line = TWO.lines().next().unwrap();
        assert!(matches!(
            parse_jsonl(&format!("{line}\n{line}\n")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let text = r#"{"user_id":"a","task_id":"t","profile":null,"extra":1,"history":[]}"#;
        assert_eq!(parse_jsonl(text).unwrap().len(), 1);
    }

    #[test]
    fn malformed_json_reports_line() {
        assert!(matches!(parse_jsonl("\n{oops"), Err(Error::Parse { line: 2, .. })));
    }
}
