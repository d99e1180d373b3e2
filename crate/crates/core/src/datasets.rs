//! JSON-lines dataset formats.
//!
//! * QA: `{"question": str, "answer": str, "label": 0|1}`
//! * Multiple choice: `{"question": str, "choices": [str], "correct": [int], "best_index": int}`
//!
//! Blank lines are skipped. Parse and validation failures report the line.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub question: String,
    pub choices: Vec<String>,
    pub correct: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_index: Option<usize>,
}

impl McItem {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err("need at least two choices".into());
        }
        if self.correct.is_empty() {
            return Err("correct set is empty".into());
        }
        if let Some(&i) = self.correct.iter().find(|&&i| i >= self.choices.len()) {
            return Err(format!("correct index {i} out of range"));
        }
        let mut sorted = self.correct.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.correct.len() {
            return Err("duplicate correct index".into());
        }
        if sorted.len() == self.choices.len() {
            return Err("every choice is correct; need at least one incorrect".into());
        }
        if let Some(b) = self.best_index {
            if !self.correct.contains(&b) {
                return Err(format!("best_index {b} is not among the correct choices"));
            }
        }
        Ok(())
    }

    pub fn is_correct(&self, i: usize) -> bool {
        self.correct.contains(&i)
    }
}

fn read_lines<T: DeserializeOwned>(
    path: &Path,
    validate: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let item: T = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        validate(&item).map_err(fail)?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaRecord>> {
    read_lines(path, |r: &QaRecord| {
        if r.label > 1 {
            Err(format!("label must be 0 or 1, got {}", r.label))
        } else {
            Ok(())
        }
    })
}

pub fn read_mc(path: &Path) -> Result<Vec<McItem>> {
    read_lines(path, McItem::validate)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
