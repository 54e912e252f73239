//! Supervised examples and line-delimited dataset ingestion.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const KNOWN_FIELDS: [&str; 5] = ["id", "image_ref", "query", "reasoning_steps", "answer"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` {reason}")]
    InvalidField {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One supervised instance: optional image reference, query, reference
/// reasoning steps and reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub query: String,
    #[serde(rename = "reasoning_steps")]
    pub reference_steps: Vec<String>,
    #[serde(rename = "answer")]
    pub reference_answer: String,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        steps: Vec<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            image_ref: None,
            query: query.into(),
            reference_steps: steps,
            reference_answer: answer.into(),
        }
    }

    /// Reference rationale as one string (steps joined by a space).
    pub fn reference_rationale(&self) -> String {
        self.reference_steps.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Training,
    Calibration,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Training => "training",
            Role::Calibration => "calibration",
            Role::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub role: Role,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids. Line numbers in the error
    /// are 1-based positions in `examples`.
    pub fn new(role: Role, examples: Vec<Example>) -> Result<Self, DataError> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, ex) in examples.iter().enumerate() {
            if let Some(&first) = seen.get(ex.id.as_str()) {
                return Err(DataError::DuplicateId {
                    id: ex.id.clone(),
                    first,
                    second: i + 1,
                });
            }
            seen.insert(&ex.id, i + 1);
        }
        Ok(Self { role, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Writes the dataset in the same line-delimited format `load_dataset` reads.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), DataError> {
        for ex in &self.examples {
            let line = serde_json::to_string(ex).map_err(|e| DataError::Malformed {
                line: 0,
                reason: e.to_string(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Ids shared between two datasets, sorted.
pub fn overlapping_ids(a: &Dataset, b: &Dataset) -> Vec<String> {
    let left: BTreeSet<&str> = a.ids().collect();
    let right: BTreeSet<&str> = b.ids().collect();
    left.intersection(&right).map(|s| (*s).to_owned()).collect()
}

/// Reads one record per line. Blank lines are skipped; unknown fields are
/// ignored with a warning.
pub fn load_dataset<R: BufRead>(source: R, role: Role) -> Result<Dataset, DataError> {
    let mut examples = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(&line, line_no)?;
        if let Some(&first) = first_line.get(&ex.id) {
            return Err(DataError::DuplicateId {
                id: ex.id,
                first,
                second: line_no,
            });
        }
        first_line.insert(ex.id.clone(), line_no);
        examples.push(ex);
    }
    Ok(Dataset { role, examples })
}

pub fn load_dataset_file(
    path: impl AsRef<std::path::Path>,
    role: Role,
) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    load_dataset(std::io::BufReader::new(file), role)
}

fn parse_record(line: &str, line_no: usize) -> Result<Example, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| DataError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| DataError::Malformed {
        line: line_no,
        reason: "record is not an object".into(),
    })?;
    for key in obj.keys() {
        if !KNOWN_FIELDS.contains(&key.as_str()) {
            log::warn!("line {line_no}: ignoring unknown field `{key}`");
        }
    }

    let string_field = |field: &'static str| -> Result<String, DataError> {
        match obj.get(field) {
            None | Some(serde_json::Value::Null) => Err(DataError::MissingField {
                line: line_no,
                field,
            }),
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(DataError::InvalidField {
                line: line_no,
                field,
                reason: "must be a string".into(),
            }),
        }
    };

    let id = string_field("id")?;
    let query = string_field("query")?;
    let reference_answer = string_field("answer")?;
    let reference_steps = match obj.get("reasoning_steps") {
        None | Some(serde_json::Value::Null) => {
            return Err(DataError::MissingField {
                line: line_no,
                field: "reasoning_steps",
            })
        }
        Some(serde_json::Value::Array(items)) => {
            let mut steps = Vec::with_capacity(items.len());
            for item in items {
                match item.as_str() {
                    Some(s) if !s.is_empty() => steps.push(s.to_owned()),
                    Some(_) => {
                        return Err(DataError::InvalidField {
                            line: line_no,
                            field: "reasoning_steps",
                            reason: "contains an empty step".into(),
                        })
                    }
                    None => {
                        return Err(DataError::InvalidField {
                            line: line_no,
                            field: "reasoning_steps",
                            reason: "must contain only strings".into(),
                        })
                    }
                }
            }
            steps
        }
        Some(_) => {
            return Err(DataError::InvalidField {
                line: line_no,
                field: "reasoning_steps",
                reason: "must be an array of strings".into(),
            })
        }
    };
    let image_ref = match obj.get("image_ref") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(DataError::InvalidField {
                line: line_no,
                field: "image_ref",
                reason: "must be a string".into(),
            })
        }
    };

    Ok(Example {
        id,
        image_ref,
        query,
        reference_steps,
        reference_answer,
    })
}
