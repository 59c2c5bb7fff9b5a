//! Compound-goal prompting and the pipe-delimited joint output grammar.
//!
//! A joint prompt asks for several task outputs in one generation pass; the
//! output wire format is `NAME1: v1 | NAME2: v2 |` with single spaces around
//! separators and a required trailing pipe. Values may contain colons and
//! commas; the literal ` | ` separator inside a value is unsupported and
//! rejected at serialization time.

use crate::error::{invalid_arg, Error, Result};

pub const FIELD_SEP: &str = " | ";
pub const NAME_SEP: &str = ": ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointTask {
    pub name: String,
    pub instruction: String,
}

/// Ordered task list rendered into one compound instruction. The first task
/// is the transcription task by convention.
#[derive(Debug, Clone)]
pub struct JointPrompt {
    pub tasks: Vec<JointTask>,
}

impl JointPrompt {
    pub fn new(tasks: Vec<JointTask>) -> Result<Self> {
        if tasks.len() < 2 {
            invalid_arg!("a joint prompt needs at least two tasks, got {}", tasks.len());
        }
        if tasks[0].name != "ASR" {
            invalid_arg!("the first joint task must be ASR, got {:?}", tasks[0].name);
        }
        Ok(JointPrompt { tasks })
    }

    /// The expected-output line, e.g. `"ASR: ... | KWE: ... |"`.
    pub fn format_directive(&self) -> String {
        let inner: Vec<String> = self.tasks.iter().map(|t| format!("{}: ...", t.name)).collect();
        format!("\"{} |\"", inner.join(" | "))
    }

    /// Render the full instruction text: a header, one block per task, and
    /// the closing format directive.
    pub fn render(&self) -> String {
        let mut out = String::from("Perform the following audio-based tasks in the order as described.\n");
        for t in &self.tasks {
            out.push_str(&format!("=== Task: {} ===\n{}\n", t.name, t.instruction));
        }
        out.push_str(&format!("Make sure to format the output as {}", self.format_directive()));
        out
    }
}

/// Parsed (or to-be-serialized) joint output: ordered task name / value pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointOutput {
    pub fields: Vec<(String, String)>,
}

impl JointOutput {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    /// Serialize as `NAME1: v1 | NAME2: v2 |`. Names and values containing
    /// the separator tokens are rejected.
    pub fn serialize(&self) -> Result<String> {
        if self.fields.is_empty() {
            invalid_arg!("cannot serialize an empty joint output");
        }
        for (name, value) in &self.fields {
            if name.is_empty() {
                invalid_arg!("joint field name must be non-empty");
            }
            if name.contains(NAME_SEP) || name.contains(FIELD_SEP) {
                invalid_arg!("joint field name {name:?} contains a separator");
            }
            if value.contains(FIELD_SEP) {
                invalid_arg!("joint value {value:?} contains the field separator {FIELD_SEP:?}");
            }
        }
        let inner: Vec<String> = self
            .fields
            .iter()
            .map(|(n, v)| format!("{n}{NAME_SEP}{v}"))
            .collect();
        Ok(format!("{} |", inner.join(FIELD_SEP)))
    }
}

/// Parse a joint record. Splits on top-level ` | `, requires the trailing
/// pipe, and splits each field on the first `: `.
pub fn parse_joint(text: &str) -> Result<JointOutput> {
    let trimmed = text.trim_end_matches(' ');
    let body = match trimmed.strip_suffix(" |").or_else(|| trimmed.strip_suffix('|')) {
        Some(b) => b,
        None => {
            return Err(Error::MalformedOutput(format!(
                "missing trailing pipe in {text:?}"
            )))
        }
    };
    let mut fields = Vec::new();
    for segment in body.split(FIELD_SEP) {
        let segment_trimmed = segment.trim_end_matches(' ');
        match segment_trimmed.split_once(NAME_SEP) {
            Some((name, value)) => {
                if name.is_empty() {
                    return Err(Error::MalformedOutput(format!(
                        "empty field name in segment {segment:?}"
                    )));
                }
                fields.push((name.to_string(), value.to_string()));
            }
            None => {
                // `NAME:` with an empty value and no trailing space.
                if let Some(name) = segment_trimmed.strip_suffix(':') {
                    if name.is_empty() {
                        return Err(Error::MalformedOutput(format!(
                            "empty field name in segment {segment:?}"
                        )));
                    }
                    fields.push((name.to_string(), String::new()));
                } else {
                    return Err(Error::MalformedOutput(format!(
                        "missing task name separator in segment {segment:?}"
                    )));
                }
            }
        }
    }
    if fields.is_empty() {
        return Err(Error::MalformedOutput(format!("no fields in {text:?}")));
    }
    Ok(JointOutput { fields })
}
