//! On-disk artifact formats: JSONL for prompts, trees and pair buffers,
//! JSON for policy parameters and results, CSV for schedules and training
//! logs. Every reader is strict: unknown fields and malformed lines are
//! errors that name the offending line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::cpl::{Schedule, ScheduleRow};
use crate::env::Prompt;
use crate::error::{Error, Result};
use crate::mcts::{NodeRecord, SearchTree, TreeHeader};
use crate::orchestrator::RunResult;
use crate::pairs::{PairBuffer, PairRecord, TrajectoryPair};
use crate::policy::{ParamsRecord, PolicyParams};
use crate::train::{StepRecord, TrainReport};
use crate::PromptMap;

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const TREES_FILE: &str = "trees.jsonl";
pub const BUFFER_FILE: &str = "buffer.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RESULT_FILE: &str = "result.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const SFT_POLICY_FILE: &str = "policy_sft.json";
pub const POLICY_FILE: &str = "policy.json";

pub fn schedule_file(epoch: usize) -> String {
    format!("schedule_epoch_{epoch}.csv")
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Non-empty lines with 1-based line numbers. A missing final newline is
/// treated as truncation.
fn lines<'a>(path: &Path, text: &'a str) -> Result<Vec<(usize, &'a str)>> {
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(schema(path, line, "truncated record (missing newline)"));
    }
    Ok(text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect())
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| schema(path, line, e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

pub fn prompts_to_jsonl(prompts: &[Prompt]) -> Result<Vec<u8>> {
    jsonl(prompts)
}

pub fn parse_prompts(path: &Path, text: &str) -> Result<Vec<Prompt>> {
    let mut seen = std::collections::BTreeSet::new();
    lines(path, text)?
        .into_iter()
        .map(|(n, l)| {
            let p: Prompt = parse_line(path, n, l)?;
            p.validate().map_err(|e| schema(path, n, e.to_string()))?;
            if !seen.insert(p.id) {
                return Err(schema(path, n, format!("duplicate prompt id {}", p.id)));
            }
            Ok(p)
        })
        .collect()
}

pub fn read_prompts(path: &Path) -> Result<Vec<Prompt>> {
    parse_prompts(path, &read_text(path)?)
}

pub fn trees_to_jsonl(trees: &[SearchTree]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for tree in trees {
        let (header, nodes) = tree.to_records();
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        out.extend(jsonl(nodes)?);
    }
    Ok(out)
}

/// Header lines carry `prompt_id`; every other line is a node record of
/// the most recent header.
pub fn parse_trees(path: &Path, text: &str) -> Result<Vec<SearchTree>> {
    let mut trees = Vec::new();
    let mut current: Option<(usize, TreeHeader, Vec<NodeRecord>)> = None;
    let finish = |cur: Option<(usize, TreeHeader, Vec<NodeRecord>)>, trees: &mut Vec<SearchTree>| -> Result<()> {
        if let Some((line, header, nodes)) = cur {
            trees.push(SearchTree::from_records(header, nodes).map_err(|e| schema(path, line, e.to_string()))?);
        }
        Ok(())
    };
    for (n, l) in lines(path, text)? {
        let value: Value = parse_line(path, n, l)?;
        if value.get("prompt_id").is_some() {
            let header: TreeHeader = serde_json::from_value(value).map_err(|e| schema(path, n, e.to_string()))?;
            finish(current.take(), &mut trees)?;
            current = Some((n, header, Vec::new()));
        } else {
            let node: NodeRecord = serde_json::from_value(value).map_err(|e| schema(path, n, e.to_string()))?;
            match current.as_mut() {
                Some((_, _, nodes)) => nodes.push(node),
                None => return Err(schema(path, n, "node record before any tree header")),
            }
        }
    }
    finish(current, &mut trees)?;
    Ok(trees)
}

pub fn read_trees(path: &Path) -> Result<Vec<SearchTree>> {
    parse_trees(path, &read_text(path)?)
}

pub fn buffer_to_jsonl(buffer: &PairBuffer) -> Result<Vec<u8>> {
    jsonl(buffer.to_records())
}

pub fn parse_pair_records(path: &Path, text: &str) -> Result<Vec<PairRecord>> {
    lines(path, text)?
        .into_iter()
        .map(|(n, l)| parse_line(path, n, l))
        .collect()
}

pub fn read_buffer(path: &Path, prompts: &PromptMap) -> Result<PairBuffer> {
    let text = read_text(path)?;
    let mut buffer = PairBuffer::new();
    for (rec, (n, _)) in parse_pair_records(path, &text)?.into_iter().zip(lines(path, &text)?) {
        let prompt = prompts.get(&rec.prompt_id).ok_or_else(|| schema(path, n, format!("unknown prompt {}", rec.prompt_id)))?;
        let pair = TrajectoryPair::from_record(rec, prompt).map_err(|e| schema(path, n, e.to_string()))?;
        if !buffer.push(pair) {
            return Err(schema(path, n, "duplicate pair"));
        }
    }
    Ok(buffer)
}

pub fn write_params(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&params.to_record())?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<PolicyParams> {
    let text = read_text(path)?;
    let record: ParamsRecord = serde_json::from_str(&text).map_err(|e| schema(path, e.line(), e.to_string()))?;
    PolicyParams::from_record(record).map_err(|e| schema(path, 1, e.to_string()))
}

pub fn write_result(path: &Path, result: &RunResult) -> Result<()> {
    let mut text = serde_json::to_string_pretty(result)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_result(path: &Path) -> Result<RunResult> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.line(), e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_schedule(path: &Path, schedule: &Schedule) -> Result<()> {
    write_csv(path, schedule.rows())
}

pub fn read_schedule(path: &Path) -> Result<Vec<ScheduleRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| schema(path, i + 2, e.to_string())))
        .collect()
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    write_csv(path, &report.steps)
}

pub fn read_train_report(path: &Path) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| schema(path, i + 2, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Prompts,
    Trees,
    Buffer,
}

impl ArtifactKind {
    /// Guesses the kind from the file name.
    pub fn infer(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if name.contains("prompt") {
            Ok(ArtifactKind::Prompts)
        } else if name.contains("tree") {
            Ok(ArtifactKind::Trees)
        } else if name.contains("buffer") || name.contains("pair") {
            Ok(ArtifactKind::Buffer)
        } else {
            Err(Error::InvalidInput(format!("cannot infer artifact kind of {}", path.display())))
        }
    }
}

/// Deserializes and re-serializes an artifact, failing unless the bytes
/// come back identical.
pub fn roundtrip_artifacts(path: &Path, kind: ArtifactKind) -> Result<()> {
    let text = read_text(path)?;
    let again = match kind {
        ArtifactKind::Prompts => prompts_to_jsonl(&parse_prompts(path, &text)?)?,
        ArtifactKind::Trees => trees_to_jsonl(&parse_trees(path, &text)?)?,
        ArtifactKind::Buffer => jsonl(parse_pair_records(path, &text)?)?,
    };
    if again != text.as_bytes() {
        let line = text
            .lines()
            .zip(String::from_utf8_lossy(&again).lines())
            .position(|(a, b)| a != b)
            .map_or(text.lines().count(), |i| i + 1);
        return Err(schema(path, line, "re-serialized content differs"));
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
