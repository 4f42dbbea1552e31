//! Region-semantics annotation records and their JSON-lines container with
//! a schema-versioned header line.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::backbone::PromptSpec;
use crate::config::TaskKind;
use crate::error::{Error, Result};

pub const SCHEMA_HEADER: &str = r#"{"schema":"region-annotations/v1"}"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

/// One annotated event inside a streaming record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventAnnotation {
    pub t0: f64,
    pub t1: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

/// One region-semantics sample: media reference, visual prompt, task kind,
/// language, per-granularity responses, and (for streaming) an event list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub media: String,
    pub modality: Modality,
    pub prompt: PromptSpec,
    pub task: TaskKind,
    pub language: String,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventAnnotation>,
}

impl AnnotationRecord {
    /// Deduplication key: (media, prompt, task, language).
    pub fn key(&self) -> String {
        let prompt = serde_json::to_string(&self.prompt).unwrap_or_default();
        format!("{}|{}|{}|{}", self.media, self.task, self.language, prompt)
    }

    /// The response slot this record's task writes to.
    pub fn task_response(&self) -> Option<&String> {
        self.responses.get(self.task.as_str())
    }

    /// Event-list well-formedness: each t0 < t1, sorted, non-overlapping.
    pub fn events_well_formed(&self) -> bool {
        if self.events.iter().any(|e| e.t0 >= e.t1) {
            return false;
        }
        self.events.windows(2).all(|w| w[0].t1 <= w[1].t0)
    }
}

/// Script heuristic: "zh" must contain at least one Han character, "en" must
/// contain none.
pub fn script_matches(language: &str, text: &str) -> bool {
    let has_han = text.chars().any(|c| ('\u{4E00}'..='\u{9FFF}').contains(&c));
    match language {
        "zh" => has_han,
        "en" => !has_han,
        _ => false,
    }
}

/// Read a schema-headed JSONL file; parse errors carry 1-based line numbers.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::input(format!("{} is empty", path.display())))?
        .map_err(Error::Io)?;
    let expected: serde_json::Value = serde_json::from_str(SCHEMA_HEADER)?;
    let got: serde_json::Value = serde_json::from_str(&header)
        .map_err(|e| Error::input(format!("line 1: bad schema header: {e}")))?;
    if got != expected {
        return Err(Error::input(format!("line 1: unsupported schema header {header:?}")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::input(format!("line {}: {e}", i + 2)))?;
        records.push(record);
    }
    Ok(records)
}

/// Write records under the schema header, one JSON object per line.
pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 128);
    out.push_str(SCHEMA_HEADER);
    out.push('\n');
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// A record the pipeline set aside, with the rule that tripped. The flagged
/// queue is itself a JSONL file a reviewer could edit and resubmit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRecord {
    pub reason: String,
    pub record: AnnotationRecord,
}

pub fn write_flagged(path: &Path, flagged: &[FlaggedRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SCHEMA_HEADER);
    out.push('\n');
    for f in flagged {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_record(media: &str, task: TaskKind, language: &str) -> AnnotationRecord {
        let mut responses = BTreeMap::new();
        responses.insert("original".to_string(), "a brown dog".to_string());
        AnnotationRecord {
            media: media.to_string(),
            modality: Modality::Image,
            prompt: PromptSpec::point(0.5, 0.5),
            task,
            language: language.to_string(),
            responses,
            events: Vec::new(),
        }
    }

    #[test]
    fn jsonl_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let records = vec![
            sample_record("synth:seed=1,frames=1,fps=1", TaskKind::Caption, "en"),
            sample_record("synth:seed=2,frames=1,fps=1", TaskKind::Category, "en"),
        ];
        write_records(&path, &records).unwrap();
        let loaded = read_records(&path).unwrap();
        assert_eq!(loaded, records);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(SCHEMA_HEADER));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&sample_record("m", TaskKind::Caption, "en")).unwrap();
        std::fs::write(&path, format!("{SCHEMA_HEADER}\n{good}\nnot json\n")).unwrap();
        let err = read_records(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "got: {err}");
    }

    #[test]
    fn missing_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("headerless.jsonl");
        let good = serde_json::to_string(&sample_record("m", TaskKind::Caption, "en")).unwrap();
        std::fs::write(&path, format!("{good}\n")).unwrap();
        assert!(read_records(&path).is_err());
    }

    #[test]
    fn script_heuristic() {
        assert!(script_matches("en", "a brown dog"));
        assert!(!script_matches("en", "一只棕色的狗"));
        assert!(script_matches("zh", "中文版：一只棕色的狗"));
        assert!(!script_matches("zh", "no han characters"));
    }

    #[test]
    fn event_well_formedness() {
        let mut r = sample_record("m", TaskKind::Stream, "en");
        r.events = vec![
            EventAnnotation { t0: 0.0, t1: 2.0, text: "a".into(), subject: None },
            EventAnnotation { t0: 2.0, t1: 4.0, text: "b".into(), subject: None },
        ];
        assert!(r.events_well_formed());
        r.events[1].t0 = 1.5;
        assert!(!r.events_well_formed());
        r.events[1].t0 = 5.0;
        r.events[1].t1 = 4.5;
        assert!(!r.events_well_formed());
    }
}
