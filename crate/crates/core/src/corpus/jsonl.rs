use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::featurize::hash_featurize;
use super::{Attribute, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u32>>,
    label: u8,
    attributes: BTreeMap<String, String>,
}

impl Record {
    fn from_sample(s: &Sample) -> Self {
        let attributes = Attribute::ALL
            .into_iter()
            .map(|a| (a.key().to_string(), a.groups()[s.group(a)].to_string()))
            .collect();
        Record {
            id: s.id,
            text: None,
            tokens: Some(s.tokens.clone()),
            label: s.label as u8,
            attributes,
        }
    }

    fn into_sample(self, hash_dims: usize) -> std::result::Result<Sample, String> {
        let tokens = match (self.tokens, self.text) {
            (Some(_), Some(_)) => return Err("record has both \"text\" and \"tokens\"".into()),
            (Some(t), None) if t.is_empty() => return Err("\"tokens\" is empty".into()),
            (Some(t), None) => t,
            (None, Some(text)) => hash_featurize(&text, hash_dims),
            (None, None) => return Err("record needs \"text\" or \"tokens\"".into()),
        };
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if let Some(extra) = self
            .attributes
            .keys()
            .find(|k| k.parse::<Attribute>().is_err())
        {
            return Err(format!("unknown attribute '{extra}'"));
        }
        let mut groups = [0u8; 4];
        for a in Attribute::ALL {
            let value = self
                .attributes
                .get(a.key())
                .ok_or_else(|| format!("missing attribute \"{}\"", a.key()))?;
            groups[a.index()] = a.group_index(value).ok_or_else(|| {
                format!(
                    "unknown value '{value}' for attribute \"{}\" (expected {} or {})",
                    a.key(),
                    a.groups()[0],
                    a.groups()[1]
                )
            })?;
        }
        Ok(Sample {
            id: self.id,
            tokens,
            label: self.label as usize,
            groups,
        })
    }
}

/// Parses JSON Lines dataset content. Raw text is featurized into
/// `hash_dims` buckets; blank lines are skipped.
pub fn parse_jsonl(content: &str, path: &Path, hash_dims: usize) -> Result<Vec<Sample>> {
    if hash_dims < 2 {
        return Err(Error::Config("hash dimensions must be at least 2".into()));
    }
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| fail(i + 1, e.to_string()))?;
        samples.push(record.into_sample(hash_dims).map_err(|m| fail(i + 1, m))?);
    }
    Ok(samples)
}

pub fn load_jsonl(path: &Path, hash_dims: usize) -> Result<Vec<Sample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&content, path, hash_dims)
}

/// Serializes samples as JSON Lines with explicit token ids.
pub fn write_jsonl(samples: &[Sample], out: &mut impl Write) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *out, &Record::from_sample(s))?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(samples, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(content: &str) -> Result<Vec<Sample>> {
        parse_jsonl(content, Path::new("fixture.jsonl"), 64)
    }

    const FIXTURE: &str = r#"{"id": 1, "tokens": [3, 4, 5], "label": 0, "attributes": {"age": "elder", "gender": "male", "country": "US", "ethnicity": "white"}}
{"id": 2, "tokens": [7], "label": 1, "attributes": {"age": "median", "gender": "female", "country": "non-US", "ethnicity": "non-white"}}
{"id": 3, "text": "Some words here", "label": 1, "attributes": {"age": "median", "gender": "male", "country": "US", "ethnicity": "white"}}
{"id": 4, "tokens": [1, 1], "label": 0, "attributes": {"age": "elder", "gender": "female", "country": "non-US", "ethnicity": "white"}}
"#;

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn fixture_parses_and_round_trips() {
        let samples = parse(FIXTURE).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].groups, [0, 0, 1, 1]);
        assert_eq!(samples[2].tokens, hash_featurize("some words here", 64));
        let mut buf = Vec::new();
        write_jsonl(&samples, &mut buf).unwrap();
        let again = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(again, samples);
    }

    #[test]
    fn missing_attribute_names_field_and_line() {
        let content = r#"{"id": 1, "tokens": [3], "label": 0, "attributes": {"age": "elder", "gender": "male", "country": "US", "ethnicity": "white"}}
{"id": 2, "tokens": [3], "label": 0, "attributes": {"gender": "male", "country": "US", "ethnicity": "white"}}"#;
        let err = parse(content).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("age"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_value_is_named() {
        let content = r#"{"id": 1, "tokens": [3], "label": 0, "attributes": {"age": "teen", "gender": "male", "country": "US", "ethnicity": "white"}}"#;
        let err = parse(content).unwrap_err().to_string();
        assert!(err.contains("teen") && err.contains(":1:"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let content = "\n{\"id\": 1, \"tokens\": [3], \"label\": 0}\n";
        match parse(content).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("not json").is_err());
    }
}
