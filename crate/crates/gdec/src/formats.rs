//! On-disk formats. JSON Lines files start with a header object carrying the
//! tool version and resolved configuration; outputs are written atomically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use gdec_core::decoders::{StepRecord, Termination};
use gdec_core::metrics::{AnnotationSet, Lexicon, PopeSplit};
use gdec_core::pdm::{PdmSeries, SeriesKind, SeriesPoint};
use gdec_core::{DecoderConfig, Error, GenerationTrace, SessionDescriptor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const TOOL: &str = "gdec";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
}

impl Header {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg).expect("config serializes"),
        }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_err(path: &Path, line: usize, detail: impl ToString) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.to_string(),
    }
}

/// Parses every non-blank line of a JSON Lines file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<(usize, T)>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| parse_err(path, i + 1, e))
        })
        .collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e))
}

fn push_line(out: &mut String, v: &impl Serialize) {
    out.push_str(&serde_json::to_string(v).expect("serializable"));
    out.push('\n');
}

// ---- traces ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceHeader {
    #[serde(flatten)]
    header: Header,
    decoder: DecoderConfig,
    descriptor: SessionDescriptor,
    item: String,
    terminated_by: Termination,
    steps: usize,
}

/// Trace file: a header line, then one step record per line.
pub fn render_trace(header: &Header, item: &str, trace: &GenerationTrace) -> String {
    let mut out = String::new();
    push_line(
        &mut out,
        &TraceHeader {
            header: header.clone(),
            decoder: trace.config.clone(),
            descriptor: trace.descriptor.clone(),
            item: item.into(),
            terminated_by: trace.terminated_by,
            steps: trace.steps.len(),
        },
    );
    for s in &trace.steps {
        push_line(&mut out, s);
    }
    out
}

pub fn read_trace(path: &Path) -> CliResult<GenerationTrace> {
    let text = read(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty trace file"))?;
    let head: TraceHeader = serde_json::from_str(first).map_err(|e| parse_err(path, 1, e))?;
    let steps = lines
        .map(|(i, l)| serde_json::from_str::<StepRecord>(l).map_err(|e| parse_err(path, i + 1, e)))
        .collect::<CliResult<Vec<_>>>()?;
    if steps.len() != head.steps {
        return Err(parse_err(
            path,
            steps.len() + 1,
            format!(
                "header announces {} steps, found {}",
                head.steps,
                steps.len()
            ),
        ));
    }
    Ok(GenerationTrace {
        config: head.decoder,
        descriptor: head.descriptor,
        steps,
        terminated_by: head.terminated_by,
    })
}

// ---- series CSV ----

/// `# `-prefixed header lines, then `t,value,kind,n`.
pub fn render_series(header: &Header, series: &PdmSeries, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "# {}",
        serde_json::to_string(header).expect("serializable")
    )
    .unwrap();
    for (k, v) in extra {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    out.push_str("t,value,kind,n\n");
    for p in &series.entries {
        writeln!(out, "{},{:?},{},{}", p.t, p.value, series.kind, p.n).unwrap();
    }
    out
}

pub fn read_series(path: &Path) -> CliResult<PdmSeries> {
    let text = read(path)?;
    let mut kind: Option<SeriesKind> = None;
    let mut entries = Vec::new();
    let mut seen_columns = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_columns {
            if line.trim() != "t,value,kind,n" {
                return Err(parse_err(path, ln, "expected column header t,value,kind,n"));
            }
            seen_columns = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 4 columns, got {}", cols.len()),
            ));
        }
        let t = cols[0].parse().map_err(|e| parse_err(path, ln, e))?;
        let value = cols[1].parse().map_err(|e| parse_err(path, ln, e))?;
        let k: SeriesKind = cols[2].parse().map_err(|e: Error| parse_err(path, ln, e))?;
        let n = cols[3].parse().map_err(|e| parse_err(path, ln, e))?;
        if kind.is_some_and(|prev| prev != k) {
            return Err(parse_err(path, ln, "mixed series kinds"));
        }
        kind = Some(k);
        entries.push(SeriesPoint { t, value, n });
    }
    if !seen_columns {
        return Err(parse_err(path, 1, "no column header"));
    }
    PdmSeries::new(kind.unwrap_or(SeriesKind::Hellinger), entries)
        .map_err(|e| parse_err(path, 0, e))
}

// ---- corpora ----

fn id_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "id must be a string or number, got {other}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    #[serde(deserialize_with = "id_string")]
    pub image_id: String,
    pub text: String,
}

pub fn read_captions(path: &Path) -> CliResult<Vec<CaptionLine>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, c)| c).collect())
}

/// `{"image_id": ["category", ...]}`; numeric ids are accepted.
pub fn read_annotations(path: &Path) -> CliResult<AnnotationSet> {
    let raw: BTreeMap<String, BTreeSet<String>> = read_json(path)?;
    Ok(AnnotationSet(raw))
}

/// `{"category": ["synonym", ...]}`.
pub fn read_lexicon(path: &Path) -> CliResult<Lexicon> {
    let raw: BTreeMap<String, Vec<String>> = read_json(path)?;
    Ok(Lexicon::new(raw)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestion {
    #[serde(deserialize_with = "id_string")]
    pub id: String,
    pub split: PopeSplit,
    pub object: String,
    pub gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeResponse {
    #[serde(deserialize_with = "id_string")]
    pub id: String,
    pub text: String,
}

pub fn render_report(header: &Header, report: &impl Serialize) -> String {
    let doc = serde_json::json!({ "header": header, "report": report });
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}

/// JSON Lines with a header object first.
pub fn render_jsonl<T: Serialize>(header: &impl Serialize, rows: &[T]) -> String {
    let mut out = String::new();
    push_line(&mut out, header);
    for r in rows {
        push_line(&mut out, r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdec_core::mock::{open_mock_session, MockScenario};

    fn header() -> Header {
        Header::new("test", &RunConfig::default())
    }

    #[test]
    fn trace_round_trip() {
        let mut s = open_mock_session(3, 8, &MockScenario::Uniform).unwrap();
        let cfg = DecoderConfig {
            max_tokens: 5,
            ..DecoderConfig::default()
        };
        let trace = gdec_core::decode(&mut s, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.trace.jsonl");
        write_atomic(&path, render_trace(&header(), "x", &trace).as_bytes()).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);
    }

    #[test]
    fn truncated_trace_is_rejected() {
        let mut s = open_mock_session(3, 8, &MockScenario::Uniform).unwrap();
        let trace = gdec_core::decode(
            &mut s,
            &DecoderConfig {
                max_tokens: 3,
                ..DecoderConfig::default()
            },
        )
        .unwrap();
        let text = render_trace(&header(), "x", &trace);
        let cut: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, cut).unwrap();
        assert!(matches!(read_trace(&path), Err(CliError::Parse { .. })));
    }

    #[test]
    fn series_round_trip() {
        let series = PdmSeries::new(
            SeriesKind::Rank,
            vec![
                SeriesPoint {
                    t: 0,
                    value: 3.0,
                    n: 2,
                },
                SeriesPoint {
                    t: 1,
                    value: 0.1 + 0.2,
                    n: 1,
                },
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        fs::write(
            &path,
            render_series(&header(), &series, &[("note", "x".into())]),
        )
        .unwrap();
        assert_eq!(read_series(&path).unwrap(), series);
    }

    #[test]
    fn caption_ids_may_be_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"image_id\": 42, \"text\": \"a dog\"}\n\n{\"image_id\": \"x\", \"text\": \"\"}\n",
        )
        .unwrap();
        let caps = read_captions(&path).unwrap();
        assert_eq!(caps[0].image_id, "42");
        assert_eq!(caps[1].image_id, "x");
        fs::write(&path, "{\"image_id\": 1}\n").unwrap();
        assert!(matches!(
            read_captions(&path),
            Err(CliError::Parse { line: 1, .. })
        ));
    }
}
