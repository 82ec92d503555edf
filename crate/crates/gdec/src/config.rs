//! Run configuration: defaults, then a JSON file, then command-line flags
//! expressed as dotted-path overrides.

use std::path::{Path, PathBuf};

use gdec_core::decoders::DecoderKind;
use gdec_core::metrics::{CountMode, ParseRule};
use gdec_core::mock::MockScenario;
use gdec_core::pdm::SeriesKind;
use gdec_core::simulator::SimSpec;
use gdec_core::{DecoderConfig, Error};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Mock,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// `stdio:CMD ARGS` or `tcp:HOST:PORT`; bridge sources only.
    pub endpoint: Option<String>,
    pub vocab_size: usize,
    pub scenario: MockScenario,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            kind: SourceKind::Mock,
            endpoint: None,
            vocab_size: 32,
            scenario: MockScenario::Uniform,
        }
    }
}

/// One image/prompt pair to decode. `context` is an opaque reference passed
/// to the bridge.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Item {
    pub id: String,
    pub prompt: String,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChairSection {
    pub captions: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub mode: CountMode,
    /// Second captions file; adds a per-caption comparison to the report.
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopeSection {
    pub questions: Option<PathBuf>,
    pub answers: Option<PathBuf>,
    pub parse_rule: ParseRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdmSection {
    pub traces: Vec<PathBuf>,
    /// Series CSV read by `estimate-lambda` instead of traces.
    pub series: Option<PathBuf>,
    pub kind: SeriesKind,
}

impl Default for PdmSection {
    fn default() -> Self {
        Self {
            traces: Vec::new(),
            series: None,
            kind: SeriesKind::Hellinger,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefsSection {
    /// Token ids that end a sentence.
    pub terminators: Vec<u32>,
    /// Decoder for the prior-only continuation of the rejected sample.
    pub rejected: DecoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub spec: SimSpec,
    pub n_runs: u32,
    /// Decoder arms; empty means greedy and the top-level decoder as m3id.
    pub arms: Vec<DecoderConfig>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            spec: SimSpec::default(),
            n_runs: 100,
            arms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: mock sessions and simulator runs derive from it.
    pub seed: u64,
    pub decoder: DecoderConfig,
    pub source: SourceConfig,
    pub out: Option<PathBuf>,
    pub items: Vec<Item>,
    pub chair: ChairSection,
    pub pope: PopeSection,
    pub pdm: PdmSection,
    pub prefs: PrefsSection,
    pub simulate: SimulateSection,
}

/// One `path = value` override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: Value,
}

impl Override {
    pub fn new(path: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            path: path.into(),
            value: value.into(),
        }
    }

    /// Parses `a.b.c=VALUE`; VALUE is read as JSON, falling back to a string.
    pub fn parse(s: &str) -> CliResult<Self> {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not PATH=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self::new(path.trim(), value))
    }
}

fn apply(root: &mut Value, ov: &Override) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = ov.path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path {:?}", ov.path)).into());
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    for p in parents {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path {:?} crosses a non-object", ov.path))
        })?;
        node = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| {
        Error::Config(format!("override path {:?} crosses a non-object", ov.path))
    })?;
    obj.insert(last.to_string(), ov.value.clone());
    Ok(())
}

/// Resolves a config: defaults, then `file`, then `overrides` in order.
pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> CliResult<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file_value: Value = serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        let file_cfg: RunConfig = serde_json::from_value(file_value)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        value = serde_json::to_value(file_cfg).expect("config serializes");
    }
    for ov in overrides {
        apply(&mut value, ov)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("resolved config: {e}")))?;
    cfg.decoder.validate()?;
    Ok(cfg)
}

/// Decoder arms for `simulate`.
pub fn simulate_arms(cfg: &RunConfig) -> Vec<DecoderConfig> {
    if !cfg.simulate.arms.is_empty() {
        return cfg.simulate.arms.clone();
    }
    let mut m3id = cfg.decoder.clone();
    m3id.kind = DecoderKind::M3id;
    vec![DecoderConfig::default(), m3id]
}
