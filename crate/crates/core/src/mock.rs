//! Deterministic in-process sessions built from named scenarios.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{check_log_probs, logprob_rows, ModelSession, SessionDescriptor, TokenId};
use crate::math;
use crate::simulator::{SimSession, SimSpec};

/// Logit tables indexed by step: row `min(t, rows - 1)` serves step `t`.
/// Rows hold logits and are normalized when the session opens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedTable {
    #[serde(with = "logprob_rows")]
    pub conditioned: Vec<Vec<f64>>,
    #[serde(with = "logprob_rows")]
    pub unconditioned: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadingScenario {
    pub lambda_star: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_grounded_fraction")]
    pub grounded_fraction: f64,
}

fn default_grounded_fraction() -> f64 {
    SimSpec::default().grounded_fraction
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockScenario {
    /// Every entry `-ln V` in both halves.
    #[default]
    Uniform,
    FixedTable(FixedTable),
    /// The simulator with seeds derived from the session seed.
    Fading(FadingScenario),
}

pub const MOCK_BOS: TokenId = 0;
pub const MOCK_EOS: TokenId = 1;

enum Backend {
    Uniform(Vec<f64>),
    Table {
        conditioned: Vec<Vec<f64>>,
        unconditioned: Vec<Vec<f64>>,
    },
    Fading(SimSession),
}

/// Mock session; BOS is token 0 and EOS token 1.
pub struct MockSession {
    descriptor: SessionDescriptor,
    backend: Backend,
    cache: BTreeMap<(Vec<TokenId>, bool), Vec<f64>>,
}

impl core::fmt::Debug for MockSession {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("MockSession")
            .field("descriptor", &self.descriptor)
            .finish_non_exhaustive()
    }
}

/// Opens a mock session; frames depend only on `(seed, scenario, prefix)`.
pub fn open_mock_session(
    seed: u64,
    vocab_size: usize,
    scenario: &MockScenario,
) -> Result<MockSession> {
    if vocab_size < 2 {
        return Err(Error::Config(format!(
            "mock vocabulary must hold at least 2 tokens, got {vocab_size}"
        )));
    }
    let (backend, name) = match scenario {
        MockScenario::Uniform => (
            Backend::Uniform(vec![-math::ln(vocab_size as f64); vocab_size]),
            format!("mock-uniform(seed={seed})"),
        ),
        MockScenario::FixedTable(table) => {
            let conditioned = normalize_rows(&table.conditioned, vocab_size, "conditioned")?;
            let unconditioned = normalize_rows(&table.unconditioned, vocab_size, "unconditioned")?;
            (
                Backend::Table {
                    conditioned,
                    unconditioned,
                },
                format!("mock-table(seed={seed})"),
            )
        }
        MockScenario::Fading(f) => {
            let spec = SimSpec {
                vocab_size,
                lambda_star: f.lambda_star,
                noise_sigma: f.noise_sigma,
                grounded_fraction: f.grounded_fraction,
                horizon: u32::MAX,
                ..SimSpec::default()
            };
            let (image_seed, prior_seed, _) = crate::simulator::run_seeds(seed, 0);
            let session = SimSession::new(spec.with_seeds(image_seed, prior_seed))
                .map_err(|e| Error::Config(format!("fading scenario: {e}")))?;
            let name = format!("mock-fading(seed={seed},lambda*={})", f.lambda_star);
            (Backend::Fading(session), name)
        }
    };
    Ok(MockSession {
        descriptor: SessionDescriptor {
            vocab_size,
            bos_id: MOCK_BOS,
            eos_id: MOCK_EOS,
            model_name: name,
        },
        backend,
        cache: BTreeMap::new(),
    })
}

fn normalize_rows(rows: &[Vec<f64>], vocab_size: usize, side: &str) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("fixed table has no {side} rows")));
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != vocab_size {
                return Err(Error::Config(format!(
                    "{side} row {i} has {} entries, vocabulary is {vocab_size}",
                    row.len()
                )));
            }
            let out = math::log_normalize(row);
            check_log_probs(&out).map_err(|e| Error::Config(format!("{side} row {i}: {e}")))?;
            Ok(out)
        })
        .collect()
}

impl MockSession {
    /// The simulator behind a fading scenario.
    pub fn simulator(&self) -> Option<&SimSession> {
        match &self.backend {
            Backend::Fading(s) => Some(s),
            _ => None,
        }
    }

    fn compute(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>> {
        let t = prefix.len().saturating_sub(1);
        match &mut self.backend {
            Backend::Uniform(row) => Ok(row.clone()),
            Backend::Table {
                conditioned,
                unconditioned,
            } => {
                let rows = if include_context {
                    conditioned
                } else {
                    unconditioned
                };
                Ok(rows[t.min(rows.len() - 1)].clone())
            }
            Backend::Fading(sim) => sim.frame_for(prefix, include_context),
        }
    }
}

impl ModelSession for MockSession {
    fn descriptor(&self) -> &SessionDescriptor {
        &self.descriptor
    }

    fn frame_for(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>> {
        if let Some(hit) = self.cache.get(&(prefix.to_vec(), include_context)) {
            return Ok(hit.clone());
        }
        let out = self.compute(prefix, include_context)?;
        self.cache
            .insert((prefix.to_vec(), include_context), out.clone());
        Ok(out)
    }
}
