//! Context-dependent decoding: M3ID, PMI and contrastive score adjustment,
//! greedy / multinomial selection and the generation loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{LogitFrame, ModelSession, SessionDescriptor, TokenId};
use crate::math;
use crate::pdm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Greedy,
    Multinomial,
    M3id,
    Pmi,
    Contrastive,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [
        DecoderKind::Greedy,
        DecoderKind::Multinomial,
        DecoderKind::M3id,
        DecoderKind::Pmi,
        DecoderKind::Contrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Greedy => "greedy",
            DecoderKind::Multinomial => "multinomial",
            DecoderKind::M3id => "m3id",
            DecoderKind::Pmi => "pmi",
            DecoderKind::Contrastive => "contrastive",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder kind {s:?}")))
    }
}

/// Decoder settings. Fields that do not apply to `kind` are still range
/// checked by [`DecoderConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Confidence threshold: the M3ID correction applies only while the top
    /// conditioned probability is strictly below `alpha`.
    pub alpha: f64,
    /// Forgetting rate per generated token.
    pub lambda: f64,
    /// Offset added to the step index in the forgetting schedule.
    pub t0: u32,
    /// PMI prior weight.
    pub mu: f64,
    /// PMI entropy threshold, nats.
    pub tau: f64,
    /// Contrastive amplification.
    pub xi: f64,
    /// Contrastive plausibility fraction.
    pub psi: f64,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
    /// Bound on |l_c - l_u| per token before scaling; `None` disables it.
    pub diff_clamp: Option<f64>,
    /// Upper bound on (1 - γ)/γ; `None` leaves it unbounded.
    pub coef_cap: Option<f64>,
}

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_LAMBDA: f64 = 0.02;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_DIFF_CLAMP: f64 = 20.0;

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Greedy,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            t0: 0,
            mu: 1.0,
            tau: 2.0,
            xi: 1.0,
            psi: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
            diff_clamp: Some(DEFAULT_DIFF_CLAMP),
            coef_cap: None,
        }
    }
}

impl DecoderConfig {
    pub fn with_kind(kind: DecoderKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, value: f64, want: &str) -> Error {
            Error::Config(format!("{field} = {value} outside {want}"))
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(bad("alpha", self.alpha, "[0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", self.lambda, "[0, inf)"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(bad("mu", self.mu, "[0, inf)"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(bad("tau", self.tau, "[0, inf)"));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(bad("xi", self.xi, "[0, inf)"));
        }
        if !(self.psi > 0.0 && self.psi <= 1.0) {
            return Err(bad("psi", self.psi, "(0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(bad("temperature", self.temperature, "(0, inf)"));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config(String::from("max_tokens must be positive")));
        }
        if let Some(c) = self.diff_clamp {
            if !(c > 0.0) {
                return Err(bad("diff_clamp", c, "(0, inf]"));
            }
        }
        if let Some(c) = self.coef_cap {
            if !(c > 0.0) {
                return Err(bad("coef_cap", c, "(0, inf]"));
            }
        }
        Ok(())
    }

    /// Mixing coefficient γ_t = exp(-λ (t + t0)).
    pub fn gamma(&self, t: u32) -> f64 {
        math::exp(-self.lambda * (t as f64 + self.t0 as f64))
    }

    /// Correction multiplier min((1 - γ_t)/γ_t, coef_cap).
    pub fn correction_coefficient(&self, t: u32) -> f64 {
        // (1 - γ)/γ = e^{λ(t+t0)} - 1
        let k = math::expm1(self.lambda * (t as f64 + self.t0 as f64));
        match self.coef_cap {
            Some(cap) => k.min(cap),
            None => k,
        }
    }
}

/// Result of one M3ID adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct M3idStep {
    pub scores: Vec<f64>,
    pub gamma: f64,
    pub gate_active: bool,
}

/// M3ID score adjustment for step `t`.
///
/// Returns `l_c + g·κ·clamp(l_c - l_u)` where the gate `g` is on iff
/// `max_k l_c,k < ln α` and `κ = min((1-γ_t)/γ_t, coef_cap)`.
pub fn m3id_adjust(frame: &LogitFrame, t: u32, cfg: &DecoderConfig) -> Result<Vec<f64>> {
    m3id_step(frame, t, cfg).map(|s| s.scores)
}

pub fn m3id_step(frame: &LogitFrame, t: u32, cfg: &DecoderConfig) -> Result<M3idStep> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!(
            "alpha = {} outside [0, 1]",
            cfg.alpha
        )));
    }
    let lc = frame.conditioned();
    let lu = frame.unconditioned();
    let gamma = cfg.gamma(t);
    let top = lc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gate_active = top < math::ln(cfg.alpha);
    if !gate_active {
        return Ok(M3idStep {
            scores: lc.to_vec(),
            gamma,
            gate_active,
        });
    }
    let kappa = cfg.correction_coefficient(t);
    let scores = lc
        .iter()
        .zip(lu)
        .map(|(&c, &u)| {
            if c == f64::NEG_INFINITY {
                return c;
            }
            let mut diff = c - u;
            if let Some(bound) = cfg.diff_clamp {
                diff = diff.clamp(-bound, bound);
            }
            // κ may overflow to +inf far into long generations; a zero
            // difference still contributes nothing.
            if diff == 0.0 {
                c
            } else {
                c + kappa * diff
            }
        })
        .collect();
    Ok(M3idStep {
        scores,
        gamma,
        gate_active,
    })
}

/// PMI decoding: `l_c - μ·1[H(softmax(l_c)) ≥ τ]·l_u`, entropy in nats.
pub fn pmi_adjust(frame: &LogitFrame, cfg: &DecoderConfig) -> Vec<f64> {
    let lc = frame.conditioned();
    let entropy = entropy_of_log_probs(lc);
    if !(entropy >= cfg.tau) || cfg.mu == 0.0 {
        return lc.to_vec();
    }
    lc.iter()
        .zip(frame.unconditioned())
        .map(|(&c, &u)| {
            if c == f64::NEG_INFINITY {
                c
            } else {
                c - cfg.mu * u
            }
        })
        .collect()
}

/// Contrastive decoding with a plausibility constraint: tokens with
/// `l_c ≥ ln ψ + max l_c` score `(1+ξ)·l_c - ξ·l_u`, all others `-inf`.
pub fn contrastive_adjust(frame: &LogitFrame, cfg: &DecoderConfig) -> Vec<f64> {
    let lc = frame.conditioned();
    let top = lc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = math::ln(cfg.psi) + top;
    lc.iter()
        .zip(frame.unconditioned())
        .map(|(&c, &u)| {
            if c == f64::NEG_INFINITY || c < cutoff {
                f64::NEG_INFINITY
            } else if cfg.xi == 0.0 {
                c
            } else {
                (1.0 + cfg.xi) * c - cfg.xi * u
            }
        })
        .collect()
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Domain(String::from(
            "entropy of a vector with negative or non-finite entries",
        )));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "entropy of an unnormalized vector (sum = {total})"
        )));
    }
    Ok(dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * math::ln(p))
        .sum())
}

fn entropy_of_log_probs(lp: &[f64]) -> f64 {
    let p = math::softmax(lp);
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * math::ln(x))
        .sum()
}

/// Argmax with ties going to the lowest id.
pub fn select_greedy(scores: &[f64]) -> Result<TokenId> {
    math::argmax(scores)
        .map(|i| i as TokenId)
        .ok_or(Error::DegenerateFrame)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Samples from `softmax(scores / temperature)` by inverse CDF over ascending
/// token ids.
pub fn select_multinomial(
    scores: &[f64],
    temperature: f64,
    rng: &mut impl RngCore,
) -> Result<TokenId> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature = {temperature} must be positive"
        )));
    }
    let top = math::argmax(scores).ok_or(Error::DegenerateFrame)?;
    let max = scores[top];
    if max == f64::INFINITY {
        return Ok(top as TokenId);
    }
    let weights: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY || s.is_nan() {
                0.0
            } else {
                math::exp((s - max) / temperature)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = unit_f64(rng) * total;
    let mut cumulative = 0.0;
    let mut last_positive = top;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cumulative += w;
            last_positive = i;
            if target < cumulative {
                return Ok(i as TokenId);
            }
        }
    }
    Ok(last_positive as TokenId)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub token: TokenId,
    pub gamma: f64,
    pub gate_active: bool,
    pub adjusted_argmax_differs: bool,
    pub pdm_h: f64,
    pub pdm_r: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Eos,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub config: DecoderConfig,
    pub descriptor: SessionDescriptor,
    pub steps: Vec<StepRecord>,
    pub terminated_by: Termination,
}

impl GenerationTrace {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token).collect()
    }
}

/// A failed decode together with the steps completed before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub error: Error,
    pub partial: Vec<StepRecord>,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.partial.len())
    }
}

impl core::error::Error for DecodeError {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for DecodeError {
    fn from(error: Error) -> Self {
        Self {
            error,
            partial: Vec::new(),
        }
    }
}

/// Which frames the loop requests from the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameMode {
    /// Conditioned and unconditioned frames per step.
    #[default]
    Paired,
    /// Only context-masked frames; the prior stands in for both halves, so
    /// every adjuster reduces to selection on the prior.
    PriorOnly,
}

/// Everything the loop knows about a step, handed to observers.
pub struct StepView<'a> {
    pub prefix: &'a [TokenId],
    pub frame: &'a LogitFrame,
    pub scores: &'a [f64],
    pub record: &'a StepRecord,
}

/// Adjusted scores for one step, plus the M3ID bookkeeping.
pub fn adjust(frame: &LogitFrame, t: u32, cfg: &DecoderConfig) -> Result<M3idStep> {
    match cfg.kind {
        DecoderKind::Greedy | DecoderKind::Multinomial => Ok(M3idStep {
            scores: frame.conditioned().to_vec(),
            gamma: 1.0,
            gate_active: false,
        }),
        DecoderKind::M3id => m3id_step(frame, t, cfg),
        DecoderKind::Pmi => Ok(M3idStep {
            scores: pmi_adjust(frame, cfg),
            gamma: 1.0,
            gate_active: false,
        }),
        DecoderKind::Contrastive => Ok(M3idStep {
            scores: contrastive_adjust(frame, cfg),
            gamma: 1.0,
            gate_active: false,
        }),
    }
}

/// Runs the generation loop from `[bos]`.
pub fn decode<S: ModelSession + ?Sized>(
    session: &mut S,
    cfg: &DecoderConfig,
) -> core::result::Result<GenerationTrace, DecodeError> {
    let bos = session.descriptor().bos_id;
    decode_from(session, cfg, &[bos], FrameMode::Paired)
}

/// Runs the generation loop continuing `prefix` (which starts with BOS).
pub fn decode_from<S: ModelSession + ?Sized>(
    session: &mut S,
    cfg: &DecoderConfig,
    prefix: &[TokenId],
    mode: FrameMode,
) -> core::result::Result<GenerationTrace, DecodeError> {
    decode_observed(session, cfg, prefix, mode, |_| Ok(()))
}

/// Generation loop with a per-step observer. Step indices continue from the
/// prefix: the first generated token has `t = prefix.len() - 1`.
///
/// Each record's PDM values compare the distribution actually decoded from
/// (the renormalized adjusted scores) against the unconditioned prior; for
/// greedy and multinomial that is the raw frame.
pub fn decode_observed<S, F>(
    session: &mut S,
    cfg: &DecoderConfig,
    prefix: &[TokenId],
    mode: FrameMode,
    mut observer: F,
) -> core::result::Result<GenerationTrace, DecodeError>
where
    S: ModelSession + ?Sized,
    F: FnMut(&StepView<'_>) -> Result<()>,
{
    cfg.validate()?;
    let descriptor = session.descriptor().clone();
    descriptor.validate()?;
    if prefix.is_empty() {
        return Err(Error::Config(String::from("decode prefix must start with BOS")).into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens: Vec<TokenId> = prefix.to_vec();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut terminated_by = Termination::Budget;

    macro_rules! fail {
        ($e:expr) => {
            return Err(DecodeError {
                error: $e,
                partial: steps,
            })
        };
    }

    for _ in 0..cfg.max_tokens {
        let t = (tokens.len() - 1) as u32;
        let frame = match mode {
            FrameMode::Paired => session.paired_frame(&tokens),
            FrameMode::PriorOnly => session
                .frame_for(&tokens, false)
                .and_then(|u| LogitFrame::new(u.clone(), u)),
        };
        let frame = match frame {
            Ok(f) => f,
            Err(e) => fail!(e),
        };
        if frame.vocab_size() != descriptor.vocab_size {
            fail!(Error::Session(format!(
                "frame has {} entries, session vocabulary is {}",
                frame.vocab_size(),
                descriptor.vocab_size
            )));
        }
        let adjusted = match adjust(&frame, t, cfg) {
            Ok(a) => a,
            Err(e) => fail!(e),
        };
        let token = match cfg.kind {
            DecoderKind::Multinomial => {
                select_multinomial(&adjusted.scores, cfg.temperature, &mut rng)
            }
            _ => select_greedy(&adjusted.scores),
        };
        let token = match token {
            Ok(tok) => tok,
            Err(e) => fail!(e),
        };
        let conditioned_argmax = math::argmax(frame.conditioned()).map(|i| i as TokenId);
        let adjusted_argmax = math::argmax(&adjusted.scores).map(|i| i as TokenId);
        let effective = effective_frame(&frame, &adjusted.scores);
        let record = StepRecord {
            t,
            token,
            gamma: if cfg.kind == DecoderKind::M3id {
                adjusted.gamma
            } else {
                1.0
            },
            gate_active: adjusted.gate_active,
            adjusted_argmax_differs: conditioned_argmax != adjusted_argmax,
            pdm_h: pdm::pdm_h(&effective),
            pdm_r: pdm::pdm_r(&effective),
        };
        let view = StepView {
            prefix: &tokens,
            frame: &frame,
            scores: &adjusted.scores,
            record: &record,
        };
        if let Err(e) = observer(&view) {
            fail!(e);
        }
        steps.push(record);
        tokens.push(token);
        if token == descriptor.eos_id {
            terminated_by = Termination::Eos;
            break;
        }
    }

    Ok(GenerationTrace {
        config: cfg.clone(),
        descriptor,
        steps,
        terminated_by,
    })
}

/// Frame pairing the renormalized adjusted scores with the prior. Scores that
/// cannot be renormalized (a `+inf` entry) collapse onto their argmax.
fn effective_frame(frame: &LogitFrame, scores: &[f64]) -> LogitFrame {
    if scores == frame.conditioned() {
        return frame.clone();
    }
    let conditioned = if scores.contains(&f64::INFINITY) {
        let hot: Vec<f64> = scores
            .iter()
            .map(|&s| {
                if s == f64::INFINITY {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        math::log_normalize(&hot)
    } else {
        math::log_normalize(scores)
    };
    LogitFrame::new(conditioned, frame.unconditioned().to_vec()).unwrap_or_else(|_| frame.clone())
}
