//! Preference pairs for multi-modal DPO and the loss itself.
//!
//! A preferred continuation is decoded with M3ID. Its first sentence is then
//! appended to the prompt, and the rejected continuation is decoded from the
//! context-masked model alone. Both continuations therefore share the
//! grounded first sentence and diverge afterwards.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoders::{decode, decode_from, DecoderConfig, DecoderKind, FrameMode};
use crate::error::{Error, Result};
use crate::frame::{ModelSession, TokenId};
use crate::math;

/// Token ids whose detokenized form ends a sentence ('.', '!' or '?').
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceRule {
    pub terminators: BTreeSet<TokenId>,
}

impl SentenceRule {
    pub fn new(terminators: impl IntoIterator<Item = TokenId>) -> Self {
        Self {
            terminators: terminators.into_iter().collect(),
        }
    }

    /// Length of the first sentence including its terminator.
    pub fn first_sentence_len(&self, tokens: &[TokenId]) -> Option<usize> {
        tokens
            .iter()
            .position(|t| self.terminators.contains(t))
            .map(|i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub preferred_decoder: DecoderConfig,
    pub rejected_decoder: DecoderConfig,
    pub first_sentence_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub image_ref: String,
    pub prompt: String,
    /// Token prefix the continuations extend (BOS).
    pub prompt_tokens: Vec<TokenId>,
    /// y_w: the full M3ID continuation.
    pub preferred_tokens: Vec<TokenId>,
    /// y_l: the shared first sentence followed by the prior-only continuation.
    pub rejected_tokens: Vec<TokenId>,
    pub provenance: PairProvenance,
}

impl PreferencePair {
    /// Checks the shared first-sentence prefix and that the two differ.
    pub fn check(&self) -> Result<()> {
        let n = self.provenance.first_sentence_len;
        if n == 0
            || self.preferred_tokens.len() < n
            || self.rejected_tokens.len() < n
            || self.preferred_tokens[..n] != self.rejected_tokens[..n]
        {
            return Err(Error::Data(format!(
                "pair for {} does not share its {n}-token first sentence",
                self.image_ref
            )));
        }
        if self.preferred_tokens == self.rejected_tokens {
            return Err(Error::Data(format!(
                "pair for {} has identical continuations",
                self.image_ref
            )));
        }
        Ok(())
    }
}

/// One image/prompt to build a pair from.
pub struct PairRequest<'a> {
    pub image_ref: String,
    pub prompt: String,
    pub session: &'a mut dyn ModelSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub image_ref: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<PreferencePair>,
    /// Pairs whose continuations coincided after the shared prefix.
    pub dropped: u32,
    pub skipped: Vec<SkippedPair>,
}

pub fn build_pairs(
    requests: &mut [PairRequest<'_>],
    cfg_preferred: &DecoderConfig,
    cfg_rejected: &DecoderConfig,
    rule: &SentenceRule,
) -> Result<PairBatch> {
    if cfg_preferred.kind != DecoderKind::M3id {
        return Err(Error::Config(format!(
            "preferred continuations must be decoded with m3id, got {}",
            cfg_preferred.kind
        )));
    }
    cfg_preferred.validate()?;
    cfg_rejected.validate()?;
    if rule.terminators.is_empty() {
        return Err(Error::Config(
            "sentence rule has no terminator tokens".into(),
        ));
    }
    let mut batch = PairBatch::default();
    for req in requests.iter_mut() {
        let bos = req.session.descriptor().bos_id;
        let preferred = decode(&mut *req.session, cfg_preferred)
            .map_err(|e| e.error)?
            .tokens();
        let Some(n) = rule.first_sentence_len(&preferred) else {
            log::info!(
                "skipping {}: preferred continuation has no sentence end",
                req.image_ref
            );
            batch.skipped.push(SkippedPair {
                image_ref: req.image_ref.clone(),
                reason: String::from("preferred continuation has no sentence terminator"),
            });
            continue;
        };
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(bos);
        prefix.extend_from_slice(&preferred[..n]);
        let continuation = decode_from(
            &mut *req.session,
            cfg_rejected,
            &prefix,
            FrameMode::PriorOnly,
        )
        .map_err(|e| e.error)?
        .tokens();
        if continuation[..] == preferred[n..] {
            batch.dropped += 1;
            continue;
        }
        let mut rejected = preferred[..n].to_vec();
        rejected.extend(continuation);
        let pair = PreferencePair {
            image_ref: req.image_ref.clone(),
            prompt: req.prompt.clone(),
            prompt_tokens: alloc::vec![bos],
            preferred_tokens: preferred,
            rejected_tokens: rejected,
            provenance: PairProvenance {
                preferred_decoder: cfg_preferred.clone(),
                rejected_decoder: cfg_rejected.clone(),
                first_sentence_len: n,
            },
        };
        pair.check()?;
        batch.pairs.push(pair);
    }
    Ok(batch)
}

/// Sequence log-probabilities under the policy and the frozen reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoInputs {
    pub logp_theta_w: f64,
    pub logp_ref_w: f64,
    pub logp_theta_l: f64,
    pub logp_ref_l: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoGradient {
    pub logp_theta_w: f64,
    pub logp_ref_w: f64,
    pub logp_theta_l: f64,
    pub logp_ref_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoOutput {
    pub loss: f64,
    pub grad: DpoGradient,
}

/// `-ln σ(β((θ_w - ref_w) - (θ_l - ref_l)))` and its analytic gradient.
pub fn dpo_loss(inp: &DpoInputs) -> Result<DpoOutput> {
    let all = [
        inp.logp_theta_w,
        inp.logp_ref_w,
        inp.logp_theta_l,
        inp.logp_ref_l,
        inp.beta,
    ];
    if all.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("DPO inputs must be finite".into()));
    }
    if !(inp.beta > 0.0) {
        return Err(Error::Domain(format!(
            "beta = {} must be positive",
            inp.beta
        )));
    }
    let margin =
        inp.beta * ((inp.logp_theta_w - inp.logp_ref_w) - (inp.logp_theta_l - inp.logp_ref_l));
    let loss = math::softplus(-margin);
    let g = inp.beta * math::sigmoid(-margin);
    Ok(DpoOutput {
        loss,
        grad: DpoGradient {
            logp_theta_w: -g,
            logp_ref_w: g,
            logp_theta_l: g,
            logp_ref_l: -g,
        },
    })
}

/// Bradley-Terry probability that `w` is preferred over `l`.
pub fn bt_preference(reward_w: f64, reward_l: f64) -> f64 {
    math::sigmoid(reward_w - reward_l)
}

/// Sum of the chosen tokens' log-probabilities over a continuation; the
/// prompt is excluded and no length normalization is applied.
pub fn sequence_log_prob(step_log_probs: &[Vec<f64>], continuation: &[TokenId]) -> Result<f64> {
    if step_log_probs.len() != continuation.len() {
        return Err(Error::Domain(format!(
            "{} frames for {} tokens",
            step_log_probs.len(),
            continuation.len()
        )));
    }
    step_log_probs
        .iter()
        .zip(continuation)
        .map(|(row, &tok)| {
            row.get(tok as usize)
                .copied()
                .ok_or_else(|| Error::Domain(format!("token {tok} outside frame")))
        })
        .sum()
}
