//! Paired next-token log-probability frames and the session capability that
//! produces them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub type TokenId = u32;

/// Maximum |logsumexp| accepted for a frame vector.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Conditioned (`l_c`, with visual context) and unconditioned (`l_u`, context
/// masked) natural-log next-token probabilities for one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFrame {
    #[serde(with = "logprobs")]
    conditioned: Vec<f64>,
    #[serde(with = "logprobs")]
    unconditioned: Vec<f64>,
}

impl LogitFrame {
    /// Builds a frame from already normalized log-probabilities.
    pub fn new(conditioned: Vec<f64>, unconditioned: Vec<f64>) -> Result<Self> {
        if conditioned.len() != unconditioned.len() {
            return Err(Error::Domain(format!(
                "frame length mismatch: conditioned {} vs unconditioned {}",
                conditioned.len(),
                unconditioned.len()
            )));
        }
        if conditioned.len() < 2 {
            return Err(Error::Domain(format!(
                "frame vocabulary must hold at least 2 tokens, got {}",
                conditioned.len()
            )));
        }
        check_log_probs(&conditioned).map_err(|e| Error::Domain(format!("conditioned: {e}")))?;
        check_log_probs(&unconditioned)
            .map_err(|e| Error::Domain(format!("unconditioned: {e}")))?;
        Ok(Self {
            conditioned,
            unconditioned,
        })
    }

    /// Normalizes arbitrary logits (finite or `-inf`) into a frame.
    pub fn from_logits(conditioned: &[f64], unconditioned: &[f64]) -> Result<Self> {
        Self::new(
            math::log_normalize(conditioned),
            math::log_normalize(unconditioned),
        )
    }

    pub fn conditioned(&self) -> &[f64] {
        &self.conditioned
    }

    pub fn unconditioned(&self) -> &[f64] {
        &self.unconditioned
    }

    pub fn vocab_size(&self) -> usize {
        self.conditioned.len()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.conditioned, self.unconditioned)
    }
}

/// Checks the log-probability vector contract: entries ≤ 0 (or `-inf`), at
/// least one finite entry, logsumexp within [`NORMALIZATION_TOLERANCE`] of 0.
/// Returns a human-readable reason on failure.
pub fn check_log_probs(xs: &[f64]) -> core::result::Result<(), String> {
    let mut finite = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        if x.is_nan() || x == f64::INFINITY {
            return Err(format!("entry {i} is {x}"));
        }
        if x.is_finite() {
            finite += 1;
            // Normalized vectors may carry rounding noise just above 0.
            if x > NORMALIZATION_TOLERANCE {
                return Err(format!("entry {i} = {x} is a positive log-probability"));
            }
        }
    }
    if finite == 0 {
        return Err(String::from("no finite entry"));
    }
    let lse = math::log_sum_exp(xs);
    if lse.abs() > NORMALIZATION_TOLERANCE {
        return Err(format!("logsumexp = {lse:e} exceeds tolerance"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub vocab_size: usize,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub model_name: String,
}

impl SessionDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.bos_id == self.eos_id {
            return Err(Error::Config(format!(
                "bos and eos share token id {}",
                self.bos_id
            )));
        }
        for (name, id) in [("bos", self.bos_id), ("eos", self.eos_id)] {
            if id as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "{name} id {id} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// A single-consumer model session holding the prompt and visual context as
/// opaque state.
///
/// `frame_for` must be deterministic: identical `(prefix, include_context)`
/// requests within one session return bitwise-identical vectors.
pub trait ModelSession {
    fn descriptor(&self) -> &SessionDescriptor;

    /// Next-token log-probabilities after `prefix` (which starts with BOS),
    /// with or without the visual context.
    fn frame_for(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>>;

    /// Both halves of the frame for `prefix`.
    fn paired_frame(&mut self, prefix: &[TokenId]) -> Result<LogitFrame> {
        let conditioned = self.frame_for(prefix, true)?;
        let unconditioned = self.frame_for(prefix, false)?;
        LogitFrame::new(conditioned, unconditioned)
    }
}

impl<S: ModelSession + ?Sized> ModelSession for &mut S {
    fn descriptor(&self) -> &SessionDescriptor {
        (**self).descriptor()
    }

    fn frame_for(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>> {
        (**self).frame_for(prefix, include_context)
    }
}

impl<S: ModelSession + ?Sized> ModelSession for alloc::boxed::Box<S> {
    fn descriptor(&self) -> &SessionDescriptor {
        (**self).descriptor()
    }

    fn frame_for(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>> {
        (**self).frame_for(prefix, include_context)
    }
}

/// Serde adapter for log-probability vectors: finite values as JSON numbers,
/// `-inf` as the literal string `"-inf"`.
pub mod logprobs {
    use alloc::vec::Vec;
    use core::fmt;

    use serde::de::{self, SeqAccess, Visitor};
    use serde::ser::SerializeSeq;
    use serde::{Deserializer, Serializer};

    pub const NEG_INF_LITERAL: &str = "-inf";

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            if x == f64::NEG_INFINITY {
                seq.serialize_element(NEG_INF_LITERAL)?;
            } else {
                seq.serialize_element(&x)?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        d.deserialize_seq(LogProbsVisitor)
    }

    struct LogProb(f64);

    impl<'de> de::Deserialize<'de> for LogProb {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            d.deserialize_any(LogProbVisitor)
        }
    }

    struct LogProbVisitor;

    impl Visitor<'_> for LogProbVisitor {
        type Value = LogProb;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a number or the string \"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<LogProb, E> {
            Ok(LogProb(v))
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<LogProb, E> {
            Ok(LogProb(v as f64))
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<LogProb, E> {
            Ok(LogProb(v as f64))
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<LogProb, E> {
            if v == NEG_INF_LITERAL {
                Ok(LogProb(f64::NEG_INFINITY))
            } else {
                Err(E::invalid_value(de::Unexpected::Str(v), &self))
            }
        }
    }

    struct LogProbsVisitor;

    impl<'de> Visitor<'de> for LogProbsVisitor {
        type Value = Vec<f64>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a sequence of log-probabilities")
        }

        fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Vec<f64>, A::Error> {
            let mut out = Vec::with_capacity(seq.size_hint().unwrap_or(0));
            while let Some(LogProb(x)) = seq.next_element()? {
                out.push(x);
            }
            Ok(out)
        }
    }
}

/// Same as [`logprobs`] for a table of rows.
pub mod logprob_rows {
    use alloc::vec::Vec;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Row(#[serde(with = "super::logprobs")] Vec<f64>);

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(rows.iter().map(|r| Row(r.clone())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows: Vec<Row> = Vec::deserialize(d)?;
        Ok(rows.into_iter().map(|r| r.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_unnormalized_vectors() {
        let err = LogitFrame::new(vec![-0.1, -0.1], vec![-0.69, -0.7]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn rejects_length_mismatch_and_tiny_vocab() {
        let half = core::f64::consts::LN_2;
        assert!(LogitFrame::new(vec![-half, -half], vec![0.0]).is_err());
        assert!(LogitFrame::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn accepts_masked_entries() {
        let f = LogitFrame::new(vec![0.0, f64::NEG_INFINITY], vec![0.0, f64::NEG_INFINITY]);
        assert!(f.is_ok());
        assert!(LogitFrame::new(vec![f64::NEG_INFINITY; 2], vec![0.0, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn descriptor_validation() {
        let mut d = SessionDescriptor {
            vocab_size: 4,
            bos_id: 0,
            eos_id: 1,
            model_name: "m".into(),
        };
        assert!(d.validate().is_ok());
        d.eos_id = 0;
        assert!(d.validate().is_err());
        d.eos_id = 4;
        assert!(d.validate().is_err());
    }

    #[test]
    fn neg_inf_round_trips_through_json() {
        let f = LogitFrame::from_logits(&[0.0, f64::NEG_INFINITY, 1.0], &[0.0, 0.0, 0.0]).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"-inf\""));
        let back: LogitFrame = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }
}
