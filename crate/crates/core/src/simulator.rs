//! Synthetic fading-memory language model with a known grounded distribution.
//!
//! Prior logits `z_l` and grounded logits `z_v = z_l + d` are hash-derived
//! from the seeds and the last two prefix tokens. The image term `d` boosts
//! the object tokens grounded in the image and suppresses the other object
//! tokens. The observed conditioned frame mixes the two in logit space,
//! `normalize(γ*_t·z_v + (1 - γ*_t)·z_l + noise)` with `γ*_t = exp(-λ*·t)`,
//! while the unconditioned frame is `normalize(z_l + noise)`. The same noise
//! realization enters both halves.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoders::{decode_observed, DecoderConfig, FrameMode, StepView};
use crate::error::{Error, Result};
use crate::frame::{LogitFrame, ModelSession, SessionDescriptor, TokenId};
use crate::math;

/// Logit assigned to BOS and EOS by the prior so generations run to the
/// horizon.
const CONTROL_TOKEN_LOGIT: f64 = -8.0;
const NO_TOKEN: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub vocab_size: usize,
    /// True forgetting rate λ*.
    pub lambda_star: f64,
    pub image_seed: u64,
    pub prior_seed: u64,
    /// Fraction of the object tokens grounded in each image.
    pub grounded_fraction: f64,
    /// Object tokens; empty means the default block `[V/4, V/4 + 3V/8)`.
    pub object_token_ids: Vec<TokenId>,
    /// Standard deviation of the shared logit noise.
    pub noise_sigma: f64,
    pub horizon: u32,
    /// Magnitude of the image term on object tokens.
    pub grounding_strength: f64,
    /// Standard deviation of the prior logits.
    pub prior_scale: f64,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            lambda_star: 0.02,
            image_seed: 0,
            prior_seed: 0,
            grounded_fraction: 0.25,
            object_token_ids: Vec::new(),
            noise_sigma: 0.0,
            horizon: 200,
            grounding_strength: 1.5,
            prior_scale: 1.0,
            bos_id: 0,
            eos_id: 1,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "simulator vocabulary must hold at least 4 tokens, got {}",
                self.vocab_size
            )));
        }
        self.descriptor().validate()?;
        if !(self.lambda_star >= 0.0 && self.lambda_star.is_finite()) {
            return Err(Error::Config(format!("lambda_star = {}", self.lambda_star)));
        }
        if !(self.grounded_fraction > 0.0 && self.grounded_fraction < 1.0) {
            return Err(Error::Config(format!(
                "grounded_fraction = {} outside (0, 1)",
                self.grounded_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma = {}", self.noise_sigma)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        for (name, v) in [
            ("grounding_strength", self.grounding_strength),
            ("prior_scale", self.prior_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v}")));
            }
        }
        let objects = self.objects();
        if objects.len() < 2 {
            return Err(Error::Config("need at least two object tokens".into()));
        }
        for &o in &objects {
            if o as usize >= self.vocab_size || o == self.bos_id || o == self.eos_id {
                return Err(Error::Config(format!(
                    "object token {o} is outside the vocabulary or a control token"
                )));
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> SessionDescriptor {
        SessionDescriptor {
            vocab_size: self.vocab_size,
            bos_id: self.bos_id,
            eos_id: self.eos_id,
            model_name: format!("fading-sim(lambda*={})", self.lambda_star),
        }
    }

    /// Sorted, de-duplicated object tokens.
    pub fn objects(&self) -> Vec<TokenId> {
        if self.object_token_ids.is_empty() {
            let start = self.vocab_size / 4;
            let len = (3 * self.vocab_size / 8).max(2);
            (start..start + len).map(|v| v as TokenId).collect()
        } else {
            let set: BTreeSet<TokenId> = self.object_token_ids.iter().copied().collect();
            set.into_iter().collect()
        }
    }

    /// Object tokens grounded in the image `image_seed` selects.
    pub fn grounded_objects(&self) -> Vec<TokenId> {
        let mut objects = self.objects();
        let n = objects.len();
        let want = ((self.grounded_fraction * n as f64 + 0.5) as usize).clamp(1, n - 1);
        // Partial Fisher-Yates driven by the image seed.
        for i in 0..want {
            let r = hash(&[self.image_seed, 0x6f626a, i as u64]);
            let j = i + (r % (n - i) as u64) as usize;
            objects.swap(i, j);
        }
        let mut g = objects[..want].to_vec();
        g.sort_unstable();
        g
    }

    pub fn with_seeds(&self, image_seed: u64, prior_seed: u64) -> Self {
        Self {
            image_seed,
            prior_seed,
            ..self.clone()
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |h, &w| splitmix(h ^ splitmix(w)))
}

/// Uniform in (0, 1].
fn unit(h: u64) -> f64 {
    ((h >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal by Box-Muller from a key.
fn gaussian(key: u64) -> f64 {
    let u1 = unit(splitmix(key ^ 0x5555));
    let u2 = unit(splitmix(key ^ 0xaaaa));
    math::sqrt(-2.0 * math::ln(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// One simulator step: the observed frame and the grounded oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub observed: LogitFrame,
    /// `normalize(z_v)`: the non-fading grounded distribution.
    pub oracle_grounded: Vec<f64>,
}

struct Logits {
    prior: Vec<f64>,
    image: Vec<f64>,
    noise: Vec<f64>,
}

fn logits(spec: &SimSpec, grounded: &[TokenId], objects: &[TokenId], prefix: &[TokenId]) -> Logits {
    let v = spec.vocab_size;
    let last = prefix.last().map_or(NO_TOKEN, |&x| x as u64);
    let before = if prefix.len() >= 2 {
        prefix[prefix.len() - 2] as u64
    } else {
        NO_TOKEN
    };
    let mut prior: Vec<f64> = (0..v as u64)
        .map(|tok| spec.prior_scale * gaussian(hash(&[spec.prior_seed, 0x7072, before, last, tok])))
        .collect();
    prior[spec.bos_id as usize] = CONTROL_TOKEN_LOGIT;
    prior[spec.eos_id as usize] = CONTROL_TOKEN_LOGIT;

    let mut image = vec![0.0; v];
    for &o in objects {
        image[o as usize] = if grounded.binary_search(&o).is_ok() {
            spec.grounding_strength
        } else {
            -spec.grounding_strength
        };
    }

    let noise = if spec.noise_sigma > 0.0 {
        let prefix_key = prefix.iter().fold(
            hash(&[spec.prior_seed, spec.image_seed, 0x6e6f]),
            |h, &t| splitmix(h ^ t as u64),
        );
        (0..v as u64)
            .map(|tok| spec.noise_sigma * gaussian(hash(&[prefix_key, tok])))
            .collect()
    } else {
        vec![0.0; v]
    };
    Logits {
        prior,
        image,
        noise,
    }
}

fn mixed_frame(spec: &SimSpec, l: &Logits, t: u32) -> Result<SimFrame> {
    let gamma = math::exp(-spec.lambda_star * t as f64);
    let grounded: Vec<f64> = l.prior.iter().zip(&l.image).map(|(p, d)| p + d).collect();
    let conditioned: Vec<f64> = grounded
        .iter()
        .zip(&l.prior)
        .zip(&l.noise)
        .map(|((zv, zl), n)| gamma * zv + (1.0 - gamma) * zl + n)
        .collect();
    let unconditioned: Vec<f64> = l.prior.iter().zip(&l.noise).map(|(zl, n)| zl + n).collect();
    Ok(SimFrame {
        observed: LogitFrame::from_logits(&conditioned, &unconditioned)?,
        oracle_grounded: math::log_normalize(&grounded),
    })
}

/// Frame for `prefix` at step `t`.
pub fn frame_at(spec: &SimSpec, prefix: &[TokenId], t: u32) -> Result<SimFrame> {
    spec.validate()?;
    if t > spec.horizon {
        return Err(Error::Domain(format!(
            "step {t} beyond simulator horizon {}",
            spec.horizon
        )));
    }
    let objects = spec.objects();
    let grounded = spec.grounded_objects();
    mixed_frame(spec, &logits(spec, &grounded, &objects, prefix), t)
}

/// [`ModelSession`] over the simulator; the step index is `prefix.len() - 1`.
#[derive(Debug, Clone)]
pub struct SimSession {
    spec: SimSpec,
    descriptor: SessionDescriptor,
    objects: Vec<TokenId>,
    grounded: Vec<TokenId>,
}

impl SimSession {
    pub fn new(spec: SimSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            descriptor: spec.descriptor(),
            objects: spec.objects(),
            grounded: spec.grounded_objects(),
            spec,
        })
    }

    pub fn spec(&self) -> &SimSpec {
        &self.spec
    }

    pub fn grounded_objects(&self) -> &[TokenId] {
        &self.grounded
    }

    pub fn is_object(&self, token: TokenId) -> bool {
        self.objects.binary_search(&token).is_ok()
    }

    pub fn is_hallucination(&self, token: TokenId) -> bool {
        self.is_object(token) && self.grounded.binary_search(&token).is_err()
    }

    pub fn step(&self, prefix: &[TokenId]) -> Result<SimFrame> {
        let t = prefix.len().saturating_sub(1) as u32;
        if t > self.spec.horizon {
            return Err(Error::Session(format!(
                "step {t} beyond simulator horizon {}",
                self.spec.horizon
            )));
        }
        let l = logits(&self.spec, &self.grounded, &self.objects, prefix);
        mixed_frame(&self.spec, &l, t)
    }
}

impl ModelSession for SimSession {
    fn descriptor(&self) -> &SessionDescriptor {
        &self.descriptor
    }

    fn frame_for(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>> {
        let (c, u) = self.step(prefix)?.observed.into_parts();
        Ok(if include_context { c } else { u })
    }

    fn paired_frame(&mut self, prefix: &[TokenId]) -> Result<LogitFrame> {
        Ok(self.step(prefix)?.observed)
    }
}

/// Statistics for one generated position, pooled over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub t: u32,
    /// Runs that reached this position.
    pub runs: u32,
    pub mean_pdm_h: f64,
    pub mean_pdm_r: f64,
    /// Runs that emitted an object token here.
    pub objects: u32,
    /// Runs that emitted an ungrounded object token here.
    pub hallucinated: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    pub config: DecoderConfig,
    pub steps: u64,
    pub object_tokens: u64,
    pub hallucinated_tokens: u64,
    /// Ungrounded object tokens over all object tokens.
    pub hallucination_rate: f64,
    pub first_quartile_hallucination_rate: f64,
    pub last_quartile_hallucination_rate: f64,
    /// Mean per-step KL(oracle ‖ softmax(adjusted scores)); `None` when some
    /// step put zero mass on an oracle-supported token.
    pub mean_oracle_kl: Option<f64>,
    pub positions: Vec<PositionStats>,
}

impl ArmReport {
    /// Mean PDM-H over positions `lo..=hi`, weighted by runs.
    pub fn mean_pdm_h(&self, lo: u32, hi: u32) -> f64 {
        let (sum, n) = self
            .positions
            .iter()
            .filter(|p| p.t >= lo && p.t <= hi)
            .fold((0.0, 0u64), |(s, n), p| {
                (s + p.mean_pdm_h * p.runs as f64, n + p.runs as u64)
            });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Hallucination rate among object tokens at positions `lo..hi`.
    pub fn hallucination_rate_between(&self, lo: u32, hi: u32) -> f64 {
        rate_between(&self.positions, lo, hi)
    }
}

fn rate_between(positions: &[PositionStats], lo: u32, hi: u32) -> f64 {
    let (h, o) = positions
        .iter()
        .filter(|p| p.t >= lo && p.t < hi)
        .fold((0u64, 0u64), |(h, o), p| {
            (h + p.hallucinated as u64, o + p.objects as u64)
        });
    if o == 0 {
        0.0
    } else {
        h as f64 / o as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub n_runs: u32,
    /// Template spec; per-run image and prior seeds derive from the master
    /// seed.
    pub spec: SimSpec,
    pub arms: Vec<ArmReport>,
}

impl ExperimentReport {
    pub fn arm(&self, label: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.label == label)
    }
}

/// Seeds for run `r` under `master`: (image, prior, decoder).
pub fn run_seeds(master: u64, r: u32) -> (u64, u64, u64) {
    let base = hash(&[master, r as u64]);
    (splitmix(base ^ 1), splitmix(base ^ 2), splitmix(base ^ 3))
}

#[derive(Default, Clone)]
struct PositionAcc {
    runs: u32,
    pdm_h: f64,
    pdm_r: f64,
    objects: u32,
    hallucinated: u32,
}

/// Runs every decoder config `n_runs` times on freshly seeded simulator
/// instances and reports per-position PDM, hallucination rates and the
/// distance of the decoded distribution from the grounded oracle.
pub fn run_experiment(
    spec: &SimSpec,
    configs: &[DecoderConfig],
    n_runs: u32,
    master_seed: u64,
) -> Result<ExperimentReport> {
    spec.validate()?;
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let mut arms = Vec::with_capacity(configs.len());
    for (idx, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        let mut arm_cfg = cfg.clone();
        arm_cfg.max_tokens = cfg.max_tokens.min(spec.horizon);
        let horizon = arm_cfg.max_tokens;
        let mut acc = vec![PositionAcc::default(); horizon as usize];
        let (mut steps, mut objects, mut hallucinated) = (0u64, 0u64, 0u64);
        let mut kl_sum = 0.0;
        let mut kl_finite = true;

        for r in 0..n_runs {
            let (image_seed, prior_seed, decoder_seed) = run_seeds(master_seed, r);
            let mut session = SimSession::new(spec.with_seeds(image_seed, prior_seed))?;
            let oracle_session = session.clone();
            let mut run_cfg = arm_cfg.clone();
            run_cfg.seed = hash(&[cfg.seed, decoder_seed]);
            let bos = spec.bos_id;
            let observer = |view: &StepView<'_>| -> Result<()> {
                let oracle = oracle_session.step(view.prefix)?.oracle_grounded;
                let decoded = math::log_normalize(view.scores);
                let kl = oracle_kl(&oracle, &decoded);
                if kl.is_finite() {
                    kl_sum += kl;
                } else {
                    kl_finite = false;
                }
                let slot = &mut acc[(view.record.t) as usize];
                slot.runs += 1;
                slot.pdm_h += view.record.pdm_h;
                slot.pdm_r += view.record.pdm_r as f64;
                let tok = view.record.token;
                if oracle_session.is_object(tok) {
                    slot.objects += 1;
                    objects += 1;
                    if oracle_session.is_hallucination(tok) {
                        slot.hallucinated += 1;
                        hallucinated += 1;
                    }
                }
                steps += 1;
                Ok(())
            };
            decode_observed(&mut session, &run_cfg, &[bos], FrameMode::Paired, observer)
                .map_err(|e| e.error)?;
        }

        let positions: Vec<PositionStats> = acc
            .into_iter()
            .enumerate()
            .filter(|(_, a)| a.runs > 0)
            .map(|(t, a)| PositionStats {
                t: t as u32,
                runs: a.runs,
                mean_pdm_h: a.pdm_h / a.runs as f64,
                mean_pdm_r: a.pdm_r / a.runs as f64,
                objects: a.objects,
                hallucinated: a.hallucinated,
            })
            .collect();
        let quarter = horizon.div_ceil(4);
        arms.push(ArmReport {
            label: arm_label(cfg, idx, configs),
            config: arm_cfg,
            steps,
            object_tokens: objects,
            hallucinated_tokens: hallucinated,
            hallucination_rate: if objects == 0 {
                0.0
            } else {
                hallucinated as f64 / objects as f64
            },
            first_quartile_hallucination_rate: rate_between(&positions, 0, quarter),
            last_quartile_hallucination_rate: rate_between(
                &positions,
                horizon.saturating_sub(quarter),
                horizon,
            ),
            mean_oracle_kl: (kl_finite && steps > 0).then(|| kl_sum / steps as f64),
            positions,
        });
    }
    Ok(ExperimentReport {
        master_seed,
        n_runs,
        spec: spec.clone(),
        arms,
    })
}

/// Kind name, suffixed with the arm index when several arms share a kind.
fn arm_label(cfg: &DecoderConfig, idx: usize, all: &[DecoderConfig]) -> String {
    let shared = all.iter().filter(|c| c.kind == cfg.kind).count() > 1;
    if shared {
        format!("{}#{idx}", cfg.kind)
    } else {
        String::from(cfg.kind.name())
    }
}

/// KL(p ‖ q) for two normalized log-probability vectors.
pub fn oracle_kl(oracle: &[f64], decoded: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&lo, &lq) in oracle.iter().zip(decoded) {
        if lo == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        total += math::exp(lo) * (lo - lq);
    }
    total
}
