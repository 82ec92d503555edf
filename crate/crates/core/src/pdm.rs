//! Prompt-dependency measures (PDM): how far the conditioned next-token
//! distribution sits from the context-masked prior, plus the log-linear
//! estimator for the forgetting rate of a PDM curve.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::decoders::GenerationTrace;
use crate::error::{Error, Result};
use crate::frame::LogitFrame;
use crate::math;

const NORMALIZATION_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Hellinger,
    TotalVariation,
    /// KL(p ‖ q), with `p` the conditioned distribution.
    Kl,
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(i) = p.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!(
            "{name}[{i}] = {} is not a probability",
            p[i]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_SLACK {
        return Err(Error::Domain(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Distance between two probability vectors.
pub fn distance(p: &[f64], q: &[f64], kind: DistanceKind) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(distance_unchecked(p, q, kind))
}

fn distance_unchecked(p: &[f64], q: &[f64], kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::Hellinger => {
            let sq: f64 = p
                .iter()
                .zip(q)
                .map(|(&a, &b)| {
                    let d = math::sqrt(a) - math::sqrt(b);
                    d * d
                })
                .sum();
            // rounding can push the sum a hair above 2 for disjoint supports
            math::sqrt(0.5 * sq).min(1.0)
        }
        DistanceKind::TotalVariation => {
            let s: f64 = p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum();
            (0.5 * s).min(1.0)
        }
        DistanceKind::Kl => {
            let mut total = 0.0;
            for (&a, &b) in p.iter().zip(q) {
                if a == 0.0 {
                    continue;
                }
                if b == 0.0 {
                    return f64::INFINITY;
                }
                total += a * math::ln(a / b);
            }
            total.max(0.0)
        }
    }
}

/// Hellinger distance between the two halves of a frame.
pub fn pdm_h(frame: &LogitFrame) -> f64 {
    let p = math::softmax(frame.conditioned());
    let q = math::softmax(frame.unconditioned());
    distance_unchecked(&p, &q, DistanceKind::Hellinger)
}

/// Any supported distance between the two halves of a frame.
pub fn pdm(frame: &LogitFrame, kind: DistanceKind) -> f64 {
    let p = math::softmax(frame.conditioned());
    let q = math::softmax(frame.unconditioned());
    distance_unchecked(&p, &q, kind)
}

/// Rank (1 = top) of the conditioned argmax under the unconditioned
/// distribution. Ties on either side resolve to the lowest token id.
pub fn pdm_r(frame: &LogitFrame) -> u32 {
    let lc = frame.conditioned();
    let lu = frame.unconditioned();
    let best = math::argmax(lc).unwrap_or(0);
    let pivot = lu[best];
    let ahead = lu
        .iter()
        .enumerate()
        .filter(|&(i, &u)| u > pivot || (u == pivot && i < best))
        .count();
    ahead as u32 + 1
}

/// What a [`PdmSeries`] measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    Hellinger,
    TotalVariation,
    Kl,
    Rank,
}

impl SeriesKind {
    pub fn name(self) -> &'static str {
        match self {
            SeriesKind::Hellinger => "hellinger",
            SeriesKind::TotalVariation => "total_variation",
            SeriesKind::Kl => "kl",
            SeriesKind::Rank => "rank",
        }
    }
}

impl fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for SeriesKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hellinger" | "h" | "pdm_h" => Ok(SeriesKind::Hellinger),
            "total_variation" | "tv" => Ok(SeriesKind::TotalVariation),
            "kl" => Ok(SeriesKind::Kl),
            "rank" | "r" | "pdm_r" => Ok(SeriesKind::Rank),
            other => Err(Error::Config(format!("unknown series kind {other:?}"))),
        }
    }
}

impl From<DistanceKind> for SeriesKind {
    fn from(k: DistanceKind) -> Self {
        match k {
            DistanceKind::Hellinger => SeriesKind::Hellinger,
            DistanceKind::TotalVariation => SeriesKind::TotalVariation,
            DistanceKind::Kl => SeriesKind::Kl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: u32,
    pub value: f64,
    /// Number of traces averaged into this point.
    pub n: u32,
}

/// Per-position PDM values with strictly increasing `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmSeries {
    pub kind: SeriesKind,
    pub entries: Vec<SeriesPoint>,
}

impl PdmSeries {
    pub fn new(kind: SeriesKind, entries: Vec<SeriesPoint>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(Error::Domain(
                "series positions must be strictly increasing".into(),
            ));
        }
        Ok(Self { kind, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }
}

/// The per-step PDM values recorded in one trace. Traces store Hellinger
/// and rank measures only.
pub fn trace_series(trace: &GenerationTrace, kind: SeriesKind) -> Result<PdmSeries> {
    if trace.steps.is_empty() {
        return Err(Error::Data("empty trace has no PDM series".into()));
    }
    let pick: fn(&crate::decoders::StepRecord) -> f64 = match kind {
        SeriesKind::Hellinger => |s| s.pdm_h,
        SeriesKind::Rank => |s| s.pdm_r as f64,
        other => {
            return Err(Error::Config(format!(
                "traces do not record {other} values"
            )))
        }
    };
    PdmSeries::new(
        kind,
        trace
            .steps
            .iter()
            .map(|s| SeriesPoint {
                t: s.t,
                value: pick(s),
                n: 1,
            })
            .collect(),
    )
}

/// Positions reached by fewer than this fraction of the inputs are dropped
/// when aggregating.
pub const MIN_COVERAGE: f64 = 0.25;

/// Averages several series position by position, dropping positions covered
/// by fewer than [`MIN_COVERAGE`] of the inputs. Input counts `n` weight the
/// average, so pre-aggregated series combine correctly.
pub fn aggregate_series(series: &[PdmSeries]) -> Result<PdmSeries> {
    let Some(first) = series.first() else {
        return Err(Error::Data("nothing to aggregate".into()));
    };
    let kind = first.kind;
    if let Some(s) = series.iter().find(|s| s.kind != kind) {
        return Err(Error::Data(format!(
            "cannot aggregate {} with {} series",
            kind, s.kind
        )));
    }
    let total: u64 = series
        .iter()
        .map(|s| s.entries.iter().map(|e| e.n).max().unwrap_or(1).max(1) as u64)
        .sum();
    let mut acc: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
    for s in series {
        for e in &s.entries {
            let slot = acc.entry(e.t).or_insert((0.0, 0));
            slot.0 += e.value * e.n as f64;
            slot.1 += e.n;
        }
    }
    let entries = acc
        .into_iter()
        .filter(|&(_, (_, n))| (n as f64) >= MIN_COVERAGE * total as f64)
        .map(|(t, (sum, n))| SeriesPoint {
            t,
            value: sum / n as f64,
            n,
        })
        .collect();
    PdmSeries::new(kind, entries)
}

/// Aggregated series straight from traces.
pub fn aggregate_traces(traces: &[GenerationTrace], kind: SeriesKind) -> Result<PdmSeries> {
    let series = traces
        .iter()
        .map(|t| trace_series(t, kind))
        .collect::<Result<Vec<_>>>()?;
    aggregate_series(&series)
}

/// Log-linear least-squares fit `ln value ≈ intercept - lambda_hat·t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub lambda_hat: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 8;

pub fn estimate_decay_rate(series: &PdmSeries) -> Result<DecayFit> {
    let n = series.entries.len();
    if n < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_POINTS,
            got: n,
        });
    }
    if let Some((i, e)) = series
        .entries
        .iter()
        .enumerate()
        .find(|(_, e)| !(e.value > 0.0) || !e.value.is_finite())
    {
        return Err(Error::Domain(format!(
            "series value at index {i} (t = {}) is {}, need a positive finite value",
            e.t, e.value
        )));
    }
    let xs: Vec<f64> = series.entries.iter().map(|e| e.t as f64).collect();
    let ys: Vec<f64> = series.entries.iter().map(|e| math::ln(e.value)).collect();
    let nf = n as f64;
    let mean_x = xs.iter().sum::<f64>() / nf;
    let mean_y = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(&ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 || ss_res <= f64::EPSILON * syy {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    Ok(DecayFit {
        lambda_hat: -slope,
        intercept,
        r_squared,
        points: n,
    })
}
