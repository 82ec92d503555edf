//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! writes its output to `cfg.out` (or stdout where noted).

use std::collections::BTreeMap;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use gdec_core::decoders::DecoderKind;
use gdec_core::metrics::{self, CaptionRecord, PopeAnswer};
use gdec_core::mock::open_mock_session;
use gdec_core::pdm::{self, PdmSeries, SeriesKind};
use gdec_core::preference::{build_pairs, PairRequest, SentenceRule};
use gdec_core::simulator::run_experiment;
use gdec_core::{Error, GenerationTrace, ModelSession};
use serde::Serialize;

use crate::bridge::{self, Endpoint};
use crate::config::{simulate_arms, Item, RunConfig, SourceKind};
use crate::error::{CliError, CliResult};
use crate::formats::{self, Header};

fn items(cfg: &RunConfig) -> Vec<Item> {
    if cfg.items.is_empty() {
        vec![Item {
            id: "0".into(),
            ..Item::default()
        }]
    } else {
        cfg.items.clone()
    }
}

/// Opens the configured source for item `idx`. Mock sessions are seeded
/// with `seed + idx`.
pub fn open_session(cfg: &RunConfig, idx: usize, item: &Item) -> CliResult<Box<dyn ModelSession>> {
    match cfg.source.kind {
        SourceKind::Mock => Ok(Box::new(open_mock_session(
            cfg.seed.wrapping_add(idx as u64),
            cfg.source.vocab_size,
            &cfg.source.scenario,
        )?)),
        SourceKind::Bridge => {
            let endpoint: Endpoint = cfg
                .source
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::Config("bridge source needs an endpoint".into()))?
                .parse()?;
            Ok(Box::new(bridge::open_bridge_session(
                &endpoint,
                &item.prompt,
                &item.context,
            )?))
        }
    }
}

/// Writes to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => formats::write_atomic(p, text.as_bytes()),
        None => {
            use io::Write;
            io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

fn sidecar(out: Option<&Path>, ext: &str) -> Option<PathBuf> {
    out.map(|p| p.with_extension(ext))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Decodes every item and writes `<out>/<id>.trace.jsonl`.
pub fn decode(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("traces"));
    let header = Header::new("decode", cfg);
    let mut written = Vec::new();
    for (idx, item) in items(cfg).iter().enumerate() {
        let mut session = open_session(cfg, idx, item)?;
        let trace = gdec_core::decode(&mut *session, &cfg.decoder).map_err(|e| {
            log::error!(
                "item {}: decode failed after {} steps",
                item.id,
                e.partial.len()
            );
            e.error
        })?;
        log::info!(
            "item {}: {} tokens, ended by {:?}",
            item.id,
            trace.steps.len(),
            trace.terminated_by
        );
        let path = dir.join(format!("{}.trace.jsonl", file_safe(&item.id)));
        formats::write_atomic(
            &path,
            formats::render_trace(&header, &item.id, &trace).as_bytes(),
        )?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct ChairOutput {
    chair: metrics::ChairReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<metrics::RunComparison>,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{what} path is not configured")).into())
}

fn load_captions(path: &Path, lexicon: &metrics::Lexicon) -> CliResult<Vec<CaptionRecord>> {
    Ok(formats::read_captions(path)?
        .into_iter()
        .map(|c| CaptionRecord::new(c.image_id, c.text, lexicon))
        .collect())
}

pub fn eval_chair(cfg: &RunConfig) -> CliResult<()> {
    let c = &cfg.chair;
    let lexicon = formats::read_lexicon(required(&c.lexicon, "chair.lexicon")?)?;
    let annotations = formats::read_annotations(required(&c.annotations, "chair.annotations")?)?;
    annotations.validate(&lexicon)?;
    let captions = load_captions(required(&c.captions, "chair.captions")?, &lexicon)?;
    let report = metrics::chair(&captions, &annotations, c.mode)?;
    let comparison = match &c.compare {
        Some(path) => {
            let other = load_captions(path, &lexicon)?;
            Some(metrics::compare_runs(
                &metrics::hallucination_flags(&captions, &annotations)?,
                &metrics::hallucination_flags(&other, &annotations)?,
            )?)
        }
        None => None,
    };
    let header = Header::new("eval-chair", cfg);
    emit(
        cfg.out.as_deref(),
        &formats::render_report(
            &header,
            &ChairOutput {
                chair: report,
                comparison,
            },
        ),
    )
}

pub fn eval_pope(cfg: &RunConfig) -> CliResult<()> {
    let p = &cfg.pope;
    let questions: Vec<formats::PopeQuestion> =
        formats::read_jsonl(required(&p.questions, "pope.questions")?)?
            .into_iter()
            .map(|(_, q)| q)
            .collect();
    let mut responses: BTreeMap<String, String> = BTreeMap::new();
    for (line, r) in
        formats::read_jsonl::<formats::PopeResponse>(required(&p.answers, "pope.answers")?)?
    {
        if responses.insert(r.id.clone(), r.text).is_some() {
            return Err(Error::Data(format!("answer {} repeated (line {line})", r.id)).into());
        }
    }
    let mut answers = Vec::with_capacity(questions.len());
    for q in questions {
        let response = responses
            .remove(&q.id)
            .ok_or_else(|| Error::Data(format!("no answer for question {}", q.id)))?;
        answers.push(PopeAnswer {
            question_id: q.id,
            split: q.split,
            gold: q.gold,
            response,
        });
    }
    if let Some(id) = responses.keys().next() {
        return Err(Error::Data(format!("answer {id} has no question")).into());
    }
    let report = metrics::pope_score(&answers, p.parse_rule);
    emit(
        cfg.out.as_deref(),
        &formats::render_report(&Header::new("eval-pope", cfg), &report),
    )
}

fn load_traces(cfg: &RunConfig) -> CliResult<Vec<GenerationTrace>> {
    if cfg.pdm.traces.is_empty() {
        return Err(Error::Config("no trace files given".into()).into());
    }
    cfg.pdm
        .traces
        .iter()
        .map(|p| formats::read_trace(p))
        .collect()
}

fn check_kind(kind: SeriesKind) -> CliResult<()> {
    match kind {
        SeriesKind::Hellinger | SeriesKind::Rank => Ok(()),
        other => Err(Error::Config(format!(
            "traces record hellinger and rank only, not {other}"
        ))
        .into()),
    }
}

pub fn pdm_trace(cfg: &RunConfig) -> CliResult<PdmSeries> {
    check_kind(cfg.pdm.kind)?;
    let traces = load_traces(cfg)?;
    let series = pdm::aggregate_traces(&traces, cfg.pdm.kind)?;
    let extra = [("traces", traces.len().to_string())];
    emit(
        cfg.out.as_deref(),
        &formats::render_series(&Header::new("pdm-trace", cfg), &series, &extra),
    )?;
    Ok(series)
}

#[derive(Serialize)]
struct FitOutput {
    kind: SeriesKind,
    fit: pdm::DecayFit,
}

pub fn estimate_lambda(cfg: &RunConfig) -> CliResult<pdm::DecayFit> {
    let series = match &cfg.pdm.series {
        Some(path) => formats::read_series(path)?,
        None => {
            check_kind(cfg.pdm.kind)?;
            pdm::aggregate_traces(&load_traces(cfg)?, cfg.pdm.kind)?
        }
    };
    if series.entries.iter().all(|p| p.value == 0.0) {
        return Err(CliError::Degenerate(format!(
            "all {} series values are zero",
            series.len()
        )));
    }
    let fit = pdm::estimate_decay_rate(&series).map_err(|e| match e {
        Error::Domain(_) | Error::InsufficientData { .. } => CliError::Degenerate(e.to_string()),
        other => other.into(),
    })?;
    let header = Header::new("estimate-lambda", cfg);
    let extra = [
        ("lambda_hat", format!("{:?}", fit.lambda_hat)),
        ("intercept", format!("{:?}", fit.intercept)),
        ("r_squared", format!("{:?}", fit.r_squared)),
    ];
    match cfg.out.as_deref() {
        Some(out) => {
            formats::write_atomic(
                out,
                formats::render_report(
                    &header,
                    &FitOutput {
                        kind: series.kind,
                        fit,
                    },
                )
                .as_bytes(),
            )?;
            let csv = sidecar(Some(out), "csv").expect("out given");
            formats::write_atomic(
                &csv,
                formats::render_series(&header, &series, &extra).as_bytes(),
            )?;
        }
        None => emit(None, &formats::render_series(&header, &series, &extra))?,
    }
    Ok(fit)
}

#[derive(Serialize)]
struct PairsHeader<'a> {
    #[serde(flatten)]
    header: Header,
    pairs: usize,
    dropped: u32,
    skipped: &'a [gdec_core::preference::SkippedPair],
}

pub fn gen_prefs(cfg: &RunConfig) -> CliResult<gdec_core::preference::PairBatch> {
    if cfg.decoder.kind != DecoderKind::M3id {
        return Err(Error::Config(format!(
            "gen-prefs decodes preferred samples with m3id; decoder.kind is {}",
            cfg.decoder.kind
        ))
        .into());
    }
    let rule = SentenceRule::new(cfg.prefs.terminators.iter().copied());
    let items = items(cfg);
    let mut sessions = items
        .iter()
        .enumerate()
        .map(|(i, item)| open_session(cfg, i, item))
        .collect::<CliResult<Vec<_>>>()?;
    let mut requests: Vec<PairRequest<'_>> = items
        .iter()
        .zip(sessions.iter_mut())
        .map(|(item, s)| PairRequest {
            image_ref: item.id.clone(),
            prompt: item.prompt.clone(),
            session: &mut **s,
        })
        .collect();
    let batch = build_pairs(&mut requests, &cfg.decoder, &cfg.prefs.rejected, &rule)?;
    log::info!(
        "{} pairs, {} dropped, {} skipped",
        batch.pairs.len(),
        batch.dropped,
        batch.skipped.len()
    );
    let header = PairsHeader {
        header: Header::new("gen-prefs", cfg),
        pairs: batch.pairs.len(),
        dropped: batch.dropped,
        skipped: &batch.skipped,
    };
    emit(
        cfg.out.as_deref(),
        &formats::render_jsonl(&header, &batch.pairs),
    )?;
    Ok(batch)
}

pub fn simulate(cfg: &RunConfig) -> CliResult<gdec_core::simulator::ExperimentReport> {
    let arms = simulate_arms(cfg);
    let report = run_experiment(&cfg.simulate.spec, &arms, cfg.simulate.n_runs, cfg.seed)?;
    let header = Header::new("simulate", cfg);
    emit(
        cfg.out.as_deref(),
        &formats::render_report(&header, &report),
    )?;
    if let Some(csv_path) = sidecar(cfg.out.as_deref(), "csv") {
        let mut csv = String::from("arm,t,runs,mean_pdm_h,mean_pdm_r,objects,hallucinated\n");
        for arm in &report.arms {
            for p in &arm.positions {
                csv.push_str(&format!(
                    "{},{},{},{:?},{:?},{},{}\n",
                    arm.label, p.t, p.runs, p.mean_pdm_h, p.mean_pdm_r, p.objects, p.hallucinated
                ));
            }
        }
        formats::write_atomic(&csv_path, csv.as_bytes())?;
    }
    Ok(report)
}

/// Serves the first configured mock session over stdin/stdout.
pub fn serve_mock(cfg: &RunConfig) -> CliResult<()> {
    let item = items(cfg).remove(0);
    let mut session = open_mock_session(cfg.seed, cfg.source.vocab_size, &cfg.source.scenario)?;
    let stats = bridge::serve(&mut session, BufReader::new(io::stdin()), io::stdout())
        .map_err(|e| CliError::io("<stdio>", e))?;
    log::info!(
        "served {} frames for {} ({} errors)",
        stats.frames,
        item.id,
        stats.errors
    );
    Ok(())
}
