//! Experiment drivers shared by the command-line tool and the acceptance
//! suite: training all stages, the ablation sweeps, and the end-to-end
//! measurements.

use std::time::Instant;

use serde::Serialize;

use crate::config::Config;
use crate::corpus::{
    generate_corpus, generate_sequence, render_sequence, split, Corpus, CorpusConfig, Event, PlacedEvent, SequenceRecord, Templates,
};
use crate::error::{invalid, Result};
use crate::eval::{extract_features, frechet_distance, variance_metric, Frechet, Source};
use crate::exec::par_map;
use crate::motion::{MotionSequence, Part, PartLayout};
use crate::pipeline::{throughput, BenchScope, DecodeMode, Generated, Pipeline};
use crate::pqvae::{diff_error, reconstruction_errors, train_pqvae, PqTrainReport, PqVae, PqVaeConfig};
use crate::predictor::{train_predictor, MaskSchedule, PeKind, Predictor, PredictorConfig, PredictorTrainReport};
use crate::refiner::{train_refiner, Refiner, RefinerTrainReport};
use crate::rng::stream_rng;

pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// The corpus for `seed` (overriding the configured corpus seed) and its split.
pub fn corpus_for(cfg: &Config, seed: u64) -> Result<(Corpus, Splits)> {
    let corpus = generate_corpus(&CorpusConfig {
        seed,
        ..cfg.corpus.clone()
    })?;
    let (train, val, test) = split(&corpus, cfg.split.fractions(), seed)?;
    Ok((corpus, Splits { train, val, test }))
}

/// Seed of sample `sample` for test condition `condition`.
pub fn sample_seed(seed: u64, condition: usize, sample: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((condition as u64) << 24)
        .wrapping_add(sample as u64)
}

pub struct Trained {
    pub pqvae: PqVae,
    pub pqvae_report: Option<PqTrainReport>,
    pub predictor: Predictor,
    pub predictor_report: PredictorTrainReport,
    pub refiner: Refiner,
    pub refiner_report: RefinerTrainReport,
}

impl Trained {
    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(self.pqvae.clone(), self.predictor.clone(), Some(self.refiner.clone()))
    }
}

/// Train the three stages in order; an already trained PQ-VAE may be reused.
pub fn train_all(cfg: &Config, splits: &Splits, seed: u64, pqvae: Option<PqVae>) -> Result<Trained> {
    let (pqvae, pqvae_report) = match pqvae {
        Some(p) => (p, None),
        None => {
            let (p, r) = train_pqvae(&splits.train, &splits.val, &cfg.pqvae, seed)?;
            (p, Some(r))
        }
    };
    let (predictor, predictor_report) = train_predictor(&pqvae, &splits.train, &splits.val, &cfg.predictor, seed)?;
    let (refiner, refiner_report) = train_refiner(&pqvae, &splits.train, &splits.val, &cfg.refiner, seed)?;
    Ok(Trained {
        pqvae,
        pqvae_report,
        predictor,
        predictor_report,
        refiner,
        refiner_report,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GSweepRow {
    pub codes: usize,
    pub groups: usize,
    pub err1: f64,
    pub err2: f64,
    pub unused_codes: usize,
    pub seconds: f64,
}

/// Train one PQ-VAE per (K, G) cell and measure test reconstruction errors.
pub fn g_sweep(cfg: &Config, splits: &Splits, seed: u64) -> Result<Vec<(GSweepRow, PqVae)>> {
    let mut out = Vec::new();
    for &codes in &cfg.ablation.codes {
        for &groups in &cfg.ablation.groups {
            let pc = PqVaeConfig {
                codes,
                groups,
                ..cfg.pqvae.clone()
            };
            let start = Instant::now();
            let (model, report) = train_pqvae(&splits.train, &splits.val, &pc, seed)?;
            let seconds = start.elapsed().as_secs_f64();
            let (err1, err2) = reconstruction_errors(&model, &splits.test.sequences)?;
            out.push((
                GSweepRow {
                    codes,
                    groups,
                    err1: err1 as f64,
                    err2: err2 as f64,
                    unused_codes: report.unused_codes,
                    seconds,
                },
                model,
            ));
        }
    }
    Ok(out)
}

/// One sample per test sequence.
pub fn generate_set(pipeline: &Pipeline, test: &Corpus, schedule: &MaskSchedule, seed: u64) -> Result<Vec<Generated>> {
    par_map(test.len(), |i| {
        let s = &test.sequences[i];
        let mut out = pipeline.synthesize(&s.audio, s.speaker_id, schedule, &[sample_seed(seed, i, 0)])?;
        Ok(out.remove(0))
    })
    .into_iter()
    .collect()
}

fn generate_set_autoregressive(pipeline: &Pipeline, test: &Corpus, temperature: f64, seed: u64) -> Result<Vec<Generated>> {
    par_map(test.len(), |i| {
        let s = &test.sequences[i];
        pipeline.synthesize_autoregressive(&s.audio, s.speaker_id, temperature, sample_seed(seed, i, 0))
    })
    .into_iter()
    .collect()
}

/// FGD in the feature space of `features` (its part decides the channels).
pub fn fgd(features: &PqVae, generated: &[MotionSequence], reference: &[MotionSequence]) -> Result<Frechet> {
    let part = features.config.part;
    let a = extract_features(features, generated, part, Source::Generated)?;
    let b = extract_features(features, reference, part, Source::GroundTruth)?;
    frechet_distance(&a, &b)
}

pub fn test_motions(test: &Corpus) -> Vec<MotionSequence> {
    test.sequences.iter().map(|s| s.motion.clone()).collect()
}

/// Audio of `frames` frames drawn from the corpus generator, for timing runs.
pub fn bench_audio(cfg: &Config, seed: u64, frames: usize) -> Result<crate::motion::AudioFeatureSequence> {
    let c = CorpusConfig {
        frames,
        seed,
        ..cfg.corpus.clone()
    };
    Ok(generate_sequence(&c, &Templates::generate(&c), 0)?.audio)
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRow {
    pub mode: String,
    pub iterations: Option<usize>,
    pub fgd: f64,
    pub fps: f64,
}

/// FGD and decode throughput for each iteration count, plus the
/// autoregressive baseline.
pub fn iteration_sweep(
    cfg: &Config,
    pipeline: &Pipeline,
    features: &PqVae,
    test: &Corpus,
    seed: u64,
) -> Result<Vec<IterationRow>> {
    let reference = test_motions(test);
    let audio = bench_audio(cfg, seed, cfg.eval.bench_frames)?;
    let temperature = cfg.predictor.schedule.temperature;
    let mut rows = Vec::new();
    for &t in &cfg.ablation.iterations {
        let generated = generate_set(pipeline, test, &MaskSchedule::new(t, temperature), seed)?;
        let motions: Vec<MotionSequence> = generated.into_iter().map(|g| g.output).collect();
        let f = fgd(features, &motions, &reference)?;
        let tp = throughput(
            pipeline,
            &audio,
            0,
            DecodeMode::MaskGit { iterations: t },
            BenchScope::Predictor,
            cfg.eval.bench_runs,
        )?;
        rows.push(IterationRow {
            mode: "maskgit".into(),
            iterations: Some(t),
            fgd: f.value,
            fps: tp.fps,
        });
    }
    let generated = generate_set_autoregressive(pipeline, test, temperature, seed)?;
    let motions: Vec<MotionSequence> = generated.into_iter().map(|g| g.output).collect();
    let f = fgd(features, &motions, &reference)?;
    let tp = throughput(pipeline, &audio, 0, DecodeMode::Autoregressive, BenchScope::Predictor, cfg.eval.bench_runs)?;
    rows.push(IterationRow {
        mode: "autoregressive".into(),
        iterations: None,
        fgd: f.value,
        fps: tp.fps,
    });
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct PeRow {
    pub positional: PeKind,
    pub val_ce: f64,
    pub seconds: f64,
    /// `(epoch, validation cross entropy)` per epoch.
    pub curve: Vec<(usize, f64)>,
}

fn val_curve(report: &PredictorTrainReport) -> Vec<(usize, f64)> {
    report
        .epochs
        .iter()
        .filter_map(|e| e.val_ce.map(|v| (e.epoch, v)))
        .collect()
}

pub fn pe_sweep(
    cfg: &Config,
    pqvae: &PqVae,
    splits: &Splits,
    seed: u64,
    kinds: &[PeKind],
) -> Result<Vec<(PeRow, Predictor)>> {
    let mut out = Vec::new();
    for &positional in kinds {
        let pc = PredictorConfig {
            positional,
            ..cfg.predictor.clone()
        };
        let start = Instant::now();
        let (model, report) = train_predictor(pqvae, &splits.train, &splits.val, &pc, seed)?;
        let val_ce = report
            .best_val_ce
            .ok_or_else(|| invalid("positional-encoding sweep needs a validation split"))?;
        out.push((
            PeRow {
                positional,
                val_ce,
                seconds: start.elapsed().as_secs_f64(),
                curve: val_curve(&report),
            },
            model,
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionRow {
    pub variant: &'static str,
    pub use_identity: bool,
    pub use_context: bool,
    pub val_ce: f64,
    pub fgd: f64,
    pub curve: Vec<(usize, f64)>,
}

/// Predictors conditioned on audio only, audio + identity, and audio +
/// identity + motion context. FGD is measured on the unrefined decode.
pub fn condition_sweep(cfg: &Config, pqvae: &PqVae, splits: &Splits, seed: u64) -> Result<Vec<ConditionRow>> {
    let variants = [("audio", false, false), ("audio+identity", true, false), ("audio+identity+context", true, true)];
    let reference = test_motions(&splits.test);
    let mut rows = Vec::new();
    for (variant, use_identity, use_context) in variants {
        let pc = PredictorConfig {
            use_identity,
            use_context,
            ..cfg.predictor.clone()
        };
        let (model, report) = train_predictor(pqvae, &splits.train, &splits.val, &pc, seed)?;
        let pipeline = Pipeline::new(pqvae.clone(), model, None)?;
        let generated = generate_set(&pipeline, &splits.test, &cfg.predictor.schedule, seed)?;
        let motions: Vec<MotionSequence> = generated.into_iter().map(|g| g.output).collect();
        rows.push(ConditionRow {
            variant,
            use_identity,
            use_context,
            val_ce: report.best_val_ce.unwrap_or(f64::NAN),
            fgd: fgd(pqvae, &motions, &reference)?.value,
            curve: val_curve(&report),
        });
    }
    Ok(rows)
}

/// Mean per-condition sample variance on the face and body channels.
pub fn variability(
    pipeline: &Pipeline,
    test: &Corpus,
    samples: usize,
    schedule: &MaskSchedule,
    seed: u64,
) -> Result<(f64, f64)> {
    let layout = &test.meta.part_layout;
    let dims = test.meta.motion_dims;
    let (face, body) = (layout.channels(Part::Face, dims), layout.channels(Part::Body, dims));
    let per = par_map(test.len(), |i| -> Result<(f64, f64)> {
        let s = &test.sequences[i];
        let seeds: Vec<u64> = (0..samples).map(|j| sample_seed(seed, i, j)).collect();
        let motions: Vec<MotionSequence> = pipeline
            .synthesize(&s.audio, s.speaker_id, schedule, &seeds)?
            .into_iter()
            .map(|g| g.output)
            .collect();
        Ok((variance_metric(&motions, face.clone())?, variance_metric(&motions, body.clone())?))
    });
    let (mut f, mut b) = (0.0, 0.0);
    for r in per {
        let (x, y) = r?;
        f += x;
        b += y;
    }
    let n = test.len().max(1) as f64;
    Ok((f / n, b / n))
}

#[derive(Clone, Debug, Serialize)]
pub struct RefinerGain {
    pub preliminary_err2: f64,
    pub refined_err2: f64,
    pub preliminary_err1: f64,
    pub refined_err1: f64,
}

/// Velocity and acceleration errors of preliminary and refined outputs
/// against the test motion.
pub fn refiner_gain(generated: &[Generated], test: &Corpus) -> Result<RefinerGain> {
    if generated.len() != test.len() {
        return Err(invalid("one generated sample per test sequence expected"));
    }
    let mut acc = [0.0f64; 4];
    let (mut n1, mut n2) = (0usize, 0usize);
    for (g, s) in generated.iter().zip(&test.sequences) {
        let (p2, c2) = diff_error(&s.motion, &g.preliminary, 2);
        let (r2, _) = diff_error(&s.motion, &g.output, 2);
        let (p1, c1) = diff_error(&s.motion, &g.preliminary, 1);
        let (r1, _) = diff_error(&s.motion, &g.output, 1);
        acc[0] += p2 as f64;
        acc[1] += r2 as f64;
        acc[2] += p1 as f64;
        acc[3] += r1 as f64;
        n1 += c1;
        n2 += c2;
    }
    Ok(RefinerGain {
        preliminary_err2: acc[0] / n2.max(1) as f64,
        refined_err2: acc[1] / n2.max(1) as f64,
        preliminary_err1: acc[2] / n1.max(1) as f64,
        refined_err1: acc[3] / n1.max(1) as f64,
    })
}

/// Frame with the largest summed absolute velocity over `channels`, searched
/// in `[lo, hi)`.
pub fn peak_velocity_frame(m: &MotionSequence, channels: std::ops::Range<usize>, lo: usize, hi: usize) -> usize {
    let hi = hi.min(m.frames() - 1);
    let mut best = (lo, f64::MIN);
    for t in lo..hi {
        let s: f64 = channels
            .clone()
            .map(|d| (m.get(t + 1, d) as f64 - m.get(t, d) as f64).abs())
            .sum();
        if s > best.1 {
            best = (t, s);
        }
    }
    best.0
}

#[derive(Clone, Debug, Serialize)]
pub struct Coordination {
    pub events: usize,
    pub aligned: usize,
    pub fraction: f64,
}

/// Window searched for velocity peaks on each side of an event.
pub const COORDINATION_WINDOW: usize = 12;

/// One noise-free sequence per (event type, onset, width, speaker) with a
/// single injected event, paired with the event frame.
pub fn coordination_cases(corpus: &CorpusConfig, seed: u64) -> Result<Vec<(SequenceRecord, usize)>> {
    let c = CorpusConfig {
        noise_std: 0.0,
        ..corpus.clone()
    };
    let templates = Templates::generate(&c);
    let mut cases = Vec::new();
    for event_type in 0..c.num_event_types as u32 {
        for &frame in &[c.frames as u32 / 4, c.frames as u32 * 5 / 8] {
            for &width in &[3.0, 5.0] {
                for speaker in 0..c.num_speakers.min(2) as u32 {
                    let event = PlacedEvent {
                        event: Event {
                            frame,
                            event_type,
                            mode: 0,
                        },
                        width,
                    };
                    let rng = &mut stream_rng(seed, cases.len() as u64);
                    let record = render_sequence(&c, &templates, speaker, &[event], rng)?;
                    cases.push((record, frame as usize));
                }
            }
        }
    }
    Ok(cases)
}

/// Whether the face and body velocity peaks around `frame` lie within
/// `tolerance` frames of each other.
pub fn peaks_aligned(m: &MotionSequence, layout: &PartLayout, frame: usize, tolerance: usize) -> bool {
    let dims = m.dims();
    let lo = frame.saturating_sub(COORDINATION_WINDOW);
    let hi = frame + COORDINATION_WINDOW;
    let pf = peak_velocity_frame(m, layout.channels(Part::Face, dims), lo, hi);
    let pb = peak_velocity_frame(m, layout.channels(Part::Body, dims), lo, hi);
    pf.abs_diff(pb) <= tolerance
}

/// Synthesize from noise-free single-event audio and check that face and
/// body velocity peaks near the event fall within `tolerance` frames.
pub fn coordination(
    pipeline: &Pipeline,
    corpus: &CorpusConfig,
    schedule: &MaskSchedule,
    seed: u64,
    tolerance: usize,
) -> Result<Coordination> {
    let cases = coordination_cases(corpus, seed)?;
    let results: Vec<bool> = par_map(cases.len(), |i| -> Result<bool> {
        let (record, frame) = &cases[i];
        let g = pipeline.synthesize(&record.audio, record.speaker_id, schedule, &[sample_seed(seed, i, 0)])?;
        Ok(peaks_aligned(&g[0].output, &corpus.part_layout, *frame, tolerance))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let aligned = results.iter().filter(|a| **a).count();
    Ok(Coordination {
        events: cases.len(),
        aligned,
        fraction: aligned as f64 / cases.len().max(1) as f64,
    })
}
