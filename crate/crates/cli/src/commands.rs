use log::{info, warn};
use pqmotion::checkpoint::{Checkpoint, Stage};
use pqmotion::config::Config;
use pqmotion::corpus::{generate_corpus, write_corpus, write_motion, CorpusConfig, SequenceRecord};
use pqmotion::eval::{beat_consistency, mae_best_of};
use pqmotion::exec::par_map;
use pqmotion::experiment::{
    bench_audio, condition_sweep, coordination, fgd, g_sweep, generate_set, iteration_sweep, pe_sweep, refiner_gain,
    sample_seed, test_motions, variability, Splits,
};
use pqmotion::motion::{FrameMask, MotionSequence, Part};
use pqmotion::pipeline::{throughput, BenchScope, DecodeMode, Pipeline};
use pqmotion::pqvae::{reconstruction_errors, train_pqvae, PqVae, PqVaeConfig};
use pqmotion::predictor::{train_predictor, MaskSchedule, PeKind};
use pqmotion::refiner::train_refiner;
use pqmotion::report::{emit_report, write_csv, LineChart, MetricRow};

use crate::artifacts::{checkpoint_name, io, json_diff, RunDir, CONFIG, CORPUS};
use crate::{AblateArgs, BenchArgs, BenchMode, Cli, CliError, Command, CompleteArgs, DecodeArgs, Scope, SynthArgs, Table};

/// Coordination tolerance in frames.
const COORDINATION_TOLERANCE: usize = 2;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => {
            info!("no --config given; using the desk profile");
            Config::desk()
        }
    };
    std::fs::create_dir_all(&cli.out).map_err(|e| io(&cli.out, e))?;
    let run = RunDir {
        root: cli.out.clone(),
        force: cli.force,
    };
    let seed = cli.seed;
    match &cli.command {
        Command::GenCorpus => gen_corpus(&run, &cfg, seed),
        Command::TrainPqvae => train_pqvae_cmd(&run, &cfg, seed, cli.resume),
        Command::TrainPredictor => train_predictor_cmd(&run, &cfg, seed, cli.resume),
        Command::TrainRefiner => train_refiner_cmd(&run, &cfg, seed, cli.resume),
        Command::Synth(a) => synth(&run, &cfg, seed, a),
        Command::Complete(a) => complete(&run, &cfg, seed, a),
        Command::Eval(a) => eval(&run, &cfg, seed, a),
        Command::Bench(a) => bench(&run, &cfg, seed, a),
        Command::Ablate(a) => ablate(&run, &cfg, seed, a),
    }
}

fn gen_corpus(run: &RunDir, cfg: &Config, seed: u64) -> Result<()> {
    let path = run.output(CORPUS)?;
    let config_path = run.output(CONFIG)?;
    let c = CorpusConfig {
        seed,
        ..cfg.corpus.clone()
    };
    let corpus = generate_corpus(&c)?;
    write_corpus(&path, &corpus)?;
    std::fs::write(&config_path, cfg.to_json()).map_err(|e| io(&config_path, e))?;
    info!("wrote {} sequences to {}", corpus.len(), path.display());
    Ok(())
}

enum Slot {
    Existing,
    Fresh(std::path::PathBuf),
}

/// Decide whether a training command trains or keeps an existing checkpoint.
/// On resume the checkpoint's config snapshot wins over `--config`.
fn stage_slot(run: &RunDir, stage: Stage, section: &str, requested: serde_json::Value, resume: bool) -> Result<Slot> {
    let name = checkpoint_name(stage);
    let path = run.path(&name);
    if resume && path.exists() {
        let ck = Checkpoint::load_stage(&path, stage)?;
        let snapshot = ck.config.get(section).cloned().unwrap_or_default();
        let diff = json_diff(&requested, &snapshot);
        if diff.is_empty() {
            info!("resume: {name} matches the requested {section} config");
        } else {
            warn!("resume: {name} config overrides --config ({} fields)", diff.len());
            for d in &diff {
                warn!("  {section}.{d}");
            }
        }
        info!("resume: keeping {}", path.display());
        return Ok(Slot::Existing);
    }
    Ok(Slot::Fresh(run.output(&name)?))
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn epoch_note(epoch: usize) -> String {
    format!("epoch={epoch}")
}

fn train_pqvae_cmd(run: &RunDir, cfg: &Config, seed: u64, resume: bool) -> Result<()> {
    let path = match stage_slot(run, Stage::Pqvae, "pqvae", to_value(&cfg.pqvae), resume)? {
        Slot::Existing => return Ok(()),
        Slot::Fresh(p) => p,
    };
    let splits = run.splits(cfg)?;
    let (model, report) = train_pqvae(&splits.train, &splits.val, &cfg.pqvae, seed)?;
    model.to_checkpoint(seed).save(&path)?;
    let (err1, err2) = reconstruction_errors(&model, &splits.test.sequences)?;
    let part = cfg.pqvae.part.as_str();
    let mut rows = Vec::new();
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    for e in &report.epochs {
        rows.push(MetricRow::new("train_loss", part, e.train.total, splits.train.len()).with_notes(epoch_note(e.epoch)));
        train_curve.push((e.epoch as f64, e.train.total));
        if let Some(v) = &e.val {
            rows.push(MetricRow::new("val_loss", part, v.total, splits.val.len()).with_notes(epoch_note(e.epoch)));
            val_curve.push((e.epoch as f64, v.total));
        }
    }
    let n = splits.test.len();
    rows.push(MetricRow::new("err1", part, err1 as f64, n));
    rows.push(MetricRow::new("err2", part, err2 as f64, n));
    rows.push(MetricRow::new("unused_codes", part, report.unused_codes as f64, cfg.pqvae.codes * cfg.pqvae.groups));
    let chart = LineChart::new("PQ-VAE loss", "epoch", "loss")
        .with_series("train", train_curve)
        .with_series("val", val_curve);
    emit_report(&run.root, "pqvae_train", &rows, &[chart])?;
    info!("pqvae: best epoch {}, test err1 {err1:.4}, err2 {err2:.4}", report.best_epoch);
    Ok(())
}

fn train_predictor_cmd(run: &RunDir, cfg: &Config, seed: u64, resume: bool) -> Result<()> {
    let path = match stage_slot(run, Stage::Predictor, "predictor", to_value(&cfg.predictor), resume)? {
        Slot::Existing => return Ok(()),
        Slot::Fresh(p) => p,
    };
    let pqvae = run.pqvae()?;
    let splits = run.splits(cfg)?;
    let (model, report) = train_predictor(&pqvae, &splits.train, &splits.val, &cfg.predictor, seed)?;
    model.to_checkpoint(seed).save(&path)?;
    let mut rows = Vec::new();
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    for e in &report.epochs {
        rows.push(MetricRow::new("train_ce", "holistic", e.train_ce, splits.train.len()).with_notes(epoch_note(e.epoch)));
        train_curve.push((e.epoch as f64, e.train_ce));
        if let Some(v) = e.val_ce {
            rows.push(MetricRow::new("val_ce", "holistic", v, splits.val.len()).with_notes(epoch_note(e.epoch)));
            val_curve.push((e.epoch as f64, v));
        }
    }
    let chart = LineChart::new("Predictor cross entropy", "epoch", "cross entropy")
        .with_series("train", train_curve)
        .with_series("val", val_curve);
    emit_report(&run.root, "predictor_train", &rows, &[chart])?;
    info!("predictor: best epoch {}, val ce {:?}", report.best_epoch, report.best_val_ce);
    Ok(())
}

fn train_refiner_cmd(run: &RunDir, cfg: &Config, seed: u64, resume: bool) -> Result<()> {
    let path = match stage_slot(run, Stage::Refiner, "refiner", to_value(&cfg.refiner), resume)? {
        Slot::Existing => return Ok(()),
        Slot::Fresh(p) => p,
    };
    let pqvae = run.pqvae()?;
    let splits = run.splits(cfg)?;
    let (model, report) = train_refiner(&pqvae, &splits.train, &splits.val, &cfg.refiner, seed)?;
    model.to_checkpoint(seed).save(&path)?;
    let mut rows = Vec::new();
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    for e in &report.epochs {
        rows.push(MetricRow::new("train_loss", "holistic", e.train_loss, splits.train.len()).with_notes(epoch_note(e.epoch)));
        train_curve.push((e.epoch as f64, e.train_loss));
        if let Some(v) = e.val_loss {
            rows.push(MetricRow::new("val_loss", "holistic", v, splits.val.len()).with_notes(epoch_note(e.epoch)));
            val_curve.push((e.epoch as f64, v));
        }
    }
    if let Some(v) = report.identity_val_loss {
        rows.push(MetricRow::new("identity_val_loss", "holistic", v, splits.val.len()));
    }
    let chart = LineChart::new("Refiner loss", "epoch", "loss")
        .with_series("train", train_curve)
        .with_series("val", val_curve);
    emit_report(&run.root, "refiner_train", &rows, &[chart])?;
    info!("refiner: best epoch {}, val loss {:?}", report.best_epoch, report.best_val_loss);
    Ok(())
}

fn schedule(pipeline: &Pipeline, a: &DecodeArgs) -> Result<MaskSchedule> {
    let base = pipeline.predictor.config.schedule;
    let s = MaskSchedule::new(
        a.iterations.unwrap_or(base.iterations),
        a.temperature.unwrap_or(base.temperature),
    );
    s.validate()?;
    Ok(s)
}

fn test_sequence(splits: &Splits, index: usize) -> Result<&SequenceRecord> {
    splits.test.sequences.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "--sequence {index} is out of range; the test split has {} sequences",
            splits.test.len()
        ))
    })
}

fn with_motion(record: &SequenceRecord, motion: MotionSequence) -> SequenceRecord {
    SequenceRecord {
        motion,
        ..record.clone()
    }
}

fn synth(run: &RunDir, cfg: &Config, seed: u64, a: &SynthArgs) -> Result<()> {
    let pipeline = run.pipeline()?;
    let splits = run.splits(cfg)?;
    let record = test_sequence(&splits, a.sequence)?;
    let sched = schedule(&pipeline, &a.decode)?;
    let dir = run.output("synth")?;
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let seeds: Vec<u64> = (0..a.samples).map(|j| sample_seed(seed, a.sequence, j)).collect();
    let generated = pipeline.synthesize(&record.audio, record.speaker_id, &sched, &seeds)?;
    for (j, g) in generated.into_iter().enumerate() {
        let path = dir.join(format!("sample_{j}.pqmo"));
        write_motion(&path, &splits.test.meta, &with_motion(record, g.output))?;
    }
    info!("wrote {} samples to {}", a.samples, dir.display());
    Ok(())
}

fn complete(run: &RunDir, cfg: &Config, seed: u64, a: &CompleteArgs) -> Result<()> {
    let pipeline = run.pipeline()?;
    let splits = run.splits(cfg)?;
    let record = test_sequence(&splits, a.sequence)?;
    let frames = record.motion.frames();
    if a.prefix + a.suffix >= frames {
        return Err(CliError::Usage(format!(
            "--prefix {} plus --suffix {} leaves no frame to generate in {frames}",
            a.prefix, a.suffix
        )));
    }
    let sched = schedule(&pipeline, &a.decode)?;
    let dir = run.output("complete")?;
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let mask = FrameMask::prefix_suffix(frames, a.prefix, a.suffix);
    let g = pipeline.complete(
        &record.audio,
        &record.motion,
        &mask,
        record.speaker_id,
        &sched,
        sample_seed(seed, a.sequence, 0),
    )?;
    let mut context_diff = 0.0f64;
    for t in (0..frames).filter(|&t| mask.is_known(t)) {
        for (x, y) in g.output.frame(t).iter().zip(record.motion.frame(t)) {
            context_diff = context_diff.max((*x as f64 - *y as f64).abs());
        }
    }
    let rows = vec![
        MetricRow::new("context_max_abs_diff", "holistic", context_diff, mask.known_count()),
        MetricRow::new("mae", "holistic", mae_best_of(&record.motion, &[g.output.clone()])?, 1),
    ];
    write_motion(&dir.join("completed.pqmo"), &splits.test.meta, &with_motion(record, g.output))?;
    write_csv(&dir.join("metrics.csv"), &rows)?;
    Ok(())
}

/// Frozen feature extractor for FGD on `part`: the pipeline's own PQ-VAE for
/// holistic motion, otherwise a per-part PQ-VAE cached in the run directory.
fn feature_model(run: &RunDir, cfg: &Config, splits: &Splits, pipeline: &Pipeline, part: Part, seed: u64) -> Result<PqVae> {
    if part == Part::Holistic {
        return Ok(pipeline.pqvae.clone());
    }
    let path = run.path(&format!("features_{}.ckpt", part.as_str()));
    if path.exists() {
        return Ok(PqVae::from_checkpoint(&Checkpoint::load_stage(&path, Stage::Pqvae)?)?);
    }
    info!("training the {} feature extractor", part.as_str());
    let pc = PqVaeConfig {
        part,
        ..cfg.pqvae.clone()
    };
    let (model, _) = train_pqvae(&splits.train, &splits.val, &pc, seed)?;
    model.to_checkpoint(seed).save(&path)?;
    Ok(model)
}

fn eval(run: &RunDir, cfg: &Config, seed: u64, a: &DecodeArgs) -> Result<()> {
    let pipeline = run.pipeline()?;
    let splits = run.splits(cfg)?;
    let test = &splits.test;
    let sched = schedule(&pipeline, a)?;
    let dir = run.output("eval")?;
    let n = test.len();
    let generated = generate_set(&pipeline, test, &sched, seed)?;
    let outputs: Vec<MotionSequence> = generated.iter().map(|g| g.output.clone()).collect();
    let reference = test_motions(test);
    let mut rows = Vec::new();
    for &part in &cfg.eval.fgd_parts {
        let features = feature_model(run, cfg, &splits, &pipeline, part, seed)?;
        let f = fgd(&features, &outputs, &reference)?;
        let notes = if f.shrunk { "shrinkage" } else { "" };
        rows.push(MetricRow::new("fgd", part.as_str(), f.value, n).with_notes(notes));
    }
    let (face, body) = variability(&pipeline, test, cfg.eval.samples, &sched, seed)?;
    let samples_note = format!("samples={}", cfg.eval.samples);
    rows.push(MetricRow::new("variance", "face", face, n).with_notes(samples_note.clone()));
    rows.push(MetricRow::new("variance", "body", body, n).with_notes(samples_note));

    let best_of = cfg.eval.best_of;
    let maes = par_map(n, |i| -> pqmotion::Result<f64> {
        let s = &test.sequences[i];
        let seeds: Vec<u64> = (0..best_of).map(|j| sample_seed(seed, i, j)).collect();
        let motions: Vec<MotionSequence> = pipeline
            .synthesize(&s.audio, s.speaker_id, &sched, &seeds)?
            .into_iter()
            .map(|g| g.output)
            .collect();
        mae_best_of(&s.motion, &motions)
    })
    .into_iter()
    .collect::<pqmotion::Result<Vec<f64>>>()?;
    rows.push(
        MetricRow::new("mae_best_of", "holistic", maes.iter().sum::<f64>() / n.max(1) as f64, n)
            .with_notes(format!("best_of={best_of}")),
    );

    let meta = &test.meta;
    let events = 0..meta.num_event_types;
    let body_channels = meta.part_layout.channels(Part::Body, meta.motion_dims);
    for (label, motions) in [("generated", &outputs), ("ground_truth", &reference)] {
        let mut scores = Vec::new();
        for (s, m) in test.sequences.iter().zip(motions.iter()) {
            if let Some(bc) = beat_consistency(&s.audio, events.clone(), m, body_channels.clone())? {
                scores.push(bc);
            }
        }
        let row = if scores.is_empty() {
            MetricRow {
                value: None,
                ..MetricRow::new("bc", "body", 0.0, 0)
            }
        } else {
            MetricRow::new("bc", "body", scores.iter().sum::<f64>() / scores.len() as f64, scores.len())
        };
        rows.push(row.with_notes(format!("simplified; {label}")));
    }

    let gain = refiner_gain(&generated, test)?;
    rows.push(MetricRow::new("err1", "holistic", gain.preliminary_err1, n).with_notes("preliminary"));
    rows.push(MetricRow::new("err1", "holistic", gain.refined_err1, n).with_notes("refined"));
    rows.push(MetricRow::new("err2", "holistic", gain.preliminary_err2, n).with_notes("preliminary"));
    rows.push(MetricRow::new("err2", "holistic", gain.refined_err2, n).with_notes("refined"));

    let corpus_cfg = CorpusConfig {
        seed: meta.seed,
        ..cfg.corpus.clone()
    };
    let c = coordination(&pipeline, &corpus_cfg, &sched, seed, COORDINATION_TOLERANCE)?;
    rows.push(
        MetricRow::new("coordination", "holistic", c.fraction, c.events)
            .with_notes(format!("aligned={} tolerance={COORDINATION_TOLERANCE}", c.aligned)),
    );
    write_csv(&dir.join("metrics.csv"), &rows)?;
    info!("wrote {} metrics to {}", rows.len(), dir.display());
    Ok(())
}

fn bench(run: &RunDir, cfg: &Config, seed: u64, a: &BenchArgs) -> Result<()> {
    let pipeline = run.pipeline()?;
    let mode = match a.mode {
        BenchMode::Ar => DecodeMode::Autoregressive,
        BenchMode::Maskgit => DecodeMode::MaskGit {
            iterations: a.iterations,
        },
    };
    let scope = match a.scope {
        Scope::Predictor => BenchScope::Predictor,
        Scope::Pipeline => BenchScope::Pipeline,
    };
    let frames = a.frames.unwrap_or(cfg.eval.bench_frames);
    let runs = a.runs.unwrap_or(cfg.eval.bench_runs);
    let path = run.output(&format!("bench_{}.csv", mode.label()))?;
    let audio = bench_audio(cfg, seed, frames)?;
    let tp = throughput(&pipeline, &audio, 0, mode, scope, runs)?;
    let notes = format!("mode={} frames={frames} scope={}", mode.label(), to_value(&scope).as_str().unwrap_or(""));
    write_csv(&path, &[MetricRow::new("fps", "holistic", tp.fps, runs).with_notes(notes)])?;
    info!("{}: {:.1} frames/s", mode.label(), tp.fps);
    Ok(())
}

fn ablate(run: &RunDir, cfg: &Config, seed: u64, a: &AblateArgs) -> Result<()> {
    let tables = match a.table {
        Table::All => vec![Table::GSweep, Table::TSweep, Table::Pe, Table::Conditions],
        t => vec![t],
    };
    // Check every output first so a long sweep never fails at the end.
    let stems: Vec<&str> = tables.iter().map(|t| stem(*t)).collect();
    for s in &stems {
        run.output(&format!("{s}.csv"))?;
    }
    let splits = run.splits(cfg)?;
    for (t, s) in tables.into_iter().zip(stems) {
        info!("ablation {s}");
        let (rows, charts) = match t {
            Table::GSweep => g_table(cfg, &splits, seed)?,
            Table::TSweep => t_table(run, cfg, &splits, seed)?,
            Table::Pe => pe_table(run, cfg, &splits, seed)?,
            Table::Conditions => conditions_table(run, cfg, &splits, seed)?,
            Table::All => unreachable!("expanded above"),
        };
        emit_report(&run.root, s, &rows, &charts)?;
    }
    Ok(())
}

fn stem(t: Table) -> &'static str {
    match t {
        Table::GSweep => "ablate_g_sweep",
        Table::TSweep => "ablate_t_sweep",
        Table::Pe => "ablate_pe",
        Table::Conditions => "ablate_conditions",
        Table::All => "ablate",
    }
}

type TableOut = (Vec<MetricRow>, Vec<LineChart>);

fn g_table(cfg: &Config, splits: &Splits, seed: u64) -> Result<TableOut> {
    let cells = g_sweep(cfg, splits, seed)?;
    let n = splits.test.len();
    let mut rows = Vec::new();
    let mut chart = LineChart::new("Reconstruction error vs groups", "G", "error");
    for &k in &cfg.ablation.codes {
        let (mut e1, mut e2) = (Vec::new(), Vec::new());
        for (r, _) in cells.iter().filter(|(r, _)| r.codes == k) {
            let note = format!("K={} G={}", r.codes, r.groups);
            rows.push(MetricRow::new("err1", "holistic", r.err1, n).with_notes(note.clone()));
            rows.push(MetricRow::new("err2", "holistic", r.err2, n).with_notes(note.clone()));
            rows.push(MetricRow::new("unused_codes", "holistic", r.unused_codes as f64, r.codes * r.groups).with_notes(note.clone()));
            rows.push(MetricRow::new("train_seconds", "holistic", r.seconds, 1).with_notes(note));
            e1.push((r.groups as f64, r.err1));
            e2.push((r.groups as f64, r.err2));
        }
        chart = chart
            .with_series(&format!("err1 K={k}"), e1)
            .with_series(&format!("err2 K={k}"), e2);
    }
    Ok((rows, vec![chart]))
}

fn t_table(run: &RunDir, cfg: &Config, splits: &Splits, seed: u64) -> Result<TableOut> {
    let pipeline = run.pipeline()?;
    let rows_in = iteration_sweep(cfg, &pipeline, &pipeline.pqvae, &splits.test, seed)?;
    let n = splits.test.len();
    let mut rows = Vec::new();
    let (mut fgd_pts, mut fps_pts) = (Vec::new(), Vec::new());
    for r in &rows_in {
        let note = match r.iterations {
            Some(t) => format!("maskgit T={t}"),
            None => "autoregressive".to_string(),
        };
        rows.push(MetricRow::new("fgd", "holistic", r.fgd, n).with_notes(note.clone()));
        rows.push(MetricRow::new("fps", "holistic", r.fps, cfg.eval.bench_runs).with_notes(note));
        if let Some(t) = r.iterations {
            fgd_pts.push((t as f64, r.fgd));
            fps_pts.push((t as f64, r.fps));
        }
    }
    let charts = vec![
        LineChart::new("FGD vs decoding iterations", "T", "FGD").with_series("maskgit", fgd_pts),
        LineChart::new("Throughput vs decoding iterations", "T", "frames/s").with_series("maskgit", fps_pts),
    ];
    Ok((rows, charts))
}

fn pe_table(run: &RunDir, cfg: &Config, splits: &Splits, seed: u64) -> Result<TableOut> {
    let pqvae = run.pqvae()?;
    let cells = pe_sweep(cfg, &pqvae, splits, seed, &PeKind::ALL)?;
    let mut rows = Vec::new();
    let mut chart = LineChart::new("Validation cross entropy by positional encoding", "epoch", "cross entropy");
    for (r, _) in &cells {
        rows.push(MetricRow::new("val_ce", "holistic", r.val_ce, splits.val.len()).with_notes(r.positional.as_str()));
        chart = chart.with_series(r.positional.as_str(), curve_points(&r.curve));
    }
    Ok((rows, vec![chart]))
}

fn conditions_table(run: &RunDir, cfg: &Config, splits: &Splits, seed: u64) -> Result<TableOut> {
    let pqvae = run.pqvae()?;
    let cells = condition_sweep(cfg, &pqvae, splits, seed)?;
    let mut rows = Vec::new();
    let mut chart = LineChart::new("Validation cross entropy by conditioning", "epoch", "cross entropy");
    for r in &cells {
        rows.push(MetricRow::new("val_ce", "holistic", r.val_ce, splits.val.len()).with_notes(r.variant));
        rows.push(MetricRow::new("fgd", "holistic", r.fgd, splits.test.len()).with_notes(format!("{}; unrefined", r.variant)));
        chart = chart.with_series(r.variant, curve_points(&r.curve));
    }
    Ok((rows, vec![chart]))
}

fn curve_points(curve: &[(usize, f64)]) -> Vec<(f64, f64)> {
    curve.iter().map(|&(e, v)| (e as f64, v)).collect()
}
