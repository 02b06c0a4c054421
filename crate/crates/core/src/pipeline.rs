//! End-to-end synthesis: condition encoding, code prediction, PQ decoding and
//! refinement.

use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::exec::par_map;
use crate::motion::{AudioFeatureSequence, FrameMask, MotionSequence, Part};
use crate::pqvae::{CodeGrid, PqVae, WINDOW};
use crate::predictor::{autoregressive_decode, maskgit_decode, Conditions, MaskSchedule, Predictor};
use crate::refiner::{combine_motion, Refiner};
use crate::rng::{stream_rng, streams};

/// Trained stages sharing one corpus layout.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub pqvae: PqVae,
    pub predictor: Predictor,
    /// Skipped when absent (the "no refiner" ablation).
    pub refiner: Option<Refiner>,
}

/// One generated sample before and after refinement.
#[derive(Clone, Debug)]
pub struct Generated {
    pub codes: CodeGrid,
    pub preliminary: MotionSequence,
    pub output: MotionSequence,
}

impl Pipeline {
    pub fn new(pqvae: PqVae, predictor: Predictor, refiner: Option<Refiner>) -> Result<Self> {
        if pqvae.config.part != Part::Holistic {
            return Err(invalid("the pipeline needs a holistic PQ-VAE"));
        }
        let d = &predictor.dims;
        if d.groups != pqvae.config.groups || d.codes != pqvae.config.codes || d.motion_dims != pqvae.motion_dims {
            return Err(invalid("predictor checkpoint does not match the PQ-VAE"));
        }
        if let Some(r) = &refiner {
            if r.dims.motion_dims != d.motion_dims || r.dims.audio_dims != d.audio_dims {
                return Err(invalid("refiner checkpoint does not match the predictor"));
            }
        }
        Ok(Self {
            pqvae,
            predictor,
            refiner,
        })
    }

    pub fn motion_dims(&self) -> usize {
        self.pqvae.motion_dims
    }

    /// Free synthesis of one sample per seed.
    pub fn synthesize(
        &self,
        audio: &AudioFeatureSequence,
        speaker: u32,
        schedule: &MaskSchedule,
        seeds: &[u64],
    ) -> Result<Vec<Generated>> {
        let mask = FrameMask::all_generated(audio.frames());
        let context = MotionSequence::zeros(audio.frames(), self.motion_dims());
        par_map(seeds.len(), |i| self.complete(audio, &context, &mask, speaker, schedule, seeds[i]))
            .into_iter()
            .collect()
    }

    /// Fill the frames not marked known in `mask`. Code steps whose whole
    /// window is known are pinned to the codes of the zero-padded context;
    /// the remaining steps are decoded, and known frames are restored
    /// exactly at the end.
    pub fn complete(
        &self,
        audio: &AudioFeatureSequence,
        context: &MotionSequence,
        mask: &FrameMask,
        speaker: u32,
        schedule: &MaskSchedule,
        seed: u64,
    ) -> Result<Generated> {
        let frames = audio.frames();
        if context.frames() != frames || mask.len() != frames {
            return Err(invalid(format!(
                "completion inputs misaligned: audio {frames}, context {}, mask {}",
                context.frames(),
                mask.len()
            )));
        }
        if context.dims() != self.motion_dims() {
            return Err(invalid(format!(
                "context has {} dims, model expects {}",
                context.dims(),
                self.motion_dims()
            )));
        }
        let zeroed = combine_motion(context, &MotionSequence::zeros(frames, context.dims()), mask)?;
        let cond = Conditions::new(audio, &zeroed, mask, speaker)?;
        let initial = self.pinned_codes(&zeroed, mask, cond.steps)?;
        let bound = self.predictor.bind(&cond)?;
        let mut rng = stream_rng(seed, streams::SAMPLING);
        let (codes, _) = maskgit_decode(&bound, schedule, &initial, &mut rng)?;
        self.finish(codes, audio, &zeroed, mask, speaker)
    }

    fn pinned_codes(&self, zeroed: &MotionSequence, mask: &FrameMask, steps: usize) -> Result<CodeGrid> {
        let groups = self.pqvae.config.groups;
        let padded = mask.padded(steps * WINDOW);
        let pinned: Vec<bool> = (0..steps)
            .map(|n| (n * WINDOW..(n + 1) * WINDOW).all(|t| padded.is_known(t)))
            .collect();
        if !pinned.iter().any(|p| *p) {
            return Ok(CodeGrid::masked(steps, groups));
        }
        let mut grid = self.pqvae.tokenize(zeroed)?;
        for (p, keep) in grid.keep.iter_mut().enumerate() {
            *keep = pinned[p / groups];
        }
        Ok(grid)
    }

    fn finish(
        &self,
        codes: CodeGrid,
        audio: &AudioFeatureSequence,
        context: &MotionSequence,
        mask: &FrameMask,
        speaker: u32,
    ) -> Result<Generated> {
        let preliminary = self.pqvae.decode_codes(&codes, audio.frames())?;
        let combined = combine_motion(context, &preliminary, mask)?;
        let output = match &self.refiner {
            Some(r) => r.refine(&combined, audio, mask, speaker)?,
            None => combined,
        };
        Ok(Generated {
            codes,
            preliminary,
            output,
        })
    }

    /// Free synthesis with raster-order autoregressive code decoding.
    pub fn synthesize_autoregressive(
        &self,
        audio: &AudioFeatureSequence,
        speaker: u32,
        temperature: f64,
        seed: u64,
    ) -> Result<Generated> {
        let cond = Conditions::audio_only(audio, self.motion_dims(), speaker)?;
        let bound = self.predictor.bind(&cond)?;
        let mut rng = stream_rng(seed, streams::SAMPLING);
        let initial = CodeGrid::masked(cond.steps, self.pqvae.config.groups);
        let codes = autoregressive_decode(&bound, temperature, &initial, &mut rng)?;
        let mask = FrameMask::all_generated(audio.frames());
        let context = MotionSequence::zeros(audio.frames(), self.motion_dims());
        self.finish(codes, audio, &context, &mask, speaker)
    }
}

/// How codes are decoded in a throughput run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    MaskGit { iterations: usize },
    Autoregressive,
}

impl DecodeMode {
    pub fn label(&self) -> String {
        match self {
            DecodeMode::MaskGit { iterations } => format!("maskgit_t{iterations}"),
            DecodeMode::Autoregressive => "autoregressive".into(),
        }
    }
}

/// What a throughput run times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchScope {
    /// Condition encoding plus code decoding.
    Predictor,
    /// Everything from audio to refined motion.
    Pipeline,
}

#[derive(Clone, Debug, Serialize)]
pub struct Throughput {
    pub mode: DecodeMode,
    pub scope: BenchScope,
    pub frames: usize,
    pub runs: usize,
    /// Median of frames per wall-clock second.
    pub fps: f64,
}

/// Median frames per second over `runs` timed single-sequence runs after one
/// warm-up run, on the calling thread.
pub fn throughput(
    pipeline: &Pipeline,
    audio: &AudioFeatureSequence,
    speaker: u32,
    mode: DecodeMode,
    scope: BenchScope,
    runs: usize,
) -> Result<Throughput> {
    if runs == 0 {
        return Err(invalid("throughput needs at least one run"));
    }
    let frames = audio.frames();
    let run_once = |seed: u64| -> Result<()> {
        let cond = Conditions::audio_only(audio, pipeline.motion_dims(), speaker)?;
        let bound = pipeline.predictor.bind(&cond)?;
        let initial = CodeGrid::masked(cond.steps, pipeline.pqvae.config.groups);
        let mut rng = stream_rng(seed, streams::SAMPLING);
        let codes = match mode {
            DecodeMode::MaskGit { iterations } => {
                maskgit_decode(&bound, &MaskSchedule::new(iterations, 1.0), &initial, &mut rng)?.0
            }
            DecodeMode::Autoregressive => autoregressive_decode(&bound, 1.0, &initial, &mut rng)?,
        };
        if scope == BenchScope::Pipeline {
            let mask = FrameMask::all_generated(frames);
            let context = MotionSequence::zeros(frames, pipeline.motion_dims());
            pipeline.finish(codes, audio, &context, &mask, speaker)?;
        }
        Ok(())
    };
    run_once(0)?;
    let mut fps = Vec::with_capacity(runs);
    for r in 0..runs {
        let start = Instant::now();
        run_once(r as u64 + 1)?;
        fps.push(frames as f64 / start.elapsed().as_secs_f64().max(1e-12));
    }
    fps.sort_by(|a, b| a.total_cmp(b));
    let mid = fps.len() / 2;
    let median = if fps.len() % 2 == 1 {
        fps[mid]
    } else {
        0.5 * (fps[mid - 1] + fps[mid])
    };
    Ok(Throughput {
        mode,
        scope,
        frames,
        runs,
        fps: median,
    })
}
