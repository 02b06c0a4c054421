//! Masked non-autoregressive transformer over product-quantized code grids.
//!
//! A grid of `N_d × G` codes is flattened time-major (`p = n·G + g`). Masked
//! positions carry a shared `[MASK]` embedding. Audio and motion context are
//! encoded to one vector per code step and attended to by every decoder
//! block; the speaker enters through AdaIN. At inference the grid is filled
//! over `T` iterations, each committing the most confident predictions so
//! that the number of still-masked positions follows a cosine schedule.

use std::cmp::Ordering;
use std::f64::consts::FRAC_PI_2;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::exec::par_map;
use crate::motion::{AudioFeatureSequence, FrameMask, FrameSeries, MotionSequence, Part};
use crate::numerics::nn::uniform_tensor;
use crate::numerics::{
    AdamWConfig, Ctx, Gradients, Graph, Linear, NormKind, OptimState, ParamId, ParamStore, Real,
    Tensor, Var,
};
use crate::pqvae::{shuffle, CodeGrid, PqVae, WINDOW};
use crate::rng::{stream_rng, streams, StreamRng};
use crate::transformer::{sinusoid, sinusoid_with_base, AudioEncoder, ContextEncoder, DecoderBlock};

/// Positional encoding of the flattened token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    /// `α_n + β_g` from fixed sinusoid tables.
    Sinusoidal2d,
    /// Fixed sinusoid of the flat index `n·G + g`.
    Sinusoidal1d,
    /// Learned `α_n + β_g`.
    Trainable2d,
    /// Learned table over the flat index.
    Trainable1d,
}

impl PeKind {
    pub const ALL: [PeKind; 4] = [
        PeKind::Sinusoidal2d,
        PeKind::Sinusoidal1d,
        PeKind::Trainable2d,
        PeKind::Trainable1d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeKind::Sinusoidal2d => "sinusoidal_2d",
            PeKind::Sinusoidal1d => "sinusoidal_1d",
            PeKind::Trainable2d => "trainable_2d",
            PeKind::Trainable1d => "trainable_1d",
        }
    }
}

/// Iterative decoding schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSchedule {
    pub iterations: usize,
    /// Sampling temperature of the first iteration, annealed linearly to 0
    /// at the last one. 0 means argmax throughout.
    pub temperature: f64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            iterations: 8,
            temperature: 1.0,
        }
    }
}

impl MaskSchedule {
    pub fn new(iterations: usize, temperature: f64) -> Self {
        Self {
            iterations,
            temperature,
        }
    }

    /// `γ(r) = cos(π r / 2)`.
    pub fn gamma(r: f64) -> f64 {
        (FRAC_PI_2 * r).cos()
    }

    /// Positions still masked after iteration `t` of `T` when `l0` started masked.
    pub fn masked_after(&self, t: usize, l0: usize) -> usize {
        if t >= self.iterations {
            return 0;
        }
        (Self::gamma(t as f64 / self.iterations as f64) * l0 as f64).round() as usize
    }

    /// Temperature used at iteration `t` (1-based).
    pub fn temperature_at(&self, t: usize) -> f64 {
        self.temperature * (1.0 - t as f64 / self.iterations as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(invalid("mask schedule needs at least one iteration"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Wavelength base of the subspace encoding `β`. It differs from the
/// temporal base so that `α_n + β_g` is not symmetric in `n` and `g`.
pub const SUBSPACE_BASE: Real = 100.0;

/// `α_n + β_g` with sinusoidal `α`, `β`.
pub fn positional_encoding_2d(n: usize, g: usize, d_model: usize) -> Vec<Real> {
    sinusoid(n, d_model)
        .into_iter()
        .zip(sinusoid_with_base(g, d_model, SUBSPACE_BASE))
        .map(|(a, b)| a + b)
        .collect()
}

/// Keep mask for training: draws `r ~ U(0,1)` and masks exactly
/// `round(γ(r)·len)` uniformly chosen positions.
pub fn sample_training_mask(len: usize, rng: &mut impl Rng) -> Vec<bool> {
    let r: f64 = rng.random();
    mask_with_ratio(len, MaskSchedule::gamma(r), rng)
}

/// Keep mask with `round(ratio·len)` uniformly chosen positions masked.
pub fn mask_with_ratio(len: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((ratio.clamp(0.0, 1.0) * len as f64).round() as usize).min(len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    let mut keep = vec![true; len];
    for &i in &idx[..count] {
        keep[i] = false;
    }
    keep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub identity_dim: usize,
    pub context_width: usize,
    pub context_layers: usize,
    pub norm: NormKind,
    pub positional: PeKind,
    /// Longest code sequence a trainable positional table covers.
    pub max_steps: usize,
    pub use_identity: bool,
    pub use_context: bool,
    /// Probability that a training example carries prefix/suffix motion context.
    pub context_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: MaskSchedule,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 6,
            identity_dim: 16,
            context_width: 32,
            context_layers: 10,
            norm: NormKind::Channel,
            positional: PeKind::Sinusoidal2d,
            max_steps: 64,
            use_identity: true,
            use_context: true,
            context_prob: 0.3,
            epochs: 100,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            schedule: MaskSchedule::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config("predictor.d_model must be even and positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("predictor.d_model must be divisible by heads".into()));
        }
        if self.blocks == 0 || self.identity_dim == 0 || self.context_width == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "predictor.blocks, identity_dim, context_width and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.context_prob) {
            return Err(Error::Config("predictor.context_prob must lie in [0, 1]".into()));
        }
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sizes fixed by the corpus and the PQ-VAE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorDims {
    pub groups: usize,
    pub codes: usize,
    pub motion_dims: usize,
    pub audio_dims: usize,
    pub speakers: usize,
}

/// Per-sequence conditioning inputs, padded to a multiple of [`WINDOW`].
#[derive(Clone, Debug)]
pub struct Conditions {
    /// `audio_dims × frames`, edge-padded.
    pub audio: Tensor,
    /// `(motion_dims + 1) × frames`: masked motion and the frame mask, zero-padded.
    pub context: Tensor,
    pub speaker: usize,
    pub steps: usize,
    pub valid_frames: usize,
}

impl Conditions {
    pub fn new(
        audio: &AudioFeatureSequence,
        context: &MotionSequence,
        mask: &FrameMask,
        speaker: u32,
    ) -> Result<Self> {
        let frames = audio.frames();
        if frames == 0 {
            return Err(invalid("audio must have at least one frame"));
        }
        if context.frames() != frames || mask.len() != frames {
            return Err(invalid(format!(
                "condition length mismatch: audio {frames}, context {}, mask {}",
                context.frames(),
                mask.len()
            )));
        }
        if !audio.is_finite() {
            return Err(invalid("audio contains non-finite values"));
        }
        let padded = frames.div_ceil(WINDOW) * WINDOW;
        let d = context.dims();
        let mut ctx = vec![0.0; (d + 1) * padded];
        for t in 0..frames {
            if mask.is_known(t) {
                for c in 0..d {
                    ctx[c * padded + t] = context.get(t, c) as Real;
                }
                ctx[d * padded + t] = 1.0;
            }
        }
        Ok(Self {
            audio: audio.pad_edge(padded).to_channel_major(),
            context: Tensor::new(vec![d + 1, padded], ctx)?,
            speaker: speaker as usize,
            steps: padded / WINDOW,
            valid_frames: frames,
        })
    }

    /// No motion context.
    pub fn audio_only(audio: &AudioFeatureSequence, motion_dims: usize, speaker: u32) -> Result<Self> {
        let frames = audio.frames();
        Self::new(
            audio,
            &FrameSeries::zeros(frames, motion_dims),
            &FrameMask::all_generated(frames),
            speaker,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub dims: PredictorDims,
    pub store: ParamStore,
    token_emb: ParamId,
    pe_time: Option<ParamId>,
    pe_group: Option<ParamId>,
    speaker_emb: ParamId,
    audio_enc: AudioEncoder,
    context_enc: Option<ContextEncoder>,
    blocks: Vec<DecoderBlock>,
    heads: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSnapshot {
    pub predictor: PredictorConfig,
    pub dims: PredictorDims,
}

/// Anything that maps a partially masked grid to per-position logits
/// (`len × K`, position-major).
pub trait CodeModel {
    fn codes(&self) -> usize;
    fn logits(&self, grid: &CodeGrid) -> Result<Vec<Real>>;
}

/// A predictor with its conditioning memory computed once.
pub struct BoundPredictor<'a> {
    model: &'a Predictor,
    memory: Tensor,
    speaker: usize,
    steps: usize,
}

impl CodeModel for BoundPredictor<'_> {
    fn codes(&self) -> usize {
        self.model.dims.codes
    }

    fn logits(&self, grid: &CodeGrid) -> Result<Vec<Real>> {
        if grid.steps != self.steps {
            return Err(invalid(format!(
                "grid has {} steps, conditions have {}",
                grid.steps, self.steps
            )));
        }
        let mut g = Graph::with_params(&self.model.store);
        let memory = g.leaf(self.memory.clone());
        let per_group = self.model.logits_graph(&mut g, grid, memory, self.speaker)?;
        Ok(self.model.interleave(&g, &per_group, grid.steps))
    }
}

struct StepOutput {
    ce: Real,
    masked: usize,
    grads: Option<Gradients>,
    ctx: Ctx,
}

impl Predictor {
    pub fn new(config: &PredictorConfig, dims: PredictorDims, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        if dims.groups == 0 || dims.codes == 0 || dims.speakers == 0 {
            return Err(invalid("predictor needs positive groups, codes and speakers"));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let s = &mut store;
        let token_emb = s.add("tokens", uniform_tensor(&[dims.groups * dims.codes + 1, d], 1.0, rng));
        let (pe_time, pe_group) = match config.positional {
            PeKind::Trainable2d => (
                Some(s.add("pe.time", uniform_tensor(&[config.max_steps, d], 0.5, rng))),
                Some(s.add("pe.group", uniform_tensor(&[dims.groups, d], 0.5, rng))),
            ),
            PeKind::Trainable1d => (
                Some(s.add(
                    "pe.flat",
                    uniform_tensor(&[config.max_steps * dims.groups, d], 0.5, rng),
                )),
                None,
            ),
            _ => (None, None),
        };
        let speaker_emb = s.add("speakers", uniform_tensor(&[dims.speakers, config.identity_dim], 1.0, rng));
        let audio_enc = AudioEncoder::new(s, "audio", dims.audio_dims, d, config.norm, rng);
        let context_enc = config.use_context.then(|| {
            ContextEncoder::new(
                s,
                "context",
                dims.motion_dims + 1,
                config.context_width,
                d,
                config.context_layers,
                rng,
            )
        });
        let blocks = (0..config.blocks)
            .map(|i| DecoderBlock::new(s, &format!("block{i}"), d, config.heads, config.identity_dim, rng))
            .collect::<Result<_>>()?;
        let heads = (0..dims.groups)
            .map(|g| Linear::new(s, &format!("head{g}"), d, dims.codes, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            token_emb,
            pe_time,
            pe_group,
            speaker_emb,
            audio_enc,
            context_enc,
            blocks,
            heads,
        })
    }

    pub fn mask_token(&self) -> usize {
        self.dims.groups * self.dims.codes
    }

    fn check_conditions(&self, cond: &Conditions) -> Result<()> {
        if cond.audio.rows() != self.dims.audio_dims {
            return Err(invalid(format!(
                "audio has {} channels, predictor expects {}",
                cond.audio.rows(),
                self.dims.audio_dims
            )));
        }
        if cond.context.rows() != self.dims.motion_dims + 1 {
            return Err(invalid("motion context has the wrong channel count"));
        }
        if cond.speaker >= self.dims.speakers {
            return Err(invalid(format!(
                "speaker {} out of range for {} speakers",
                cond.speaker, self.dims.speakers
            )));
        }
        if matches!(self.config.positional, PeKind::Trainable1d | PeKind::Trainable2d)
            && cond.steps > self.config.max_steps
        {
            return Err(invalid(format!(
                "{} code steps exceed the trainable positional table ({})",
                cond.steps, self.config.max_steps
            )));
        }
        Ok(())
    }

    /// Encoded audio (and context) rows with temporal encodings, `M × d`.
    pub fn memory_graph(&self, g: &mut Graph, cond: &Conditions, ctx: &mut Ctx) -> Result<Var> {
        self.check_conditions(cond)?;
        let d = self.config.d_model;
        let time_pe = crate::transformer::sinusoid_rows(0..cond.steps, d);
        let audio = g.leaf(cond.audio.clone());
        let a = self.audio_enc.forward(g, audio, ctx)?;
        if g.value(a).rows() != cond.steps {
            return Err(invalid("audio encoding does not align with the code grid"));
        }
        let pe = g.leaf(time_pe.clone());
        let a = g.add(a, pe);
        match &self.context_enc {
            Some(enc) => {
                let c = g.leaf(cond.context.clone());
                let c = enc.forward(g, c)?;
                let pe = g.leaf(time_pe);
                let c = g.add(c, pe);
                Ok(g.concat_rows(&[a, c]))
            }
            None => Ok(a),
        }
    }

    fn positional_graph(&self, g: &mut Graph, steps: usize) -> Var {
        let (gs, d) = (self.dims.groups, self.config.d_model);
        let len = steps * gs;
        match self.config.positional {
            PeKind::Sinusoidal2d => {
                let mut data = Vec::with_capacity(len * d);
                for p in 0..len {
                    data.extend(positional_encoding_2d(p / gs, p % gs, d));
                }
                g.leaf(Tensor::new(vec![len, d], data).unwrap())
            }
            PeKind::Sinusoidal1d => g.leaf(crate::transformer::sinusoid_rows(0..len, d)),
            PeKind::Trainable2d => {
                let t = g.param(self.pe_time.unwrap());
                let b = g.param(self.pe_group.unwrap());
                let rows_t: Vec<usize> = (0..len).map(|p| p / gs).collect();
                let rows_g: Vec<usize> = (0..len).map(|p| p % gs).collect();
                let a = g.gather_rows(t, &rows_t);
                let b = g.gather_rows(b, &rows_g);
                g.add(a, b)
            }
            PeKind::Trainable1d => {
                let t = g.param(self.pe_time.unwrap());
                let rows: Vec<usize> = (0..len).collect();
                g.gather_rows(t, &rows)
            }
        }
    }

    /// Logits per group, each `steps × K`.
    pub fn logits_graph(&self, g: &mut Graph, grid: &CodeGrid, memory: Var, speaker: usize) -> Result<Vec<Var>> {
        let (gs, k) = (self.dims.groups, self.dims.codes);
        if grid.groups != gs {
            return Err(invalid(format!("grid has {} groups, predictor expects {gs}", grid.groups)));
        }
        let tokens: Vec<usize> = (0..grid.len())
            .map(|p| {
                if grid.keep[p] {
                    (p % gs) * k + grid.indices[p].min(k - 1)
                } else {
                    self.mask_token()
                }
            })
            .collect();
        if let Some(p) = (0..grid.len()).find(|&p| grid.keep[p] && grid.indices[p] >= k) {
            return Err(invalid(format!("kept code {} out of range {k}", grid.indices[p])));
        }
        let emb = g.param(self.token_emb);
        let x = g.gather_rows(emb, &tokens);
        let pe = self.positional_graph(g, grid.steps);
        let mut x = g.add(x, pe);
        let speaker = if self.config.use_identity { speaker } else { 0 };
        let table = g.param(self.speaker_emb);
        let identity = g.gather_rows(table, &[speaker]);
        for block in &self.blocks {
            x = block.forward(g, x, memory, identity)?;
        }
        Ok((0..gs)
            .map(|gi| {
                let rows: Vec<usize> = (0..grid.steps).map(|n| n * gs + gi).collect();
                let xg = g.gather_rows(x, &rows);
                self.heads[gi].forward(g, xg)
            })
            .collect())
    }

    fn interleave(&self, g: &Graph, per_group: &[Var], steps: usize) -> Vec<Real> {
        let (gs, k) = (self.dims.groups, self.dims.codes);
        let mut out = vec![0.0; steps * gs * k];
        for (gi, v) in per_group.iter().enumerate() {
            let t = g.value(*v).data();
            for n in 0..steps {
                let p = n * gs + gi;
                out[p * k..(p + 1) * k].copy_from_slice(&t[n * k..(n + 1) * k]);
            }
        }
        out
    }

    pub fn encode_conditions(&self, cond: &Conditions) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let m = self.memory_graph(&mut g, cond, &mut Ctx::eval())?;
        Ok(g.value(m).clone())
    }

    pub fn bind(&self, cond: &Conditions) -> Result<BoundPredictor<'_>> {
        Ok(BoundPredictor {
            model: self,
            memory: self.encode_conditions(cond)?,
            speaker: cond.speaker,
            steps: cond.steps,
        })
    }

    /// Logits for every position (`len × K`, position-major).
    pub fn predict_logits(&self, grid: &CodeGrid, cond: &Conditions) -> Result<Vec<Real>> {
        if grid.steps != cond.steps {
            return Err(invalid(format!(
                "condition length mismatch: {} code steps vs {} condition steps",
                grid.steps, cond.steps
            )));
        }
        self.bind(cond)?.logits(grid)
    }

    /// Cross entropy over masked positions; `None` when nothing is masked.
    fn loss_graph(
        &self,
        g: &mut Graph,
        target: &CodeGrid,
        keep: &[bool],
        cond: &Conditions,
        ctx: &mut Ctx,
    ) -> Result<Option<(Var, usize)>> {
        let masked = keep.iter().filter(|k| !**k).count();
        if masked == 0 {
            return Ok(None);
        }
        let memory = self.memory_graph(g, cond, ctx)?;
        let input = CodeGrid {
            keep: keep.to_vec(),
            ..target.clone()
        };
        let per_group = self.logits_graph(g, &input, memory, cond.speaker)?;
        let gs = self.dims.groups;
        let mut total: Option<Var> = None;
        for (gi, &logits) in per_group.iter().enumerate() {
            let targets: Vec<usize> = (0..target.steps).map(|n| target.get(n, gi)).collect();
            let weights: Vec<Real> = (0..target.steps)
                .map(|n| if keep[n * gs + gi] { 0.0 } else { 1.0 })
                .collect();
            let w: Real = weights.iter().sum();
            if w == 0.0 {
                continue;
            }
            let ce = g.cross_entropy(logits, &targets, Some(&weights))?;
            let ce = g.scale(ce, w / masked as Real);
            total = Some(match total {
                Some(t) => g.add(t, ce),
                None => ce,
            });
        }
        Ok(total.map(|t| (t, masked)))
    }

    fn train_step(&self, ex: &Example, motion: &MotionSequence, audio: &AudioFeatureSequence, seed: u64, with_grad: bool) -> Result<StepOutput> {
        let mut rng = stream_rng(seed, 0);
        let frames = motion.frames();
        let mask = FrameMask::sample_training(frames, self.config.context_prob, &mut rng);
        let cond = Conditions::new(audio, motion, &mask, ex.speaker)?;
        let keep = sample_training_mask(ex.codes.len(), &mut rng);
        let mut ctx = if with_grad { Ctx::train() } else { Ctx::eval() };
        let mut g = Graph::with_params(&self.store);
        let Some((loss, masked)) = self.loss_graph(&mut g, &ex.codes, &keep, &cond, &mut ctx)? else {
            return Ok(StepOutput {
                ce: 0.0,
                masked: 0,
                grads: None,
                ctx,
            });
        };
        let ce = g.scalar(loss);
        let grads = with_grad.then(|| g.backward(loss));
        Ok(StepOutput { ce, masked, grads, ctx })
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let snapshot = PredictorSnapshot {
            predictor: self.config.clone(),
            dims: self.dims,
        };
        Checkpoint::new(
            Stage::Predictor,
            serde_json::to_value(snapshot).expect("serializable"),
            seed,
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Predictor)?;
        let snap: PredictorSnapshot = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(&snap.predictor, snap.dims, &mut stream_rng(0, 0))?;
        model.store.load_named(&ck.tensors)?;
        Ok(model)
    }
}

/// Mean cross entropy over masked positions of a `len × K` logit table.
pub fn predictor_loss(target: &CodeGrid, keep: &[bool], logits: &[Real], codes: usize) -> Result<Real> {
    if keep.len() != target.len() || logits.len() != target.len() * codes {
        return Err(invalid("predictor_loss shapes disagree"));
    }
    let rows: Vec<usize> = (0..target.len()).filter(|&p| !keep[p]).collect();
    if rows.is_empty() {
        warn!("predictor loss over zero masked positions");
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let l = g.leaf(Tensor::new(vec![target.len(), codes], logits.to_vec())?);
    let l = g.gather_rows(l, &rows);
    let t: Vec<usize> = rows.iter().map(|&p| target.indices[p]).collect();
    let ce = g.cross_entropy(l, &t, None)?;
    Ok(g.scalar(ce))
}

fn softmax(logits: &[Real], temperature: Real) -> Vec<Real> {
    let max = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let s: Real = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw a code at `temperature` (argmax at 0); returns it with its
/// untempered model probability.
fn sample_code(logits: &[Real], temperature: f64, rng: &mut impl Rng) -> (usize, Real) {
    let probs = softmax(logits, 1.0);
    let k = if temperature <= 0.0 {
        argmax(logits)
    } else {
        let tempered = softmax(logits, temperature as Real);
        let u: Real = rng.random();
        let mut acc = 0.0;
        let mut pick = tempered.len() - 1;
        for (i, p) in tempered.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    (k, probs[k])
}

/// Per-iteration record of a MaskGIT decode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    /// Masked count after each iteration.
    pub masked_after: Vec<usize>,
    /// Iteration (1-based) at which each position was committed; 0 for
    /// positions kept from the start.
    pub committed_at: Vec<usize>,
    /// Confidence of each committed prediction.
    pub confidence: Vec<Real>,
}

/// Confidence-ranked iterative decoding. Positions kept in `initial` are
/// never changed; the rest are committed over `schedule.iterations` steps.
pub fn maskgit_decode(
    model: &impl CodeModel,
    schedule: &MaskSchedule,
    initial: &CodeGrid,
    rng: &mut impl Rng,
) -> Result<(CodeGrid, DecodeTrace)> {
    schedule.validate()?;
    let k = model.codes();
    let mut grid = initial.clone();
    let l0 = grid.num_masked();
    let mut trace = DecodeTrace {
        masked_after: Vec::with_capacity(schedule.iterations),
        committed_at: vec![0; grid.len()],
        confidence: vec![1.0; grid.len()],
    };
    for t in 1..=schedule.iterations {
        let masked: Vec<usize> = (0..grid.len()).filter(|&p| !grid.keep[p]).collect();
        let target = schedule.masked_after(t, l0);
        let commit = masked.len().saturating_sub(target);
        if commit > 0 {
            let logits = model.logits(&grid)?;
            let temperature = schedule.temperature_at(t);
            let mut candidates: Vec<(usize, usize, Real)> = masked
                .iter()
                .map(|&p| {
                    let (code, conf) = sample_code(&logits[p * k..(p + 1) * k], temperature, rng);
                    (p, code, conf)
                })
                .collect();
            candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            for &(p, code, conf) in &candidates[..commit] {
                grid.indices[p] = code;
                grid.keep[p] = true;
                trace.committed_at[p] = t;
                trace.confidence[p] = conf;
            }
        }
        trace.masked_after.push(grid.num_masked());
    }
    Ok((grid, trace))
}

/// Raster-order decoding: one forward pass per masked position, each
/// committing a sample for the earliest still-masked position.
pub fn autoregressive_decode(
    model: &impl CodeModel,
    temperature: f64,
    initial: &CodeGrid,
    rng: &mut impl Rng,
) -> Result<CodeGrid> {
    if !(temperature >= 0.0) {
        return Err(invalid("temperature must be >= 0"));
    }
    let k = model.codes();
    let mut grid = initial.clone();
    for p in 0..grid.len() {
        if grid.keep[p] {
            continue;
        }
        let logits = model.logits(&grid)?;
        let (code, _) = sample_code(&logits[p * k..(p + 1) * k], temperature, rng);
        grid.indices[p] = code;
        grid.keep[p] = true;
    }
    Ok(grid)
}

struct Example {
    codes: CodeGrid,
    speaker: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictorEpochStats {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictorTrainReport {
    pub epochs: Vec<PredictorEpochStats>,
    pub best_epoch: usize,
    /// Validation cross entropy of the retained weights.
    pub best_val_ce: Option<f64>,
}

fn examples(pqvae: &PqVae, corpus: &Corpus) -> Result<Vec<Example>> {
    par_map(corpus.len(), |i| {
        let s = &corpus.sequences[i];
        Ok(Example {
            codes: pqvae.tokenize(&s.motion)?,
            speaker: s.speaker_id,
        })
    })
    .into_iter()
    .collect()
}

pub fn predictor_dims(pqvae: &PqVae, corpus: &Corpus) -> PredictorDims {
    PredictorDims {
        groups: pqvae.config.groups,
        codes: pqvae.config.codes,
        motion_dims: corpus.meta.motion_dims,
        audio_dims: corpus.meta.audio_dims,
        speakers: corpus.meta.num_speakers,
    }
}

/// Masked cross entropy over `corpus` with masks fixed by `seed`, weighted by
/// the number of masked positions.
pub fn validation_ce(model: &Predictor, pqvae: &PqVae, corpus: &Corpus, seed: u64) -> Result<Real> {
    let ex = examples(pqvae, corpus)?;
    evaluate(model, &ex, corpus, seed)
}

fn evaluate(model: &Predictor, ex: &[Example], corpus: &Corpus, seed: u64) -> Result<Real> {
    let outs = par_map(ex.len(), |i| {
        let s = &corpus.sequences[i];
        model.train_step(&ex[i], &s.motion, &s.audio, seed.wrapping_add(i as u64), false)
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for o in outs {
        let o = o?;
        sum += o.ce * o.masked as Real;
        n += o.masked;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as Real })
}

/// Train on pseudo-ground-truth codes from a frozen holistic PQ-VAE.
pub fn train_predictor(
    pqvae: &PqVae,
    train: &Corpus,
    val: &Corpus,
    config: &PredictorConfig,
    seed: u64,
) -> Result<(Predictor, PredictorTrainReport)> {
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    if pqvae.config.part != Part::Holistic {
        return Err(invalid("the predictor needs a holistic PQ-VAE"));
    }
    let dims = predictor_dims(pqvae, train);
    let mut model = Predictor::new(config, dims, &mut stream_rng(seed, streams::PREDICTOR_INIT))?;
    let mut rng = stream_rng(seed, streams::PREDICTOR_TRAIN);
    let train_ex = examples(pqvae, train)?;
    let val_ex = examples(pqvae, val)?;
    let val_seed = stream_rng(seed, streams::VALIDATION).random::<u64>();
    let mut opt = OptimState::new(&model.store, config.optimizer);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut stats = Vec::new();
    let mut best: Option<(Real, usize, ParamStore)> = None;

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let (mut ce_sum, mut ce_n) = (0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let outs = par_map(batch.len(), |i| {
                let s = &train.sequences[batch[i]];
                model.train_step(&train_ex[batch[i]], &s.motion, &s.audio, seeds[i], true)
            });
            model.store.zero_grads();
            let scale = 1.0 / batch.len() as Real;
            for out in outs {
                let mut out = out?;
                if !out.ce.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!("non-finite predictor loss {}", out.ce),
                    });
                }
                if let Some(gr) = &out.grads {
                    gr.accumulate_into(&mut model.store, scale);
                }
                out.ctx.apply_stats(&mut model.store);
                ce_sum += out.ce * out.masked as Real;
                ce_n += out.masked;
            }
            opt.step(&mut model.store)?;
        }
        let train_ce = if ce_n == 0 { 0.0 } else { ce_sum / ce_n as Real };
        let val_ce = if val_ex.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_ex, val, val_seed)?)
        };
        let score = val_ce.unwrap_or(train_ce);
        if best.as_ref().is_none_or(|b| score <= b.0) {
            best = Some((score, epoch, model.store.clone()));
        }
        info!("predictor epoch {epoch}: train ce {train_ce:.4} val ce {val_ce:?}");
        stats.push(PredictorEpochStats {
            epoch,
            train_ce: train_ce as f64,
            val_ce: val_ce.map(|v| v as f64),
        });
    }
    let (best_epoch, best_val_ce) = match best {
        Some((score, epoch, store)) => {
            model.store = store;
            (epoch, (!val_ex.is_empty()).then_some(score as f64))
        }
        None => (0, None),
    };
    Ok((
        model,
        PredictorTrainReport {
            epochs: stats,
            best_epoch,
            best_val_ce,
        },
    ))
}
