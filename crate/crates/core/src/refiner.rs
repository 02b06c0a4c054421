//! Deterministic sequence-to-sequence refinement of decoded motion.
//!
//! The refiner reads the combined motion (context frames from the known
//! motion, the rest from the preliminary decode) together with the frame
//! mask, attends to per-frame audio features, and predicts a residual. Known
//! frames are copied through unchanged.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::exec::par_map;
use crate::motion::{AudioFeatureSequence, FrameMask, MotionSequence};
use crate::numerics::{
    AdamWConfig, Conv1d, Graph, Linear, OptimState, ParamId, ParamStore, Real, Tensor, Var,
};
use crate::pqvae::{shuffle, PqVae};
use crate::rng::{stream_rng, streams, StreamRng};
use crate::transformer::{sinusoid_rows, DecoderBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub identity_dim: usize,
    pub use_identity: bool,
    /// Probability that a training example carries prefix/suffix context.
    pub context_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 6,
            identity_dim: 16,
            use_identity: true,
            context_prob: 0.3,
            epochs: 100,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(
                "refiner.d_model must be even, positive and divisible by heads".into(),
            ));
        }
        if self.blocks == 0 || self.identity_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "refiner.blocks, identity_dim and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.context_prob) {
            return Err(Error::Config("refiner.context_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerDims {
    pub motion_dims: usize,
    pub audio_dims: usize,
    pub speakers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerSnapshot {
    pub refiner: RefinerConfig,
    pub dims: RefinerDims,
}

/// `I ⊙ context + (1 − I) ⊙ preliminary`, frame by frame.
pub fn combine_motion(
    context: &MotionSequence,
    preliminary: &MotionSequence,
    mask: &FrameMask,
) -> Result<MotionSequence> {
    if context.frames() != preliminary.frames()
        || context.dims() != preliminary.dims()
        || mask.len() != context.frames()
    {
        return Err(invalid(format!(
            "combine_motion shapes differ: context {}x{}, preliminary {}x{}, mask {}",
            context.frames(),
            context.dims(),
            preliminary.frames(),
            preliminary.dims(),
            mask.len()
        )));
    }
    let mut out = preliminary.clone();
    for t in 0..context.frames() {
        if mask.is_known(t) {
            out.frame_mut(t).copy_from_slice(context.frame(t));
        }
    }
    Ok(out)
}

fn rows_tensor(s: &MotionSequence) -> Tensor {
    Tensor::new(
        vec![s.frames(), s.dims()],
        s.data().iter().map(|&v| v as Real).collect(),
    )
    .expect("series shape")
}

/// Weight `1 − I` repeated across channels.
fn generated_weights(mask: &FrameMask, dims: usize) -> Vec<Real> {
    mask.bits()
        .iter()
        .flat_map(|&k| std::iter::repeat_n(if k { 0.0 } else { 1.0 }, dims))
        .collect()
}

fn refine_loss_graph(g: &mut Graph, gt: Var, refined: Var, mask: &FrameMask, dims: usize) -> Var {
    let recon = g.l1(gt, refined, Some(generated_weights(mask, dims)));
    let vg = g.diff_rows(gt);
    let vr = g.diff_rows(refined);
    let velocity = g.l1(vg, vr, None);
    g.add(recon, velocity)
}

/// L1 over generated frames (normalized by all elements) plus full-sequence
/// velocity L1.
pub fn refine_loss(gt: &MotionSequence, refined: &MotionSequence, mask: &FrameMask) -> Result<Real> {
    if gt.frames() != refined.frames() || gt.dims() != refined.dims() || mask.len() != gt.frames() {
        return Err(invalid("refine_loss shapes differ"));
    }
    if gt.frames() < 2 {
        return Err(invalid("refine_loss needs at least two frames"));
    }
    let mut g = Graph::new();
    let a = g.leaf(rows_tensor(gt));
    let b = g.leaf(rows_tensor(refined));
    let l = refine_loss_graph(&mut g, a, b, mask, gt.dims());
    Ok(g.scalar(l))
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefinerConfig,
    pub dims: RefinerDims,
    pub store: ParamStore,
    input: Linear,
    audio: Conv1d,
    speaker_emb: ParamId,
    blocks: Vec<DecoderBlock>,
    output: Linear,
}

impl Refiner {
    pub fn new(config: &RefinerConfig, dims: RefinerDims, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        if dims.motion_dims == 0 || dims.audio_dims == 0 || dims.speakers == 0 {
            return Err(invalid("refiner needs positive motion, audio and speaker counts"));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let s = &mut store;
        let input = Linear::new(s, "input", dims.motion_dims + 1, d, rng);
        let audio = Conv1d::new(s, "audio", dims.audio_dims, d, 3, 1, 1, rng);
        let speaker_emb = s.add(
            "speakers",
            crate::numerics::nn::uniform_tensor(&[dims.speakers, config.identity_dim], 1.0, rng),
        );
        let blocks = (0..config.blocks)
            .map(|i| DecoderBlock::new(s, &format!("block{i}"), d, config.heads, config.identity_dim, rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(s, "output", d, dims.motion_dims, rng);
        s.get_mut(output.w).data_mut().fill(0.0);
        s.get_mut(output.b).data_mut().fill(0.0);
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            input,
            audio,
            speaker_emb,
            blocks,
            output,
        })
    }

    fn check(&self, combined: &MotionSequence, audio: &AudioFeatureSequence, mask: &FrameMask, speaker: u32) -> Result<()> {
        let n = combined.frames();
        if n == 0 || audio.frames() != n || mask.len() != n {
            return Err(invalid(format!(
                "refiner inputs misaligned: motion {n}, audio {}, mask {}",
                audio.frames(),
                mask.len()
            )));
        }
        if combined.dims() != self.dims.motion_dims || audio.dims() != self.dims.audio_dims {
            return Err(invalid("refiner input channel counts do not match the checkpoint"));
        }
        if speaker as usize >= self.dims.speakers {
            return Err(invalid(format!(
                "speaker {speaker} out of range for {} speakers",
                self.dims.speakers
            )));
        }
        Ok(())
    }

    /// Refined motion as a `frames × dims` graph value; context frames equal
    /// `combined` there.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        combined: &MotionSequence,
        audio: &AudioFeatureSequence,
        mask: &FrameMask,
        speaker: u32,
    ) -> Result<Var> {
        self.check(combined, audio, mask, speaker)?;
        let (n, dm) = (combined.frames(), self.dims.motion_dims);
        let base = rows_tensor(combined);
        let mut x = Vec::with_capacity(n * (dm + 1));
        for t in 0..n {
            x.extend_from_slice(&base.data()[t * dm..(t + 1) * dm]);
            x.push(if mask.is_known(t) { 1.0 } else { 0.0 });
        }
        let pe = sinusoid_rows(0..n, self.config.d_model);
        let x = g.leaf(Tensor::new(vec![n, dm + 1], x)?);
        let x = self.input.forward(g, x);
        let p = g.leaf(pe.clone());
        let mut h = g.add(x, p);
        let a = g.leaf(audio.to_channel_major());
        let a = self.audio.forward(g, a)?;
        let a = g.transpose(a);
        let p = g.leaf(pe);
        let memory = g.add(a, p);
        let speaker = if self.config.use_identity { speaker as usize } else { 0 };
        let table = g.param(self.speaker_emb);
        let identity = g.gather_rows(table, &[speaker]);
        for block in &self.blocks {
            h = block.forward(g, h, memory, identity)?;
        }
        let delta = self.output.forward(g, h);
        let gen = g.leaf(Tensor::new(vec![n, dm], generated_weights(mask, dm))?);
        let delta = g.mul(delta, gen);
        let base = g.leaf(base);
        Ok(g.add(base, delta))
    }

    pub fn refine(
        &self,
        combined: &MotionSequence,
        audio: &AudioFeatureSequence,
        mask: &FrameMask,
        speaker: u32,
    ) -> Result<MotionSequence> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward_graph(&mut g, combined, audio, mask, speaker)?;
        let t = g.value(out);
        let data = t.data().iter().map(|&v| v as f32).collect();
        let refined = MotionSequence::new(combined.frames(), combined.dims(), data)?;
        combine_motion(combined, &refined, mask)
    }

    fn step(&self, ex: &Example, gt: &MotionSequence, audio: &AudioFeatureSequence, with_grad: bool) -> Result<(Real, Option<crate::numerics::Gradients>)> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward_graph(&mut g, &ex.combined, audio, &ex.mask, ex.speaker)?;
        let target = g.leaf(rows_tensor(gt));
        let loss = refine_loss_graph(&mut g, target, out, &ex.mask, self.dims.motion_dims);
        let value = g.scalar(loss);
        Ok((value, with_grad.then(|| g.backward(loss))))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let snapshot = RefinerSnapshot {
            refiner: self.config.clone(),
            dims: self.dims,
        };
        Checkpoint::new(
            Stage::Refiner,
            serde_json::to_value(snapshot).expect("serializable"),
            seed,
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Refiner)?;
        let snap: RefinerSnapshot = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(&snap.refiner, snap.dims, &mut stream_rng(0, 0))?;
        model.store.load_named(&ck.tensors)?;
        Ok(model)
    }
}

struct Example {
    combined: MotionSequence,
    mask: FrameMask,
    speaker: u32,
}

fn example(pq_recon: &MotionSequence, gt: &MotionSequence, speaker: u32, context_prob: f64, rng: &mut impl Rng) -> Result<Example> {
    let mask = FrameMask::sample_training(gt.frames(), context_prob, rng);
    Ok(Example {
        combined: combine_motion(gt, pq_recon, &mask)?,
        mask,
        speaker,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RefinerEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RefinerTrainReport {
    pub epochs: Vec<RefinerEpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Validation loss of passing the combined input through unchanged.
    pub identity_val_loss: Option<f64>,
}

fn reconstructions(pqvae: &PqVae, corpus: &Corpus) -> Result<Vec<MotionSequence>> {
    par_map(corpus.len(), |i| pqvae.reconstruct(&corpus.sequences[i].motion))
        .into_iter()
        .collect()
}

/// Train on `I ⊙ M + (1 − I) ⊙ M_pq` built from a frozen PQ-VAE's
/// reconstructions.
pub fn train_refiner(
    pqvae: &PqVae,
    train: &Corpus,
    val: &Corpus,
    config: &RefinerConfig,
    seed: u64,
) -> Result<(Refiner, RefinerTrainReport)> {
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let dims = RefinerDims {
        motion_dims: train.meta.motion_dims,
        audio_dims: train.meta.audio_dims,
        speakers: train.meta.num_speakers,
    };
    let mut model = Refiner::new(config, dims, &mut stream_rng(seed, streams::REFINER_INIT))?;
    let mut rng = stream_rng(seed, streams::REFINER_TRAIN);
    let train_pq = reconstructions(pqvae, train)?;
    let val_pq = reconstructions(pqvae, val)?;
    let mut val_rng = stream_rng(seed, streams::VALIDATION);
    let val_ex: Vec<Example> = val
        .sequences
        .iter()
        .zip(&val_pq)
        .map(|(s, pq)| example(pq, &s.motion, s.speaker_id, config.context_prob, &mut val_rng))
        .collect::<Result<_>>()?;
    let identity_val_loss = if val_ex.is_empty() {
        None
    } else {
        let mut sum = 0.0;
        for (ex, s) in val_ex.iter().zip(&val.sequences) {
            sum += refine_loss(&s.motion, &ex.combined, &ex.mask)?;
        }
        Some((sum / val_ex.len() as Real) as f64)
    };
    let evaluate = |model: &Refiner| -> Result<Real> {
        let losses = par_map(val_ex.len(), |i| {
            let s = &val.sequences[i];
            model.step(&val_ex[i], &s.motion, &s.audio, false).map(|r| r.0)
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / val_ex.len() as Real)
    };

    let mut opt = OptimState::new(&model.store, config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stats = Vec::new();
    let mut best: Option<(Real, usize, ParamStore)> = None;
    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let examples: Vec<Example> = batch
                .iter()
                .map(|&i| {
                    let s = &train.sequences[i];
                    example(&train_pq[i], &s.motion, s.speaker_id, config.context_prob, &mut rng)
                })
                .collect::<Result<_>>()?;
            let outs = par_map(batch.len(), |j| {
                let s = &train.sequences[batch[j]];
                model.step(&examples[j], &s.motion, &s.audio, true)
            });
            model.store.zero_grads();
            let scale = 1.0 / batch.len() as Real;
            for out in outs {
                let (loss, grads) = out?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!("non-finite refiner loss {loss}"),
                    });
                }
                if let Some(gr) = grads {
                    gr.accumulate_into(&mut model.store, scale);
                }
                sum += loss;
                count += 1;
            }
            opt.step(&mut model.store)?;
        }
        let train_loss = sum / count.max(1) as Real;
        let val_loss = if val_ex.is_empty() { None } else { Some(evaluate(&model)?) };
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|b| score <= b.0) {
            best = Some((score, epoch, model.store.clone()));
        }
        info!("refiner epoch {epoch}: train {train_loss:.4} val {val_loss:?}");
        stats.push(RefinerEpochStats {
            epoch,
            train_loss: train_loss as f64,
            val_loss: val_loss.map(|v| v as f64),
        });
    }
    let (best_epoch, best_val_loss) = match best {
        Some((score, epoch, store)) => {
            model.store = store;
            (epoch, (!val_ex.is_empty()).then_some(score as f64))
        }
        None => (0, None),
    };
    Ok((
        model,
        RefinerTrainReport {
            epochs: stats,
            best_epoch,
            best_val_loss,
            identity_val_loss,
        },
    ))
}
