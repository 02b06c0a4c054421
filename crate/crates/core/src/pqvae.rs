//! Product-quantized temporal autoencoder.
//!
//! The encoder maps a `frames × dims` motion to `N/8` latent steps, each a
//! concatenation of `G` sub-vectors of size `d^c`. Every sub-vector is snapped
//! to the nearest entry of its own `K`-entry codebook, so one step can take
//! `K^G` values while only `K·G` codes are stored. Codebooks are learned by
//! exponential moving averages with reset of under-used entries; the
//! encoder and decoder by AdamW through a straight-through quantizer.

use std::ops::Range;

use log::{debug, info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::{Corpus, SequenceRecord};
use crate::error::{invalid, Error, Result};
use crate::exec::par_map;
use crate::motion::{FrameSeries, MotionSequence, Part, PartLayout};
use crate::numerics::nn::LEAKY_SLOPE;
use crate::numerics::{
    AdamWConfig, Conv1d, ConvTranspose1d, Ctx, Gradients, Graph, Linear, Norm, NormKind,
    OptimState, ParamStore, Real, Tensor, Var,
};
use crate::rng::{stream_rng, streams, StreamRng};

/// Temporal downsampling factor `w` of the encoder (three stride-2 convs).
pub const WINDOW: usize = 8;
const DOWNSAMPLE_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PqVaeConfig {
    /// Channel subset the model is trained on.
    pub part: Part,
    pub groups: usize,
    pub codes: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub code_reset: bool,
    pub reset_threshold: f64,
    pub norm: NormKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PqVaeConfig {
    fn default() -> Self {
        Self {
            part: Part::Holistic,
            groups: 4,
            codes: 128,
            code_dim: 16,
            hidden: 64,
            beta: 0.25,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            code_reset: true,
            reset_threshold: 1.0,
            norm: NormKind::Channel,
            epochs: 100,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("groups", self.groups),
            ("codes", self.codes),
            ("code_dim", self.code_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("pqvae.{name} must be positive")));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("pqvae.beta must be >= 0".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("pqvae.ema_decay must lie in (0, 1)".into()));
        }
        if !(self.ema_eps > 0.0) || !(self.reset_threshold >= 0.0) {
            return Err(Error::Config(
                "pqvae.ema_eps must be > 0 and reset_threshold >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.groups * self.code_dim
    }
}

/// Pre- or post-quantization latents: `steps × groups × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub steps: usize,
    pub groups: usize,
    pub dim: usize,
    pub values: Vec<Real>,
    /// Frame count before padding to a multiple of [`WINDOW`].
    pub valid_frames: usize,
}

impl LatentGrid {
    pub fn vector(&self, n: usize, g: usize) -> &[Real] {
        let start = (n * self.groups + g) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// `steps × (groups·dim)` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.steps, self.groups * self.dim], self.values.clone())
            .expect("latent grid shape")
    }

    fn from_tensor(t: &Tensor, groups: usize, valid_frames: usize) -> Self {
        Self {
            steps: t.rows(),
            groups,
            dim: t.cols() / groups,
            values: t.data().to_vec(),
            valid_frames,
        }
    }
}

/// Code indices per (step, group) plus the keep mask (`true` = known).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeGrid {
    pub steps: usize,
    pub groups: usize,
    pub indices: Vec<usize>,
    pub keep: Vec<bool>,
}

impl CodeGrid {
    /// All positions kept.
    pub fn new(steps: usize, groups: usize, indices: Vec<usize>) -> Self {
        assert_eq!(indices.len(), steps * groups);
        Self {
            steps,
            groups,
            keep: vec![true; indices.len()],
            indices,
        }
    }

    /// All positions masked.
    pub fn masked(steps: usize, groups: usize) -> Self {
        Self {
            steps,
            groups,
            indices: vec![0; steps * groups],
            keep: vec![false; steps * groups],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, n: usize, g: usize) -> usize {
        self.indices[n * self.groups + g]
    }

    pub fn num_masked(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn is_complete(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

/// Sufficient statistics of one batch of assignments.
#[derive(Clone, Debug)]
pub struct Assignments {
    groups: usize,
    codes: usize,
    dim: usize,
    counts: Vec<Real>,
    sums: Vec<Real>,
}

impl Assignments {
    pub fn new(groups: usize, codes: usize, dim: usize) -> Self {
        Self {
            groups,
            codes,
            dim,
            counts: vec![0.0; groups * codes],
            sums: vec![0.0; groups * codes * dim],
        }
    }

    pub fn add(&mut self, z: &LatentGrid, codes: &CodeGrid) {
        for n in 0..z.steps {
            for g in 0..self.groups {
                let k = codes.get(n, g);
                let slot = g * self.codes + k;
                self.counts[slot] += 1.0;
                let dst = &mut self.sums[slot * self.dim..(slot + 1) * self.dim];
                for (s, v) in dst.iter_mut().zip(z.vector(n, g)) {
                    *s += v;
                }
            }
        }
    }

    pub fn count(&self, g: usize, k: usize) -> Real {
        self.counts[g * self.codes + k]
    }
}

/// `G` independent codebooks of `K` codes each, with EMA accumulators and
/// per-epoch usage counters.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductCodebook {
    pub groups: usize,
    pub codes: usize,
    pub dim: usize,
    values: Vec<Real>,
    ema_counts: Vec<Real>,
    ema_sums: Vec<Real>,
    usage: Vec<u64>,
    /// EMA count given to a freshly seeded code.
    pub seed_count: Real,
}

impl ProductCodebook {
    /// EMA state starts as one virtual assignment at each code's value.
    pub fn from_values(groups: usize, codes: usize, dim: usize, values: Vec<Real>) -> Result<Self> {
        if values.len() != groups * codes * dim {
            return Err(invalid(format!(
                "codebook needs {} values, got {}",
                groups * codes * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("codebook values must be finite"));
        }
        Ok(Self {
            groups,
            codes,
            dim,
            ema_counts: vec![1.0; groups * codes],
            ema_sums: values.clone(),
            values,
            usage: vec![0; groups * codes],
            seed_count: 1.0,
        })
    }

    pub fn code(&self, g: usize, k: usize) -> &[Real] {
        let start = (g * self.codes + k) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn ema_count(&self, g: usize, k: usize) -> Real {
        self.ema_counts[g * self.codes + k]
    }

    pub fn usage(&self, g: usize, k: usize) -> u64 {
        self.usage[g * self.codes + k]
    }

    /// Directly set the EMA count and usage of one code (test and audit hook).
    pub fn set_stats(&mut self, g: usize, k: usize, ema_count: Real, usage: u64) {
        let slot = g * self.codes + k;
        self.ema_counts[slot] = ema_count;
        self.usage[slot] = usage;
    }

    pub fn clear_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn unused_codes(&self) -> usize {
        self.usage.iter().filter(|&&u| u == 0).count()
    }

    /// Nearest code in group `g` (squared Euclidean, ties to the smaller index).
    pub fn nearest(&self, g: usize, z: &[Real]) -> (usize, Real) {
        let mut best = (0, Real::INFINITY);
        for k in 0..self.codes {
            let d: Real = self
                .code(g, k)
                .iter()
                .zip(z)
                .map(|(c, x)| (c - x) * (c - x))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<(CodeGrid, LatentGrid)> {
        if z.groups != self.groups || z.dim != self.dim {
            return Err(invalid(format!(
                "latent grid has {}x{} sub-vectors, codebook expects {}x{}",
                z.groups, z.dim, self.groups, self.dim
            )));
        }
        let mut indices = Vec::with_capacity(z.steps * z.groups);
        let mut values = Vec::with_capacity(z.values.len());
        for n in 0..z.steps {
            for g in 0..z.groups {
                let (k, _) = self.nearest(g, z.vector(n, g));
                indices.push(k);
                values.extend_from_slice(self.code(g, k));
            }
        }
        Ok((
            CodeGrid::new(z.steps, z.groups, indices),
            LatentGrid {
                values,
                ..z.clone()
            },
        ))
    }

    /// Quantized latents for a complete code grid.
    pub fn lookup(&self, codes: &CodeGrid, valid_frames: usize) -> Result<LatentGrid> {
        if codes.groups != self.groups {
            return Err(invalid("code grid group count differs from codebook"));
        }
        if !codes.is_complete() {
            return Err(invalid("cannot look up a code grid with masked positions"));
        }
        let mut values = Vec::with_capacity(codes.len() * self.dim);
        for n in 0..codes.steps {
            for g in 0..codes.groups {
                let k = codes.get(n, g);
                if k >= self.codes {
                    return Err(invalid(format!("code index {k} out of range {}", self.codes)));
                }
                values.extend_from_slice(self.code(g, k));
            }
        }
        Ok(LatentGrid {
            steps: codes.steps,
            groups: codes.groups,
            dim: self.dim,
            values,
            valid_frames,
        })
    }

    pub fn record_usage(&mut self, codes: &CodeGrid) {
        for n in 0..codes.steps {
            for g in 0..codes.groups {
                self.usage[g * self.codes + codes.get(n, g)] += 1;
            }
        }
    }

    /// Moving-average re-estimation of every code as the mean of the
    /// latents assigned to it, with Laplace smoothing of the counts.
    pub fn ema_update(&mut self, batch: &Assignments, decay: Real, eps: Real) {
        let (gk, d) = (self.groups * self.codes, self.dim);
        for slot in 0..gk {
            self.ema_counts[slot] = decay * self.ema_counts[slot] + (1.0 - decay) * batch.counts[slot];
            for j in 0..d {
                let i = slot * d + j;
                self.ema_sums[i] = decay * self.ema_sums[i] + (1.0 - decay) * batch.sums[i];
            }
        }
        let k = self.codes as Real;
        for g in 0..self.groups {
            let range = g * self.codes..(g + 1) * self.codes;
            let total: Real = self.ema_counts[range.clone()].iter().sum();
            for slot in range {
                let smoothed = (self.ema_counts[slot] + eps) / (total + k * eps) * total;
                if smoothed > 0.0 {
                    for j in 0..d {
                        self.values[slot * d + j] = self.ema_sums[slot * d + j] / smoothed;
                    }
                }
            }
        }
    }

    /// Re-seed every code whose EMA count or epoch usage is below `threshold`
    /// with a latent drawn from `batch` (with replacement). Returns the
    /// number of codes reset.
    pub fn code_reset(&mut self, batch: &[LatentGrid], threshold: Real, rng: &mut impl Rng) -> usize {
        let mut resets = 0;
        for g in 0..self.groups {
            let pool: Vec<&[Real]> = batch
                .iter()
                .flat_map(|z| (0..z.steps).map(move |n| z.vector(n, g)))
                .collect();
            if pool.is_empty() {
                continue;
            }
            for k in 0..self.codes {
                let slot = g * self.codes + k;
                if self.ema_counts[slot] >= threshold && self.usage[slot] as Real >= threshold {
                    continue;
                }
                let src = pool[rng.random_range(0..pool.len())];
                self.reseed(g, k, src);
                resets += 1;
            }
        }
        resets
    }

    fn reseed(&mut self, g: usize, k: usize, value: &[Real]) {
        let slot = g * self.codes + k;
        let d = self.dim;
        self.values[slot * d..(slot + 1) * d].copy_from_slice(value);
        for (s, v) in self.ema_sums[slot * d..(slot + 1) * d].iter_mut().zip(value) {
            *s = v * self.seed_count;
        }
        self.ema_counts[slot] = self.seed_count;
    }

    /// Usage over `latents` with the current codes; every code left unused is
    /// moved onto a latent currently served by a code used at least twice, so
    /// the used set only grows. Returns the number of codes moved.
    pub fn audit(&mut self, latents: &[LatentGrid]) -> usize {
        let mut moved = 0;
        for g in 0..self.groups {
            let mut assigned: Vec<Vec<&[Real]>> = vec![Vec::new(); self.codes];
            for z in latents {
                for n in 0..z.steps {
                    let v = z.vector(n, g);
                    assigned[self.nearest(g, v).0].push(v);
                }
            }
            for k in 0..self.codes {
                if !assigned[k].is_empty() {
                    continue;
                }
                let donor = (0..self.codes)
                    .filter(|&j| assigned[j].len() >= 2)
                    .max_by_key(|&j| (assigned[j].len(), std::cmp::Reverse(j)));
                let Some(j) = donor else { break };
                let code_j = self.code(g, j).to_vec();
                let pick = assigned[j]
                    .iter()
                    .position(|v| *v != code_j.as_slice())
                    .unwrap_or(0);
                let v = assigned[j].swap_remove(pick);
                self.reseed(g, k, v);
                assigned[k].push(v);
                moved += 1;
            }
            for (k, a) in assigned.iter().enumerate() {
                self.usage[g * self.codes + k] = a.len() as u64;
            }
        }
        moved
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let (g, k, d) = (self.groups, self.codes, self.dim);
        vec![
            (
                "codebook.values".into(),
                Tensor::new(vec![g, k, d], self.values.clone()).unwrap(),
            ),
            (
                "codebook.ema_counts".into(),
                Tensor::new(vec![g, k], self.ema_counts.clone()).unwrap(),
            ),
            (
                "codebook.ema_sums".into(),
                Tensor::new(vec![g, k, d], self.ema_sums.clone()).unwrap(),
            ),
            (
                "codebook.usage".into(),
                Tensor::new(vec![g, k], self.usage.iter().map(|&u| u as Real).collect()).unwrap(),
            ),
        ]
    }

    fn from_checkpoint(ck: &Checkpoint, groups: usize, codes: usize, dim: usize) -> Result<Self> {
        let take = |name: &str, shape: &[usize]| -> Result<Vec<Real>> {
            let t = ck.tensor(name)?;
            if t.shape() != shape {
                return Err(invalid(format!("`{name}` has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let mut cb = Self::from_values(groups, codes, dim, take("codebook.values", &[groups, codes, dim])?)?;
        cb.ema_counts = take("codebook.ema_counts", &[groups, codes])?;
        cb.ema_sums = take("codebook.ema_sums", &[groups, codes, dim])?;
        cb.usage = take("codebook.usage", &[groups, codes])?
            .into_iter()
            .map(|u| u as u64)
            .collect();
        Ok(cb)
    }
}

/// Loss value and its three terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqLoss {
    pub total: Real,
    pub recon: Real,
    pub velocity: Real,
    pub commitment: Real,
}

impl PqLoss {
    fn add_scaled(&mut self, o: &PqLoss, s: Real) {
        self.total += s * o.total;
        self.recon += s * o.recon;
        self.velocity += s * o.velocity;
        self.commitment += s * o.commitment;
    }
}

/// Reconstruction L1 + velocity L1 + `β`·mean squared commitment. `m` and
/// `m_pq` are channel-major (`dims × frames`); `z` and `codes` are the latents
/// and their selected codes (treated as constants).
pub fn pq_loss_graph(g: &mut Graph, m: Var, m_pq: Var, z: Var, codes: Var, beta: Real) -> (Var, [Var; 3]) {
    let recon = g.l1(m, m_pq, None);
    let v = g.diff_cols(m);
    let v_pq = g.diff_cols(m_pq);
    let velocity = g.l1(v, v_pq, None);
    let commit = g.mean_sq_diff(z, codes);
    let a = g.add(recon, velocity);
    let c = g.scale(commit, beta);
    (g.add(a, c), [recon, velocity, commit])
}

pub fn pq_loss(m: &Tensor, m_pq: &Tensor, z: &Tensor, codes: &Tensor, beta: Real) -> Result<PqLoss> {
    if m.shape() != m_pq.shape() || z.numel() != codes.numel() {
        return Err(invalid("pq_loss operand shapes differ"));
    }
    if !(beta >= 0.0) {
        return Err(invalid("beta must be >= 0"));
    }
    let mut g = Graph::new();
    let vars = [m, m_pq, z, codes].map(|t| g.leaf(t.clone()));
    let (total, [r, v, c]) = pq_loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3], beta);
    Ok(PqLoss {
        total: g.scalar(total),
        recon: g.scalar(r),
        velocity: g.scalar(v),
        commitment: g.scalar(c),
    })
}

#[derive(Clone, Debug)]
struct ResBlock {
    convs: Vec<Conv1d>,
    norms: Vec<Norm>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, norm: NormKind, rng: &mut StreamRng) -> Self {
        let convs = (0..3)
            .map(|i| Conv1d::new(store, &format!("{name}.conv{i}"), ch, ch, 3, 1, 1, rng))
            .collect();
        let norms = (0..3)
            .map(|i| Norm::new(store, &format!("{name}.norm{i}"), ch, norm))
            .collect();
        Self { convs, norms }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h)?;
            h = norm.forward(g, h, ctx);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(g.add(x, h))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Conv1d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv1d>,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    proj: Linear,
    blocks: Vec<ResBlock>,
    ups: Vec<ConvTranspose1d>,
    output: Conv1d,
}

/// Snapshot stored in the checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PqVaeSnapshot {
    pub pqvae: PqVaeConfig,
    pub motion_dims: usize,
    pub part_layout: PartLayout,
}

#[derive(Clone, Debug)]
pub struct PqVae {
    pub config: PqVaeConfig,
    pub motion_dims: usize,
    pub part_layout: PartLayout,
    pub store: ParamStore,
    pub codebook: ProductCodebook,
    encoder: Encoder,
    decoder: Decoder,
}

/// Channel-major input padded to a multiple of [`WINDOW`].
#[derive(Clone, Debug)]
pub struct PreparedMotion {
    pub tensor: Tensor,
    pub valid_frames: usize,
}

/// Output of one training forward/backward pass.
struct StepOutput {
    loss: PqLoss,
    grads: Gradients,
    latents: LatentGrid,
    codes: CodeGrid,
    ctx: Ctx,
}

impl PqVae {
    pub fn new(config: &PqVaeConfig, motion_dims: usize, part_layout: &PartLayout, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        part_layout.validate(motion_dims)?;
        let input = part_layout.channels(config.part, motion_dims).len();
        let h = config.hidden;
        let mut store = ParamStore::new();
        let s = &mut store;
        let encoder = Encoder {
            input: Conv1d::new(s, "enc.input", input, h, 3, 1, 1, rng),
            blocks: (0..=DOWNSAMPLE_LAYERS)
                .map(|i| ResBlock::new(s, &format!("enc.res{i}"), h, config.norm, rng))
                .collect(),
            downs: (0..DOWNSAMPLE_LAYERS)
                .map(|i| Conv1d::new(s, &format!("enc.down{i}"), h, h, 4, 2, 1, rng))
                .collect(),
            proj: Linear::new(s, "enc.proj", h, config.latent_dim(), rng),
        };
        let decoder = Decoder {
            proj: Linear::new(s, "dec.proj", config.latent_dim(), h, rng),
            blocks: (0..=DOWNSAMPLE_LAYERS)
                .map(|i| ResBlock::new(s, &format!("dec.res{i}"), h, config.norm, rng))
                .collect(),
            ups: (0..DOWNSAMPLE_LAYERS)
                .map(|i| ConvTranspose1d::new(s, &format!("dec.up{i}"), h, h, 4, 2, 1, rng))
                .collect(),
            output: Conv1d::new(s, "dec.output", h, input, 3, 1, 1, rng),
        };
        let scale = 1.0 / (config.code_dim as Real).sqrt();
        let values = (0..config.groups * config.codes * config.code_dim)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let codebook = ProductCodebook::from_values(config.groups, config.codes, config.code_dim, values)?;
        Ok(Self {
            config: config.clone(),
            motion_dims,
            part_layout: part_layout.clone(),
            store,
            codebook,
            encoder,
            decoder,
        })
    }

    pub fn channels(&self) -> Range<usize> {
        self.part_layout.channels(self.config.part, self.motion_dims)
    }

    pub fn input_dims(&self) -> usize {
        self.channels().len()
    }

    /// Select the part channels, check finiteness and pad by edge replication.
    pub fn prepare(&self, motion: &MotionSequence) -> Result<PreparedMotion> {
        if motion.dims() != self.motion_dims {
            return Err(invalid(format!(
                "motion has {} dims, model expects {}",
                motion.dims(),
                self.motion_dims
            )));
        }
        if motion.frames() == 0 {
            return Err(invalid("motion must have at least one frame"));
        }
        if !motion.is_finite() {
            return Err(invalid("motion contains non-finite values"));
        }
        let part = motion.select_channels(self.channels());
        let padded = motion.frames().div_ceil(WINDOW) * WINDOW;
        Ok(PreparedMotion {
            tensor: part.pad_edge(padded).to_channel_major(),
            valid_frames: motion.frames(),
        })
    }

    /// Pre-quantization latents, `steps × (G·d^c)`.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let e = &self.encoder;
        let mut h = e.input.forward(g, x)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for i in 0..=DOWNSAMPLE_LAYERS {
            h = e.blocks[i].forward(g, h, ctx)?;
            if i < DOWNSAMPLE_LAYERS {
                h = e.downs[i].forward(g, h)?;
            }
        }
        let t = g.transpose(h);
        Ok(e.proj.forward(g, t))
    }

    /// Channel-major motion of `steps·WINDOW` frames from `steps × (G·d^c)` latents.
    pub fn decode_graph(&self, g: &mut Graph, zq: Var, ctx: &mut Ctx) -> Result<Var> {
        let d = &self.decoder;
        let h = d.proj.forward(g, zq);
        let mut h = g.transpose(h);
        for i in 0..=DOWNSAMPLE_LAYERS {
            h = d.blocks[i].forward(g, h, ctx)?;
            if i < DOWNSAMPLE_LAYERS {
                h = d.ups[i].forward(g, h)?;
            }
        }
        d.output.forward(g, h)
    }

    pub fn encode(&self, motion: &MotionSequence) -> Result<LatentGrid> {
        let p = self.prepare(motion)?;
        self.encode_prepared(&p)
    }

    pub fn encode_prepared(&self, p: &PreparedMotion) -> Result<LatentGrid> {
        let mut g = Graph::with_params(&self.store);
        let x = g.leaf(p.tensor.clone());
        let z = self.encode_graph(&mut g, x, &mut Ctx::eval())?;
        Ok(LatentGrid::from_tensor(g.value(z), self.config.groups, p.valid_frames))
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<(CodeGrid, LatentGrid)> {
        self.codebook.quantize(z)
    }

    /// Decode quantized latents and crop to their valid length.
    pub fn decode(&self, q: &LatentGrid) -> Result<MotionSequence> {
        if !q.values.iter().all(|v| v.is_finite()) {
            return Err(invalid("latent grid contains non-finite values"));
        }
        let mut g = Graph::with_params(&self.store);
        let z = g.leaf(q.to_tensor());
        let out = self.decode_graph(&mut g, z, &mut Ctx::eval())?;
        let valid = q.valid_frames.min(q.steps * WINDOW);
        Ok(FrameSeries::from_channel_major(g.value(out)).crop(valid))
    }

    pub fn decode_codes(&self, codes: &CodeGrid, valid_frames: usize) -> Result<MotionSequence> {
        self.decode(&self.codebook.lookup(codes, valid_frames)?)
    }

    pub fn tokenize(&self, motion: &MotionSequence) -> Result<CodeGrid> {
        Ok(self.quantize(&self.encode(motion)?)?.0)
    }

    /// Encode, quantize and decode; returns the part channels only.
    pub fn reconstruct(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        let z = self.encode(motion)?;
        let (_, q) = self.quantize(&z)?;
        self.decode(&q)
    }

    /// Time-averaged pre-quantization latent (`G·d^c` values).
    pub fn feature(&self, motion: &MotionSequence) -> Result<Vec<Real>> {
        let z = self.encode(motion)?;
        let width = z.groups * z.dim;
        let mut out = vec![0.0; width];
        for n in 0..z.steps {
            for (o, v) in out.iter_mut().zip(&z.values[n * width..(n + 1) * width]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= z.steps as Real);
        Ok(out)
    }

    /// Loss through the straight-through quantizer, or with the quantizer
    /// bypassed (decoder fed the raw latents) when `bypass` is set.
    pub fn loss_graph(&self, g: &mut Graph, p: &PreparedMotion, ctx: &mut Ctx, bypass: bool) -> Result<(Var, [Var; 3], Var, CodeGrid)> {
        let x = g.leaf(p.tensor.clone());
        let z = self.encode_graph(g, x, ctx)?;
        let zt = LatentGrid::from_tensor(g.value(z), self.config.groups, p.valid_frames);
        let (codes, q) = self.codebook.quantize(&zt)?;
        let qt = q.to_tensor();
        let dec_in = if bypass { z } else { g.straight_through(z, qt.clone()) };
        let out = self.decode_graph(g, dec_in, ctx)?;
        let out = g.slice_cols(out, 0, p.valid_frames);
        let target = g.slice_cols(x, 0, p.valid_frames);
        let c = g.leaf(qt);
        let (total, parts) = pq_loss_graph(g, target, out, z, c, self.config.beta as Real);
        Ok((total, parts, z, codes))
    }

    fn train_step(&self, p: &PreparedMotion) -> Result<StepOutput> {
        let mut ctx = Ctx::train();
        let mut g = Graph::with_params(&self.store);
        let (total, [r, v, c], z, codes) = self.loss_graph(&mut g, p, &mut ctx, false)?;
        let loss = PqLoss {
            total: g.scalar(total),
            recon: g.scalar(r),
            velocity: g.scalar(v),
            commitment: g.scalar(c),
        };
        let latents = LatentGrid::from_tensor(g.value(z), self.config.groups, p.valid_frames);
        let grads = g.backward(total);
        Ok(StepOutput {
            loss,
            grads,
            latents,
            codes,
            ctx,
        })
    }

    pub fn eval_loss(&self, p: &PreparedMotion) -> Result<PqLoss> {
        let mut g = Graph::with_params(&self.store);
        let (total, [r, v, c], _, _) = self.loss_graph(&mut g, p, &mut Ctx::eval(), false)?;
        Ok(PqLoss {
            total: g.scalar(total),
            recon: g.scalar(r),
            velocity: g.scalar(v),
            commitment: g.scalar(c),
        })
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let snapshot = PqVaeSnapshot {
            pqvae: self.config.clone(),
            motion_dims: self.motion_dims,
            part_layout: self.part_layout.clone(),
        };
        let mut ck = Checkpoint::new(
            Stage::Pqvae,
            serde_json::to_value(snapshot).expect("serializable"),
            seed,
            &self.store,
        );
        ck.tensors.extend(self.codebook.tensors());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Pqvae)?;
        let snap: PqVaeSnapshot = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(&snap.pqvae, snap.motion_dims, &snap.part_layout, &mut stream_rng(0, 0))?;
        let (net, _): (Vec<_>, Vec<_>) = ck
            .tensors
            .iter()
            .cloned()
            .partition(|(n, _)| !n.starts_with("codebook."));
        model.store.load_named(&net)?;
        let c = &snap.pqvae;
        model.codebook = ProductCodebook::from_checkpoint(ck, c.groups, c.codes, c.code_dim)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PqEpochStats {
    pub epoch: usize,
    pub train: PqLossRecord,
    pub val: Option<PqLossRecord>,
    pub resets: usize,
    pub used_codes: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PqLossRecord {
    pub total: f64,
    pub recon: f64,
    pub velocity: f64,
    pub commitment: f64,
}

impl From<PqLoss> for PqLossRecord {
    fn from(l: PqLoss) -> Self {
        Self {
            total: l.total as f64,
            recon: l.recon as f64,
            velocity: l.velocity as f64,
            commitment: l.commitment as f64,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PqTrainReport {
    pub epochs: Vec<PqEpochStats>,
    pub best_epoch: usize,
    /// Codes moved by the final usage audit.
    pub audit_moves: usize,
    pub unused_codes: usize,
}

fn mean_loss(losses: &[PqLoss]) -> PqLoss {
    let mut m = PqLoss::default();
    for l in losses {
        m.add_scaled(l, 1.0 / losses.len().max(1) as Real);
    }
    m
}

/// Train on `train`, keeping the weights with the lowest validation loss
/// (the last epoch when `val` is empty).
pub fn train_pqvae(train: &Corpus, val: &Corpus, config: &PqVaeConfig, seed: u64) -> Result<(PqVae, PqTrainReport)> {
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let meta = &train.meta;
    let mut model = PqVae::new(config, meta.motion_dims, &meta.part_layout, &mut stream_rng(seed, streams::PQVAE_INIT))?;
    let mut rng = stream_rng(seed, streams::PQVAE_TRAIN);
    let inputs: Vec<PreparedMotion> = train
        .sequences
        .iter()
        .map(|s| model.prepare(&s.motion))
        .collect::<Result<_>>()?;
    let val_inputs: Vec<PreparedMotion> = val
        .sequences
        .iter()
        .map(|s| model.prepare(&s.motion))
        .collect::<Result<_>>()?;

    init_codebook_from_data(&mut model, &inputs, &mut rng)?;
    let mut opt = OptimState::new(&model.store, config.optimizer);
    let mut stats = Vec::with_capacity(config.epochs);
    let mut best: Option<(Real, usize, ParamStore, ProductCodebook)> = None;
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        model.codebook.clear_usage();
        let mut epoch_losses = Vec::with_capacity(inputs.len());
        let mut last_latents = Vec::new();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let outs = par_map(batch.len(), |i| model.train_step(&inputs[batch[i]]));
            model.store.zero_grads();
            let mut acc = Assignments::new(config.groups, config.codes, config.code_dim);
            last_latents.clear();
            let scale = 1.0 / batch.len() as Real;
            for out in outs {
                let mut out = out?;
                if !out.loss.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!("non-finite pq loss {:?}", out.loss),
                    });
                }
                out.grads.accumulate_into(&mut model.store, scale);
                out.ctx.apply_stats(&mut model.store);
                acc.add(&out.latents, &out.codes);
                model.codebook.record_usage(&out.codes);
                epoch_losses.push(out.loss);
                last_latents.push(out.latents);
            }
            opt.step(&mut model.store)?;
            model
                .codebook
                .ema_update(&acc, config.ema_decay as Real, config.ema_eps as Real);
        }
        let used = model.codebook.groups * model.codebook.codes - model.codebook.unused_codes();
        let resets = if config.code_reset {
            model
                .codebook
                .code_reset(&last_latents, config.reset_threshold as Real, &mut rng)
        } else {
            0
        };
        let train_loss = mean_loss(&epoch_losses);
        let val_loss = if val_inputs.is_empty() {
            None
        } else {
            let losses = par_map(val_inputs.len(), |i| model.eval_loss(&val_inputs[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            Some(mean_loss(&losses))
        };
        let score = val_loss.map_or(train_loss.total, |v| v.total);
        if best.as_ref().is_none_or(|b| score <= b.0) {
            best = Some((score, epoch, model.store.clone(), model.codebook.clone()));
        }
        info!(
            "pqvae epoch {epoch}: train {:.5} val {:?} used {used} resets {resets}",
            train_loss.total,
            val_loss.map(|v| v.total)
        );
        stats.push(PqEpochStats {
            epoch,
            train: train_loss.into(),
            val: val_loss.map(Into::into),
            resets,
            used_codes: used,
        });
    }

    let best_epoch = match best {
        Some((_, epoch, store, codebook)) => {
            model.store = store;
            model.codebook = codebook;
            epoch
        }
        None => 0,
    };
    let latents: Vec<LatentGrid> = par_map(inputs.len(), |i| model.encode_prepared(&inputs[i]))
        .into_iter()
        .collect::<Result<_>>()?;
    let audit_moves = if config.code_reset { model.codebook.audit(&latents) } else { 0 };
    let unused = model.codebook.unused_codes();
    debug!("pqvae audit moved {audit_moves} codes, {unused} unused");
    Ok((
        model,
        PqTrainReport {
            epochs: stats,
            best_epoch,
            audit_moves,
            unused_codes: unused,
        },
    ))
}

/// Replace the random initial codes with latents of the untrained encoder.
fn init_codebook_from_data(model: &mut PqVae, inputs: &[PreparedMotion], rng: &mut StreamRng) -> Result<()> {
    let sample: Vec<usize> = (0..inputs.len().min(64)).map(|_| rng.random_range(0..inputs.len())).collect();
    let latents: Vec<LatentGrid> = par_map(sample.len(), |i| model.encode_prepared(&inputs[sample[i]]))
        .into_iter()
        .collect::<Result<_>>()?;
    let cb = &mut model.codebook;
    let steps = inputs[0].tensor.cols() / WINDOW;
    cb.seed_count = (model.config.batch_size.min(inputs.len()) * steps) as Real / cb.codes as Real;
    for g in 0..cb.groups {
        let pool: Vec<&[Real]> = latents
            .iter()
            .flat_map(|z| (0..z.steps).map(move |n| z.vector(n, g)))
            .collect();
        for k in 0..cb.codes {
            let v = pool[rng.random_range(0..pool.len())].to_vec();
            cb.reseed(g, k, &v);
        }
    }
    Ok(())
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Mean per-frame L2 norm of the difference between ground-truth and
/// reconstructed first (velocity) and second (acceleration) differences.
pub fn reconstruction_errors(model: &PqVae, sequences: &[SequenceRecord]) -> Result<(Real, Real)> {
    let per_seq = par_map(sequences.len(), |i| -> Result<Option<(Real, usize, Real, usize)>> {
        let m = &sequences[i].motion;
        if m.frames() < 3 {
            return Ok(None);
        }
        let gt = m.select_channels(model.channels());
        let rec = model.reconstruct(m)?;
        let (e1, n1) = diff_error(&gt, &rec, 1);
        let (e2, n2) = diff_error(&gt, &rec, 2);
        Ok(Some((e1, n1, e2, n2)))
    });
    let (mut s1, mut c1, mut s2, mut c2) = (0.0, 0usize, 0.0, 0usize);
    for r in per_seq {
        match r? {
            Some((e1, n1, e2, n2)) => {
                s1 += e1;
                c1 += n1;
                s2 += e2;
                c2 += n2;
            }
            None => warn!("skipping sequence shorter than 3 frames"),
        }
    }
    if c1 == 0 {
        return Err(invalid("no sequence with at least 3 frames"));
    }
    Ok((s1 / c1 as Real, s2 / c2 as Real))
}

/// Sum over frames of ‖Δᵒ(a) − Δᵒ(b)‖₂ and the number of frames.
pub fn diff_error(a: &FrameSeries, b: &FrameSeries, order: usize) -> (Real, usize) {
    let diffs = |m: &FrameSeries| -> Vec<Vec<Real>> {
        let mut rows: Vec<Vec<Real>> = (0..m.frames())
            .map(|t| m.frame(t).iter().map(|&v| v as Real).collect())
            .collect();
        for _ in 0..order {
            rows = rows
                .windows(2)
                .map(|w| w[1].iter().zip(&w[0]).map(|(x, y)| x - y).collect())
                .collect();
        }
        rows
    };
    let (da, db) = (diffs(a), diffs(b));
    let total = da
        .iter()
        .zip(&db)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<Real>().sqrt())
        .sum();
    (total, da.len())
}
