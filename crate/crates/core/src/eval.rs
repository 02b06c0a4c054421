//! Evaluation metrics: Fréchet distance on PQ-VAE latent features, sample
//! variance, best-of-S MAE and a simplified beat consistency.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::exec::par_map;
use crate::motion::{AudioFeatureSequence, MotionSequence, Part};
use crate::pqvae::PqVae;

/// Covariance shrinkage toward the diagonal, applied when a set has fewer
/// than `d + 1` vectors.
pub const SHRINKAGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Generated,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub vectors: Vec<Vec<f64>>,
    pub source: Source,
    pub part: Part,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>, source: Source, part: Part) -> Result<Self> {
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(invalid("feature vectors differ in length"));
            }
        }
        Ok(Self {
            vectors,
            source,
            part,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Time-averaged pre-quantization latents of a PQ-VAE trained on `part`.
pub fn extract_features(pqvae: &PqVae, motions: &[MotionSequence], part: Part, source: Source) -> Result<FeatureSet> {
    if pqvae.config.part != part {
        return Err(invalid(format!(
            "no {} feature encoder: the given PQ-VAE was trained on {}",
            part.as_str(),
            pqvae.config.part.as_str()
        )));
    }
    let vectors = par_map(motions.len(), |i| {
        pqvae
            .feature(&motions[i])
            .map(|f| f.into_iter().map(|v| v as f64).collect())
    })
    .into_iter()
    .collect::<Result<Vec<Vec<f64>>>>()?;
    FeatureSet::new(vectors, source, part)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Frechet {
    pub value: f64,
    /// Whether either covariance was shrunk toward its diagonal.
    pub shrunk: bool,
}

fn moments(set: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>, bool) {
    let n = set.len();
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov += &c * c.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    let shrink = n < d + 1;
    if shrink {
        let diag = DMatrix::from_diagonal(&cov.diagonal());
        cov = cov * (1.0 - SHRINKAGE) + diag * SHRINKAGE;
    }
    (mean, cov, shrink)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The cross term is evaluated as `Tr((√Σ_a Σ_b √Σ_a)^{1/2})`, which keeps
/// every decomposition symmetric.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<Frechet> {
    frechet_between(&a.vectors, &b.vectors)
}

pub fn frechet_between(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("frechet_distance needs non-empty sets"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(invalid("frechet_distance sets differ in dimension"));
    }
    let (ma, ca, sa) = moments(a, d);
    let (mb, cb, sb) = moments(b, d);
    let root_a = psd_sqrt(&ca);
    let inner = &root_a * &cb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let value = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(Frechet {
        value: value.max(0.0),
        shrunk: sa || sb,
    })
}

fn check_same_shape(samples: &[MotionSequence]) -> Result<()> {
    let first = &samples[0];
    if samples
        .iter()
        .any(|s| s.frames() != first.frames() || s.dims() != first.dims())
    {
        return Err(invalid("samples differ in shape"));
    }
    Ok(())
}

/// Across-sample (population) variance, averaged over frames and the
/// channels in `channels`.
pub fn variance_metric(samples: &[MotionSequence], channels: Range<usize>) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid("variance_metric needs at least two samples"));
    }
    check_same_shape(samples)?;
    let (frames, dims) = (samples[0].frames(), samples[0].dims());
    if channels.is_empty() || channels.end > dims || frames == 0 {
        return Err(invalid(format!("channel range {channels:?} invalid for {dims} dims")));
    }
    let s = samples.len() as f64;
    let mut total = 0.0;
    for t in 0..frames {
        for c in channels.clone() {
            let mean = samples.iter().map(|m| m.get(t, c) as f64).sum::<f64>() / s;
            total += samples
                .iter()
                .map(|m| (m.get(t, c) as f64 - mean).powi(2))
                .sum::<f64>()
                / s;
        }
    }
    Ok(total / (frames * channels.len()) as f64)
}

/// Smallest mean absolute error between `gt` and any sample.
pub fn mae_best_of(gt: &MotionSequence, samples: &[MotionSequence]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("mae_best_of needs at least one sample"));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        if s.frames() != gt.frames() || s.dims() != gt.dims() {
            return Err(invalid("sample shape differs from ground truth"));
        }
        let n = gt.data().len().max(1) as f64;
        let mae = gt
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / n;
        best = best.min(mae);
    }
    Ok(best)
}

/// Gaussian width (frames) of the beat-alignment kernel.
pub const BC_SIGMA: f64 = 1.0;

/// Strict-left local maxima (`x[t-1] < x[t] ≥ x[t+1]`) that rise above
/// `floor`.
fn local_maxima(x: &[f64], floor: f64) -> Vec<usize> {
    (1..x.len().saturating_sub(1))
        .filter(|&t| x[t] > x[t - 1] && x[t] >= x[t + 1] && x[t] > floor)
        .collect()
}

/// Frames where the summed event-indicator channels peak.
pub fn audio_beats(audio: &AudioFeatureSequence, event_channels: Range<usize>) -> Vec<usize> {
    let s: Vec<f64> = (0..audio.frames())
        .map(|t| event_channels.clone().map(|c| audio.get(t, c) as f64).sum())
        .collect();
    let max = s.iter().cloned().fold(0.0, f64::max);
    local_maxima(&s, 0.5 * max)
}

/// Fraction of a channel's largest excursion a turning point must reach to
/// count as a beat.
pub const BEAT_EXCURSION: f64 = 0.8;

/// Kinematic beats: frames where some channel in `channels` reaches a
/// turning point (local minimum of its central-difference speed) at least
/// [`BEAT_EXCURSION`] of its largest displacement from the median pose.
pub fn motion_beats(motion: &MotionSequence, channels: Range<usize>) -> Vec<usize> {
    let n = motion.frames();
    if n < 3 {
        return Vec::new();
    }
    let mut beats = vec![false; n];
    for c in channels {
        let x: Vec<f64> = (0..n).map(|t| motion.get(t, c) as f64).collect();
        let mut sorted = x.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let rest = sorted[n / 2];
        let excursion: Vec<f64> = x.iter().map(|v| (v - rest).abs()).collect();
        let max = excursion.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            continue;
        }
        let speed: Vec<f64> = (0..n)
            .map(|t| (x[(t + 1).min(n - 1)] - x[t.saturating_sub(1)]).abs())
            .collect();
        for t in 1..n - 1 {
            if speed[t] < speed[t - 1] && speed[t] <= speed[t + 1] && excursion[t] >= BEAT_EXCURSION * max {
                beats[t] = true;
            }
        }
    }
    (0..n).filter(|&t| beats[t]).collect()
}

/// Mean over audio beats of `exp(−d²/2σ²)` where `d` is the distance to the
/// nearest motion beat. `None` when the audio has no beats.
pub fn beat_consistency_from_beats(audio_beats: &[usize], motion_beats: &[usize]) -> Option<f64> {
    if audio_beats.is_empty() {
        return None;
    }
    let total: f64 = audio_beats
        .iter()
        .map(|&a| {
            motion_beats
                .iter()
                .map(|&m| {
                    let d = a as f64 - m as f64;
                    (-d * d / (2.0 * BC_SIGMA * BC_SIGMA)).exp()
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / audio_beats.len() as f64)
}

/// Simplified beat consistency between event peaks in the audio and
/// kinematic beats of the body channels.
pub fn beat_consistency(
    audio: &AudioFeatureSequence,
    event_channels: Range<usize>,
    motion: &MotionSequence,
    body_channels: Range<usize>,
) -> Result<Option<f64>> {
    if audio.frames() != motion.frames() {
        return Err(invalid("audio and motion differ in length"));
    }
    if motion.frames() < 3 {
        return Err(invalid("beat consistency needs at least three frames"));
    }
    Ok(beat_consistency_from_beats(
        &audio_beats(audio, event_channels),
        &motion_beats(motion, body_channels),
    ))
}
