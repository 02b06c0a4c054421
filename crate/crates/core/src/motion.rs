//! Frame-indexed feature tracks (motion and audio) and the part layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Real, Tensor};

/// `frames × dims` real-valued track stored row-major as 32-bit floats,
/// matching the on-disk corpus representation bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    frames: usize,
    dims: usize,
    data: Vec<f32>,
}

pub type MotionSequence = FrameSeries;
pub type AudioFeatureSequence = FrameSeries;

impl FrameSeries {
    pub fn new(frames: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dims {
            return Err(invalid(format!(
                "{frames}x{dims} series needs {} values, got {}",
                frames * dims,
                data.len()
            )));
        }
        Ok(Self { frames, dims, data })
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self {
            frames,
            dims,
            data: vec![0.0; frames * dims],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.data[t * self.dims + d]
    }

    pub fn set(&mut self, t: usize, d: usize, v: f32) {
        self.data[t * self.dims + d] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-major (`dims × frames`) tensor, the layout the conv stacks use.
    pub fn to_channel_major(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.frames {
            for d in 0..self.dims {
                out[d * self.frames + t] = self.data[t * self.dims + d] as Real;
            }
        }
        Tensor::new(vec![self.dims, self.frames], out).expect("shape")
    }

    /// Inverse of [`FrameSeries::to_channel_major`], rounding to 32-bit.
    pub fn from_channel_major(t: &Tensor) -> Self {
        let (dims, frames) = (t.rows(), t.cols());
        let mut data = vec![0.0f32; dims * frames];
        for d in 0..dims {
            for f in 0..frames {
                data[f * dims + d] = t.data()[d * frames + f] as f32;
            }
        }
        Self { frames, dims, data }
    }

    /// Columns `range` of every frame.
    pub fn select_channels(&self, range: Range<usize>) -> Self {
        let dims = range.len();
        let mut data = Vec::with_capacity(self.frames * dims);
        for t in 0..self.frames {
            data.extend_from_slice(&self.frame(t)[range.clone()]);
        }
        Self {
            frames: self.frames,
            dims,
            data,
        }
    }

    /// First `frames` frames.
    pub fn crop(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            frames,
            dims: self.dims,
            data: self.data[..frames * self.dims].to_vec(),
        }
    }

    /// Extend to `frames` by repeating the last frame.
    pub fn pad_edge(&self, frames: usize) -> Self {
        let mut out = self.clone();
        if frames <= self.frames || self.frames == 0 {
            return out;
        }
        let last = self.frame(self.frames - 1).to_vec();
        for _ in self.frames..frames {
            out.data.extend_from_slice(&last);
        }
        out.frames = frames;
        out
    }
}

/// Half-open channel ranges of the face, body and hand parts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartLayout {
    pub face: [usize; 2],
    pub body: [usize; 2],
    pub hand: [usize; 2],
}

impl PartLayout {
    /// Ranges must be non-empty, disjoint and cover `[0, dims)` exactly.
    pub fn validate(&self, dims: usize) -> Result<()> {
        let mut ranges = [self.face, self.body, self.hand];
        if ranges.iter().any(|r| r[0] >= r[1]) {
            return Err(invalid(format!("empty or reversed part range in {self:?}")));
        }
        ranges.sort();
        let mut next = 0;
        for r in ranges {
            if r[0] != next {
                return Err(invalid(format!(
                    "part ranges {self:?} must be disjoint and cover [0, {dims})"
                )));
            }
            next = r[1];
        }
        if next != dims {
            return Err(invalid(format!(
                "part ranges {self:?} must cover [0, {dims})"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, part: Part, dims: usize) -> Range<usize> {
        match part {
            Part::Holistic => 0..dims,
            Part::Face => self.face[0]..self.face[1],
            Part::Body => self.body[0]..self.body[1],
            Part::Hand => self.hand[0]..self.hand[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Holistic,
    Body,
    Face,
    Hand,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Holistic => "holistic",
            Part::Body => "body",
            Part::Face => "face",
            Part::Hand => "hand",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holistic" => Ok(Part::Holistic),
            "body" => Ok(Part::Body),
            "face" => Ok(Part::Face),
            "hand" => Ok(Part::Hand),
            other => Err(invalid(format!("unknown part `{other}`"))),
        }
    }
}

/// Frame-level context mask: `true` marks a known (context) frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    bits: Vec<bool>,
}

impl FrameMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_known(frames: usize) -> Self {
        Self {
            bits: vec![true; frames],
        }
    }

    pub fn all_generated(frames: usize) -> Self {
        Self {
            bits: vec![false; frames],
        }
    }

    /// First `prefix` and last `suffix` frames known.
    pub fn prefix_suffix(frames: usize, prefix: usize, suffix: usize) -> Self {
        let bits = (0..frames)
            .map(|t| t < prefix || t + suffix >= frames)
            .collect();
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_known(&self, t: usize) -> bool {
        self.bits[t]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn known_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_reals(&self) -> Vec<Real> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Training mask: with probability `context_prob` a prefix, a suffix or
    /// both (4–16 frames each, never the whole sequence) are context;
    /// otherwise every frame is generated.
    pub fn sample_training(frames: usize, context_prob: f64, rng: &mut impl rand::Rng) -> Self {
        if frames < 2 || !rng.random_bool(context_prob.clamp(0.0, 1.0)) {
            return Self::all_generated(frames);
        }
        let span = |rng: &mut dyn rand::RngCore| rand::Rng::random_range(rng, 4..=16usize);
        let (prefix, suffix) = match rng.random_range(0..3) {
            0 => (span(rng), 0),
            1 => (0, span(rng)),
            _ => (span(rng), span(rng)),
        };
        let limit = frames - 1;
        let prefix = prefix.min(limit);
        let suffix = suffix.min(limit - prefix);
        Self::prefix_suffix(frames, prefix, suffix)
    }

    /// Extend to `frames`; padded frames are treated as generated.
    pub fn padded(&self, frames: usize) -> Self {
        let mut bits = self.bits.clone();
        bits.resize(frames.max(bits.len()), false);
        Self { bits }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> PartLayout {
        PartLayout {
            face: [0, 6],
            body: [6, 12],
            hand: [12, 16],
        }
    }

    #[test]
    fn layout_validation() {
        assert!(layout().validate(16).is_ok());
        assert!(layout().validate(17).is_err());
        let overlap = PartLayout {
            face: [0, 7],
            body: [6, 12],
            hand: [12, 16],
        };
        assert!(overlap.validate(16).is_err());
        let gap = PartLayout {
            face: [0, 5],
            body: [6, 12],
            hand: [12, 16],
        };
        assert!(gap.validate(16).is_err());
    }

    #[test]
    fn channel_major_round_trip_is_exact() {
        let s = FrameSeries::new(3, 2, vec![1.5, -2.25, 3.0, 4.125, 0.1, 1e-7]).unwrap();
        assert_eq!(FrameSeries::from_channel_major(&s.to_channel_major()), s);
    }

    #[test]
    fn pad_edge_repeats_last_frame_and_crop_inverts() {
        let s = FrameSeries::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = s.pad_edge(5);
        assert_eq!(p.frames(), 5);
        assert_eq!(p.frame(4), &[3.0, 4.0]);
        assert_eq!(p.crop(2), s);
    }

    #[test]
    fn prefix_suffix_mask() {
        let m = FrameMask::prefix_suffix(6, 2, 1);
        assert_eq!(m.bits(), &[true, true, false, false, false, true]);
        assert_eq!(m.known_count(), 3);
    }
}
