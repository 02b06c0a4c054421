//! Synthetic paired audio/motion corpus.
//!
//! Each sequence is a sum of Gaussian bumps, one per event. An event of type
//! `e` and mode `u` drives motion through a fixed template vector `T[e][u]`
//! and audio through indicator channel `e`. The audio carries no information
//! about the mode, so the motion given the audio is multi-modal by
//! construction. All channels of one event share the bump, so face, body and
//! hand are coordinated in time.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{format_err, invalid, Result};
use crate::motion::{AudioFeatureSequence, FrameSeries, MotionSequence, PartLayout};
use crate::rng::{stream_rng, streams, StreamRng};

pub const CORPUS_MAGIC: &[u8] = b"PQMC1\n";
pub const MOTION_MAGIC: &[u8] = b"PQMO1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_sequences: usize,
    pub frames: usize,
    pub motion_dims: usize,
    pub part_layout: PartLayout,
    pub audio_dims: usize,
    pub num_event_types: usize,
    pub num_speakers: usize,
    pub modes_per_event: usize,
    pub noise_std: f64,
    /// Mean spacing of event onsets in frames.
    pub mean_event_gap: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_sequences: 512,
            frames: 64,
            motion_dims: 16,
            part_layout: PartLayout {
                face: [0, 6],
                body: [6, 12],
                hand: [12, 16],
            },
            audio_dims: 8,
            num_event_types: 4,
            num_speakers: 4,
            modes_per_event: 3,
            noise_std: 0.02,
            mean_event_gap: 12.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_event_types == 0 {
            return Err(invalid("corpus needs at least one event type"));
        }
        if self.num_speakers == 0 {
            return Err(invalid("corpus needs at least one speaker"));
        }
        if self.modes_per_event < 2 {
            return Err(invalid(format!(
                "modes_per_event must be >= 2, got {}",
                self.modes_per_event
            )));
        }
        if self.frames == 0 {
            return Err(invalid("frames must be positive"));
        }
        if self.audio_dims < self.num_event_types + 1 {
            return Err(invalid(format!(
                "audio_dims {} cannot hold {} event channels plus the speaker channel",
                self.audio_dims, self.num_event_types
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.mean_event_gap > 0.0 && self.mean_event_gap.is_finite()) {
            return Err(invalid(format!(
                "mean_event_gap must be positive, got {}",
                self.mean_event_gap
            )));
        }
        self.part_layout.validate(self.motion_dims)
    }
}

/// One logged event; `frame` is the bump centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub frame: u32,
    pub event_type: u32,
    pub mode: u32,
}

/// An event together with its bump width (standard deviation in frames).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedEvent {
    pub event: Event,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub speaker_id: u32,
    pub motion: MotionSequence,
    pub audio: AudioFeatureSequence,
    pub event_log: Vec<Event>,
}

/// Shape information shared by every sequence of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub frames: usize,
    pub motion_dims: usize,
    pub audio_dims: usize,
    pub part_layout: PartLayout,
    pub num_speakers: usize,
    pub num_event_types: usize,
    pub seed: u64,
}

impl CorpusMeta {
    pub fn from_config(c: &CorpusConfig) -> Self {
        Self {
            frames: c.frames,
            motion_dims: c.motion_dims,
            audio_dims: c.audio_dims,
            part_layout: c.part_layout.clone(),
            num_speakers: c.num_speakers,
            num_event_types: c.num_event_types,
            seed: c.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub sequences: Vec<SequenceRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Per-(event type, mode) motion templates, fixed by the seed.
#[derive(Clone, Debug)]
pub struct Templates {
    modes: usize,
    dims: usize,
    values: Vec<f64>,
}

impl Templates {
    pub fn generate(config: &CorpusConfig) -> Self {
        let mut rng = stream_rng(config.seed, streams::TEMPLATES);
        let n = config.num_event_types * config.modes_per_event * config.motion_dims;
        let values = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            })
            .collect();
        Self {
            modes: config.modes_per_event,
            dims: config.motion_dims,
            values,
        }
    }

    pub fn get(&self, event_type: usize, mode: usize) -> &[f64] {
        let start = (event_type * self.modes + mode) * self.dims;
        &self.values[start..start + self.dims]
    }
}

pub fn bump(t: f64, centre: f64, width: f64) -> f64 {
    let z = (t - centre) / width;
    (-0.5 * z * z).exp()
}

pub fn speaker_amplitude(speaker: usize, num_speakers: usize) -> f64 {
    1.0 + 0.25 * speaker as f64 / num_speakers as f64
}

/// Poisson-spaced onsets with uniform type, mode and width.
pub fn sample_events(config: &CorpusConfig, rng: &mut StreamRng) -> Vec<PlacedEvent> {
    let gaps = Exp::new(1.0 / config.mean_event_gap).expect("positive rate");
    let mut events = Vec::new();
    let mut t = gaps.sample(rng).floor();
    while t < config.frames as f64 {
        events.push(PlacedEvent {
            event: Event {
                frame: t as u32,
                event_type: rng.random_range(0..config.num_event_types) as u32,
                mode: rng.random_range(0..config.modes_per_event) as u32,
            },
            width: rng.random_range(2.0..6.0),
        });
        t += gaps.sample(rng).round().max(1.0);
    }
    events
}

/// Renders motion and audio for a given speaker and event list. Noise is
/// drawn from `rng` (motion first, then audio).
pub fn render_sequence(
    config: &CorpusConfig,
    templates: &Templates,
    speaker: u32,
    events: &[PlacedEvent],
    rng: &mut StreamRng,
) -> Result<SequenceRecord> {
    let n = config.frames;
    if speaker as usize >= config.num_speakers {
        return Err(invalid(format!(
            "speaker {speaker} out of range for {} speakers",
            config.num_speakers
        )));
    }
    for w in events.windows(2) {
        if w[1].event.frame <= w[0].event.frame {
            return Err(invalid("event frames must be strictly increasing"));
        }
    }
    for ev in events {
        let e = ev.event;
        if e.frame as usize >= n
            || e.event_type as usize >= config.num_event_types
            || e.mode as usize >= config.modes_per_event
            || !(ev.width > 0.0)
        {
            return Err(invalid(format!("event {ev:?} out of range")));
        }
    }

    let amp = speaker_amplitude(speaker as usize, config.num_speakers);
    let md = config.motion_dims;
    let ad = config.audio_dims;
    let mut motion = vec![0.0f64; n * md];
    let mut audio = vec![0.0f64; n * ad];
    let speaker_level = (speaker as f64 + 1.0) / config.num_speakers as f64;
    for t in 0..n {
        audio[t * ad + config.num_event_types] = speaker_level;
    }
    for ev in events {
        let tpl = templates.get(ev.event.event_type as usize, ev.event.mode as usize);
        for t in 0..n {
            let b = bump(t as f64, ev.event.frame as f64, ev.width);
            for (d, &v) in tpl.iter().enumerate() {
                motion[t * md + d] += amp * b * v;
            }
            audio[t * ad + ev.event.event_type as usize] += b;
        }
    }
    if config.noise_std > 0.0 {
        for v in motion.iter_mut().chain(audio.iter_mut()) {
            let z: f64 = StandardNormal.sample(rng);
            *v += config.noise_std * z;
        }
    }
    Ok(SequenceRecord {
        speaker_id: speaker,
        motion: FrameSeries::new(n, md, motion.iter().map(|&v| v as f32).collect())?,
        audio: FrameSeries::new(n, ad, audio.iter().map(|&v| v as f32).collect())?,
        event_log: events.iter().map(|e| e.event).collect(),
    })
}

pub fn generate_sequence(config: &CorpusConfig, templates: &Templates, index: usize) -> Result<SequenceRecord> {
    let mut rng = stream_rng(config.seed, streams::SEQUENCE_BASE + index as u64);
    let speaker = rng.random_range(0..config.num_speakers) as u32;
    let events = sample_events(config, &mut rng);
    render_sequence(config, templates, speaker, &events, &mut rng)
}

/// Pure function of `config`; sequences are generated in parallel on
/// independent streams.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let templates = Templates::generate(config);
    let sequences = crate::exec::par_map(config.num_sequences, |i| {
        generate_sequence(config, &templates, i)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        meta: CorpusMeta::from_config(config),
        sequences,
    })
}

/// Shuffled partition into train/validation/test.
pub fn split(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    if corpus.is_empty() {
        return Err(invalid("cannot split an empty corpus"));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, streams::SPLIT);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| Corpus {
        meta: corpus.meta.clone(),
        sequences: idx.iter().map(|&i| corpus.sequences[i].clone()).collect(),
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    version: u32,
    num_sequences: usize,
    frames: usize,
    motion_dims: usize,
    audio_dims: usize,
    part_layout: PartLayout,
    num_speakers: usize,
    num_event_types: usize,
    seed: u64,
}

fn encode(magic: &[u8], corpus: &Corpus) -> Result<Vec<u8>> {
    let m = &corpus.meta;
    for (i, s) in corpus.sequences.iter().enumerate() {
        if s.motion.frames() != m.frames
            || s.audio.frames() != m.frames
            || s.motion.dims() != m.motion_dims
            || s.audio.dims() != m.audio_dims
        {
            return Err(invalid(format!("sequence {i} does not match the corpus shape")));
        }
    }
    let header = FileHeader {
        version: FORMAT_VERSION,
        num_sequences: corpus.len(),
        frames: m.frames,
        motion_dims: m.motion_dims,
        audio_dims: m.audio_dims,
        part_layout: m.part_layout.clone(),
        num_speakers: m.num_speakers,
        num_event_types: m.num_event_types,
        seed: m.seed,
    };
    let mut w = Writer::new(magic, &header)?;
    for s in &corpus.sequences {
        w.u32(s.speaker_id);
        w.f32s(s.motion.data());
        w.f32s(s.audio.data());
        w.u32(s.event_log.len() as u32);
        for e in &s.event_log {
            w.u32(e.frame);
            w.u32(e.event_type);
            w.u32(e.mode);
        }
    }
    Ok(w.finish())
}

fn decode(magic: &[u8], bytes: &[u8]) -> Result<Corpus> {
    let (mut r, h): (Reader, FileHeader) = Reader::open(bytes, magic)?;
    if h.version != FORMAT_VERSION {
        return Err(format_err(
            magic.len() as u64 + 4,
            format!("unsupported version {}", h.version),
        ));
    }
    let mut sequences = Vec::with_capacity(h.num_sequences.min(1 << 16));
    for i in 0..h.num_sequences {
        let at = r.offset();
        let speaker_id = r.u32("speaker id")?;
        if speaker_id as usize >= h.num_speakers {
            return Err(format_err(
                at,
                format!("sequence {i}: speaker id {speaker_id} >= {}", h.num_speakers),
            ));
        }
        let motion = r.f32s(h.frames * h.motion_dims, "motion payload")?;
        let audio = r.f32s(h.frames * h.audio_dims, "audio payload")?;
        let at = r.offset();
        let count = r.u32("event count")? as usize;
        if count > h.frames {
            return Err(format_err(
                at,
                format!("sequence {i}: {count} events exceed {} frames", h.frames),
            ));
        }
        let mut event_log = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let e = Event {
                frame: r.u32("event frame")?,
                event_type: r.u32("event type")?,
                mode: r.u32("event mode")?,
            };
            let ordered = event_log.last().is_none_or(|p: &Event| p.frame < e.frame);
            if e.frame as usize >= h.frames || !ordered {
                return Err(format_err(at, format!("sequence {i}: invalid event {e:?}")));
            }
            event_log.push(e);
        }
        sequences.push(SequenceRecord {
            speaker_id,
            motion: FrameSeries::new(h.frames, h.motion_dims, motion)?,
            audio: FrameSeries::new(h.frames, h.audio_dims, audio)?,
            event_log,
        });
    }
    r.finish()?;
    Ok(Corpus {
        meta: CorpusMeta {
            frames: h.frames,
            motion_dims: h.motion_dims,
            audio_dims: h.audio_dims,
            part_layout: h.part_layout,
            num_speakers: h.num_speakers,
            num_event_types: h.num_event_types,
            seed: h.seed,
        },
        sequences,
    })
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    encode(CORPUS_MAGIC, corpus)
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Corpus> {
    decode(CORPUS_MAGIC, bytes)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    binio::write_file(path, &corpus_to_bytes(corpus)?)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    corpus_from_bytes(&binio::read_file(path)?)
}

/// Single generated sequence in the corpus container layout.
pub fn motion_to_bytes(meta: &CorpusMeta, record: &SequenceRecord) -> Result<Vec<u8>> {
    encode(
        MOTION_MAGIC,
        &Corpus {
            meta: meta.clone(),
            sequences: vec![record.clone()],
        },
    )
}

pub fn motion_from_bytes(bytes: &[u8]) -> Result<(CorpusMeta, SequenceRecord)> {
    let c = decode(MOTION_MAGIC, bytes)?;
    if c.sequences.len() != 1 {
        return Err(format_err(
            MOTION_MAGIC.len() as u64 + 4,
            format!("motion file holds {} sequences, expected 1", c.sequences.len()),
        ));
    }
    let mut seqs = c.sequences;
    Ok((c.meta, seqs.remove(0)))
}

pub fn write_motion(path: &Path, meta: &CorpusMeta, record: &SequenceRecord) -> Result<()> {
    binio::write_file(path, &motion_to_bytes(meta, record)?)
}

pub fn read_motion(path: &Path) -> Result<(CorpusMeta, SequenceRecord)> {
    motion_from_bytes(&binio::read_file(path)?)
}
