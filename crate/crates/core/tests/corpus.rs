use pqmotion::corpus::{
    corpus_from_bytes, corpus_to_bytes, generate_corpus, read_corpus, render_sequence, split,
    write_corpus, CorpusConfig, Event, PlacedEvent, Templates,
};
use pqmotion::motion::FrameSeries;
use pqmotion::rng::stream_rng;
use pqmotion::Error;

fn config(n: usize) -> CorpusConfig {
    CorpusConfig {
        num_sequences: n,
        seed: 5,
        ..CorpusConfig::default()
    }
}

fn event(frame: u32, event_type: u32, mode: u32, width: f64) -> PlacedEvent {
    PlacedEvent {
        event: Event {
            frame,
            event_type,
            mode,
        },
        width,
    }
}

/// Frame index of the largest summed |velocity| over channels `lo..hi`.
fn peak_velocity_frame(m: &FrameSeries, lo: usize, hi: usize) -> usize {
    (0..m.frames() - 1)
        .map(|t| {
            let s: f64 = (lo..hi)
                .map(|d| (m.get(t + 1, d) as f64 - m.get(t, d) as f64).abs())
                .sum();
            (t, s)
        })
        .fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a })
        .0
}

#[test]
fn generation_is_deterministic() {
    let a = generate_corpus(&config(6)).unwrap();
    let b = generate_corpus(&config(6)).unwrap();
    assert_eq!(corpus_to_bytes(&a).unwrap(), corpus_to_bytes(&b).unwrap());
    let c = generate_corpus(&CorpusConfig { seed: 6, ..config(6) }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn file_round_trip_is_bit_exact() {
    let corpus = generate_corpus(&config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.pqmc");
    write_corpus(&path, &corpus).unwrap();
    let back = read_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(
        corpus_to_bytes(&back).unwrap(),
        std::fs::read(&path).unwrap()
    );
}

#[test]
fn corrupt_magic_is_a_format_error() {
    let corpus = generate_corpus(&config(2)).unwrap();
    let mut bytes = corpus_to_bytes(&corpus).unwrap();
    bytes[2] ^= 0x20;
    match corpus_from_bytes(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn truncated_payload_names_the_offset() {
    let corpus = generate_corpus(&config(2)).unwrap();
    let bytes = corpus_to_bytes(&corpus).unwrap();
    let cut = bytes.len() - 7;
    match corpus_from_bytes(&bytes[..cut]) {
        Err(Error::Format { offset, message }) => {
            assert!(offset <= cut as u64);
            assert!(message.contains("truncated"), "{message}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn header_frame_count_mismatch_is_a_format_error() {
    let corpus = generate_corpus(&config(2)).unwrap();
    let bytes = corpus_to_bytes(&corpus).unwrap();
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
    for frames in ["\"frames\":63", "\"frames\":65"] {
        let patched = header.replace("\"frames\":64", frames);
        let mut out = bytes[..6].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[10 + len..]);
        assert!(matches!(corpus_from_bytes(&out), Err(Error::Format { .. })));
    }
}

#[test]
fn splits_partition_the_corpus() {
    let corpus = generate_corpus(&config(23)).unwrap();
    let (a, b, c) = split(&corpus, [0.6, 0.3, 0.1], 9).unwrap();
    let mut ids: Vec<Vec<u8>> = a
        .sequences
        .iter()
        .chain(&b.sequences)
        .chain(&c.sequences)
        .map(|s| s.motion.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let mut want: Vec<Vec<u8>> = corpus
        .sequences
        .iter()
        .map(|s| s.motion.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    ids.sort();
    want.sort();
    assert_eq!(ids, want);
    let again = split(&corpus, [0.6, 0.3, 0.1], 9).unwrap();
    assert_eq!(again.0, a);
}

#[test]
fn modes_change_motion_but_not_audio() {
    let c = CorpusConfig {
        noise_std: 0.0,
        ..config(1)
    };
    let t = Templates::generate(&c);
    let mut rng = stream_rng(0, 0);
    let a = render_sequence(&c, &t, 1, &[event(30, 2, 0, 3.0)], &mut rng).unwrap();
    let b = render_sequence(&c, &t, 1, &[event(30, 2, 1, 3.0)], &mut rng).unwrap();
    assert_eq!(a.audio, b.audio);
    let gap: f64 = a
        .motion
        .data()
        .iter()
        .zip(b.motion.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum();
    assert!(gap > 0.0);
}

#[test]
fn variability_oracle() {
    let c = CorpusConfig {
        noise_std: 0.0,
        ..config(1)
    };
    let t = Templates::generate(&c);
    let mut rng = stream_rng(1, 1);
    let runs: Vec<_> = (0..9)
        .map(|i| {
            let ev = event(20, 1, (i % c.modes_per_event) as u32, 2.5);
            render_sequence(&c, &t, 0, &[ev], &mut rng).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.audio, runs[0].audio);
    }
    for d in 0..c.motion_dims {
        let vals: Vec<f64> = runs.iter().map(|r| r.motion.get(20, d) as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var > 0.0, "channel {d}");
    }
}

#[test]
fn coordination_oracle() {
    let c = CorpusConfig {
        noise_std: 0.0,
        ..config(1)
    };
    let t = Templates::generate(&c);
    let mut rng = stream_rng(2, 2);
    let (face, body) = (c.part_layout.face, c.part_layout.body);
    for e in 0..c.num_event_types as u32 {
        for u in 0..c.modes_per_event as u32 {
            for (frame, width) in [(12, 2.0), (33, 4.5), (50, 6.0)] {
                let r = render_sequence(&c, &t, 3, &[event(frame, e, u, width)], &mut rng).unwrap();
                let pf = peak_velocity_frame(&r.motion, face[0], face[1]) as i64;
                let pb = peak_velocity_frame(&r.motion, body[0], body[1]) as i64;
                assert!((pf - pb).abs() <= 1, "e={e} u={u} frame={frame}: {pf} vs {pb}");
            }
        }
    }
}
