use pqmotion::config::Config;
use pqmotion::corpus::{generate_corpus, CorpusConfig};
use pqmotion::eval::{
    beat_consistency, beat_consistency_from_beats, frechet_between, mae_best_of, variance_metric,
};
use pqmotion::experiment::{corpus_for, fgd, test_motions};
use pqmotion::motion::{FrameSeries, Part};
use pqmotion::pqvae::train_pqvae;
use pqmotion::rng::stream_rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn series(frames: usize, dims: usize, mut f: impl FnMut(usize, usize) -> f32) -> FrameSeries {
    let data = (0..frames * dims).map(|i| f(i / dims, i % dims)).collect();
    FrameSeries::new(frames, dims, data).unwrap()
}

#[test]
fn variance_of_plus_minus_offsets() {
    let base = series(5, 4, |t, d| (t + d) as f32);
    let c = 0.5f32;
    let up = series(5, 4, |t, d| base.get(t, d) + if d == 2 { c } else { 0.0 });
    let down = series(5, 4, |t, d| base.get(t, d) - if d == 2 { c } else { 0.0 });
    let v = variance_metric(&[up.clone(), down.clone()], 0..4).unwrap();
    assert!((v - (c * c) as f64 / 4.0).abs() < 1e-12);
    assert_eq!(variance_metric(&[base.clone(), base.clone()], 0..4).unwrap(), 0.0);
    assert!(variance_metric(&[base], 0..4).is_err());
}

#[test]
fn best_of_mae() {
    let gt = series(4, 2, |t, _| t as f32);
    let off = series(4, 2, |t, _| t as f32 + 1.0);
    assert_eq!(mae_best_of(&gt, &[off.clone(), gt.clone()]).unwrap(), 0.0);
    assert_eq!(mae_best_of(&gt, &[off]).unwrap(), 1.0);
    assert!(mae_best_of(&gt, &[]).is_err());
}

#[test]
fn beat_consistency_endpoints() {
    assert_eq!(beat_consistency_from_beats(&[4, 10, 20], &[4, 10, 20]), Some(1.0));
    assert!(beat_consistency_from_beats(&[4, 10], &[30]).unwrap() < 4e-6);
    assert_eq!(beat_consistency_from_beats(&[], &[3]), None);
}

#[test]
fn ground_truth_beats_shuffled_motion() {
    let cfg = CorpusConfig {
        noise_std: 0.0,
        num_sequences: 128,
        seed: 2,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let events = 0..cfg.num_event_types;
    let body = cfg.part_layout.channels(Part::Body, cfg.motion_dims);
    let mut rng = stream_rng(2, 99);
    let (mut gt, mut shuffled, mut n) = (0.0, 0.0, 0);
    for s in &corpus.sequences {
        let mut perm: Vec<usize> = (0..cfg.frames).collect();
        perm.shuffle(&mut rng);
        let mut m = s.motion.clone();
        for (t, &p) in perm.iter().enumerate() {
            m.frame_mut(t).copy_from_slice(s.motion.frame(p));
        }
        let a = beat_consistency(&s.audio, events.clone(), &s.motion, body.clone()).unwrap();
        let b = beat_consistency(&s.audio, events.clone(), &m, body.clone()).unwrap();
        if let (Some(a), Some(b)) = (a, b) {
            gt += a;
            shuffled += b;
            n += 1;
        }
    }
    assert!(n > 100);
    let (gt, shuffled) = (gt / n as f64, shuffled / n as f64);
    assert!(gt - shuffled >= 0.2, "ground truth {gt:.3}, shuffled {shuffled:.3}");
}

#[test]
fn fgd_separates_data_from_noise() {
    let mut cfg = Config::desk();
    cfg.pqvae.epochs = 6;
    let (_, splits) = corpus_for(&cfg, 1).unwrap();
    let (pq, _) = train_pqvae(&splits.train, &splits.val, &cfg.pqvae, 1).unwrap();
    let train = test_motions(&splits.train);
    let test = test_motions(&splits.test);
    let mut rng = stream_rng(1, 1);
    let dims = test[0].dims();
    let noise: Vec<FrameSeries> = test
        .iter()
        .map(|m| series(m.frames(), dims, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let near = fgd(&pq, &test, &train).unwrap();
    let far = fgd(&pq, &noise, &train).unwrap();
    assert!(far.value >= 5.0 * near.value, "test/train {} vs noise/train {}", near.value, far.value);
    assert_eq!(pq.feature(&test[0]).unwrap(), pq.feature(&test[0]).unwrap());
    assert_eq!(pq.feature(&test[0]).unwrap().len(), 64);
}

fn point_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..4).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 2..12),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 2..12),
        )
    })
}

proptest! {
    #[test]
    fn frechet_is_symmetric_and_non_negative((a, b) in point_sets()) {
        let ab = frechet_between(&a, &b).unwrap().value;
        let ba = frechet_between(&b, &a).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
        prop_assert!(frechet_between(&a, &a).unwrap().value.abs() < 1e-8);
    }

    #[test]
    fn variance_scales_quadratically(
        values in prop::collection::vec(-2.0f32..2.0, 3 * 6 * 2),
        k in 0.25f32..4.0,
    ) {
        let samples: Vec<FrameSeries> = values.chunks(12).map(|c| FrameSeries::new(6, 2, c.to_vec()).unwrap()).collect();
        let scaled: Vec<FrameSeries> = samples
            .iter()
            .map(|s| FrameSeries::new(6, 2, s.data().iter().map(|v| v * k).collect()).unwrap())
            .collect();
        let v = variance_metric(&samples, 0..2).unwrap();
        let vk = variance_metric(&scaled, 0..2).unwrap();
        prop_assert!((vk - (k * k) as f64 * v).abs() <= 1e-4 * (1.0 + vk));
        let mut reversed = samples.clone();
        reversed.reverse();
        prop_assert!((variance_metric(&reversed, 0..2).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn best_of_is_monotone_in_nested_sets(values in prop::collection::vec(-2.0f32..2.0, 5 * 8)) {
        let gt = series(4, 2, |t, d| (t * 2 + d) as f32 * 0.1);
        let samples: Vec<FrameSeries> = values.chunks(8).map(|c| FrameSeries::new(4, 2, c.to_vec()).unwrap()).collect();
        let maes: Vec<f64> = (1..=samples.len()).map(|s| mae_best_of(&gt, &samples[..s]).unwrap()).collect();
        prop_assert!(maes.windows(2).all(|w| w[1] <= w[0]));
    }
}
