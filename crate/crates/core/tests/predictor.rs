mod common;

use std::cell::RefCell;

use pqmotion::corpus::CorpusConfig;
use pqmotion::motion::{FrameMask, FrameSeries};
use pqmotion::pqvae::CodeGrid;
use pqmotion::predictor::{
    autoregressive_decode, maskgit_decode, positional_encoding_2d, predictor_loss,
    sample_training_mask, train_predictor, CodeModel, Conditions, MaskSchedule, Predictor,
    PredictorConfig, PredictorDims,
};
use pqmotion::rng::stream_rng;
use pqmotion::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Logits that ignore the grid: position `p` prefers code `p % K` with a
/// margin that varies by position.
struct Fixed {
    k: usize,
    len: usize,
    calls: RefCell<Vec<Vec<bool>>>,
}

impl Fixed {
    fn new(k: usize, len: usize) -> Self {
        Self { k, len, calls: RefCell::new(Vec::new()) }
    }
    fn margin(p: usize) -> f64 {
        1.0 + ((p * 7) % 5) as f64 * 0.5
    }
}

impl CodeModel for Fixed {
    fn codes(&self) -> usize {
        self.k
    }
    fn logits(&self, grid: &CodeGrid) -> Result<Vec<f64>> {
        self.calls.borrow_mut().push(grid.keep.clone());
        let mut out = vec![0.0; self.len * self.k];
        for p in 0..self.len {
            out[p * self.k + p % self.k] = Self::margin(p);
        }
        Ok(out)
    }
}

fn tiny_dims() -> PredictorDims {
    let c = CorpusConfig::default();
    PredictorDims { groups: 2, codes: 8, motion_dims: c.motion_dims, audio_dims: c.audio_dims, speakers: c.num_speakers }
}

fn tiny_predictor() -> Predictor {
    let cfg = PredictorConfig {
        d_model: 16,
        heads: 2,
        blocks: 1,
        identity_dim: 4,
        context_width: 8,
        context_layers: 1,
        ..Default::default()
    };
    Predictor::new(&cfg, tiny_dims(), &mut stream_rng(9, 0)).unwrap()
}

fn audio(frames: usize, dims: usize) -> FrameSeries {
    let data = (0..frames * dims).map(|i| ((i as f32) * 0.37).sin()).collect();
    FrameSeries::new(frames, dims, data).unwrap()
}

#[test]
fn origin_encoding_is_zero_sines_and_doubled_cosines() {
    let e = positional_encoding_2d(0, 0, 64);
    for pair in e.chunks(2) {
        assert_eq!(pair, [0.0, 2.0]);
    }
}

#[test]
fn group_offset_is_independent_of_time() {
    for (g, h) in [(0, 1), (1, 3), (2, 0)] {
        let base: Vec<f64> = positional_encoding_2d(0, g, 32)
            .iter()
            .zip(positional_encoding_2d(0, h, 32))
            .map(|(a, b)| a - b)
            .collect();
        for n in 1..64 {
            let d: Vec<f64> = positional_encoding_2d(n, g, 32)
                .iter()
                .zip(positional_encoding_2d(n, h, 32))
                .map(|(a, b)| a - b)
                .collect();
            for (x, y) in d.iter().zip(&base) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encodings_are_pairwise_distinct() {
    let all: Vec<Vec<f64>> = (0..64)
        .flat_map(|n| (0..4).map(move |g| positional_encoding_2d(n, g, 64)))
        .collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6, "{i} and {j} collide");
        }
    }
}

#[test]
fn mean_training_mask_ratio_matches_the_integral() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 100_000;
    let len = 64;
    let masked: usize = (0..draws)
        .map(|_| sample_training_mask(len, &mut rng).iter().filter(|k| !**k).count())
        .sum();
    let mean = masked as f64 / (draws * len) as f64;
    assert!((mean - 2.0 / std::f64::consts::PI).abs() < 0.01, "{mean}");
}

#[test]
fn uniform_and_saturated_losses() {
    let target = CodeGrid::new(2, 2, vec![0, 5, 127, 3]);
    let keep = vec![false; 4];
    let uniform = vec![0.0; 4 * 128];
    let l = predictor_loss(&target, &keep, &uniform, 128).unwrap();
    assert!((l - 128f64.ln()).abs() < 1e-12);
    let mut sharp = uniform.clone();
    for (p, &k) in target.indices.iter().enumerate() {
        sharp[p * 128 + k] = 1e3;
    }
    assert!(predictor_loss(&target, &keep, &sharp, 128).unwrap() < 1e-9);
}

#[test]
fn one_iteration_commits_everything_at_once() {
    let model = Fixed::new(4, 8);
    let (grid, trace) = maskgit_decode(&model, &MaskSchedule::new(1, 0.0), &CodeGrid::masked(4, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(grid.is_complete());
    assert_eq!(trace.committed_at, vec![1; 8]);
    assert_eq!(model.calls.borrow().len(), 1);
}

#[test]
fn retention_order_follows_confidence_like_a_greedy_oracle() {
    let model = Fixed::new(3, 8);
    let schedule = MaskSchedule::new(8, 0.0);
    let (grid, trace) = maskgit_decode(&model, &schedule, &CodeGrid::masked(4, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    // Greedy oracle: commit one position per step, most confident first,
    // ties to the earlier (time, subspace) position.
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| trace.confidence[b].partial_cmp(&trace.confidence[a]).unwrap().then(a.cmp(&b)));
    let times: Vec<usize> = order.iter().map(|&p| trace.committed_at[p]).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]), "{times:?}");
    for p in 0..8 {
        assert_eq!(grid.indices[p], p % 3);
    }
}

#[test]
fn autoregressive_fills_in_raster_order() {
    let model = Fixed::new(4, 6);
    let mut initial = CodeGrid::masked(3, 2);
    initial.keep[2] = true;
    initial.indices[2] = 3;
    let grid = autoregressive_decode(&model, 0.0, &initial, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(grid.is_complete());
    assert_eq!(grid.indices, vec![0, 1, 3, 3, 0, 1]);
    let calls = model.calls.borrow();
    assert_eq!(calls.len(), 5);
    for (i, keep) in calls.iter().enumerate() {
        let known = keep.iter().filter(|k| **k).count();
        assert_eq!(known, i + 1);
    }
}

#[test]
fn identity_changes_logits() {
    let p = tiny_predictor();
    let a = audio(32, tiny_dims().audio_dims);
    let grid = CodeGrid::masked(4, 2);
    let c0 = Conditions::audio_only(&a, tiny_dims().motion_dims, 0).unwrap();
    let c1 = Conditions::audio_only(&a, tiny_dims().motion_dims, 1).unwrap();
    let l0 = p.predict_logits(&grid, &c0).unwrap();
    let l1 = p.predict_logits(&grid, &c1).unwrap();
    assert_eq!(l0.len(), 8 * 8);
    let gap: f64 = l0.iter().zip(&l1).map(|(x, y)| (x - y).abs()).sum();
    assert!(gap > 0.0);
    assert_eq!(l0, p.predict_logits(&grid, &c0).unwrap());
}

#[test]
fn zero_temperature_decoding_is_deterministic() {
    let p = tiny_predictor();
    let a = audio(40, tiny_dims().audio_dims);
    let motion = FrameSeries::zeros(40, tiny_dims().motion_dims);
    let cond = Conditions::new(&a, &motion, &FrameMask::all_generated(40), 2).unwrap();
    assert_eq!(cond.steps, 5);
    let bound = p.bind(&cond).unwrap();
    let schedule = MaskSchedule::new(4, 0.0);
    let (g1, _) = maskgit_decode(&bound, &schedule, &CodeGrid::masked(5, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (g2, _) = maskgit_decode(&bound, &schedule, &CodeGrid::masked(5, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(g1, g2);
    let a1 = autoregressive_decode(&bound, 0.0, &CodeGrid::masked(5, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a2 = autoregressive_decode(&bound, 0.0, &CodeGrid::masked(5, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a1, a2);
}

#[test]
fn training_is_reproducible() {
    let run = common::tiny_run();
    let s = &run.splits;
    let (a, report) = train_predictor(&run.trained.pqvae, &s.train, &s.val, &run.cfg.predictor, 3).unwrap();
    assert_eq!(
        a.to_checkpoint(3).to_bytes().unwrap(),
        run.trained.predictor.to_checkpoint(3).to_bytes().unwrap()
    );
    assert_eq!(report.epochs.len(), run.cfg.predictor.epochs);
    let ce = report.best_val_ce.unwrap();
    assert!(ce.is_finite() && ce > 0.0);
    let back = Predictor::from_checkpoint(&a.to_checkpoint(3)).unwrap();
    assert_eq!(back.to_checkpoint(3).to_bytes().unwrap(), a.to_checkpoint(3).to_bytes().unwrap());
}

proptest! {
    #[test]
    fn masked_count_schedule(t_max in 1usize..24, l0 in 0usize..80) {
        let s = MaskSchedule::new(t_max, 1.0);
        let counts: Vec<usize> = (0..=t_max).map(|t| s.masked_after(t, l0)).collect();
        prop_assert_eq!(counts[0], l0);
        prop_assert_eq!(counts[t_max], 0);
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn decode_never_touches_kept_codes(
        steps in 1usize..6,
        keep in prop::collection::vec(any::<bool>(), 12),
        t_max in 1usize..9,
        seed in any::<u64>(),
    ) {
        let len = steps * 2;
        let mut initial = CodeGrid::masked(steps, 2);
        for p in 0..len {
            if keep[p] {
                initial.keep[p] = true;
                initial.indices[p] = 3;
            }
        }
        let model = Fixed::new(4, len);
        let (grid, trace) = maskgit_decode(&model, &MaskSchedule::new(t_max, 1.0), &initial, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(grid.is_complete());
        for p in 0..len {
            if keep[p] {
                prop_assert_eq!(grid.indices[p], 3);
                prop_assert_eq!(trace.committed_at[p], 0);
            }
        }
        let l0 = initial.num_masked();
        let s = MaskSchedule::new(t_max, 1.0);
        for (t, &m) in trace.masked_after.iter().enumerate() {
            prop_assert_eq!(m, s.masked_after(t + 1, l0));
        }
    }
}
