mod common;

use pqmotion::motion::{FrameMask, FrameSeries};
use pqmotion::refiner::{combine_motion, refine_loss, train_refiner, Refiner};
use proptest::prelude::*;

fn series(frames: usize, dims: usize, f: impl Fn(usize, usize) -> f32) -> FrameSeries {
    let data = (0..frames * dims).map(|i| f(i / dims, i % dims)).collect();
    FrameSeries::new(frames, dims, data).unwrap()
}

#[test]
fn alternating_mask_interleaves_sources() {
    let a = series(6, 2, |_, _| 1.0);
    let b = series(6, 2, |_, _| -1.0);
    let mask = FrameMask::new((0..6).map(|t| t % 2 == 0).collect());
    let out = combine_motion(&a, &b, &mask).unwrap();
    for t in 0..6 {
        let want = if t % 2 == 0 { 1.0 } else { -1.0 };
        assert_eq!(out.frame(t), [want, want]);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = series(6, 2, |_, _| 0.0);
    assert!(combine_motion(&a, &series(5, 2, |_, _| 0.0), &FrameMask::all_known(6)).is_err());
    assert!(refine_loss(&a, &a, &FrameMask::all_known(5)).is_err());
}

#[test]
fn offset_on_generated_frames_costs_its_share() {
    let gt = series(10, 2, |t, d| (t * 3 + d) as f32 * 0.1);
    let c = 0.5f32;
    let mask = FrameMask::prefix_suffix(10, 4, 0);
    // Only frames 4.. are shifted, so velocity picks up one jump at the seam.
    let shifted = series(10, 2, |t, d| gt.get(t, d) + if t >= 4 { c } else { 0.0 });
    let l = refine_loss(&gt, &shifted, &mask).unwrap();
    let recon = c as f64 * 6.0 / 10.0;
    let velocity = c as f64 * 2.0 / (9.0 * 2.0);
    assert!((l - recon - velocity).abs() < 1e-6, "{l}");
    assert_eq!(refine_loss(&gt, &gt, &mask).unwrap(), 0.0);
}

#[test]
fn trained_refiner_keeps_context_and_is_deterministic() {
    let run = common::tiny_run();
    let s = &run.splits;
    let (r, report) = train_refiner(&run.trained.pqvae, &s.train, &s.val, &run.cfg.refiner, 3).unwrap();
    let bytes = r.to_checkpoint(3).to_bytes().unwrap();
    assert_eq!(bytes, run.trained.refiner.to_checkpoint(3).to_bytes().unwrap());
    let back = Refiner::from_checkpoint(&r.to_checkpoint(3)).unwrap();
    assert_eq!(back.to_checkpoint(3).to_bytes().unwrap(), bytes);
    assert!(report.best_val_loss.unwrap() <= report.identity_val_loss.unwrap());

    let seq = &s.test.sequences[0];
    let pq = run.trained.pqvae.reconstruct(&seq.motion).unwrap();
    let frames = seq.motion.frames();
    let full = FrameMask::all_known(frames);
    let combined = combine_motion(&seq.motion, &pq, &full).unwrap();
    assert_eq!(r.refine(&combined, &seq.audio, &full, seq.speaker_id).unwrap(), seq.motion);

    let mask = FrameMask::prefix_suffix(frames, 8, 8);
    let combined = combine_motion(&seq.motion, &pq, &mask).unwrap();
    let once = r.refine(&combined, &seq.audio, &mask, seq.speaker_id).unwrap();
    assert_eq!(once, r.refine(&combined, &seq.audio, &mask, seq.speaker_id).unwrap());
    for t in (0..8).chain(frames - 8..frames) {
        assert_eq!(once.frame(t), seq.motion.frame(t));
    }
}

proptest! {
    #[test]
    fn combine_is_idempotent_at_endpoints_and_linear(
        a in prop::collection::vec(-4i8..4, 12),
        b in prop::collection::vec(-4i8..4, 12),
        c in prop::collection::vec(-4i8..4, 12),
        bits in prop::collection::vec(any::<bool>(), 4),
    ) {
        // Small integers keep every sum exact in f32.
        let s = |v: &[i8]| series(4, 3, |t, d| v[t * 3 + d] as f32);
        let (a, b, c) = (s(&a), s(&b), s(&c));
        prop_assert_eq!(combine_motion(&a, &b, &FrameMask::all_known(4)).unwrap(), a.clone());
        prop_assert_eq!(combine_motion(&a, &b, &FrameMask::all_generated(4)).unwrap(), b.clone());

        let mask = FrameMask::new(bits);
        let ab = combine_motion(&a, &b, &mask).unwrap();
        prop_assert_eq!(combine_motion(&ab, &ab, &mask).unwrap(), ab.clone());
        let sum = |x: &FrameSeries, y: &FrameSeries| {
            FrameSeries::new(4, 3, x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect()).unwrap()
        };
        let lhs = combine_motion(&sum(&a, &c), &sum(&b, &c), &mask).unwrap();
        prop_assert_eq!(lhs, sum(&ab, &c));
    }

    #[test]
    fn velocity_term_ignores_global_shifts(shift in -3.0f32..3.0) {
        let gt = series(8, 2, |t, d| ((t + d) as f32).sin());
        let moved = series(8, 2, |t, d| gt.get(t, d) + shift);
        let l = refine_loss(&gt, &moved, &FrameMask::all_known(8)).unwrap();
        prop_assert!(l.abs() < 1e-6);
    }
}
