//! Randomized invariants.

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use tskd_core::decode::{beam_search, greedy_decode, greedy_search, LatticeScorer, StreamSession};
use tskd_core::diffcore::Checkpoint;
use tskd_core::distill::{kd_loss, multitask_step, Prepared};
use tskd_core::eval::edit_distance;
use tskd_core::speaker::{SpeakerConfig, TargetSpeakerModel};
use tskd_core::transducer::{
    build_chunk_mask, chunk_window, encode, rnnt_loss, FeatureSequence, StreamingConfig, TransducerConfig, TransducerModel,
};
use tskd_core::tse::si_snr_with_grad;

fn features(r: &mut rand_chacha::ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    FeatureSequence {
        frames: rand_array(r, &[frames, dim]),
        window: 16,
        hop: 16,
    }
}

fn small_streaming(chunk: usize, history: usize, subsampling: usize) -> TransducerConfig {
    let mut c = TransducerConfig {
        subsampling,
        d_model: 6,
        blocks: 1,
        ffn_hidden: 6,
        embed_dim: 3,
        pred_dim: 5,
        joint_dim: 6,
        vocab_size: 4,
        streaming: Some(StreamingConfig { chunk, history }),
        ..TransducerConfig::default()
    };
    c.features.dim = 4;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_gibbs_and_entropy(seed in any::<u64>(), t in 1usize..4, u in 0usize..3, k in 2usize..5) {
        let mut r = rng(seed);
        let p = random_lattice(&mut r, t, u + 1, k, 3.0);
        let q = random_lattice(&mut r, t, u + 1, k, 3.0);
        let self_ce = kd_loss(&p, &p).unwrap().0;
        let entropy: f64 = p.probs().iter().map(|v| -v * v.ln()).sum();
        prop_assert!((self_ce - entropy).abs() < 1e-12);
        prop_assert!(kd_loss(&p, &q).unwrap().0 >= self_ce - 1e-12);
    }

    #[test]
    fn rnnt_loss_matches_enumeration(seed in any::<u64>(), t in 1usize..5, u in 0usize..4, k in 2usize..5) {
        let mut r = rng(seed);
        let l = random_lattice(&mut r, t, u + 1, k, 2.0);
        let y = random_tokens(&mut r, u, k);
        let (loss, _) = rnnt_loss(&l, &y).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss + brute_force_likelihood(&l, &y).ln()).abs() < 1e-9);
    }

    #[test]
    fn edit_distance_is_a_metric(a in prop::collection::vec(1usize..4, 0..7),
                                 b in prop::collection::vec(1usize..4, 0..7),
                                 c in prop::collection::vec(1usize..4, 0..7)) {
        let d = |x: &[usize], y: &[usize]| edit_distance(x, y).distance;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn chunk_window_contains_self_and_is_monotone(frames in 1usize..40, chunk in 1usize..8, history in 0usize..10) {
        let m = build_chunk_mask(frames, chunk, history);
        let mut prev = (0, 0);
        for t in 0..frames {
            let (lo, hi) = chunk_window(t, frames, chunk, history);
            prop_assert!(lo <= t && t <= hi && hi < frames);
            prop_assert!(hi - lo < chunk + history);
            prop_assert!(lo >= prev.0 && hi >= prev.1);
            prop_assert!(m.allowed(t, t));
            prev = (lo, hi);
        }
    }

    #[test]
    fn si_snr_is_scale_invariant(seed in any::<u64>(), n in 4usize..64, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let reference: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let est: Vec<f64> = reference.iter().map(|v| v + r.random_range(-0.8..0.8)).collect();
        let scaled: Vec<f64> = est.iter().map(|v| v * scale).collect();
        let a = si_snr_with_grad(&est, &reference).unwrap().0;
        let b = si_snr_with_grad(&scaled, &reference).unwrap().0;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn beam_one_is_greedy_on_lattices(seed in any::<u64>(), t in 1usize..6, k in 2usize..5) {
        let mut r = rng(seed);
        let l = random_lattice(&mut r, t, t + 1, k, 3.0);
        let s = LatticeScorer { lattice: &l };
        let g = greedy_search(&s).unwrap();
        let b = beam_search(&s, 1).unwrap();
        prop_assert_eq!(&g.tokens, &b.tokens);
        prop_assert!(b.tokens.len() <= t);
    }

    #[test]
    fn multitask_is_linear_in_lambda(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = TransducerConfig { d_model: 4, ffn_hidden: 4, joint_dim: 4, pred_dim: 4, embed_dim: 2, vocab_size: 4, ..TransducerConfig::default() };
        let mut cfg = cfg;
        cfg.features.dim = 3;
        let mut teacher = TransducerModel::new(&cfg, r.random()).unwrap();
        teacher.params.freeze_all();
        let spk = SpeakerConfig { d_model: 3, blocks: 1, ffn_hidden: 3 };
        let student = TargetSpeakerModel::new(&cfg, &spk, r.random()).unwrap();
        let p = Prepared {
            id: 0,
            snr_db: 0.0,
            mixture: features(&mut r, 4, 3),
            single: features(&mut r, 4, 3),
            enrollment: features(&mut r, 3, 3),
            transcript: random_tokens(&mut r, 2, 4),
        };
        let zero = multitask_step(&student, &teacher, &p, 0.0).unwrap().0;
        prop_assert_eq!(zero.total, zero.rnnt);
        let mut last = zero.total;
        for lambda in [0.001, 0.01, 0.1, 0.5, 1.0] {
            let s = multitask_step(&student, &teacher, &p, lambda).unwrap().0;
            prop_assert!((s.total - (s.rnnt + lambda * s.kd)).abs() < 1e-12);
            prop_assert!(s.total > last);
            last = s.total;
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>()) {
        let m = TransducerModel::new(&small_streaming(2, 1, 1), seed).unwrap();
        let c = m.to_checkpoint().with_meta("note", "x = y");
        let back = Checkpoint::from_bytes(&c.to_bytes(), "memory").unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streaming_session_matches_offline_greedy(
        seed in any::<u64>(),
        chunk in 1usize..4,
        history in 0usize..4,
        subsampling in 1usize..3,
        enc_frames in 1usize..9,
    ) {
        let mut r = rng(seed);
        let m = TransducerModel::new(&small_streaming(chunk, history, subsampling), r.random()).unwrap();
        let feats = features(&mut r, enc_frames * subsampling, 4);
        let expect = greedy_decode(&encode(&feats, &m, None).unwrap(), &m).unwrap();
        let mut session = StreamSession::new(&m, None).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        let mut start = 0;
        while start < feats.len() {
            let end = (start + r.random_range(1..=3)).min(feats.len());
            let new = session.push(&feats.slice(start, end)).unwrap();
            seen.extend(&new);
            prop_assert_eq!(session.tokens(), &seen[..]);
            start = end;
        }
        seen.extend(session.finish().unwrap());
        prop_assert_eq!(session.tokens(), &seen[..]);
        prop_assert_eq!(seen, expect);
        prop_assert!(session.push(&feats.slice(0, 1)).is_err());
    }
}
