//! Library results checked against independent reference implementations
//! and hand-derived constants.

mod common;

use common::*;
use tskd_core::corpus::{mix_at_ratio, Signal};
use tskd_core::decode::average_latency_ms;
use tskd_core::distill::kd_loss;
use tskd_core::eval::{edit_distance, relative_reduction, ter};
use tskd_core::transducer::{build_chunk_mask, chunk_window, forward_backward, rnnt_loss, PosteriorLattice};
use tskd_core::tse::si_snr_with_grad;

#[test]
fn uniform_two_frame_one_label_loss() {
    // Two alignment paths of three cells each, every cell 1/3.
    let l = PosteriorLattice::uniform(2, 2, 3);
    let (loss, _) = rnnt_loss(&l, &[1]).unwrap();
    assert_eq!(path_count(2, 1), 2);
    assert!((loss - 2.602_689_685_444_383_7).abs() < 1e-12);
    assert!((loss - (27.0f64 / 2.0).ln()).abs() < 1e-12);
}

#[test]
fn path_counts_match_enumeration() {
    // brute force over a lattice of ones counts paths
    for t in 1..=4 {
        for u in 0..=3 {
            let l = PosteriorLattice::new(t, u + 1, 2, vec![1.0; t * (u + 1) * 2]).unwrap();
            let y = vec![1; u];
            assert_eq!(brute_force_likelihood(&l, &y) as u64, path_count(t, u), "T={t} U={u}");
        }
    }
    assert_eq!(path_count(3, 2), 6);
    assert_eq!(path_count(4, 3), 20);
}

#[test]
fn forward_backward_matches_enumeration() {
    let mut r = rng(11);
    for _ in 0..200 {
        let (t, u, k) = (r_range(&mut r, 1, 4), r_range(&mut r, 0, 3), r_range(&mut r, 2, 4));
        let l = random_lattice(&mut r, t, u + 1, k, 3.0);
        let y = random_tokens(&mut r, u, k);
        let fb = forward_backward(&l, &y).unwrap();
        let oracle = brute_force_likelihood(&l, &y).ln();
        assert!((fb.log_likelihood - oracle).abs() < 1e-9);
        assert!((fb.log_likelihood_from_beta() - oracle).abs() < 1e-9);
    }
}

fn r_range(r: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> usize {
    use rand::Rng;
    r.random_range(lo..=hi)
}

#[test]
fn kd_matches_triple_loop() {
    let mut r = rng(12);
    for _ in 0..200 {
        let (t, u, k) = (r_range(&mut r, 1, 5), r_range(&mut r, 0, 4), r_range(&mut r, 2, 6));
        let p = random_lattice(&mut r, t, u + 1, k, 4.0);
        let q = random_lattice(&mut r, t, u + 1, k, 4.0);
        assert!((kd_loss(&p, &q).unwrap().0 - naive_kd(&p, &q)).abs() < 1e-12);
    }
}

#[test]
fn kd_one_hot_teacher() {
    let teacher = PosteriorLattice::new(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let student = PosteriorLattice::new(2, 1, 3, vec![0.5, 0.25, 0.25, 0.1, 0.1, 0.8]).unwrap();
    let expect = -(0.5f64.ln() + 0.8f64.ln());
    assert!((kd_loss(&teacher, &student).unwrap().0 - expect).abs() < 1e-15);
}

#[test]
fn edit_distance_matches_recursion() {
    let mut r = rng(13);
    for _ in 0..300 {
        let (a, b) = (r_range(&mut r, 0, 6), r_range(&mut r, 0, 6));
        let x = random_tokens(&mut r, a, 4);
        let y = random_tokens(&mut r, b, 4);
        let e = edit_distance(&x, &y);
        assert_eq!(e.distance, recursive_edit_distance(&x, &y));
        assert_eq!(e.subs + e.ins + e.dels, e.distance);
    }
}

#[test]
fn edit_distance_hand_cases() {
    let e = edit_distance(&[1, 3, 4, 5], &[1, 2, 3, 4]);
    assert_eq!((e.distance, e.subs, e.ins, e.dels), (2, 0, 1, 1));
    let e = edit_distance(&[], &[1, 2, 3]);
    assert_eq!((e.distance, e.dels), (3, 3));
    assert_eq!(ter(3, 0), 300.0);
    assert!((relative_reduction(21.2, 19.2) - 9.433_962_264_150_944).abs() < 1e-12);
    assert!((relative_reduction(15.8, 15.0) - 5.063_291_139_240_507).abs() < 1e-12);
}

#[test]
fn chunk_mask_reference_window() {
    let m = build_chunk_mask(180, 60, 68);
    assert_eq!(chunk_window(65, 180, 60, 68), (0, 119));
    assert_eq!(chunk_window(130, 180, 60, 68), (52, 179));
    for t in 0..180 {
        let (lo, hi) = chunk_window(t, 180, 60, 68);
        for j in 0..180 {
            assert_eq!(m.allowed(t, j), (lo..=hi).contains(&j));
        }
    }
}

#[test]
fn latency_reference_point() {
    // 60 frames of 10 ms (hop 160 at 16 kHz) plus 30 ms lookahead
    assert!((average_latency_ms(60, 1, 160, 16_000, 30.0) - 330.0).abs() < 1e-9);
    assert!((average_latency_ms(15, 4, 160, 16_000, 30.0) - 330.0).abs() < 1e-9);
}

#[test]
fn si_snr_closed_forms() {
    let r = vec![1.0, -1.0, 1.0, -1.0];
    let n = vec![1.0, 1.0, -1.0, -1.0];
    // target at twice the power of an orthogonal residual: 10 log10 2 dB
    let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| 2f64.sqrt() * a + b).collect();
    let (v, _) = si_snr_with_grad(&e, &r).unwrap();
    assert!((v - 10.0 * 2f64.log10()).abs() < 1e-12);
}

#[test]
fn mixing_ratio_reference() {
    let fg = Signal::new(vec![2.0, -2.0, 2.0, -2.0], 8000);
    let bg = Signal::new(vec![1.0, 1.0, -1.0, -1.0], 8000);
    // 20 dB: interference scaled to a tenth of the target amplitude ratio
    let m = mix_at_ratio(&fg, &bg, 20.0).unwrap();
    let expect = [2.2, -1.8, 1.8, -2.2];
    for (a, b) in m.samples.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}
