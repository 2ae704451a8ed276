//! Independent reference implementations and the finite-difference gradient
//! suite shared by the integration test targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tskd_core::corpus::Tokens;
use tskd_core::diffcore::layers::{tanh, tanh_backward, AttentionBlock, FeedForward, GatedRecurrent, Linear};
use tskd_core::diffcore::{affine, affine_backward, masked_self_attention, softmax_backward, softmax_last_dim, Array, Grads, Mask, ParamStore};
use tskd_core::distill::{kd_loss, multitask_step, teacher_step, Prepared};
use tskd_core::speaker::{SpeakerConfig, TargetSpeakerModel};
use tskd_core::transducer::{rnnt_loss, FeatureSequence, PosteriorLattice, StreamingConfig, TransducerConfig, TransducerModel};
use tskd_core::tse::{ExtractorConfig, ExtractorModel};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random lattice with every cell a softmax of Gaussian-ish logits scaled
/// by `sharpness`.
pub fn random_lattice(rng: &mut ChaCha8Rng, t: usize, rows: usize, k: usize, sharpness: f64) -> PosteriorLattice {
    let mut probs = Vec::with_capacity(t * rows * k);
    for _ in 0..t * rows {
        let logits: Vec<f64> = (0..k).map(|_| sharpness * rng.random_range(-1.0..1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        probs.extend(e.iter().map(|v| v / z));
    }
    PosteriorLattice::new(t, rows, k, probs).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, u: usize, k: usize) -> Tokens {
    (0..u).map(|_| rng.random_range(1..k)).collect()
}

// ---------------------------------------------------------------- oracles

/// Sum of the probabilities of every alignment path, enumerated one path
/// at a time. A path is a sequence of `T` blanks and `U` labels ending in a
/// blank at the last frame.
pub fn brute_force_likelihood(l: &PosteriorLattice, y: &[usize]) -> f64 {
    fn walk(l: &PosteriorLattice, y: &[usize], t: usize, u: usize, acc: f64, total: &mut f64) {
        let last = l.frames() - 1;
        if u < y.len() {
            walk(l, y, t, u + 1, acc * l.prob(t, u, y[u]), total);
        }
        let p = acc * l.prob(t, u, 0);
        if t == last {
            if u == y.len() {
                *total += p;
            }
        } else {
            walk(l, y, t + 1, u, p, total);
        }
    }
    let mut total = 0.0;
    walk(l, y, 0, 0, 1.0, &mut total);
    total
}

/// Number of alignment paths, the binomial `C(T - 1 + U, U)`.
pub fn path_count(t: usize, u: usize) -> u64 {
    let mut c = 1u64;
    for i in 0..u as u64 {
        c = c * (t as u64 - 1 + u as u64 - i) / (i + 1);
    }
    c
}

/// `-sum q ln p` by three nested loops over (t, u, k).
pub fn naive_kd(teacher: &PosteriorLattice, student: &PosteriorLattice) -> f64 {
    let mut s = 0.0;
    for t in 0..teacher.frames() {
        for u in 0..teacher.label_rows() {
            for k in 0..teacher.classes() {
                let q = teacher.prob(t, u, k);
                if q > 0.0 {
                    s -= q * student.prob(t, u, k).ln();
                }
            }
        }
    }
    s
}

/// Plain recursive Levenshtein distance (exponential; tiny inputs only).
pub fn recursive_edit_distance(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = recursive_edit_distance(ra, rb) + usize::from(x != y);
            let del = recursive_edit_distance(ra, b) + 1;
            let ins = recursive_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

// ------------------------------------------------- finite-difference suite

/// Worst relative error of one check.
#[derive(Debug, Clone)]
pub struct FdResult {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients of `f` with central differences on up to
/// `per_param` entries of every parameter.
pub fn check_store<F>(name: &str, store: &mut ParamStore, per_param: usize, rng: &mut ChaCha8Rng, f: F) -> FdResult
where
    F: Fn(&ParamStore) -> (f64, Grads),
{
    let (_, grads) = f(store);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_EPS;
            let up = f(store).0;
            store.value_mut(id).data_mut()[i] = orig - FD_EPS;
            let down = f(store).0;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grads.get(id)[i], numeric));
            checked += 1;
        }
    }
    FdResult {
        name: name.into(),
        max_rel: worst,
        checked,
    }
}

/// Central differences of `f` over every entry of a plain vector input.
pub fn check_vec<F>(name: &str, x: &[f64], analytic: &[f64], f: F) -> FdResult
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst: f64 = 0.0;
    let mut v = x.to_vec();
    for i in 0..x.len() {
        v[i] = x[i] + FD_EPS;
        let up = f(&v);
        v[i] = x[i] - FD_EPS;
        let down = f(&v);
        v[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_EPS)));
    }
    FdResult {
        name: name.into(),
        max_rel: worst,
        checked: x.len(),
    }
}

fn weighted(y: &Array, c: &Array) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn random_mask(rng: &mut ChaCha8Rng, t: usize) -> Mask {
    let bits: Vec<bool> = (0..t * t).map(|i| i % (t + 1) == 0 || rng.random_bool(0.5)).collect();
    Mask::from_fn(t, |i, j| bits[i * t + j])
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    FeatureSequence {
        frames: rand_array(rng, &[frames, dim]),
        window: 16,
        hop: 16,
    }
}

fn small_model_config(rng: &mut ChaCha8Rng, streaming: bool) -> TransducerConfig {
    let mut c = TransducerConfig {
        subsampling: rng.random_range(1..=2),
        d_model: rng.random_range(3..=5),
        blocks: rng.random_range(1..=2),
        ffn_hidden: rng.random_range(3..=5),
        embed_dim: rng.random_range(2..=3),
        pred_dim: rng.random_range(3..=4),
        joint_dim: rng.random_range(3..=5),
        vocab_size: rng.random_range(3..=5),
        ..TransducerConfig::default()
    };
    c.features.dim = rng.random_range(3..=5);
    if streaming {
        c.streaming = Some(StreamingConfig {
            chunk: rng.random_range(1..=2),
            history: rng.random_range(0..=2),
        });
    }
    c
}

/// Every parameterized operation plus the two composite losses, on
/// randomized small shapes. Returns one result per check.
pub fn gradient_suite(seed: u64) -> Vec<FdResult> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    // affine kernel: inputs, weights and bias
    {
        let (n, din, dout) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let x = rand_array(&mut r, &[n, din]);
        let w = rand_array(&mut r, &[din, dout]);
        let b = rand_array(&mut r, &[dout]);
        let c = rand_array(&mut r, &[n, dout]);
        let (dx, dw, db) = affine_backward(&x, &w, &c).unwrap();
        let f = |x: &Array, w: &Array, b: &Array| weighted(&affine(x, w, b).unwrap(), &c);
        out.push(check_vec("affine dx", x.data(), dx.data(), |v| {
            f(&Array::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b)
        }));
        out.push(check_vec("affine dW", w.data(), dw.data(), |v| {
            f(&x, &Array::from_vec(w.shape(), v.to_vec()).unwrap(), &b)
        }));
        out.push(check_vec("affine db", b.data(), db.data(), |v| {
            f(&x, &w, &Array::from_vec(b.shape(), v.to_vec()).unwrap())
        }));
    }

    // softmax kernel
    {
        let shape = [r.random_range(1..4), r.random_range(2..6)];
        let x = rand_array(&mut r, &shape);
        let c = rand_array(&mut r, x.shape());
        let y = softmax_last_dim(&x).unwrap();
        let dx = softmax_backward(&y, &c).unwrap();
        out.push(check_vec("softmax", x.data(), dx.data(), |v| {
            weighted(&softmax_last_dim(&Array::from_vec(x.shape(), v.to_vec()).unwrap()).unwrap(), &c)
        }));
    }

    // masked attention kernel, input gradient
    {
        let (t, d) = (r.random_range(2..5), r.random_range(2..4));
        let x = rand_array(&mut r, &[t, d]);
        let ws: Vec<Array> = (0..3).map(|_| rand_array(&mut r, &[d, d])).collect();
        let mask = random_mask(&mut r, t);
        let c = rand_array(&mut r, &[t, d]);
        let (_, cache) = masked_self_attention(&x, &mask, &ws[0], &ws[1], &ws[2]).unwrap();
        let mut dx = vec![0.0; t * d];
        let (mut a, mut b, mut e) = (vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]);
        tskd_core::diffcore::ops::masked_self_attention_backward(&x, &ws[0], &ws[1], &ws[2], &cache, c.data(), &mut dx, &mut a, &mut b, &mut e);
        out.push(check_vec("attention dx", x.data(), &dx, |v| {
            let xv = Array::from_vec(x.shape(), v.to_vec()).unwrap();
            weighted(&masked_self_attention(&xv, &mask, &ws[0], &ws[1], &ws[2]).unwrap().0, &c)
        }));
    }

    // layers through the parameter store
    {
        let mut store = ParamStore::new();
        let (din, dout, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4));
        let lin = Linear::new(&mut store, "lin", din, dout, &mut r).unwrap();
        let x = rand_array(&mut r, &[n, din]);
        let c = rand_array(&mut r, &[n, dout]);
        out.push(check_store("linear+tanh", &mut store, 8, &mut r, |s| {
            let z = lin.forward(s, &x).unwrap();
            let y = tanh(&z);
            let mut g = s.zero_grads();
            lin.backward(s, &x, &tanh_backward(&y, &c), &mut g);
            (weighted(&y, &c), g)
        }));
    }
    {
        let mut store = ParamStore::new();
        let (d, h, n) = (r.random_range(2..5), r.random_range(2..5), r.random_range(1..4));
        let ff = FeedForward::new(&mut store, "ff", d, h, &mut r).unwrap();
        let x = rand_array(&mut r, &[n, d]);
        let c = rand_array(&mut r, &[n, d]);
        out.push(check_store("feed-forward", &mut store, 8, &mut r, |s| {
            let (y, cache) = ff.forward(s, &x).unwrap();
            let mut g = s.zero_grads();
            ff.backward(s, &x, &cache, &c, &mut g);
            (weighted(&y, &c), g)
        }));
    }
    {
        let mut store = ParamStore::new();
        let (t, d, h) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..5));
        let blk = AttentionBlock::new(&mut store, "blk", d, h, &mut r).unwrap();
        let x = rand_array(&mut r, &[t, d]);
        let c = rand_array(&mut r, &[t, d]);
        let mask = random_mask(&mut r, t);
        out.push(check_store("attention block", &mut store, 8, &mut r, |s| {
            let (y, cache) = blk.forward(s, &x, &mask).unwrap();
            let mut g = s.zero_grads();
            blk.backward(s, &x, &cache, &c, &mut g);
            (weighted(&y, &c), g)
        }));
    }
    {
        let mut store = ParamStore::new();
        let (steps, din, d) = (r.random_range(1..5), r.random_range(1..4), r.random_range(2..5));
        let gru = GatedRecurrent::new(&mut store, "rnn", din, d, &mut r).unwrap();
        let xs = rand_array(&mut r, &[steps, din]);
        let c = rand_array(&mut r, &[steps, d]);
        out.push(check_store("gated recurrence", &mut store, 8, &mut r, |s| {
            let (hs, caches) = gru.forward_seq(s, &xs).unwrap();
            let mut g = s.zero_grads();
            gru.backward_seq(s, &xs, &hs, &caches, &c, &mut g);
            (weighted(&hs, &c), g)
        }));
    }

    // loss kernels with respect to their probability inputs
    {
        let (t, u, k) = (r.random_range(1..4), r.random_range(0..3), r.random_range(2..5));
        let l = random_lattice(&mut r, t, u + 1, k, 2.0);
        let y = random_tokens(&mut r, u, k);
        let (_, g) = rnnt_loss(&l, &y).unwrap();
        out.push(check_vec("rnnt loss d/dprob", l.probs(), &g, |v| {
            rnnt_loss(&PosteriorLattice::new(t, u + 1, k, v.to_vec()).unwrap(), &y).unwrap().0
        }));
        let q = random_lattice(&mut r, t, u + 1, k, 2.0);
        let (_, g) = kd_loss(&q, &l).unwrap();
        out.push(check_vec("kd loss d/dprob", l.probs(), &g, |v| {
            kd_loss(&q, &PosteriorLattice::new(t, u + 1, k, v.to_vec()).unwrap()).unwrap().0
        }));
    }

    // composite: RNNT loss through the whole transducer, offline and streaming
    for streaming in [false, true] {
        let cfg = small_model_config(&mut r, streaming);
        let mut m = TransducerModel::new(&cfg, r.random()).unwrap();
        let frames = r.random_range(2..6) * cfg.subsampling;
        let feats = random_features(&mut r, frames, cfg.features.dim);
        let u = r.random_range(1..3);
        let y = random_tokens(&mut r, u, cfg.vocab_size);
        let name = if streaming { "rnnt composite (streaming)" } else { "rnnt composite" };
        let net = m.net.clone();
        out.push(check_store(name, &mut m.params, 4, &mut r, |s| {
            let probe = TransducerModel {
                net: net.clone(),
                params: s.clone(),
            };
            let (l, g) = teacher_step(&probe, &feats, &y).unwrap();
            (l.total, g)
        }));
    }

    // composite: multi-task RNNT + lambda KD through the student
    {
        let cfg = small_model_config(&mut r, false);
        let spk = SpeakerConfig {
            d_model: r.random_range(2..4),
            blocks: 1,
            ffn_hidden: r.random_range(2..4),
        };
        let mut teacher = TransducerModel::new(&cfg, r.random()).unwrap();
        teacher.params.freeze_all();
        let mut student = TargetSpeakerModel::new(&cfg, &spk, r.random()).unwrap();
        let frames = r.random_range(2..5) * cfg.subsampling;
        let (enr_frames, u) = (r.random_range(1..4), r.random_range(1..3));
        let p = Prepared {
            id: 0,
            snr_db: 0.0,
            mixture: random_features(&mut r, frames, cfg.features.dim),
            single: random_features(&mut r, frames, cfg.features.dim),
            enrollment: random_features(&mut r, enr_frames, cfg.features.dim),
            transcript: random_tokens(&mut r, u, cfg.vocab_size),
        };
        let lambda = r.random_range(0.1..1.0);
        let (speaker, net, spk_cfg) = (student.speaker.clone(), student.net.clone(), student.speaker_config.clone());
        out.push(check_store("multitask composite", &mut student.params, 4, &mut r, |s| {
            let probe = TargetSpeakerModel {
                speaker: speaker.clone(),
                speaker_config: spk_cfg.clone(),
                net: net.clone(),
                params: s.clone(),
            };
            let (l, g) = multitask_step(&probe, &teacher, &p, lambda).unwrap();
            (l.total, g)
        }));
    }

    // extractor: negative SI-SNR through mask network and speaker encoder
    {
        let cfg = ExtractorConfig {
            window: 4,
            d_model: 3,
            causal: r.random_bool(0.5),
            features: tskd_core::transducer::FeatureConfig { window: 4, hop: 4, dim: 3 },
            speaker: SpeakerConfig {
                d_model: 3,
                blocks: 1,
                ffn_hidden: 3,
            },
        };
        let mut m = ExtractorModel::new(&cfg, r.random()).unwrap();
        let n = r.random_range(9..17);
        let mix: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = mix.iter().map(|v| 0.7 * v + r.random_range(-0.3..0.3)).collect();
        let enr = random_features(&mut r, 3, 3);
        let probe_base = m.clone();
        out.push(check_store("extractor si-snr", &mut m.params, 4, &mut r, |s| {
            let mut probe = probe_base.clone();
            probe.params = s.clone();
            probe.step(&mix, &enr, &target).unwrap()
        }));
    }
    out
}
