//! Acceptance checks. Prints one PASS/FAIL line per criterion and a
//! summary. With `TSKD_ACCEPTANCE_STRICT=1` any FAIL makes the exit code
//! non-zero; otherwise the run is a report.
//!
//! The trend criteria (5, 7, 8, 9) need the full five-seed pipeline. Its
//! artifacts go to `target/acceptance-run` (override with
//! `TSKD_ACCEPTANCE_DIR`); a later run replays them without training.

mod common;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::Rng;
use tskd_core::corpus::CorpusConfig;
use tskd_core::decode::{beam_search, greedy_search, ModelScorer, StreamSession};
use tskd_core::diffcore::Checkpoint;
use tskd_core::distill::{kd_loss, prepare, train_student_from, train_ts_baseline, KdConfig, TrainConfig};
use tskd_core::eval::relative_reduction;
use tskd_core::par::Exec;
use tskd_core::pipeline::{run_pipeline, stage_corpus, ExperimentConfig, PipelineSummary, Stamp};
use tskd_core::speaker::{SpeakerConfig, TargetSpeakerModel};
use tskd_core::transducer::{
    chunk_window, encode, extract_features, rnnt_loss, FeatureSequence, StreamingConfig, TransducerConfig, TransducerModel,
};
use tskd_core::tse::si_snr_with_grad;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for t in 1..=4 {
        for u in 0..=3 {
            // a lattice needs blank plus at least one token
            for k in 2..=4 {
                for _ in 0..100 {
                    let l = random_lattice(&mut r, t, u + 1, k, 3.0);
                    let y = random_tokens(&mut r, u, k);
                    let loss = rnnt_loss(&l, &y).unwrap().0;
                    worst = worst.max((loss + brute_force_likelihood(&l, &y).ln()).abs());
                    cases += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 10.0,
        format!("{cases} lattices, max |loss - enumeration| {worst:.2e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let (mut naive_err, mut entropy_err, mut gibbs_violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let (t, u, k) = (r.random_range(1..=5), r.random_range(0..=4), r.random_range(2..=6));
        let p = random_lattice(&mut r, t, u + 1, k, 4.0);
        let q = random_lattice(&mut r, t, u + 1, k, 4.0);
        let pq = kd_loss(&p, &q).unwrap().0;
        let pp = kd_loss(&p, &p).unwrap().0;
        naive_err = naive_err.max((pq - naive_kd(&p, &q)).abs());
        let entropy: f64 = p.probs().iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
        entropy_err = entropy_err.max((pp - entropy).abs());
        if pq < pp {
            gibbs_violations += 1;
        }
    }
    outcome(
        naive_err < 1e-12 && entropy_err < 1e-12 && gibbs_violations == 0,
        format!("1000 pairs: naive {naive_err:.2e}, entropy {entropy_err:.2e}, Gibbs violations {gibbs_violations}"),
    )
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    let mut empty = 0;
    for seed in 0..10 {
        for r in gradient_suite(seed) {
            checks += 1;
            if r.checked == 0 {
                empty += 1;
            }
            if r.max_rel > worst.0 {
                worst = (r.max_rel, r.name.to_string());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst.0 < FD_TOL && empty == 0 && secs < 60.0,
        format!("{checks} checks over 10 seeds, worst {:.2e} ({}), {secs:.2}s", worst.0, worst.1),
    )
}

fn tiny_model() -> TransducerConfig {
    TransducerConfig {
        d_model: 8,
        ffn_hidden: 8,
        joint_dim: 8,
        pred_dim: 8,
        embed_dim: 4,
        ..TransducerConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let corpus = CorpusConfig {
        train_utts: 24,
        dev_utts: 4,
        test_utts_per_snr: 1,
        ..CorpusConfig::default()
    };
    let ds = tskd_core::corpus::build_dataset(&corpus, 4, Exec::Sequential).unwrap();
    let mc = tiny_model();
    let train = prepare(&ds.train, &mc.features, Exec::Sequential).unwrap();
    let dev = prepare(&ds.dev, &mc.features, Exec::Sequential).unwrap();
    let mut teacher = TransducerModel::new(&mc, 40).unwrap();
    teacher.params.freeze_all();
    let spk = SpeakerConfig::default();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 5,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut kd_student = TargetSpeakerModel::new(&mc, &spk, 41).unwrap();
    let mut base_student = kd_student.clone();
    let kd = train_student_from(
        &mut kd_student,
        &train,
        &dev,
        &teacher,
        &KdConfig {
            lambda: 0.0,
            train: cfg.clone(),
        },
    )
    .unwrap();
    let base = train_ts_baseline(&mut base_student, &train, &dev, &cfg).unwrap();
    let steps = kd.step_losses.len();
    let worst = kd
        .step_losses
        .iter()
        .zip(&base.step_losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let same_params = kd_student.params.named_values() == base_student.params.named_values();
    outcome(
        steps == base.step_losses.len() && steps > 0 && worst <= 1e-12,
        format!("{steps} steps, max per-step difference {worst:.2e}, identical final parameters {same_params}"),
    )
}

fn random_features(r: &mut rand_chacha::ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    FeatureSequence {
        frames: rand_array(r, &[frames, dim]),
        window: 16,
        hop: 16,
    }
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let mut leaks = 0;
    let mut probes = 0;
    let mut inside_changes = 0;
    for case in 0..40 {
        let (chunk, history, s) = (r.random_range(1..=4), r.random_range(0..=5), r.random_range(1..=2));
        let mut cfg = TransducerConfig {
            subsampling: s,
            streaming: Some(StreamingConfig { chunk, history }),
            ..tiny_model()
        };
        cfg.features.dim = 5;
        let enc_frames = r.random_range(1..=12);
        let feats = random_features(&mut r, enc_frames * s, 5);
        // alternate plain and speaker-conditioned encoders
        let (base, perturbed_of): (Vec<f64>, Box<dyn Fn(&FeatureSequence) -> Vec<f64>>) = if case % 2 == 0 {
            let m = TransducerModel::new(&cfg, r.random()).unwrap();
            let f = move |x: &FeatureSequence| encode(x, &m, None).unwrap().states.into_vec();
            (f(&feats), Box::new(f))
        } else {
            let m = TargetSpeakerModel::new(&cfg, &SpeakerConfig::default(), r.random()).unwrap();
            let cond: Vec<f64> = (0..cfg.d_model).map(|_| r.random_range(0.5..1.5)).collect();
            let f = move |x: &FeatureSequence| encode(x, &m, Some(&cond)).unwrap().states.into_vec();
            (f(&feats), Box::new(f))
        };
        let d = cfg.d_model;
        for j in 0..feats.len() {
            let mut p = feats.clone();
            p.frames.row_mut(j).iter_mut().for_each(|v| *v += 1.0);
            let out = perturbed_of(&p);
            let source = j / s;
            for i in 0..enc_frames {
                let (lo, hi) = chunk_window(i, enc_frames, chunk, history);
                let same = base[i * d..(i + 1) * d] == out[i * d..(i + 1) * d];
                if (lo..=hi).contains(&source) {
                    inside_changes += usize::from(!same);
                } else {
                    probes += 1;
                    leaks += usize::from(!same);
                }
            }
        }
    }

    let mut retractions = 0;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (chunk, history, s) = (r.random_range(1..=3), r.random_range(0..=3), r.random_range(1..=2));
        let mut cfg = TransducerConfig {
            subsampling: s,
            d_model: 6,
            ffn_hidden: 6,
            joint_dim: 6,
            pred_dim: 5,
            embed_dim: 3,
            vocab_size: 4,
            streaming: Some(StreamingConfig { chunk, history }),
            ..TransducerConfig::default()
        };
        cfg.features.dim = 4;
        let m = TransducerModel::new(&cfg, r.random()).unwrap();
        let frames = r.random_range(1..=10) * s;
        let feats = random_features(&mut r, frames, 4);
        let mut session = StreamSession::new(&m, None).unwrap();
        let mut shown: Vec<usize> = Vec::new();
        let mut start = 0;
        while start < feats.len() {
            let end = (start + r.random_range(1..=4)).min(feats.len());
            session.push(&feats.slice(start, end)).unwrap();
            if !session.tokens().starts_with(&shown) {
                retractions += 1;
            }
            shown = session.tokens().to_vec();
            start = end;
        }
        session.finish().unwrap();
        if !session.tokens().starts_with(&shown) {
            retractions += 1;
        }
        let offline = greedy_search(&ModelScorer::new(&m, &encode(&feats, &m, None).unwrap()).unwrap()).unwrap();
        if offline.tokens != session.tokens() {
            mismatches += 1;
        }
    }
    outcome(
        leaks == 0 && retractions == 0,
        format!(
            "{probes} out-of-window probes, {leaks} changed ({inside_changes} in-window rows changed); \
             1000 sessions, {retractions} retractions, {mismatches} differ from offline greedy"
        ),
    )
}

fn acceptance_dir() -> PathBuf {
    std::env::var_os("TSKD_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-run"))
}

/// Runs or replays the default five-seed pipeline. Returns the summary
/// and the wall time of the run that produced the artifacts, if known.
fn pipeline() -> (ExperimentConfig, tskd_core::Result<PipelineSummary>, Option<f64>) {
    let config = ExperimentConfig {
        out_dir: acceptance_dir(),
        ..ExperimentConfig::default()
    };
    let timing = config.out_dir.join("wall_seconds.txt");
    let fresh = !config.out_dir.join("config.txt").exists();
    let t0 = Instant::now();
    let summary = run_pipeline(&config);
    let secs = if fresh && summary.is_ok() {
        let s = t0.elapsed().as_secs_f64();
        let _ = fs::write(&timing, format!("{s:.1}\n"));
        Some(s)
    } else {
        fs::read_to_string(&timing).ok().and_then(|t| t.trim().parse().ok())
    };
    (config, summary, secs)
}

fn criterion_5(s: &PipelineSummary, secs: Option<f64>) -> Outcome {
    let off = &s.offline;
    let st = &s.streaming;
    let n = s.seeds.len();
    let fast = secs.is_some_and(|t| t < 1800.0);
    let pass = n >= 5 && off.kd.mean_b < off.kd.mean_a && st.kd.mean_b < st.kd.mean_a && s.streaming_gain_seeds >= 3 && fast;
    let per_seed: Vec<String> = off
        .kd
        .per_seed
        .iter()
        .zip(&st.kd.per_seed)
        .map(|((seed, o), (_, v))| format!("{seed}:{o:.1}/{v:.1}"))
        .collect();
    outcome(
        pass,
        format!(
            "offline {} {:.2} -> {} {:.2} ({:.1}%); streaming {} {:.2} -> {} {:.2} ({:.1}%); \
             streaming >= offline reduction on {}/{n} seeds [seed:offline%/streaming% {}]; runtime {}",
            off.baseline_system,
            off.kd.mean_a,
            off.best_system,
            off.kd.mean_b,
            relative_reduction(off.kd.mean_a, off.kd.mean_b),
            st.baseline_system,
            st.kd.mean_a,
            st.best_system,
            st.kd.mean_b,
            relative_reduction(st.kd.mean_a, st.kd.mean_b),
            s.streaming_gain_seeds,
            per_seed.join(" "),
            secs.map_or("unknown (resumed run)".to_string(), |t| format!("{:.1} min", t / 60.0)),
        ),
    )
}

/// Beam 1 against greedy, and beam scores over widths 1, 2, 4, 8, for the
/// dev-selected offline and streaming students of the first seed.
fn criterion_7(config: &ExperimentConfig, s: &PipelineSummary) -> Outcome {
    let seed = config.seeds[0];
    let stamp = Stamp {
        hash: config.hash(),
        seed,
    };
    let dir = config.seed_dir(seed);
    let ds = stage_corpus(config, &stamp, &dir.join("corpus")).unwrap();
    let (mut utts, mut greedy_mismatch, mut decreases) = (0, 0, 0);
    let mut worst = (0.0f64, 0, 0);
    for (mode, lambda) in [("offline", s.offline.best_lambda), ("streaming", s.streaming.best_lambda)] {
        let ckpt = Checkpoint::load(&dir.join(format!("student_{mode}_l{lambda}.ckpt"))).unwrap();
        let m = TargetSpeakerModel::from_checkpoint(&ckpt).unwrap();
        for rec in ds.test_records() {
            let feats = extract_features(&rec.mixture, &m.config().features).unwrap();
            let enr = extract_features(&rec.enrollment, &m.config().features).unwrap();
            let emb = m.embed(&enr).unwrap();
            let enc = encode(&feats, &m, Some(&emb.values)).unwrap();
            let scorer = ModelScorer::new(&m, &enc).unwrap();
            let greedy = greedy_search(&scorer).unwrap();
            let (mut last, mut last_b) = (f64::NEG_INFINITY, 0);
            for b in [1, 2, 4, 8] {
                let h = beam_search(&scorer, b).unwrap();
                if b == 1 && h.tokens != greedy.tokens {
                    greedy_mismatch += 1;
                }
                if h.log_prob < last - 1e-12 {
                    decreases += 1;
                    if last - h.log_prob > worst.0 {
                        worst = (last - h.log_prob, last_b, b);
                    }
                }
                (last, last_b) = (h.log_prob, b);
            }
            utts += 1;
        }
    }
    outcome(
        greedy_mismatch == 0 && decreases == 0,
        format!(
            "{utts} test decodes: beam 1 != greedy on {greedy_mismatch}, score decreases with width on {decreases} (worst {:.3} nats, beam {} -> {})",
            worst.0, worst.1, worst.2
        ),
    )
}

fn criterion_8(s: &PipelineSummary) -> Outcome {
    let mut r = rng(8);
    let mut scale_err = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(4..200);
        let reference: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let est: Vec<f64> = reference.iter().map(|v| v + r.random_range(-1.0..1.0)).collect();
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let scaled: Vec<f64> = est.iter().map(|v| v * scale).collect();
        let a = si_snr_with_grad(&est, &reference).unwrap().0;
        let b = si_snr_with_grad(&scaled, &reference).unwrap().0;
        scale_err = scale_err.max((a - b).abs());
    }
    let reference = [1.0, -1.0, 1.0, -1.0];
    let est = [2.0, 0.0, 0.0, -2.0];
    let zero = si_snr_with_grad(&est, &reference).unwrap().0.abs();
    let n = s.seeds.len() as f64;
    let off = s.seeds.iter().map(|x| x.si_snr_offline).sum::<f64>() / n;
    let causal = s.seeds.iter().map(|x| x.si_snr_causal).sum::<f64>() / n;
    let seeds_ordered = s.seeds.iter().filter(|x| x.si_snr_offline >= x.si_snr_causal).count();
    outcome(
        scale_err < 1e-9 && zero < 1e-9 && off > 0.0 && off >= causal,
        format!(
            "scale invariance {scale_err:.2e}; orthogonal equal power {zero:.2e} dB; \
             dev improvement offline {off:.2} dB vs causal {causal:.2} dB (offline >= causal on {seeds_ordered}/{} seeds)",
            s.seeds.len()
        ),
    )
}

fn criterion_9(s: &PipelineSummary) -> Outcome {
    let c = &s.streaming.cascade;
    outcome(
        c.wins_b >= 3,
        format!(
            "streaming cascade {:.2} vs integrated {:.2}; integrated lower on {}/{} seeds",
            c.mean_a,
            c.mean_b,
            c.wins_b,
            s.seeds.len()
        ),
    )
}

fn report(n: usize, o: &Outcome) -> bool {
    println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() -> ExitCode {
    let quick = std::env::args().any(|a| a == "--quick");
    let mut verdicts = vec![
        report(1, &criterion_1()),
        report(2, &criterion_2()),
        report(3, &criterion_3()),
        report(4, &criterion_4()),
        report(6, &criterion_6()),
    ];
    if quick {
        println!("criteria 5, 7, 8, 9 skipped (--quick)");
    } else {
        let (config, summary, secs) = pipeline();
        match summary {
            Ok(s) => {
                verdicts.push(report(5, &criterion_5(&s, secs)));
                verdicts.push(report(7, &criterion_7(&config, &s)));
                verdicts.push(report(8, &criterion_8(&s)));
                verdicts.push(report(9, &criterion_9(&s)));
                println!("\n{}", s.table);
            }
            Err(e) => {
                for n in [5, 7, 8, 9] {
                    verdicts.push(report(n, &outcome(false, format!("pipeline failed: {e}"))));
                }
            }
        }
    }
    let passed = verdicts.iter().filter(|&&v| v).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    let strict = std::env::var("TSKD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < verdicts.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
