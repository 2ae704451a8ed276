//! Signature-driven synthetic "speech".
//!
//! A token is rendered as a short run of sub-frames. Each sub-frame is built
//! in an orthonormal cosine (DCT-II) domain as
//!
//! ```text
//! coeffs = base[k, h] + speaker_gain * Q[k, h] . sig + timbre_gain * Q0 . sig
//! ```
//!
//! where `base[k, h]` is a sparse token pattern shared by all speakers,
//! `Q[k, h]` a token-specific projection of the speaker signature and `Q0` a
//! token-independent timbre projection. Because the speaker term depends on
//! the token, a listener that knows the signature can tell which of two
//! overlapping tokens belongs to that speaker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{stream_seed, CorpusConfig, Signal, Tokens};
use crate::error::{invalid, Result};

/// Orthonormal DCT-II matrix; row `b` is basis function `b` sampled at `n`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for b in 0..n {
        let s = if b == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[b * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * b as f64 / n as f64).cos();
        }
    }
    m
}

/// Token patterns and signature projections shared by every speaker of one
/// corpus.
#[derive(Debug, Clone)]
pub struct TokenBank {
    bins: usize,
    subs: usize,
    sig_dim: usize,
    /// `[token-1][sub][bin]`
    base: Vec<Vec<Vec<f64>>>,
    /// `[token-1][sub][bin * sig_dim]`
    proj: Vec<Vec<Vec<f64>>>,
    timbre: Vec<f64>,
    idct: Vec<f64>,
}

impl TokenBank {
    pub fn new(config: &CorpusConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xBA4C, 0));
        let bins = config.sub_len;
        let d = config.sig_dim;
        let tokens = config.vocab_size - 1;
        let mut base = Vec::with_capacity(tokens);
        let mut proj = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            let mut subs_b = Vec::new();
            let mut subs_p = Vec::new();
            for _ in 0..config.subs_per_token {
                let mut b = vec![0.0; bins];
                let mut placed = 0;
                while placed < config.active_bins.min(bins) {
                    let j = rng.random_range(0..bins);
                    if b[j] == 0.0 {
                        let mag: f64 = rng.random_range(0.7..1.3);
                        b[j] = if rng.random_bool(0.5) { mag } else { -mag };
                        placed += 1;
                    }
                }
                subs_b.push(b);
                let scale = 1.0 / (d as f64).sqrt();
                subs_p.push(
                    (0..bins * d)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
            }
            base.push(subs_b);
            proj.push(subs_p);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let timbre = (0..bins * d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        TokenBank {
            bins,
            subs: config.subs_per_token,
            sig_dim: d,
            base,
            proj,
            timbre,
            idct: dct_matrix(bins),
        }
    }

    fn render(&self, token: usize, signature: &[f64], speaker_gain: f64, timbre_gain: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bins * self.subs);
        for h in 0..self.subs {
            let mut coeffs = self.base[token - 1][h].clone();
            let p = &self.proj[token - 1][h];
            for (b, c) in coeffs.iter_mut().enumerate() {
                let row = b * self.sig_dim..(b + 1) * self.sig_dim;
                let spk: f64 = p[row.clone()].iter().zip(signature).map(|(a, s)| a * s).sum();
                let tim: f64 = self.timbre[row].iter().zip(signature).map(|(a, s)| a * s).sum();
                *c += speaker_gain * spk + timbre_gain * tim;
            }
            // inverse of an orthonormal DCT is its transpose
            for i in 0..self.bins {
                out.push((0..self.bins).map(|b| coeffs[b] * self.idct[b * self.bins + i]).sum());
            }
        }
        out
    }
}

/// One synthetic speaker.
#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Unit-norm signature vector.
    pub signature: Vec<f64>,
    /// Rendered waveform segment for every token id `1..K`; index `k - 1`.
    pub token_waveforms: Vec<Vec<f64>>,
}

impl SpeakerProfile {
    pub fn new(speaker_id: u32, bank: &TokenBank, config: &CorpusConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x5EED_5B4E, speaker_id as u64));
        let mut signature: Vec<f64> = (0..config.sig_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = signature.iter().map(|v| v * v).sum::<f64>().sqrt();
        signature.iter_mut().for_each(|v| *v /= norm);
        let token_waveforms = (1..config.vocab_size)
            .map(|k| bank.render(k, &signature, config.speaker_gain, config.timbre_gain))
            .collect();
        SpeakerProfile {
            speaker_id,
            signature,
            token_waveforms,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_waveforms.len() + 1
    }

    pub fn segment_len(&self) -> usize {
        self.token_waveforms.first().map_or(0, Vec::len)
    }
}

/// A single-talker utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker_id: u32,
    pub tokens: Tokens,
    pub signal: Signal,
}

/// Renders `tokens` for `profile`. Segments are scaled by a per-token
/// amplitude jitter drawn from `rng_seed`, and the tail of each segment
/// carries a `coarticulation`-weighted copy of the next segment's head.
pub fn synthesize_utterance(
    profile: &SpeakerProfile,
    tokens: &[usize],
    rng_seed: u64,
    config: &CorpusConfig,
) -> Result<Utterance> {
    if tokens.is_empty() {
        return Err(invalid("synthesize_utterance", "empty token sequence"));
    }
    let k = profile.vocab_size();
    if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t >= k) {
        return Err(invalid(
            "synthesize_utterance",
            format!("token {bad} outside [1, {}]", k - 1),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seg = profile.segment_len();
    let sub = config.sub_len;
    let mut samples = Vec::with_capacity(seg * tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        let amp = 1.0 + rng.random_range(-config.amp_jitter..=config.amp_jitter);
        let mut s: Vec<f64> = profile.token_waveforms[t - 1].iter().map(|v| v * amp).collect();
        if let Some(&next) = tokens.get(i + 1) {
            let head = &profile.token_waveforms[next - 1][..sub];
            for (a, b) in s[seg - sub..].iter_mut().zip(head) {
                *a += config.coarticulation * b;
            }
        }
        samples.extend_from_slice(&s);
    }
    Ok(Utterance {
        speaker_id: profile.speaker_id,
        tokens: tokens.to_vec(),
        signal: Signal::new(samples, config.sample_rate),
    })
}

/// Number of samples [`synthesize_utterance`] produces for `n_tokens`.
pub fn synthesis_len(config: &CorpusConfig, n_tokens: usize) -> usize {
    config.sub_len * config.subs_per_token * n_tokens
}
