//! Synthetic parallel corpus: single-talker utterances, two-talker mixtures
//! at controlled SIR/SNR, enrollment pairing and speaker-disjoint splits.

mod io;
mod synth;

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use io::{read_split, write_split, SplitFile};
pub use synth::{dct_matrix, synthesis_len, synthesize_utterance, SpeakerProfile, TokenBank, Utterance};

use crate::error::{invalid, parse_field, Error, Result};
use crate::par::Exec;

/// Transcript token ids; `0` is reserved for blank and never appears.
pub type Tokens = Vec<usize>;

/// Sampled mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Signal { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Deterministic sub-stream seed for `(seed, tag, index)` (splitmix64 finalizer).
pub fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Vocabulary size including blank.
    pub vocab_size: usize,
    pub sig_dim: usize,
    /// Samples per synthesis sub-frame.
    pub sub_len: usize,
    pub subs_per_token: usize,
    /// Non-zero cosine bins in each token pattern.
    pub active_bins: usize,
    pub speaker_gain: f64,
    pub timbre_gain: f64,
    pub coarticulation: f64,
    pub amp_jitter: f64,
    pub sample_rate: u32,
    pub train_speakers: Range<u32>,
    pub dev_speakers: Range<u32>,
    pub test_speakers: Range<u32>,
    pub train_utts: usize,
    pub dev_utts: usize,
    pub test_utts_per_snr: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub enroll_tokens: usize,
    pub sir_range: (f64, f64),
    pub snr_range: (f64, f64),
    pub test_snrs: Vec<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 8,
            sig_dim: 8,
            sub_len: 16,
            subs_per_token: 2,
            active_bins: 3,
            speaker_gain: 0.8,
            timbre_gain: 0.3,
            coarticulation: 0.25,
            amp_jitter: 0.15,
            sample_rate: 8000,
            train_speakers: 0..24,
            dev_speakers: 24..32,
            test_speakers: 32..40,
            train_utts: 600,
            dev_utts: 100,
            test_utts_per_snr: 60,
            min_tokens: 3,
            max_tokens: 6,
            enroll_tokens: 6,
            sir_range: (-5.0, 5.0),
            snr_range: (0.0, 20.0),
            test_snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0],
        }
    }
}

impl CorpusConfig {
    /// Canonical `key = value` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        let range = |r: &Range<u32>| format!("{}..{}", r.start, r.end);
        let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        let list = self.test_snrs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("sig_dim", self.sig_dim.to_string()),
            ("sub_len", self.sub_len.to_string()),
            ("subs_per_token", self.subs_per_token.to_string()),
            ("active_bins", self.active_bins.to_string()),
            ("speaker_gain", self.speaker_gain.to_string()),
            ("timbre_gain", self.timbre_gain.to_string()),
            ("coarticulation", self.coarticulation.to_string()),
            ("amp_jitter", self.amp_jitter.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("train_speakers", range(&self.train_speakers)),
            ("dev_speakers", range(&self.dev_speakers)),
            ("test_speakers", range(&self.test_speakers)),
            ("train_utts", self.train_utts.to_string()),
            ("dev_utts", self.dev_utts.to_string()),
            ("test_utts_per_snr", self.test_utts_per_snr.to_string()),
            ("min_tokens", self.min_tokens.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("enroll_tokens", self.enroll_tokens.to_string()),
            ("sir_range", pair(self.sir_range)),
            ("snr_range", pair(self.snr_range)),
            ("test_snrs", list),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one entry; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let range = |v: &str| -> Result<Range<u32>> {
            let (a, b) = v
                .split_once("..")
                .ok_or_else(|| Error::Config(format!("`{key}` expects `start..end`, got `{v}`")))?;
            Ok(parse_field(key, a)?..parse_field(key, b)?)
        };
        let pair = |v: &str| -> Result<(f64, f64)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("`{key}` expects `lo,hi`, got `{v}`")))?;
            Ok((parse_field(key, a)?, parse_field(key, b)?))
        };
        match key {
            "vocab_size" => self.vocab_size = parse_field(key, value)?,
            "sig_dim" => self.sig_dim = parse_field(key, value)?,
            "sub_len" => self.sub_len = parse_field(key, value)?,
            "subs_per_token" => self.subs_per_token = parse_field(key, value)?,
            "active_bins" => self.active_bins = parse_field(key, value)?,
            "speaker_gain" => self.speaker_gain = parse_field(key, value)?,
            "timbre_gain" => self.timbre_gain = parse_field(key, value)?,
            "coarticulation" => self.coarticulation = parse_field(key, value)?,
            "amp_jitter" => self.amp_jitter = parse_field(key, value)?,
            "sample_rate" => self.sample_rate = parse_field(key, value)?,
            "train_speakers" => self.train_speakers = range(value)?,
            "dev_speakers" => self.dev_speakers = range(value)?,
            "test_speakers" => self.test_speakers = range(value)?,
            "train_utts" => self.train_utts = parse_field(key, value)?,
            "dev_utts" => self.dev_utts = parse_field(key, value)?,
            "test_utts_per_snr" => self.test_utts_per_snr = parse_field(key, value)?,
            "min_tokens" => self.min_tokens = parse_field(key, value)?,
            "max_tokens" => self.max_tokens = parse_field(key, value)?,
            "enroll_tokens" => self.enroll_tokens = parse_field(key, value)?,
            "sir_range" => self.sir_range = pair(value)?,
            "snr_range" => self.snr_range = pair(value)?,
            "test_snrs" => {
                self.test_snrs = value
                    .split(',')
                    .map(|v| parse_field(key, v))
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let splits = [
            ("train", &self.train_speakers),
            ("dev", &self.dev_speakers),
            ("test", &self.test_speakers),
        ];
        for (name, r) in &splits {
            if r.end < r.start + 2 {
                return Err(Error::Config(format!(
                    "{name} split needs at least two speakers for mixing"
                )));
            }
        }
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                let a: BTreeSet<u32> = splits[i].1.clone().collect();
                if splits[j].1.clone().any(|s| a.contains(&s)) {
                    return Err(Error::Config(format!(
                        "speaker ids of {} and {} splits overlap",
                        splits[i].0, splits[j].0
                    )));
                }
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens || self.enroll_tokens == 0 {
            return Err(Error::Config("token length range is empty".into()));
        }
        if self.sir_range.0 > self.sir_range.1 || self.snr_range.0 > self.snr_range.1 {
            return Err(Error::Config("SIR/SNR ranges must be ordered".into()));
        }
        if self.test_snrs.is_empty() || self.sample_rate == 0 || self.sub_len == 0 || self.subs_per_token == 0 {
            return Err(Error::Config("test_snrs, sample_rate, sub_len and subs_per_token must be non-empty".into()));
        }
        if self.train_utts == 0 || self.dev_utts == 0 || self.test_utts_per_snr == 0 {
            return Err(Error::Config("every split needs at least one utterance".into()));
        }
        Ok(())
    }
}

/// Parallel data unit: a mixture together with the single-talker signals it
/// was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub id: u32,
    pub target_speaker: u32,
    pub interferer_speaker: u32,
    /// `target_plus_noise + scaled interference`.
    pub mixture: Signal,
    pub target_plus_noise: Signal,
    pub target_clean: Signal,
    /// A different utterance of the target speaker.
    pub enrollment: Signal,
    pub transcript: Tokens,
    pub sir_db: f64,
    pub snr_db: f64,
}

/// Gain `alpha` such that `10 log10(P_fg / P(alpha * bg)) = ratio_db`, with
/// `bg` zero-padded or truncated to the foreground length.
pub fn mixing_gain(foreground: &Signal, background: &Signal, ratio_db: f64) -> Result<f64> {
    if foreground.is_empty() || background.is_empty() {
        return Err(invalid("mix_at_ratio", "empty signal"));
    }
    let bg = fit_length(&background.samples, foreground.len());
    let pf = foreground.power();
    let pb = power(&bg);
    if pf == 0.0 || pb == 0.0 {
        return Err(invalid("mix_at_ratio", "zero-power input, mixing ratio undefined"));
    }
    Ok((pf / (pb * 10f64.powf(ratio_db / 10.0))).sqrt())
}

fn fit_length(x: &[f64], n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().copied().take(n).collect();
    v.resize(n, 0.0);
    v
}

/// `foreground + alpha * background` at the requested power ratio.
pub fn mix_at_ratio(foreground: &Signal, background: &Signal, ratio_db: f64) -> Result<Signal> {
    let alpha = mixing_gain(foreground, background, ratio_db)?;
    let bg = fit_length(&background.samples, foreground.len());
    let samples = foreground.samples.iter().zip(&bg).map(|(f, b)| f + alpha * b).collect();
    Ok(Signal::new(samples, foreground.sample_rate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCondition {
    pub snr_db: f64,
    pub records: Vec<MixtureRecord>,
}

/// Speaker-disjoint splits of one synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<MixtureRecord>,
    pub dev: Vec<MixtureRecord>,
    /// One fixed-SNR evaluation subset per configured test SNR.
    pub test: Vec<TestCondition>,
}

impl Dataset {
    pub fn test_records(&self) -> impl Iterator<Item = &MixtureRecord> {
        self.test.iter().flat_map(|c| c.records.iter())
    }
}

/// Everything needed to synthesize records for one corpus seed.
pub struct Generator<'a> {
    config: &'a CorpusConfig,
    seed: u64,
    bank: TokenBank,
}

impl<'a> Generator<'a> {
    pub fn new(config: &'a CorpusConfig, seed: u64) -> Self {
        Generator {
            config,
            seed,
            bank: TokenBank::new(config, seed),
        }
    }

    pub fn profile(&self, speaker: u32) -> SpeakerProfile {
        SpeakerProfile::new(speaker, &self.bank, self.config, self.seed)
    }

    fn random_tokens(&self, rng: &mut ChaCha8Rng, n: usize) -> Tokens {
        (0..n).map(|_| rng.random_range(1..self.config.vocab_size)).collect()
    }

    /// Builds record `index` of a split. `snr_override` fixes the SNR (test
    /// conditions); the speaker/utterance draw depends only on
    /// `(split_tag, index)`, so fixed-SNR subsets share the same mixtures and
    /// differ only in the noise.
    pub fn record(&self, split_tag: u64, speakers: &Range<u32>, index: u32, snr_override: Option<f64>) -> Result<MixtureRecord> {
        let c = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, split_tag, index as u64));
        let n_spk = speakers.end - speakers.start;
        let target = speakers.start + rng.random_range(0..n_spk);
        let interferer = speakers.start + (target - speakers.start + rng.random_range(1..n_spk)) % n_spk;
        let u = rng.random_range(c.min_tokens..=c.max_tokens);
        let transcript = self.random_tokens(&mut rng, u);
        let interf_tokens = self.random_tokens(&mut rng, u);
        let enroll_tokens = self.random_tokens(&mut rng, c.enroll_tokens);
        let sir_db = rng.random_range(c.sir_range.0..=c.sir_range.1);
        let mut snr_db = rng.random_range(c.snr_range.0..=c.snr_range.1);
        let utt_seed: u64 = rng.random();
        let interf_seed: u64 = rng.random();
        let enroll_seed: u64 = rng.random();
        let mut noise_rng = match snr_override {
            Some(snr) => {
                snr_db = snr;
                ChaCha8Rng::seed_from_u64(stream_seed(utt_seed, 0x0015E, snr.to_bits()))
            }
            None => ChaCha8Rng::seed_from_u64(stream_seed(utt_seed, 0x0015E, 0)),
        };

        let tp = self.profile(target);
        let target_utt = synthesize_utterance(&tp, &transcript, utt_seed, c)?;
        let interf_utt = synthesize_utterance(&self.profile(interferer), &interf_tokens, interf_seed, c)?;
        let enroll = synthesize_utterance(&tp, &enroll_tokens, enroll_seed, c)?;

        let clean = target_utt.signal;
        let noise = Signal::new(
            (0..clean.len()).map(|_| noise_rng.sample(StandardNormal)).collect(),
            c.sample_rate,
        );
        let target_plus_noise = mix_at_ratio(&clean, &noise, snr_db)?;
        let alpha = mixing_gain(&clean, &interf_utt.signal, sir_db)?;
        let interference = fit_length(&interf_utt.signal.samples, clean.len());
        let mixture = Signal::new(
            target_plus_noise
                .samples
                .iter()
                .zip(&interference)
                .map(|(t, i)| t + alpha * i)
                .collect(),
            c.sample_rate,
        );
        Ok(MixtureRecord {
            id: index,
            target_speaker: target,
            interferer_speaker: interferer,
            mixture,
            target_plus_noise,
            target_clean: clean,
            enrollment: enroll.signal,
            transcript,
            sir_db,
            snr_db,
        })
    }
}

const TAG_TRAIN: u64 = 1;
const TAG_DEV: u64 = 2;
const TAG_TEST: u64 = 3;

/// Builds the train, dev and fixed-SNR test splits.
pub fn build_dataset(config: &CorpusConfig, rng_seed: u64, exec: Exec) -> Result<Dataset> {
    config.validate()?;
    let generator = Generator::new(config, rng_seed);
    let split = |tag: u64, speakers: &Range<u32>, n: usize, snr: Option<f64>| -> Result<Vec<MixtureRecord>> {
        exec.map_range(n, |i| generator.record(tag, speakers, i as u32, snr))
            .into_iter()
            .collect()
    };
    let train = split(TAG_TRAIN, &config.train_speakers, config.train_utts, None)?;
    let dev = split(TAG_DEV, &config.dev_speakers, config.dev_utts, None)?;
    let mut test = Vec::with_capacity(config.test_snrs.len());
    for &snr in &config.test_snrs {
        test.push(TestCondition {
            snr_db: snr,
            records: split(TAG_TEST, &config.test_speakers, config.test_utts_per_snr, Some(snr))?,
        });
    }
    Ok(Dataset { train, dev, test })
}
