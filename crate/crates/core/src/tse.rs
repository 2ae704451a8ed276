//! Target speech extraction baseline and the extraction-then-recognition
//! cascade.
//!
//! The mixture is cut into non-overlapping frames and moved to an
//! orthonormal cosine domain. A small network predicts a sigmoid mask per
//! coefficient from a few context frames; its first layer output is
//! multiplied elementwise by a speaker embedding of the enrollment. The
//! masked coefficients are transformed back and concatenated. Training
//! maximizes SI-SNR against the clean target.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{dct_matrix, stream_seed, MixtureRecord, Signal, Tokens};
use crate::decode::recognize;
use crate::diffcore::layers::{tanh, tanh_backward, Linear};
use crate::diffcore::{Array, Checkpoint, Grads, ParamStore};
use crate::distill::{train_loop, EpochLog, StepLoss, TrainConfig, TrainReport, Trainable};
use crate::error::{invalid, parse_field, Error, Result};
use crate::par::Exec;
use crate::speaker::{speaker_config_from_meta, SpeakerCache, SpeakerConfig, SpeakerEncoder};
use crate::transducer::{extract_features, FeatureConfig, FeatureSequence, TransducerModel};

const SI_SNR_CAP_DB: f64 = 60.0;
const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SI-SNR in dB and its gradient with respect to `estimate`. At the cap the
/// gradient is zero.
pub fn si_snr_with_grad(estimate: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if estimate.len() != reference.len() || estimate.is_empty() {
        return Err(invalid("si_snr", "estimate and reference must have the same non-zero length"));
    }
    let r = zero_mean(reference);
    let e = zero_mean(estimate);
    let b = dot(&r, &r);
    if b == 0.0 {
        return Err(invalid("si_snr", "reference has zero power"));
    }
    let a = dot(&e, &r);
    let alpha = a / b;
    let noise: Vec<f64> = e.iter().zip(&r).map(|(x, y)| x - alpha * y).collect();
    let ns = dot(&noise, &noise);
    let ss = alpha * alpha * b;
    if ns <= ss * 1e-6 {
        return Ok((SI_SNR_CAP_DB, vec![0.0; e.len()]));
    }
    if ss == 0.0 {
        return Err(invalid("si_snr", "estimate is orthogonal to the reference"));
    }
    let value = DB * (ss / ns).ln();
    // d/de' = DB * (2 r / a - 2 n / |n|^2); both terms are zero-mean, so the
    // mean removal passes the gradient through unchanged.
    let grad = r
        .iter()
        .zip(&noise)
        .map(|(ri, ni)| DB * (2.0 * ri / a - 2.0 * ni / ns))
        .collect();
    Ok((value.min(SI_SNR_CAP_DB), grad))
}

pub fn si_snr(estimate: &Signal, reference: &Signal) -> Result<f64> {
    Ok(si_snr_with_grad(&estimate.samples, &reference.samples)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    /// Samples per frame (and per hop).
    pub window: usize,
    pub d_model: usize,
    pub causal: bool,
    /// Framing of the enrollment features fed to the speaker encoder.
    pub features: FeatureConfig,
    pub speaker: SpeakerConfig,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            window: 16,
            d_model: 32,
            causal: false,
            features: FeatureConfig::default(),
            speaker: SpeakerConfig::default(),
        }
    }
}

impl ExtractorConfig {
    /// Frame offsets feeding each mask frame.
    pub fn context(&self) -> [isize; 3] {
        if self.causal {
            [-2, -1, 0]
        } else {
            [-1, 0, 1]
        }
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("window".into(), self.window.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("causal".into(), self.causal.to_string()),
            ("feat_window".into(), self.features.window.to_string()),
            ("feat_hop".into(), self.features.hop.to_string()),
            ("feat_dim".into(), self.features.dim.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "window" => self.window = parse_field(key, value)?,
            "d_model" => self.d_model = parse_field(key, value)?,
            "causal" => self.causal = parse_field(key, value)?,
            "feat_window" => self.features.window = parse_field(key, value)?,
            "feat_hop" => self.features.hop = parse_field(key, value)?,
            "feat_dim" => self.features.dim = parse_field(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.d_model == 0 {
            return Err(Error::Config("tse.window and tse.d_model must be positive".into()));
        }
        self.speaker.validate()
    }
}

/// How the mask is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Learned,
    /// Every coefficient passes unchanged.
    Ones,
}

pub const TSE_KIND: &str = "extractor";

/// Speaker-conditioned mask estimator (`tse.spk.*`, `tse.in`, `tse.hid`,
/// `tse.out`).
#[derive(Debug, Clone)]
pub struct ExtractorModel {
    pub config: ExtractorConfig,
    pub speaker: SpeakerEncoder,
    pub input: Linear,
    pub hidden: Linear,
    pub out: Linear,
    pub params: ParamStore,
    basis: Vec<f64>,
}

impl Trainable for ExtractorModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Framed mixture in the cosine domain.
#[derive(Debug, Clone)]
struct Framed {
    len: usize,
    /// `n x W` coefficients.
    coeffs: Array,
    /// `n x 3*2W` network input.
    input: Array,
}

struct ExtractCache {
    framed: Framed,
    speaker: SpeakerCache,
    embedding: Vec<f64>,
    h1: Array,
    h2: Array,
    mask: Array,
}

impl ExtractorModel {
    pub fn new(config: &ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w = config.window;
        let d = config.d_model;
        let speaker = SpeakerEncoder::new(&mut params, "tse.spk", config.features.dim, &config.speaker, d, &mut rng)?;
        let input = Linear::new(&mut params, "tse.in", 3 * 2 * w, d, &mut rng)?;
        let hidden = Linear::new(&mut params, "tse.hid", d, d, &mut rng)?;
        let out = Linear::new(&mut params, "tse.out", d, w, &mut rng)?;
        Ok(ExtractorModel {
            config: config.clone(),
            speaker,
            input,
            hidden,
            out,
            params,
            basis: dct_matrix(w),
        })
    }

    fn frame(&self, mixture: &[f64]) -> Result<Framed> {
        if mixture.is_empty() {
            return Err(invalid("extract_target", "empty mixture"));
        }
        let w = self.config.window;
        let n = mixture.len().div_ceil(w);
        let mut coeffs = vec![0.0; n * w];
        let mut feats = vec![0.0; n * 2 * w];
        for f in 0..n {
            let mut frame = vec![0.0; w];
            let end = ((f + 1) * w).min(mixture.len());
            frame[..end - f * w].copy_from_slice(&mixture[f * w..end]);
            let c = &mut coeffs[f * w..(f + 1) * w];
            for (b, cb) in c.iter_mut().enumerate() {
                *cb = dot(&self.basis[b * w..(b + 1) * w], &frame);
            }
            let rms = (dot(c, c) / w as f64).sqrt();
            if rms > 0.0 {
                let o = &mut feats[f * 2 * w..(f + 1) * 2 * w];
                for b in 0..w {
                    o[b] = c[b] / rms;
                    o[w + b] = (c[b] / rms).abs();
                }
            }
        }
        let ctx = self.config.context();
        let width = 2 * w;
        let mut input = vec![0.0; n * 3 * width];
        for f in 0..n {
            for (slot, off) in ctx.iter().enumerate() {
                let src = f as isize + off;
                if src >= 0 && (src as usize) < n {
                    let s = src as usize;
                    input[(f * 3 + slot) * width..(f * 3 + slot + 1) * width]
                        .copy_from_slice(&feats[s * width..(s + 1) * width]);
                }
            }
        }
        Ok(Framed {
            len: mixture.len(),
            coeffs: Array::from_vec(&[n, w], coeffs)?,
            input: Array::from_vec(&[n, 3 * width], input)?,
        })
    }

    fn synthesize(&self, framed: &Framed, mask: Option<&Array>) -> Vec<f64> {
        let w = self.config.window;
        let mut out = Vec::with_capacity(framed.coeffs.rows() * w);
        for f in 0..framed.coeffs.rows() {
            let c = framed.coeffs.row(f);
            for i in 0..w {
                out.push(
                    (0..w)
                        .map(|b| c[b] * mask.map_or(1.0, |m| m.at(f, b)) * self.basis[b * w + i])
                        .sum(),
                );
            }
        }
        out.truncate(framed.len);
        out
    }

    fn forward(&self, mixture: &[f64], enrollment: &FeatureSequence) -> Result<(Vec<f64>, ExtractCache)> {
        let framed = self.frame(mixture)?;
        let (emb, speaker) = self.speaker.forward(&self.params, enrollment)?;
        let h1 = tanh(&self.input.forward(&self.params, &framed.input)?);
        let mut c = h1.clone();
        for t in 0..c.rows() {
            c.row_mut(t).iter_mut().zip(&emb.values).for_each(|(a, b)| *a *= b);
        }
        let h2 = tanh(&self.hidden.forward(&self.params, &c)?);
        let mut mask = self.out.forward(&self.params, &h2)?;
        mask.data_mut().iter_mut().for_each(|v| *v = crate::diffcore::ops::sigmoid(*v));
        let est = self.synthesize(&framed, Some(&mask));
        Ok((
            est,
            ExtractCache {
                framed,
                speaker,
                embedding: emb.values,
                h1,
                h2,
                mask,
            },
        ))
    }

    fn backward(&self, cache: &ExtractCache, d_est: &[f64], grads: &mut Grads) {
        let w = self.config.window;
        let n = cache.framed.coeffs.rows();
        // d coeff_out = DCT(d_est frame); d mask = that * coeff_in
        let mut dz = Array::zeros(&[n, w]);
        for f in 0..n {
            let mut frame = vec![0.0; w];
            let end = ((f + 1) * w).min(d_est.len());
            if end > f * w {
                frame[..end - f * w].copy_from_slice(&d_est[f * w..end]);
            }
            let c = cache.framed.coeffs.row(f);
            for b in 0..w {
                let dc = dot(&self.basis[b * w..(b + 1) * w], &frame);
                let m = cache.mask.at(f, b);
                dz.row_mut(f)[b] = dc * c[b] * m * (1.0 - m);
            }
        }
        let dh2 = self.out.backward(&self.params, &cache.h2, &dz, grads);
        let dpre2 = tanh_backward(&cache.h2, &dh2);
        let mut c = cache.h1.clone();
        for t in 0..c.rows() {
            c.row_mut(t).iter_mut().zip(&cache.embedding).for_each(|(a, b)| *a *= b);
        }
        let mut dc = self.hidden.backward(&self.params, &c, &dpre2, grads);
        let mut demb = vec![0.0; cache.embedding.len()];
        for t in 0..dc.rows() {
            let h1 = cache.h1.row(t);
            for (j, g) in dc.row_mut(t).iter_mut().enumerate() {
                demb[j] += *g * h1[j];
                *g *= cache.embedding[j];
            }
        }
        let dpre1 = tanh_backward(&cache.h1, &dc);
        self.input.backward(&self.params, &cache.framed.input, &dpre1, grads);
        self.speaker.backward(&self.params, &cache.speaker, &demb, grads);
    }

    pub fn extract_with(&self, mixture: &Signal, enrollment: &Signal, mode: MaskMode) -> Result<Signal> {
        let samples = match mode {
            MaskMode::Learned => {
                let enr = extract_features(enrollment, &self.config.features)?;
                self.forward(&mixture.samples, &enr)?.0
            }
            MaskMode::Ones => {
                if enrollment.is_empty() {
                    return Err(invalid("extract_target", "empty enrollment"));
                }
                self.synthesize(&self.frame(&mixture.samples)?, None)
            }
        };
        Ok(Signal::new(samples, mixture.sample_rate))
    }

    /// Negative SI-SNR against `target` and the parameter gradient.
    pub fn step(&self, mixture: &[f64], enrollment: &FeatureSequence, target: &[f64]) -> Result<(f64, Grads)> {
        let (est, cache) = self.forward(mixture, enrollment)?;
        let (v, g) = si_snr_with_grad(&est, target)?;
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut grads = self.params.zero_grads();
        self.backward(&cache, &neg, &mut grads);
        Ok((-v, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.named_values()).with_meta("kind", TSE_KIND);
        for (k, v) in self.config.entries() {
            c.meta.insert(format!("tse.{k}"), v);
        }
        for (k, v) in self.config.speaker.entries() {
            c.meta.insert(format!("speaker.{k}"), v);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").map(String::as_str) != Some(TSE_KIND) {
            return Err(invalid("ExtractorModel::from_checkpoint", "not an extractor checkpoint"));
        }
        let mut config = ExtractorConfig {
            speaker: speaker_config_from_meta(&ckpt.meta)?,
            ..ExtractorConfig::default()
        };
        for (k, v) in &ckpt.meta {
            if let Some(key) = k.strip_prefix("tse.") {
                if !config.set(key, v)? {
                    return Err(Error::Config(format!("unknown extractor key `{key}` in checkpoint")));
                }
            }
        }
        let mut m = ExtractorModel::new(&config, 0)?;
        m.params.load_values(&ckpt.arrays)?;
        Ok(m)
    }
}

pub fn extract_target(mixture: &Signal, enrollment: &Signal, model: &ExtractorModel) -> Result<Signal> {
    model.extract_with(mixture, enrollment, MaskMode::Learned)
}

/// Mixture, enrollment features and clean reference of one record.
#[derive(Debug, Clone)]
pub struct TsePrepared {
    pub mixture: Vec<f64>,
    pub enrollment: FeatureSequence,
    pub target: Vec<f64>,
}

pub fn prepare_tse(records: &[MixtureRecord], fc: &FeatureConfig, exec: Exec) -> Result<Vec<TsePrepared>> {
    exec.map(records, |r| {
        Ok(TsePrepared {
            mixture: r.mixture.samples.clone(),
            enrollment: extract_features(&r.enrollment, fc)?,
            target: r.target_clean.samples.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Mean SI-SNR of the extracted signals and of the unprocessed mixtures,
/// both against the clean targets.
pub fn mean_si_snr(model: &ExtractorModel, data: &[TsePrepared], exec: Exec) -> Result<(f64, f64)> {
    let rows = exec.map(data, |p| -> Result<(f64, f64)> {
        let est = model.forward(&p.mixture, &p.enrollment)?.0;
        Ok((si_snr_with_grad(&est, &p.target)?.0, si_snr_with_grad(&p.mixture, &p.target)?.0))
    });
    let (mut a, mut b) = (0.0, 0.0);
    for r in rows {
        let (x, y) = r?;
        a += x;
        b += y;
    }
    let n = data.len().max(1) as f64;
    Ok((a / n, b / n))
}

/// Trains an extractor against the clean targets. The dev line carries the
/// mean SI-SNR improvement (dB) in its `total` column.
pub fn train_extractor(
    train: &[TsePrepared],
    dev: &[TsePrepared],
    config: &ExtractorConfig,
    cfg: &TrainConfig,
) -> Result<(ExtractorModel, TrainReport)> {
    let mut model = ExtractorModel::new(config, stream_seed(cfg.seed, 0x75E, u64::from(config.causal)))?;
    let exec = cfg.exec;
    let report = train_loop(
        &mut model,
        train,
        cfg,
        |m, p| {
            let (loss, g) = m.step(&p.mixture, &p.enrollment, &p.target)?;
            Ok((
                StepLoss {
                    rnnt: 0.0,
                    kd: 0.0,
                    total: loss,
                },
                g,
            ))
        },
        |m, epoch| {
            if dev.is_empty() {
                return Ok(None);
            }
            let (est, mix) = mean_si_snr(m, dev, exec)?;
            Ok(Some(EpochLog {
                epoch,
                split: "dev",
                loss: StepLoss {
                    rnnt: 0.0,
                    kd: 0.0,
                    total: est - mix,
                },
                ter: None,
            }))
        },
    )?;
    Ok((model, report))
}

/// Front end of the cascade.
#[derive(Debug, Clone, Copy)]
pub enum Extraction<'a> {
    Model(&'a ExtractorModel),
    /// Returns the clean target.
    Oracle,
    /// Returns the mixture unchanged.
    Identity,
}

impl Extraction<'_> {
    pub fn apply(&self, record: &MixtureRecord) -> Result<Signal> {
        match self {
            Extraction::Model(m) => extract_target(&record.mixture, &record.enrollment, m),
            Extraction::Oracle => Ok(record.target_clean.clone()),
            Extraction::Identity => Ok(record.mixture.clone()),
        }
    }
}

/// Extracts the target and decodes it with the single-talker transducer.
pub fn cascade_decode(record: &MixtureRecord, extractor: Extraction<'_>, asr: &TransducerModel, beam: usize) -> Result<Tokens> {
    let signal = extractor.apply(record)?;
    let feats = extract_features(&signal, &asr.config().features)?;
    recognize(asr, &feats, None, beam)
}

/// Algorithmic latency of the causal extractor: one frame.
pub fn extractor_latency_ms(config: &ExtractorConfig, sample_rate: u32) -> f64 {
    config.window as f64 / sample_rate as f64 * 1000.0
}

/// Run metadata recorded next to an extractor checkpoint.
pub fn extractor_meta(config: &ExtractorConfig, sample_rate: u32) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("causal".into(), config.causal.to_string());
    m.insert("latency_ms".into(), format!("{:.3}", extractor_latency_ms(config, sample_rate)));
    m
}
