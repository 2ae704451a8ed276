//! Speaker encoder and the target-speaker transducer.
//!
//! The speaker encoder runs the same block type as the ASR encoder over the
//! enrollment features without masking, averages over time and projects to
//! the ASR encoder width. Its output multiplies the ASR encoder's first
//! block output elementwise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::MixtureRecord;
use crate::diffcore::layers::Linear;
use crate::diffcore::{Array, Checkpoint, Grads, Mask, ParamStore};
use crate::error::{invalid, parse_field, Error, Result};
use crate::transducer::{
    extract_features, AsrModel, EncoderCache, EncoderNet, FeatureSequence, PosteriorLattice, TransducerCache,
    TransducerConfig, TransducerModel, TransducerNet,
};

/// Enrollment summary; its width equals the ASR encoder's first-block width.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn ones(d: usize) -> Self {
        SpeakerEmbedding { values: vec![1.0; d] }
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let na: f64 = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb).max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig {
            d_model: 32,
            blocks: 2,
            ffn_hidden: 32,
        }
    }
}

impl SpeakerConfig {
    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("blocks".into(), self.blocks.to_string()),
            ("ffn_hidden".into(), self.ffn_hidden.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse_field(key, value)?,
            "blocks" => self.blocks = parse_field(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_field(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("speaker widths must be positive".into()));
        }
        Ok(())
    }
}

/// Blocks, time average, projection. Parameters under a caller-chosen
/// prefix (`spk` for the transducer, `tse.spk` for the extractor).
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub body: EncoderNet,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct SpeakerCache {
    body: EncoderCache,
    frames: usize,
    mean: Array,
}

impl SpeakerEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        config: &SpeakerConfig,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let body = EncoderNet::new(store, prefix, din, config.d_model, config.blocks, config.ffn_hidden, rng)?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), config.d_model, dout, rng)?;
        // Start near the identity conditioning.
        store.value_mut(proj.b).data_mut().iter_mut().for_each(|v| *v = 1.0);
        Ok(SpeakerEncoder { body, proj })
    }

    pub fn forward(&self, store: &ParamStore, enrollment: &FeatureSequence) -> Result<(SpeakerEmbedding, SpeakerCache)> {
        if enrollment.is_empty() {
            return Err(invalid("embed_speaker", "empty enrollment"));
        }
        if enrollment.dim() != self.body.input.din {
            return Err(invalid("embed_speaker", "enrollment feature width disagrees with the encoder"));
        }
        let t = enrollment.len();
        let (h, body) = self.body.forward(store, &enrollment.frames, None, &Mask::full(t))?;
        let d = h.cols();
        let mut mean = vec![0.0; d];
        for r in 0..t {
            mean.iter_mut().zip(h.row(r)).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|v| *v /= t as f64);
        let mean = Array::from_vec(&[1, d], mean)?;
        let out = self.proj.forward(store, &mean)?;
        Ok((
            SpeakerEmbedding { values: out.into_vec() },
            SpeakerCache { body, frames: t, mean },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &SpeakerCache, d_embedding: &[f64], grads: &mut Grads) {
        let dy = Array::from_vec(&[1, d_embedding.len()], d_embedding.to_vec()).expect("embedding width");
        let dmean = self.proj.backward(store, &cache.mean, &dy, grads);
        let scale = 1.0 / cache.frames as f64;
        let row: Vec<f64> = dmean.data().iter().map(|v| v * scale).collect();
        let mut dh = Array::zeros(&[cache.frames, row.len()]);
        for r in 0..cache.frames {
            dh.row_mut(r).copy_from_slice(&row);
        }
        self.body.backward(store, &cache.body, &dh, grads);
    }
}

pub const TS_KIND: &str = "ts_transducer";

/// Speaker encoder plus a conditioned transducer sharing one parameter store
/// (`spk.`, `enc.`, `pred.`, `joint.`).
#[derive(Debug, Clone)]
pub struct TargetSpeakerModel {
    pub speaker: SpeakerEncoder,
    pub speaker_config: SpeakerConfig,
    pub net: TransducerNet,
    pub params: ParamStore,
}

impl AsrModel for TargetSpeakerModel {
    fn net(&self) -> &TransducerNet {
        &self.net
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }
}

#[derive(Debug, Clone)]
pub struct TsCache {
    pub speaker: SpeakerCache,
    pub asr: TransducerCache,
}

impl TargetSpeakerModel {
    pub fn new(config: &TransducerConfig, speaker: &SpeakerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = TransducerNet::new(&mut params, config, true, &mut rng)?;
        let spk = SpeakerEncoder::new(&mut params, "spk", config.features.dim, speaker, config.d_model, &mut rng)?;
        Ok(TargetSpeakerModel {
            speaker: spk,
            speaker_config: speaker.clone(),
            net,
            params,
        })
    }

    pub fn config(&self) -> &TransducerConfig {
        &self.net.config
    }

    /// Copies every transducer parameter (`enc.`, `pred.`, `joint.`) from a
    /// single-talker model of the same shape.
    pub fn copy_asr_from(&mut self, source: &TransducerModel) -> Result<()> {
        let copied = self.params.load_shared(&source.params.named_values())?;
        if copied.len() != source.params.len() {
            return Err(invalid("copy_asr_from", "source has parameters the target model lacks"));
        }
        Ok(())
    }

    pub fn embed(&self, enrollment: &FeatureSequence) -> Result<SpeakerEmbedding> {
        Ok(self.speaker.forward(&self.params, enrollment)?.0)
    }

    pub fn forward(
        &self,
        mixture: &FeatureSequence,
        enrollment: &FeatureSequence,
        tokens: &[usize],
    ) -> Result<(PosteriorLattice, TsCache)> {
        let (emb, speaker) = self.speaker.forward(&self.params, enrollment)?;
        let (lattice, asr) = self.net.forward(&self.params, mixture, Some(&emb.values), tokens)?;
        Ok((lattice, TsCache { speaker, asr }))
    }

    pub fn backward(&self, cache: &TsCache, dlogits: &[f64], grads: &mut Grads) {
        let dcond = self
            .net
            .backward(&self.params, &cache.asr, dlogits, grads)
            .expect("conditioned forward pass");
        self.speaker.backward(&self.params, &cache.speaker, &dcond, grads);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.named_values()).with_meta("kind", TS_KIND);
        self.net.config.write_meta(&mut c.meta);
        for (k, v) in self.speaker_config.entries() {
            c.meta.insert(format!("speaker.{k}"), v);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").map(String::as_str) != Some(TS_KIND) {
            return Err(invalid("TargetSpeakerModel::from_checkpoint", "not a target-speaker checkpoint"));
        }
        let config = TransducerConfig::from_meta(&ckpt.meta)?;
        let speaker = speaker_config_from_meta(&ckpt.meta)?;
        let mut m = TargetSpeakerModel::new(&config, &speaker, 0)?;
        m.params.load_values(&ckpt.arrays)?;
        Ok(m)
    }
}

pub(crate) fn speaker_config_from_meta(meta: &BTreeMap<String, String>) -> Result<SpeakerConfig> {
    let mut s = SpeakerConfig::default();
    for (k, v) in meta {
        if let Some(key) = k.strip_prefix("speaker.") {
            if !s.set(key, v)? {
                return Err(Error::Config(format!("unknown speaker key `{key}` in checkpoint")));
            }
        }
    }
    Ok(s)
}

pub fn embed_speaker(enrollment: &FeatureSequence, model: &TargetSpeakerModel) -> Result<SpeakerEmbedding> {
    model.embed(enrollment)
}

/// Lattice of the target speaker's transcript given the mixture and the
/// enrollment utterance.
pub fn ts_lattice(record: &MixtureRecord, model: &TargetSpeakerModel) -> Result<PosteriorLattice> {
    let fc = &model.config().features;
    let mix = extract_features(&record.mixture, fc)?;
    let enr = extract_features(&record.enrollment, fc)?;
    Ok(model.forward(&mix, &enr, &record.transcript)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transducer::{encode, joint_lattice, predict};

    fn feats(rows: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            frames: Array::from_vec(&[rows, 16], (0..rows * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            window: 16,
            hop: 16,
        }
    }

    fn model() -> TargetSpeakerModel {
        TargetSpeakerModel::new(&TransducerConfig::default(), &SpeakerConfig::default(), 4).unwrap()
    }

    #[test]
    fn constant_and_duplicated_enrollments() {
        let m = model();
        let one = feats(1, 1);
        let mut rep = one.clone();
        for _ in 0..4 {
            rep = rep.concat(&one);
        }
        let a = m.embed(&one).unwrap();
        let b = m.embed(&rep).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
        let e = feats(4, 2);
        let c = m.embed(&e).unwrap();
        let d = m.embed(&e.concat(&e)).unwrap();
        for (x, y) in c.values.iter().zip(&d.values) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(m.embed(&feats(0, 1)).is_err());
    }

    #[test]
    fn ones_embedding_matches_unconditioned() {
        let m = model();
        let mut plain = TransducerModel::new(&TransducerConfig::default(), 99).unwrap();
        plain.params.load_shared(&m.params.named_values()).unwrap();
        let f = feats(5, 3);
        let ones = vec![1.0; 32];
        let a = encode(&f, &m, Some(&ones)).unwrap();
        let b = encode(&f, &plain, None).unwrap();
        assert_eq!(a, b);
        let p = predict(&[1, 2], &m).unwrap();
        assert_eq!(joint_lattice(&a, &p, &m).unwrap(), joint_lattice(&b, &p, &plain).unwrap());
    }

    #[test]
    fn different_embeddings_change_states() {
        let m = model();
        let f = feats(5, 3);
        let a = encode(&f, &m, Some(&m.embed(&feats(3, 7)).unwrap().values)).unwrap();
        let b = encode(&f, &m, Some(&m.embed(&feats(3, 8)).unwrap().values)).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
        assert!(encode(&f, &m, None).is_err());
        assert!(encode(&f, &m, Some(&[1.0; 3])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let back = TargetSpeakerModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.params.named_values(), m.params.named_values());
        assert_eq!(back.speaker_config, m.speaker_config);
    }
}
