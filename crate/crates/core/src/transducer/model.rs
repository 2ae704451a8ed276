use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_chunk_mask, FeatureConfig, FeatureSequence, PosteriorLattice};
use crate::diffcore::layers::{tanh, tanh_backward, AttentionBlock, AttentionBlockCache, GatedRecurrent, Linear};
use crate::diffcore::ops::{softmax_into, StepCache};
use crate::diffcore::{softmax_last_dim, Array, Checkpoint, Grads, Mask, ParamId, ParamStore};
use crate::error::{invalid, parse_field, shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamingConfig {
    /// Chunk size in encoder frames.
    pub chunk: usize,
    /// History in encoder frames.
    pub history: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerConfig {
    pub features: FeatureConfig,
    /// Average-pooling factor between feature frames and encoder frames.
    pub subsampling: usize,
    pub d_model: usize,
    /// Attention blocks after the framewise first block.
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub embed_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// Output classes including blank.
    pub vocab_size: usize,
    pub streaming: Option<StreamingConfig>,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        TransducerConfig {
            features: FeatureConfig::default(),
            subsampling: 1,
            d_model: 32,
            blocks: 1,
            ffn_hidden: 32,
            embed_dim: 8,
            pred_dim: 16,
            joint_dim: 32,
            vocab_size: 8,
            streaming: None,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window", self.features.window),
            ("hop", self.features.hop),
            ("feat_dim", self.features.dim),
            ("subsampling", self.subsampling),
            ("d_model", self.d_model),
            ("ffn_hidden", self.ffn_hidden),
            ("embed_dim", self.embed_dim),
            ("pred_dim", self.pred_dim),
            ("joint_dim", self.joint_dim),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{k} must be positive")));
        }
        if self.features.dim > self.features.window {
            return Err(Error::Config("model.feat_dim cannot exceed model.window".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("model.vocab_size must be at least 2".into()));
        }
        if let Some(s) = self.streaming {
            if s.chunk == 0 {
                return Err(Error::Config("streaming chunk must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        let streaming = match self.streaming {
            Some(s) => format!("{},{}", s.chunk, s.history),
            None => "none".into(),
        };
        [
            ("window", self.features.window.to_string()),
            ("hop", self.features.hop.to_string()),
            ("feat_dim", self.features.dim.to_string()),
            ("subsampling", self.subsampling.to_string()),
            ("d_model", self.d_model.to_string()),
            ("blocks", self.blocks.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("pred_dim", self.pred_dim.to_string()),
            ("joint_dim", self.joint_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("streaming", streaming),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one entry; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "window" => self.features.window = parse_field(key, value)?,
            "hop" => self.features.hop = parse_field(key, value)?,
            "feat_dim" => self.features.dim = parse_field(key, value)?,
            "subsampling" => self.subsampling = parse_field(key, value)?,
            "d_model" => self.d_model = parse_field(key, value)?,
            "blocks" => self.blocks = parse_field(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_field(key, value)?,
            "embed_dim" => self.embed_dim = parse_field(key, value)?,
            "pred_dim" => self.pred_dim = parse_field(key, value)?,
            "joint_dim" => self.joint_dim = parse_field(key, value)?,
            "vocab_size" => self.vocab_size = parse_field(key, value)?,
            "streaming" => {
                self.streaming = match value.trim() {
                    "none" => None,
                    v => {
                        let (c, h) = v
                            .split_once(',')
                            .ok_or_else(|| Error::Config(format!("streaming expects `chunk,history`, got `{v}`")))?;
                        Some(StreamingConfig {
                            chunk: parse_field(key, c)?,
                            history: parse_field(key, h)?,
                        })
                    }
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        for (k, v) in self.entries() {
            meta.insert(format!("model.{k}"), v);
        }
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TransducerConfig::default();
        for (k, v) in meta {
            if let Some(key) = k.strip_prefix("model.") {
                if !c.set(key, v)? {
                    return Err(Error::Config(format!("unknown model key `{key}` in checkpoint")));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Encoder states `T x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub states: Array,
    pub subsampling: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Averages consecutive groups of `s` rows; the last group may be shorter.
pub fn subsample(frames: &Array, s: usize) -> Array {
    if s == 1 {
        return frames.clone();
    }
    let (n, d) = (frames.rows(), frames.cols());
    let out_rows = n.div_ceil(s);
    let mut out = vec![0.0; out_rows * d];
    for r in 0..out_rows {
        let (lo, hi) = (r * s, ((r + 1) * s).min(n));
        let o = &mut out[r * d..(r + 1) * d];
        for i in lo..hi {
            for (a, b) in o.iter_mut().zip(frames.row(i)) {
                *a += b;
            }
        }
        let inv = 1.0 / (hi - lo) as f64;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Array::from_vec(&[out_rows, d], out).expect("consistent shape")
}

/// Framewise `tanh` projection followed by attention blocks. An optional
/// conditioning vector multiplies the first block's output.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub input: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    x0: Array,
    h1: Array,
    cond: Option<Vec<f64>>,
    inputs: Vec<Array>,
    caches: Vec<AttentionBlockCache>,
}

impl EncoderNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        d: usize,
        blocks: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{prefix}.in"), din, d, rng)?;
        let blocks = (0..blocks)
            .map(|i| AttentionBlock::new(store, &format!("{prefix}.block{i}"), d, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderNet { input, blocks, d })
    }

    /// First-block output before conditioning.
    pub fn first_block(&self, store: &ParamStore, x: &Array) -> Result<Array> {
        Ok(tanh(&self.input.forward(store, x)?))
    }

    pub fn forward(&self, store: &ParamStore, x: &Array, cond: Option<&[f64]>, mask: &Mask) -> Result<(Array, EncoderCache)> {
        let h1 = self.first_block(store, x)?;
        let mut h = h1.clone();
        if let Some(c) = cond {
            if c.len() != self.d {
                return Err(shape(
                    "encode",
                    format!("conditioning width {} != block-1 width {}", c.len(), self.d),
                ));
            }
            for t in 0..h.rows() {
                h.row_mut(t).iter_mut().zip(c).for_each(|(a, b)| *a *= b);
            }
        }
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, cache) = b.forward(store, &h, mask)?;
            inputs.push(h);
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            EncoderCache {
                x0: x.clone(),
                h1,
                cond: cond.map(<[f64]>::to_vec),
                inputs,
                caches,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the conditioning gradient
    /// when the forward pass was conditioned.
    pub fn backward(&self, store: &ParamStore, cache: &EncoderCache, dout: &Array, grads: &mut Grads) -> Option<Vec<f64>> {
        let mut d = dout.clone();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            d = b.backward(store, &cache.inputs[i], &cache.caches[i], &d, grads);
        }
        let dcond = cache.cond.as_ref().map(|c| {
            let mut dc = vec![0.0; self.d];
            for t in 0..d.rows() {
                let h1 = cache.h1.row(t);
                for (j, g) in d.row_mut(t).iter_mut().enumerate() {
                    dc[j] += *g * h1[j];
                    *g *= c[j];
                }
            }
            dc
        });
        let dpre = tanh_backward(&cache.h1, &d);
        self.input.backward(store, &cache.x0, &dpre, grads);
        dcond
    }
}

/// Token embedding plus gated recurrence over `[blank, y_1 .. y_U]`.
#[derive(Debug, Clone)]
pub struct PredictorNet {
    pub embed: ParamId,
    pub rnn: GatedRecurrent,
    pub vocab: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct PredictorCache {
    ids: Vec<usize>,
    xs: Array,
    hs: Array,
    steps: Vec<StepCache>,
}

impl PredictorNet {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab: usize, embed_dim: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(PredictorNet {
            embed: store.register_weight("pred.embed", vocab, embed_dim, rng)?,
            rnn: GatedRecurrent::new(store, "pred.rnn", embed_dim, d, rng)?,
            vocab,
            embed_dim,
        })
    }

    fn embedding<'a>(&self, store: &'a ParamStore, id: usize) -> &'a [f64] {
        store.value(self.embed).row(id)
    }

    pub fn forward(&self, store: &ParamStore, tokens: &[usize]) -> Result<(Array, PredictorCache)> {
        if let Some(&bad) = tokens.iter().find(|&&y| y == 0 || y >= self.vocab) {
            return Err(invalid("predict", format!("token {bad} outside [1, {}]", self.vocab - 1)));
        }
        let ids: Vec<usize> = std::iter::once(0).chain(tokens.iter().copied()).collect();
        let mut xs = Vec::with_capacity(ids.len() * self.embed_dim);
        for &i in &ids {
            xs.extend_from_slice(self.embedding(store, i));
        }
        let xs = Array::from_vec(&[ids.len(), self.embed_dim], xs)?;
        let (hs, steps) = self.rnn.forward_seq(store, &xs)?;
        Ok((hs.clone(), PredictorCache { ids, xs, hs, steps }))
    }

    /// State after consuming `token` from state `h`.
    pub fn step(&self, store: &ParamStore, h: &[f64], token: usize) -> Result<Vec<f64>> {
        self.rnn.step(store, h, self.embedding(store, token))
    }

    /// Row 0 of [`PredictorNet::forward`].
    pub fn start_state(&self, store: &ParamStore) -> Result<Vec<f64>> {
        self.step(store, &vec![0.0; self.rnn.d], 0)
    }

    pub fn backward(&self, store: &ParamStore, cache: &PredictorCache, dhs: &Array, grads: &mut Grads) {
        let dxs = self.rnn.backward_seq(store, &cache.xs, &cache.hs, &cache.steps, dhs, grads);
        let e = self.embed_dim;
        let g = grads.get_mut(self.embed);
        for (r, &id) in cache.ids.iter().enumerate() {
            for (a, b) in g[id * e..(id + 1) * e].iter_mut().zip(dxs.row(r)) {
                *a += b;
            }
        }
    }
}

/// `softmax(W_o tanh(W_e enc_t + W_p pred_u + b) + b_o)`.
#[derive(Debug, Clone)]
pub struct JointNet {
    pub enc: Linear,
    pub pred: Linear,
    pub out: Linear,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct JointCache {
    enc_in: Array,
    pred_in: Array,
    /// `(T * (U+1)) x J`
    z: Array,
}

impl JointNet {
    pub fn new<R: Rng>(store: &mut ParamStore, d_enc: usize, d_pred: usize, j: usize, k: usize, rng: &mut R) -> Result<Self> {
        Ok(JointNet {
            enc: Linear::new(store, "joint.enc", d_enc, j, rng)?,
            pred: Linear::new(store, "joint.pred", d_pred, j, rng)?,
            out: Linear::new(store, "joint.out", j, k, rng)?,
            classes: k,
        })
    }

    pub fn project_enc(&self, store: &ParamStore, enc: &Array) -> Result<Array> {
        self.enc.forward(store, enc)
    }

    pub fn project_pred(&self, store: &ParamStore, pred: &Array) -> Result<Array> {
        self.pred.forward(store, pred)
    }

    /// Log-posteriors for one `(t, u)` cell from pre-projected inputs.
    pub fn log_probs(&self, store: &ParamStore, a: &[f64], b: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y).tanh()).collect();
        let w = store.value(self.out.w);
        let mut logits = store.value(self.out.b).data().to_vec();
        for (i, zi) in z.iter().enumerate() {
            for (l, wv) in logits.iter_mut().zip(w.row(i)) {
                *l += zi * wv;
            }
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }

    /// Posterior of one cell; equal to the matching lattice slice.
    pub fn probs(&self, store: &ParamStore, a: &[f64], b: &[f64]) -> Vec<f64> {
        let lp = self.log_probs(store, a, b);
        let mut p = vec![0.0; lp.len()];
        softmax_into(&lp, &mut p);
        p
    }

    pub fn forward(&self, store: &ParamStore, enc: &Array, pred: &Array) -> Result<(PosteriorLattice, JointCache)> {
        let a = self.project_enc(store, enc)?;
        let b = self.project_pred(store, pred)?;
        let (t_len, rows, j) = (a.rows(), b.rows(), a.cols());
        let mut z = Vec::with_capacity(t_len * rows * j);
        for t in 0..t_len {
            for u in 0..rows {
                z.extend(a.row(t).iter().zip(b.row(u)).map(|(x, y)| (x + y).tanh()));
            }
        }
        let z = Array::from_vec(&[t_len * rows, j], z)?;
        let logits = self.out.forward(store, &z)?;
        let probs = softmax_last_dim(&logits)?;
        let lattice = PosteriorLattice::new(t_len, rows, self.classes, probs.into_vec())?;
        Ok((
            lattice,
            JointCache {
                enc_in: enc.clone(),
                pred_in: pred.clone(),
                z,
            },
        ))
    }

    /// Returns `(d_enc, d_pred)` given the logit gradient.
    pub fn backward(&self, store: &ParamStore, cache: &JointCache, dlogits: &[f64], grads: &mut Grads) -> (Array, Array) {
        let (t_len, rows) = (cache.enc_in.rows(), cache.pred_in.rows());
        let dl = Array::from_vec(&[t_len * rows, self.classes], dlogits.to_vec()).expect("lattice-shaped gradient");
        let dz = self.out.backward(store, &cache.z, &dl, grads);
        let dpre = tanh_backward(&cache.z, &dz);
        let j = dpre.cols();
        let mut da = Array::zeros(&[t_len, j]);
        let mut db = Array::zeros(&[rows, j]);
        for t in 0..t_len {
            for u in 0..rows {
                let g = dpre.row(t * rows + u);
                da.row_mut(t).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                db.row_mut(u).iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        let d_enc = self.enc.backward(store, &cache.enc_in, &da, grads);
        let d_pred = self.pred.backward(store, &cache.pred_in, &db, grads);
        (d_enc, d_pred)
    }
}

/// Encoder, prediction and joint networks of one transducer. Parameters
/// live in a separate [`ParamStore`] under the `enc.`, `pred.` and `joint.`
/// prefixes.
#[derive(Debug, Clone)]
pub struct TransducerNet {
    pub config: TransducerConfig,
    pub encoder: EncoderNet,
    pub predictor: PredictorNet,
    pub joint: JointNet,
    /// Whether `encode` requires a conditioning vector.
    pub conditioned: bool,
}

#[derive(Debug, Clone)]
pub struct TransducerCache {
    pub encoder: EncoderCache,
    pub predictor: PredictorCache,
    pub joint: JointCache,
}

impl TransducerNet {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &TransducerConfig, conditioned: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(TransducerNet {
            config: c.clone(),
            encoder: EncoderNet::new(store, "enc", c.features.dim, c.d_model, c.blocks, c.ffn_hidden, rng)?,
            predictor: PredictorNet::new(store, c.vocab_size, c.embed_dim, c.pred_dim, rng)?,
            joint: JointNet::new(store, c.d_model, c.pred_dim, c.joint_dim, c.vocab_size, rng)?,
            conditioned,
        })
    }

    /// Attention mask for `frames` encoder frames.
    pub fn mask(&self, frames: usize) -> Mask {
        match self.config.streaming {
            Some(s) => build_chunk_mask(frames, s.chunk, s.history),
            None => Mask::full(frames),
        }
    }

    pub fn encode_with_cache(
        &self,
        store: &ParamStore,
        features: &FeatureSequence,
        cond: Option<&[f64]>,
    ) -> Result<(Array, EncoderCache)> {
        if cond.is_some() != self.conditioned {
            return Err(invalid(
                "encode",
                if self.conditioned {
                    "target-speaker model needs a conditioning embedding"
                } else {
                    "single-talker model takes no conditioning embedding"
                },
            ));
        }
        if features.dim() != self.config.features.dim {
            return Err(shape(
                "encode",
                format!("feature width {} != {}", features.dim(), self.config.features.dim),
            ));
        }
        if features.is_empty() {
            return Err(invalid("encode", "no feature frames"));
        }
        let x = subsample(&features.frames, self.config.subsampling);
        let mask = self.mask(x.rows());
        self.encoder.forward(store, &x, cond, &mask)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        features: &FeatureSequence,
        cond: Option<&[f64]>,
        tokens: &[usize],
    ) -> Result<(PosteriorLattice, TransducerCache)> {
        let (enc, encoder) = self.encode_with_cache(store, features, cond)?;
        let (pred, predictor) = self.predictor.forward(store, tokens)?;
        let (lattice, joint) = self.joint.forward(store, &enc, &pred)?;
        Ok((
            lattice,
            TransducerCache {
                encoder,
                predictor,
                joint,
            },
        ))
    }

    /// Backpropagates a logit gradient; returns the conditioning gradient
    /// for conditioned forward passes.
    pub fn backward(&self, store: &ParamStore, cache: &TransducerCache, dlogits: &[f64], grads: &mut Grads) -> Option<Vec<f64>> {
        let (d_enc, d_pred) = self.joint.backward(store, &cache.joint, dlogits, grads);
        self.predictor.backward(store, &cache.predictor, &d_pred, grads);
        self.encoder.backward(store, &cache.encoder, &d_enc, grads)
    }
}

/// Anything that owns a [`TransducerNet`] and its parameters.
pub trait AsrModel {
    fn net(&self) -> &TransducerNet;
    fn params(&self) -> &ParamStore;
}

/// Single-talker transducer.
#[derive(Debug, Clone)]
pub struct TransducerModel {
    pub net: TransducerNet,
    pub params: ParamStore,
}

impl AsrModel for TransducerModel {
    fn net(&self) -> &TransducerNet {
        &self.net
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }
}

pub const TRANSDUCER_KIND: &str = "transducer";

impl TransducerModel {
    pub fn new(config: &TransducerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = TransducerNet::new(&mut params, config, false, &mut rng)?;
        Ok(TransducerModel { net, params })
    }

    pub fn config(&self) -> &TransducerConfig {
        &self.net.config
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.named_values()).with_meta("kind", TRANSDUCER_KIND);
        self.net.config.write_meta(&mut c.meta);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta.get("kind").map(String::as_str) {
            Some(TRANSDUCER_KIND) => {}
            other => {
                return Err(invalid(
                    "TransducerModel::from_checkpoint",
                    format!("checkpoint kind {other:?} is not a transducer"),
                ))
            }
        }
        let config = TransducerConfig::from_meta(&ckpt.meta)?;
        let mut m = TransducerModel::new(&config, 0)?;
        m.params.load_values(&ckpt.arrays)?;
        Ok(m)
    }
}

pub fn encode<M: AsrModel + ?Sized>(features: &FeatureSequence, model: &M, conditioning: Option<&[f64]>) -> Result<EncodedSequence> {
    let net = model.net();
    let (states, _) = net.encode_with_cache(model.params(), features, conditioning)?;
    Ok(EncodedSequence {
        states,
        subsampling: net.config.subsampling,
    })
}

pub fn predict<M: AsrModel + ?Sized>(tokens: &[usize], model: &M) -> Result<Array> {
    Ok(model.net().predictor.forward(model.params(), tokens)?.0)
}

pub fn joint_lattice<M: AsrModel + ?Sized>(enc: &EncodedSequence, pred: &Array, model: &M) -> Result<PosteriorLattice> {
    let net = model.net();
    if enc.states.cols() != net.config.d_model || pred.cols() != net.config.pred_dim {
        return Err(shape("joint_lattice", "encoder or prediction width disagrees with the model"));
    }
    Ok(net.joint.forward(model.params(), &enc.states, pred)?.0)
}
