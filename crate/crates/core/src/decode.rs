//! Greedy and alignment-length synchronous beam search over transducer
//! outputs, plus chunked streaming sessions.
//!
//! All searches allow at most `t + 1` tokens by the end of frame `t`, so a
//! hypothesis never has more tokens than encoder frames and the cap does not
//! depend on frames not yet seen. Ties between equal scores go to the lexicographically smaller
//! token sequence, which makes blank win over any token and a shorter
//! sequence win over its extensions.

use std::cmp::Ordering;

use crate::corpus::Tokens;
use crate::diffcore::{log_sum_exp, Array};
use crate::error::{invalid, Result};
use crate::transducer::{encode, AsrModel, EncodedSequence, FeatureSequence, JointNet, PosteriorLattice};

/// Source of per-step output distributions for the searches.
pub trait TransducerScorer {
    type State: Clone;

    fn num_frames(&self) -> usize;
    fn classes(&self) -> usize;
    fn initial_state(&self) -> Result<Self::State>;
    /// State after emitting `token`.
    fn extend(&self, state: &Self::State, token: usize) -> Result<Self::State>;
    /// Log-posteriors over all classes at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// Prediction network state plus its joint projection.
#[derive(Debug, Clone)]
pub struct PredState {
    h: Vec<f64>,
    projected: Vec<f64>,
}

/// Scores from a model's joint network over fixed encoder states.
pub struct ModelScorer<'a, M: AsrModel + ?Sized> {
    model: &'a M,
    joint: &'a JointNet,
    enc_proj: Array,
}

impl<'a, M: AsrModel + ?Sized> ModelScorer<'a, M> {
    pub fn new(model: &'a M, enc: &EncodedSequence) -> Result<Self> {
        let joint = &model.net().joint;
        Ok(ModelScorer {
            model,
            joint,
            enc_proj: joint.project_enc(model.params(), &enc.states)?,
        })
    }

    fn project(&self, h: Vec<f64>) -> Result<PredState> {
        let row = Array::from_vec(&[1, h.len()], h.clone())?;
        let projected = self.joint.project_pred(self.model.params(), &row)?.into_vec();
        Ok(PredState { h, projected })
    }
}

impl<M: AsrModel + ?Sized> TransducerScorer for ModelScorer<'_, M> {
    type State = PredState;

    fn num_frames(&self) -> usize {
        self.enc_proj.rows()
    }

    fn classes(&self) -> usize {
        self.joint.classes
    }

    fn initial_state(&self) -> Result<PredState> {
        self.project(self.model.net().predictor.start_state(self.model.params())?)
    }

    fn extend(&self, state: &PredState, token: usize) -> Result<PredState> {
        self.project(self.model.net().predictor.step(self.model.params(), &state.h, token)?)
    }

    fn log_probs(&self, t: usize, state: &PredState) -> Vec<f64> {
        self.joint.log_probs(self.model.params(), self.enc_proj.row(t), &state.projected)
    }
}

/// Scores read from a fixed lattice; the state is the number of emitted
/// tokens, clamped to the last label row. Used to rig decoder inputs.
pub struct LatticeScorer<'a> {
    pub lattice: &'a PosteriorLattice,
}

impl TransducerScorer for LatticeScorer<'_> {
    type State = usize;

    fn num_frames(&self) -> usize {
        self.lattice.frames()
    }

    fn classes(&self) -> usize {
        self.lattice.classes()
    }

    fn initial_state(&self) -> Result<usize> {
        Ok(0)
    }

    fn extend(&self, state: &usize, _token: usize) -> Result<usize> {
        Ok(state + 1)
    }

    fn log_probs(&self, t: usize, state: &usize) -> Vec<f64> {
        let u = (*state).min(self.lattice.label_rows() - 1);
        self.lattice.slice(t, u).iter().map(|p| p.ln()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Tokens,
    pub log_prob: f64,
}

/// Highest-scoring class; the lowest id wins ties.
fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in lp.iter().enumerate().skip(1) {
        if v > lp[best] {
            best = k;
        }
    }
    best
}

/// Frame-by-frame argmax search.
pub fn greedy_search<S: TransducerScorer>(scorer: &S) -> Result<Hypothesis> {
    let frames = scorer.num_frames();
    let mut state = scorer.initial_state()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut t = 0;
    while t < frames {
        let lp = scorer.log_probs(t, &state);
        let mut k = argmax(&lp);
        if k != 0 && tokens.len() > t {
            log::debug!("greedy search: token cap reached at frame {t}");
            k = 0;
        }
        log_prob += lp[k];
        if k == 0 {
            t += 1;
        } else {
            tokens.push(k);
            state = scorer.extend(&state, k)?;
        }
    }
    Ok(Hypothesis { tokens, log_prob })
}

struct Beam<S> {
    tokens: Tokens,
    log_prob: f64,
    t: usize,
    state: S,
}

struct Candidate {
    tokens: Tokens,
    log_prob: f64,
    t: usize,
    /// Index of the parent in the current beam; the state is extended
    /// only for survivors.
    parent: usize,
    token: Option<usize>,
}

fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Alignment-length synchronous beam search. All hypotheses in the beam
/// share the same `t + u`; identical token sequences are merged by
/// log-sum-exp. Hypotheses that consume the last frame move to the final
/// set but still occupy a slot in the step where they finish.
pub fn beam_search<S: TransducerScorer>(scorer: &S, beam: usize) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(invalid("beam_decode", "beam width must be at least 1"));
    }
    let frames = scorer.num_frames();
    let mut live = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        t: 0,
        state: scorer.initial_state()?,
    }];
    let mut finals: Vec<Hypothesis> = Vec::new();
    let mut cap_hit = false;
    while !live.is_empty() {
        let mut cands: Vec<Candidate> = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(h.t, &h.state);
            cands.push(Candidate {
                tokens: h.tokens.clone(),
                log_prob: h.log_prob + lp[0],
                t: h.t + 1,
                parent: pi,
                token: None,
            });
            if h.tokens.len() > h.t {
                cap_hit = true;
                continue;
            }
            for (k, &l) in lp.iter().enumerate().skip(1) {
                let mut tokens = h.tokens.clone();
                tokens.push(k);
                cands.push(Candidate {
                    tokens,
                    log_prob: h.log_prob + l,
                    t: h.t,
                    parent: pi,
                    token: Some(k),
                });
            }
        }
        // Equal token sequences at equal alignment length share `t`.
        cands.sort_by(|a, b| a.tokens.cmp(&b.tokens));
        let mut merged: Vec<Candidate> = Vec::with_capacity(cands.len());
        for c in cands {
            match merged.last_mut() {
                Some(m) if m.tokens == c.tokens => {
                    // keep the better-scoring path's parent for the state
                    let total = log_sum_exp(m.log_prob, c.log_prob);
                    if c.log_prob > m.log_prob {
                        m.parent = c.parent;
                        m.token = c.token;
                    }
                    m.log_prob = total;
                }
                _ => merged.push(c),
            }
        }
        merged.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        merged.truncate(beam);
        let mut next = Vec::with_capacity(merged.len());
        for c in merged {
            if c.t == frames {
                finals.push(Hypothesis {
                    tokens: c.tokens,
                    log_prob: c.log_prob,
                });
                continue;
            }
            let parent = &live[c.parent];
            let state = match c.token {
                Some(k) => scorer.extend(&parent.state, k)?,
                None => parent.state.clone(),
            };
            next.push(Beam {
                tokens: c.tokens,
                log_prob: c.log_prob,
                t: c.t,
                state,
            });
        }
        live = next;
    }
    if cap_hit {
        log::debug!("beam search: token cap bound");
    }
    finals
        .into_iter()
        .min_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens))
        .ok_or_else(|| invalid("beam_decode", "no hypothesis reached the last frame"))
}

pub fn greedy_decode<M: AsrModel + ?Sized>(enc: &EncodedSequence, model: &M) -> Result<Tokens> {
    Ok(greedy_search(&ModelScorer::new(model, enc)?)?.tokens)
}

pub fn beam_decode<M: AsrModel + ?Sized>(enc: &EncodedSequence, model: &M, beam: usize) -> Result<Tokens> {
    Ok(beam_search(&ModelScorer::new(model, enc)?, beam)?.tokens)
}

/// Encodes and decodes one feature sequence; `beam == 1` uses the greedy
/// search.
pub fn recognize<M: AsrModel + ?Sized>(
    model: &M,
    features: &FeatureSequence,
    conditioning: Option<&[f64]>,
    beam: usize,
) -> Result<Tokens> {
    let enc = encode(features, model, conditioning)?;
    if beam == 1 {
        greedy_decode(&enc, model)
    } else {
        beam_decode(&enc, model, beam)
    }
}

/// Average algorithmic latency of chunked streaming: half a chunk plus the
/// framing lookahead.
pub fn average_latency_ms(chunk_frames: usize, subsampling: usize, hop: usize, sample_rate: u32, lookahead_ms: f64) -> f64 {
    let chunk_ms = (chunk_frames * subsampling * hop) as f64 / sample_rate as f64 * 1000.0;
    chunk_ms / 2.0 + lookahead_ms
}

/// Incremental greedy decoding of a chunk-masked model.
///
/// Frames are buffered until a full chunk is available; the encoder is then
/// rerun over everything received so far (the mask makes the states of
/// earlier frames independent of later ones) and the new frames are decoded
/// greedily from the carried prediction state.
pub struct StreamSession<'a, M: AsrModel + ?Sized> {
    model: &'a M,
    conditioning: Option<Vec<f64>>,
    buffer: Vec<f64>,
    dim: usize,
    window: usize,
    hop: usize,
    /// Feature frames per chunk.
    chunk_features: usize,
    /// Encoder frames already decoded.
    cursor: usize,
    state: PredState,
    emitted: Tokens,
    finished: bool,
}

impl<'a, M: AsrModel + ?Sized> StreamSession<'a, M> {
    pub fn new(model: &'a M, conditioning: Option<Vec<f64>>) -> Result<Self> {
        let net = model.net();
        let streaming = net
            .config
            .streaming
            .ok_or_else(|| invalid("StreamSession", "model has no streaming configuration"))?;
        if conditioning.is_some() != net.conditioned {
            return Err(invalid("StreamSession", "conditioning presence does not match the model"));
        }
        let fc = &net.config.features;
        let empty = EncodedSequence {
            states: Array::zeros(&[0, net.config.d_model]),
            subsampling: net.config.subsampling,
        };
        let state = ModelScorer::new(model, &empty)?.initial_state()?;
        Ok(StreamSession {
            model,
            conditioning,
            buffer: Vec::new(),
            dim: fc.dim,
            window: fc.window,
            hop: fc.hop,
            chunk_features: streaming.chunk * net.config.subsampling,
            cursor: 0,
            state,
            emitted: Vec::new(),
            finished: false,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.emitted
    }

    fn received(&self) -> usize {
        self.buffer.len() / self.dim
    }

    /// Buffers `frames` and decodes every completed chunk. Returns the
    /// tokens emitted by this call.
    pub fn push(&mut self, frames: &FeatureSequence) -> Result<Tokens> {
        if self.finished {
            return Err(invalid("stream_push", "session already finished"));
        }
        if frames.dim() != self.dim {
            return Err(invalid("stream_push", "feature width disagrees with the model"));
        }
        self.buffer.extend_from_slice(frames.frames.data());
        let before = self.emitted.len();
        let s = self.model.net().config.subsampling;
        loop {
            let done_features = self.cursor * s;
            if self.received() < done_features + self.chunk_features {
                break;
            }
            self.advance(done_features + self.chunk_features)?;
        }
        Ok(self.emitted[before..].to_vec())
    }

    /// Decodes any remaining partial chunk and closes the session.
    pub fn finish(&mut self) -> Result<Tokens> {
        if self.finished {
            return Err(invalid("stream_finish", "session already finished"));
        }
        let before = self.emitted.len();
        let s = self.model.net().config.subsampling;
        if self.received() > self.cursor * s {
            self.advance(self.received())?;
        }
        self.finished = true;
        Ok(self.emitted[before..].to_vec())
    }

    fn advance(&mut self, upto_features: usize) -> Result<()> {
        let feats = FeatureSequence {
            frames: Array::from_vec(&[upto_features, self.dim], self.buffer[..upto_features * self.dim].to_vec())?,
            window: self.window,
            hop: self.hop,
        };
        let enc = encode(&feats, self.model, self.conditioning.as_deref())?;
        let scorer = ModelScorer::new(self.model, &enc)?;
        let frames = enc.len();
        for t in self.cursor..frames {
            loop {
                let lp = scorer.log_probs(t, &self.state);
                let k = argmax(&lp);
                if k == 0 {
                    break;
                }
                if self.emitted.len() > t {
                    log::debug!("stream session: token cap reached at frame {t}");
                    break;
                }
                self.emitted.push(k);
                self.state = scorer.extend(&self.state, k)?;
            }
        }
        self.cursor = frames;
        Ok(())
    }
}

pub fn stream_push<M: AsrModel + ?Sized>(session: &mut StreamSession<'_, M>, frames: &FeatureSequence) -> Result<Tokens> {
    session.push(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice_from(frames: usize, rows: usize, k: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> PosteriorLattice {
        let mut probs = Vec::new();
        for t in 0..frames {
            for u in 0..rows {
                probs.extend(f(t, u));
            }
        }
        PosteriorLattice::new(frames, rows, k, probs).unwrap()
    }

    #[test]
    fn blank_dominant_lattice_decodes_empty() {
        let l = lattice_from(5, 3, 4, |_, _| vec![0.7, 0.1, 0.1, 0.1]);
        let s = LatticeScorer { lattice: &l };
        assert!(greedy_search(&s).unwrap().tokens.is_empty());
        assert!(beam_search(&s, 4).unwrap().tokens.is_empty());
    }

    #[test]
    fn forced_path_is_recovered() {
        let y = [2, 3, 1];
        // Emit y[u] at frame u, then blank.
        let l = lattice_from(4, 4, 4, |t, u| {
            let mut p = vec![0.01; 4];
            if u < y.len() && t == u {
                p[y[u]] = 0.97;
            } else {
                p[0] = 0.97;
            }
            p
        });
        let s = LatticeScorer { lattice: &l };
        assert_eq!(greedy_search(&s).unwrap().tokens, y);
        assert_eq!(beam_search(&s, 8).unwrap().tokens, y);
    }

    #[test]
    fn ties_prefer_blank_then_low_ids() {
        let l = lattice_from(2, 3, 3, |_, _| vec![1.0 / 3.0; 3]);
        let s = LatticeScorer { lattice: &l };
        assert!(greedy_search(&s).unwrap().tokens.is_empty());
        assert_eq!(beam_search(&s, 1).unwrap(), greedy_search(&s).unwrap());
        let l = lattice_from(2, 3, 3, |_, _| vec![0.2, 0.4, 0.4]);
        let s = LatticeScorer { lattice: &l };
        assert_eq!(greedy_search(&s).unwrap().tokens, vec![1, 1]);
    }

    #[test]
    fn zero_beam_rejected() {
        let l = lattice_from(1, 1, 2, |_, _| vec![0.5, 0.5]);
        assert!(beam_search(&LatticeScorer { lattice: &l }, 0).is_err());
    }

    #[test]
    fn latency_formula() {
        // 60 frames of 10 ms plus 30 ms lookahead.
        assert!((average_latency_ms(60, 1, 160, 16000, 30.0) - 330.0).abs() < 1e-9);
    }
}
