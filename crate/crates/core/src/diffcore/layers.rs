//! Parameterized layers built on the kernels in [`super::ops`].
//!
//! A layer only stores [`ParamId`]s; values live in a [`ParamStore`] and
//! gradients are written into a [`Grads`] buffer, so one layer description
//! can be evaluated concurrently against a shared immutable store.

use rand::Rng;

use super::ops::{self, RecurrentGrads, RecurrentWeights, StepCache};
use super::{Array, Grads, Mask, ParamId, ParamStore};
use crate::error::{shape, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Result<Self> {
        let w = store.register_weight(&format!("{name}.w"), din, dout, rng)?;
        let b = store.register_filled(&format!("{name}.b"), &[dout], 0.0)?;
        Ok(Linear { w, b, din, dout })
    }

    pub fn forward(&self, store: &ParamStore, x: &Array) -> Result<Array> {
        ops::affine(x, store.value(self.w), store.value(self.b))
    }

    /// Accumulates weight gradients; returns `dx`.
    pub fn backward(&self, store: &ParamStore, x: &Array, dy: &Array, grads: &mut Grads) -> Array {
        let n = x.rows();
        let mut dx = vec![0.0; n * self.din];
        let mut dw = vec![0.0; self.din * self.dout];
        let mut db = vec![0.0; self.dout];
        ops::affine_backward_acc(
            x.data(),
            store.value(self.w).data(),
            dy.data(),
            n,
            self.din,
            self.dout,
            Some(&mut dx),
            &mut dw,
            &mut db,
        );
        grads.add_to(self.w, &dw);
        grads.add_to(self.b, &db);
        Array::from_vec(&[n, self.din], dx).expect("consistent shape")
    }
}

pub fn tanh(x: &Array) -> Array {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    y
}

/// Gradient through `tanh` given its output.
pub fn tanh_backward(y: &Array, dy: &Array) -> Array {
    let mut dx = dy.clone();
    for (d, &t) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= 1.0 - t * t;
    }
    dx
}

/// `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    hidden: Array,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), d, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Array) -> Result<(Array, FeedForwardCache)> {
        let hidden = tanh(&self.inner.forward(store, x)?);
        let y = self.outer.forward(store, &hidden)?;
        Ok((y, FeedForwardCache { hidden }))
    }

    pub fn backward(&self, store: &ParamStore, x: &Array, cache: &FeedForwardCache, dy: &Array, grads: &mut Grads) -> Array {
        let dh = self.outer.backward(store, &cache.hidden, dy, grads);
        let dpre = tanh_backward(&cache.hidden, &dh);
        self.inner.backward(store, x, &dpre, grads)
    }
}

/// Residual attention block: `y = x + attn(x)`, `out = y + ffn(y)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn: FeedForward,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionBlockCache {
    attn: ops::AttentionCache,
    mid: Array,
    ffn: FeedForwardCache,
}

impl AttentionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(AttentionBlock {
            wq: store.register_weight(&format!("{name}.wq"), d, d, rng)?,
            wk: store.register_weight(&format!("{name}.wk"), d, d, rng)?,
            wv: store.register_weight(&format!("{name}.wv"), d, d, rng)?,
            ffn: FeedForward::new(store, name, d, hidden, rng)?,
            d,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Array, mask: &Mask) -> Result<(Array, AttentionBlockCache)> {
        if x.cols() != self.d {
            return Err(shape("AttentionBlock", format!("input width {} != {}", x.cols(), self.d)));
        }
        let (a, attn) = ops::masked_self_attention(
            x,
            mask,
            store.value(self.wq),
            store.value(self.wk),
            store.value(self.wv),
        )?;
        let mut mid = x.clone();
        mid.add_assign(&a);
        let (f, ffn) = self.ffn.forward(store, &mid)?;
        let mut out = mid.clone();
        out.add_assign(&f);
        Ok((out, AttentionBlockCache { attn, mid, ffn }))
    }

    pub fn backward(&self, store: &ParamStore, x: &Array, cache: &AttentionBlockCache, dout: &Array, grads: &mut Grads) -> Array {
        let mut dmid = dout.clone();
        dmid.add_assign(&self.ffn.backward(store, &cache.mid, &cache.ffn, dout, grads));
        let mut dx = dmid.clone();
        let d = self.d;
        let mut dwq = vec![0.0; d * d];
        let mut dwk = vec![0.0; d * d];
        let mut dwv = vec![0.0; d * d];
        ops::masked_self_attention_backward(
            x,
            store.value(self.wq),
            store.value(self.wk),
            store.value(self.wv),
            &cache.attn,
            dmid.data(),
            dx.data_mut(),
            &mut dwq,
            &mut dwk,
            &mut dwv,
        );
        grads.add_to(self.wq, &dwq);
        grads.add_to(self.wk, &dwk);
        grads.add_to(self.wv, &dwv);
        dx
    }
}

/// Gated recurrence unrolled over a sequence (the prediction network cell).
#[derive(Debug, Clone)]
pub struct GatedRecurrent {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wc: ParamId,
    pub uc: ParamId,
    pub bc: ParamId,
    pub din: usize,
    pub d: usize,
}

impl GatedRecurrent {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(GatedRecurrent {
            wz: store.register_weight(&format!("{name}.wz"), din, d, rng)?,
            uz: store.register_weight(&format!("{name}.uz"), d, d, rng)?,
            bz: store.register_filled(&format!("{name}.bz"), &[d], 0.0)?,
            wc: store.register_weight(&format!("{name}.wc"), din, d, rng)?,
            uc: store.register_weight(&format!("{name}.uc"), d, d, rng)?,
            bc: store.register_filled(&format!("{name}.bc"), &[d], 0.0)?,
            din,
            d,
        })
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> RecurrentWeights<'a> {
        RecurrentWeights {
            wz: store.value(self.wz),
            uz: store.value(self.uz),
            bz: store.value(self.bz),
            wc: store.value(self.wc),
            uc: store.value(self.uc),
            bc: store.value(self.bc),
        }
    }

    pub fn step(&self, store: &ParamStore, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(ops::recurrent_step(h, x, self.weights(store))?.0)
    }

    /// Runs the recurrence from a zero state. Row `t` of the output is the
    /// state after consuming inputs `0..=t`.
    pub fn forward_seq(&self, store: &ParamStore, xs: &Array) -> Result<(Array, Vec<StepCache>)> {
        let w = self.weights(store);
        let mut h = vec![0.0; self.d];
        let mut out = Vec::with_capacity(xs.rows() * self.d);
        let mut caches = Vec::with_capacity(xs.rows());
        for t in 0..xs.rows() {
            let (next, cache) = ops::recurrent_step(&h, xs.row(t), w)?;
            out.extend_from_slice(&next);
            caches.push(cache);
            h = next;
        }
        Ok((Array::from_vec(&[xs.rows(), self.d], out)?, caches))
    }

    /// Backpropagation through time; returns `dxs`.
    pub fn backward_seq(
        &self,
        store: &ParamStore,
        xs: &Array,
        hs: &Array,
        caches: &[StepCache],
        dhs: &Array,
        grads: &mut Grads,
    ) -> Array {
        let w = self.weights(store);
        let (din, d) = (self.din, self.d);
        let mut gwz = vec![0.0; din * d];
        let mut guz = vec![0.0; d * d];
        let mut gbz = vec![0.0; d];
        let mut gwc = vec![0.0; din * d];
        let mut guc = vec![0.0; d * d];
        let mut gbc = vec![0.0; d];
        let mut g = RecurrentGrads {
            wz: &mut gwz,
            uz: &mut guz,
            bz: &mut gbz,
            wc: &mut gwc,
            uc: &mut guc,
            bc: &mut gbc,
        };
        let steps = xs.rows();
        let mut dxs = vec![0.0; steps * din];
        let zero = vec![0.0; d];
        let mut carry = vec![0.0; d];
        for t in (0..steps).rev() {
            let dh: Vec<f64> = dhs.row(t).iter().zip(&carry).map(|(a, b)| a + b).collect();
            let h_prev = if t == 0 { &zero[..] } else { hs.row(t - 1) };
            let (dh_prev, dx) = ops::recurrent_step_backward(h_prev, xs.row(t), w, &caches[t], &dh, &mut g);
            dxs[t * din..(t + 1) * din].copy_from_slice(&dx);
            carry = dh_prev;
        }
        for (id, buf) in [
            (self.wz, gwz),
            (self.uz, guz),
            (self.bz, gbz),
            (self.wc, gwc),
            (self.uc, guc),
            (self.bc, gbc),
        ] {
            grads.add_to(id, &buf);
        }
        Array::from_vec(&[steps, din], dxs).expect("consistent shape")
    }
}
