use crate::diffcore::ops::softmax_backward_slice;
use crate::error::{invalid, shape, Result};

/// Output distributions over a `T x (U+1)` alignment grid. Label row `u`
/// conditions on the first `u` transcript tokens; class `0` is blank.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLattice {
    frames: usize,
    rows: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl PosteriorLattice {
    pub fn new(frames: usize, rows: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != frames * rows * classes {
            return Err(shape(
                "PosteriorLattice",
                format!("{} values for a {frames}x{rows}x{classes} lattice", probs.len()),
            ));
        }
        if rows == 0 || classes < 2 {
            return Err(invalid("PosteriorLattice", "need at least one label row and two classes"));
        }
        Ok(PosteriorLattice {
            frames,
            rows,
            classes,
            probs,
        })
    }

    /// Uniform `1/K` lattice.
    pub fn uniform(frames: usize, rows: usize, classes: usize) -> Self {
        PosteriorLattice {
            frames,
            rows,
            classes,
            probs: vec![1.0 / classes as f64; frames * rows * classes],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U + 1`.
    pub fn label_rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.rows, self.classes]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn offset(&self, t: usize, u: usize) -> usize {
        (t * self.rows + u) * self.classes
    }

    pub fn slice(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.probs[o..o + self.classes]
    }

    pub fn prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.probs[self.offset(t, u) + k]
    }

    /// Largest deviation of any `(t, u)` slice sum from one.
    pub fn normalization_error(&self) -> f64 {
        self.probs
            .chunks(self.classes)
            .map(|s| (s.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Chains a gradient with respect to the probabilities through the
    /// per-slice softmax, giving the gradient with respect to the logits.
    pub fn grad_to_logits(&self, grad_probs: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut out = vec![0.0; self.probs.len()];
        for ((p, g), o) in self.probs.chunks(k).zip(grad_probs.chunks(k)).zip(out.chunks_mut(k)) {
            softmax_backward_slice(p, g, o);
        }
        out
    }
}
