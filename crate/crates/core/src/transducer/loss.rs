use super::PosteriorLattice;
use crate::diffcore::log_sum_exp;
use crate::error::{invalid, shape, Result};

/// Forward and backward variables of one lattice/transcript pair, in log
/// space. Both grids are `T x (U+1)`, row-major.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub frames: usize,
    pub rows: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `alpha(T-1, U) + log p_blank(T-1, U)`.
    pub log_likelihood: f64,
}

impl ForwardBackward {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.rows + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.rows + u]
    }

    /// Total log-probability read off the backward variables.
    pub fn log_likelihood_from_beta(&self) -> f64 {
        self.beta[0]
    }
}

fn check(lattice: &PosteriorLattice, transcript: &[usize]) -> Result<()> {
    if lattice.frames() == 0 {
        return Err(invalid("rnnt_loss", "lattice has no frames"));
    }
    if lattice.label_rows() != transcript.len() + 1 {
        return Err(shape(
            "rnnt_loss",
            format!("{} label rows for a transcript of {} tokens", lattice.label_rows(), transcript.len()),
        ));
    }
    if let Some(&bad) = transcript.iter().find(|&&y| y == 0 || y >= lattice.classes()) {
        return Err(invalid("rnnt_loss", format!("transcript token {bad} outside [1, K-1]")));
    }
    Ok(())
}

pub fn forward_backward(lattice: &PosteriorLattice, transcript: &[usize]) -> Result<ForwardBackward> {
    check(lattice, transcript)?;
    let t_len = lattice.frames();
    let rows = lattice.label_rows();
    let u_len = rows - 1;
    let lb = |t: usize, u: usize| lattice.prob(t, u, 0).ln();
    let ly = |t: usize, u: usize| lattice.prob(t, u, transcript[u]).ln();

    let mut alpha = vec![f64::NEG_INFINITY; t_len * rows];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..rows {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * rows + u] + lb(t - 1, u);
            }
            if u > 0 {
                a = log_sum_exp(a, alpha[t * rows + u - 1] + ly(t, u - 1));
            }
            alpha[t * rows + u] = a;
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; t_len * rows];
    for t in (0..t_len).rev() {
        for u in (0..rows).rev() {
            let b = if t == t_len - 1 && u == u_len {
                lb(t, u)
            } else {
                let mut b = f64::NEG_INFINITY;
                if t + 1 < t_len {
                    b = beta[(t + 1) * rows + u] + lb(t, u);
                }
                if u < u_len {
                    b = log_sum_exp(b, beta[t * rows + u + 1] + ly(t, u));
                }
                b
            };
            beta[t * rows + u] = b;
        }
    }
    let log_likelihood = alpha[(t_len - 1) * rows + u_len] + lb(t_len - 1, u_len);
    Ok(ForwardBackward {
        frames: t_len,
        rows,
        alpha,
        beta,
        log_likelihood,
    })
}

/// Negative log-likelihood of `transcript` summed over all monotonic
/// alignments, with its gradient with respect to every lattice probability
/// (laid out like [`PosteriorLattice::probs`]).
///
/// An edge leaving `(t, u)` with probability `p` contributes
/// `-exp(alpha(t,u) + beta(next) - log P)` to `dL/dp`; entries that lie on no
/// alignment edge get zero.
pub fn rnnt_loss(lattice: &PosteriorLattice, transcript: &[usize]) -> Result<(f64, Vec<f64>)> {
    let fb = forward_backward(lattice, transcript)?;
    let ll = fb.log_likelihood;
    if !ll.is_finite() {
        return Err(crate::Error::NonFinite("rnnt_loss"));
    }
    let (t_len, rows) = (fb.frames, fb.rows);
    let mut grad = vec![0.0; lattice.probs().len()];
    for t in 0..t_len {
        for u in 0..rows {
            let a = fb.alpha(t, u);
            let o = lattice.offset(t, u);
            let blank_next = if t + 1 < t_len {
                Some(fb.beta(t + 1, u))
            } else if u == rows - 1 {
                Some(0.0)
            } else {
                None
            };
            if let Some(b) = blank_next {
                grad[o] = -(a + b - ll).exp();
            }
            if u + 1 < rows {
                grad[o + transcript[u]] -= (a + fb.beta(t, u + 1) - ll).exp();
            }
        }
    }
    Ok((-ll, grad))
}
