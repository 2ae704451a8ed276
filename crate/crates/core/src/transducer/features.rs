use crate::corpus::{dct_matrix, Signal};
use crate::diffcore::Array;
use crate::error::{invalid, Result};

/// Framing parameters of the (unlearned) front end.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Samples per frame.
    pub window: usize,
    pub hop: usize,
    /// Number of cosine coefficients kept per frame (`<= window`).
    pub dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window: 16,
            hop: 16,
            dim: 16,
        }
    }
}

impl FeatureConfig {
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T' x dim`
    pub frames: Array,
    pub window: usize,
    pub hop: usize,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> FeatureSequence {
        FeatureSequence {
            frames: self.frames.slice_rows(start, end),
            window: self.window,
            hop: self.hop,
        }
    }

    /// Concatenation of two sequences with the same framing.
    pub fn concat(&self, other: &FeatureSequence) -> FeatureSequence {
        let mut data = self.frames.data().to_vec();
        data.extend_from_slice(other.frames.data());
        FeatureSequence {
            frames: Array::from_vec(&[self.len() + other.len(), self.dim()], data).expect("same width"),
            window: self.window,
            hop: self.hop,
        }
    }
}

/// Frames the signal, scales every frame to unit RMS and projects it onto the
/// first `dim` orthonormal cosine basis vectors. Silent frames map to zeros.
pub fn extract_features(signal: &Signal, config: &FeatureConfig) -> Result<FeatureSequence> {
    if config.window == 0 || config.hop == 0 || config.dim == 0 || config.dim > config.window {
        return Err(invalid("extract_features", format!("bad framing {config:?}")));
    }
    let n = config.num_frames(signal.len());
    if n == 0 {
        return Err(invalid(
            "extract_features",
            format!("signal of {} samples is shorter than the {}-sample window", signal.len(), config.window),
        ));
    }
    let w = config.window;
    let basis = dct_matrix(w);
    let mut out = Vec::with_capacity(n * config.dim);
    for f in 0..n {
        let frame = &signal.samples[f * config.hop..f * config.hop + w];
        let ms = frame.iter().map(|v| v * v).sum::<f64>() / w as f64;
        if ms == 0.0 {
            out.extend(std::iter::repeat_n(0.0, config.dim));
            continue;
        }
        let rms = ms.sqrt();
        let normed: Vec<f64> = frame.iter().map(|v| v / rms).collect();
        for b in 0..config.dim {
            out.push(basis[b * w..(b + 1) * w].iter().zip(&normed).map(|(a, x)| a * x).sum());
        }
    }
    Ok(FeatureSequence {
        frames: Array::from_vec(&[n, config.dim], out)?,
        window: config.window,
        hop: config.hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Signal {
        Signal::new((0..n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect(), 8000)
    }

    #[test]
    fn window_length_signal_gives_one_frame() {
        let c = FeatureConfig::default();
        let f = extract_features(&ramp(c.window), &c).unwrap();
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn non_overlapping_frame_count() {
        let c = FeatureConfig::default();
        let f = extract_features(&ramp(5 * c.window + 3), &c).unwrap();
        assert_eq!(f.len(), 5);
        let c2 = FeatureConfig { hop: 4, ..c };
        assert_eq!(extract_features(&ramp(40), &c2).unwrap().len(), (40 - 16) / 4 + 1);
    }

    #[test]
    fn amplitude_invariant() {
        let c = FeatureConfig::default();
        let s = ramp(64);
        let doubled = Signal::new(s.samples.iter().map(|v| 2.0 * v).collect(), 8000);
        assert_eq!(extract_features(&s, &c).unwrap(), extract_features(&doubled, &c).unwrap());
    }

    #[test]
    fn too_short_rejected() {
        let c = FeatureConfig::default();
        assert!(extract_features(&ramp(c.window - 1), &c).is_err());
    }

    #[test]
    fn silent_frames_are_zero() {
        let c = FeatureConfig::default();
        let f = extract_features(&Signal::new(vec![0.0; 32], 8000), &c).unwrap();
        assert!(f.frames.data().iter().all(|&v| v == 0.0));
    }
}
