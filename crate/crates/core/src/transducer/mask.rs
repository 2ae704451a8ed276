use crate::diffcore::Mask;

/// Chunked attention mask. Frame `t` in chunk `c = t / chunk` may attend to
/// frames `max(0, c*chunk - history) ..= min(T, (c+1)*chunk) - 1`.
///
/// # Panics
/// If `chunk == 0`.
pub fn build_chunk_mask(frames: usize, chunk: usize, history: usize) -> Mask {
    assert!(chunk >= 1, "chunk size must be at least 1");
    Mask::from_fn(frames, |i, j| {
        let (lo, hi) = chunk_window(i, frames, chunk, history);
        (lo..=hi).contains(&j)
    })
}

/// Inclusive attention window of frame `t`.
pub fn chunk_window(t: usize, frames: usize, chunk: usize, history: usize) -> (usize, usize) {
    let c = t / chunk;
    let lo = (c * chunk).saturating_sub(history);
    let hi = ((c + 1) * chunk).min(frames) - 1;
    (lo, hi)
}
