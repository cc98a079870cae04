//! Integer target grid to source grid mapping shared by nearest sampling,
//! the continuous decoder and the crop sampler.

/// Output length of an axis of `len` samples scaled by `scale`, `⌊len·scale⌋`.
///
/// A tiny epsilon absorbs representation error so that e.g. `16 · 2.5`
/// yields 40 and `21 · 3.0` yields 63.
pub fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64) * scale + 1e-9).floor().max(0.0) as usize
}

/// Source index `⌊y/s⌋` and sub-pixel offset `mod(y, s)/s ∈ [0, 1)` of a
/// target coordinate `y ≥ 0` at scale `s > 0`.
pub fn source_and_offset(y: f64, scale: f64) -> (usize, f64) {
    let mut src = (y / scale).floor();
    let mut rem = y - src * scale;
    if rem < 0.0 {
        src -= 1.0;
        rem += scale;
    } else if rem >= scale {
        src += 1.0;
        rem -= scale;
    }
    let mut delta = rem / scale;
    if delta >= 1.0 {
        delta = 0.0;
        src += 1.0;
    }
    (src.max(0.0) as usize, delta.max(0.0))
}

/// Key used to deduplicate sub-pixel offsets (quantum 1e-9).
pub(crate) fn offset_key(delta: f64) -> i64 {
    (delta * 1e9).round() as i64
}
