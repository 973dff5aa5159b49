//! Position handling: sinusoidal in-slot absolute positions for decoder
//! inputs and bucketed relative offsets for attention biases.

/// Sinusoidal embedding of position `t`: `sin(t / 10000^(2i/d))` at `2i`,
/// `cos` of the same angle at `2i + 1`.
pub fn dope_ape(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Bucket of the offset between query position `u` and key position `v`.
///
/// Half of the available buckets hold exact distances and the other half
/// log-spaced distances up to `max_distance`, beyond which everything shares
/// the last bucket. In bidirectional mode the bucket range is split between
/// keys before (or at) the query and keys after it; otherwise only keys at or
/// before the query are distinguished and later keys map to bucket 0.
pub fn rpe_bucket(u: usize, v: usize, n_buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let mut buckets = n_buckets;
    let mut base = 0;
    let dist = if bidirectional {
        buckets /= 2;
        if v > u {
            base = buckets;
        }
        u.abs_diff(v)
    } else {
        u.saturating_sub(v)
    };
    let max_exact = buckets / 2;
    if dist < max_exact {
        return base + dist;
    }
    let ratio = (dist as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as usize;
    base + large.min(buckets - 1)
}
