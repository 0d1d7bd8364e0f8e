//! Work-efficient prefix scans and the separable-convolution evaluator
//! `y(t) = f(t) · Σ_{k≤t} g(k) u(k)`.
//!
//! The in-place tree scan does at most `2L − 2` combine operations per lane
//! (upsweep `L − 1`, downsweep at most `L − 1`), matching the sequential
//! op count while exposing `O(L/P + log L)` span when lanes are mapped over
//! workers. Chunked evaluation keeps the per-lane working set at
//! `O(chunk_len)` by folding a running carry across chunk boundaries.

use crate::c64::C64;
use crate::{Error, Result};
use std::f64::consts::{PI, TAU};

/// Default chunk length; long sequences are processed in windows of this size.
pub const DEFAULT_CHUNK_LEN: usize = 2048;

/// Reduce an angle into (−π, π]; ties at −π map to +π.
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// In-place inclusive tree scan with an arbitrary associative combiner.
///
/// `combine(left, right)` must be associative; element order is preserved,
/// so non-commutative combiners are fine.
pub fn inclusive_scan_with<T: Copy, F: FnMut(&T, &T) -> T>(xs: &mut [T], mut combine: F) {
    let n = xs.len();
    if n < 2 {
        return;
    }
    // Upsweep: aligned blocks accumulate their totals at the block ends.
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            xs[i] = combine(&xs[i - stride], &xs[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    // Downsweep: propagate each block total into the interior of the block
    // to its right, producing inclusive prefixes directly.
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            xs[i] = combine(&xs[i - stride], &xs[i]);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Inclusive prefix sum of a real lane. Empty input gives empty output.
pub fn inclusive_prefix_sum(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    inclusive_scan_with(&mut out, |a, b| a + b);
    out
}

/// Inclusive prefix sum of angle increments, optionally reduced into (−π, π]
/// elementwise. Wrapping changes no downstream complex exponential beyond
/// representation error.
pub fn angle_prefix(dtheta: &[f64], wrap: bool) -> Vec<f64> {
    let mut out = inclusive_prefix_sum(dtheta);
    if wrap {
        for v in &mut out {
            *v = wrap_angle(*v);
        }
    }
    out
}

/// Separable convolution: `out[t] = Re[ f[t] · Σ_{k≤t} g[k] · u[k] ]`.
///
/// Auxiliary storage is one complex lane (`O(2L)` reals) beyond input/output.
pub fn separable_convolve(f: &[C64], g: &[C64], u: &[f64]) -> Result<Vec<f64>> {
    if f.len() != g.len() || f.len() != u.len() {
        return Err(Error::Contract(format!(
            "separable_convolve length mismatch: f={}, g={}, u={}",
            f.len(),
            g.len(),
            u.len()
        )));
    }
    let mut acc: Vec<C64> = g
        .iter()
        .zip(u.iter())
        .map(|(gk, uk)| gk.scale(*uk))
        .collect();
    inclusive_scan_with(&mut acc, |a, b| a.add(*b));
    Ok(f.iter()
        .zip(acc.iter())
        .map(|(ft, st)| ft.mul(*st).re)
        .collect())
}

/// Chunking layout for long-lane scans.
#[derive(Debug, Clone, Copy)]
pub struct ChunkPlan {
    pub chunk_len: usize,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        ChunkPlan {
            chunk_len: DEFAULT_CHUNK_LEN,
        }
    }
}

impl ChunkPlan {
    pub fn new(chunk_len: usize) -> Result<Self> {
        if chunk_len == 0 {
            return Err(Error::Config("chunk_len must be positive".into()));
        }
        Ok(ChunkPlan { chunk_len })
    }

    pub fn num_chunks(&self, len: usize) -> usize {
        len.div_ceil(self.chunk_len)
    }
}

/// Chunked inclusive scan: identical contract to the unchunked scan, with the
/// per-lane working set bounded by the chunk length. The carry starts at
/// `identity` and runs left to right across chunks.
pub fn chunked_scan<T: Copy, F: FnMut(&T, &T) -> T>(
    xs: &[T],
    plan: &ChunkPlan,
    identity: T,
    mut combine: F,
) -> Result<Vec<T>> {
    if plan.chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    let mut out = xs.to_vec();
    let mut carry = identity;
    for chunk in out.chunks_mut(plan.chunk_len) {
        chunk[0] = combine(&carry, &chunk[0]);
        inclusive_scan_with(chunk, &mut combine);
        carry = chunk[chunk.len() - 1];
    }
    Ok(out)
}
