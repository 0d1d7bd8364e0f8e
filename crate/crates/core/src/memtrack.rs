//! Working-buffer accounting for the kernel evaluators.
//!
//! The scaling benchmark tracks the bytes of kernel working buffers (angle
//! prefixes, f/g accumulators, recurrent state) rather than process RSS:
//! the claim under test concerns algorithmic buffers, and RSS on a shared
//! CPU is too noisy to attribute. Buffers register themselves through
//! [`TrackedBuf`]; current and peak byte counts are process-global atomics.

use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn add(bytes: usize) {
    let cur = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(cur, Ordering::Relaxed);
}

fn sub(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Reset both counters; call before a measured region.
pub fn reset() {
    CURRENT.store(0, Ordering::Relaxed);
    PEAK.store(0, Ordering::Relaxed);
}

/// Peak tracked bytes since the last [`reset`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Currently registered tracked bytes.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// An `f64` working buffer whose size is registered with the tracker for as
/// long as it lives.
pub struct TrackedBuf {
    data: Vec<f64>,
}

impl TrackedBuf {
    pub fn zeros(len: usize) -> Self {
        add(len * std::mem::size_of::<f64>());
        TrackedBuf {
            data: vec![0.0; len],
        }
    }
}

impl Drop for TrackedBuf {
    fn drop(&mut self) {
        sub(self.data.len() * std::mem::size_of::<f64>());
    }
}

impl std::ops::Deref for TrackedBuf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::DerefMut for TrackedBuf {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_live_buffers() {
        reset();
        {
            let _a = TrackedBuf::zeros(100);
            {
                let _b = TrackedBuf::zeros(50);
                assert_eq!(current_bytes(), 150 * 8);
            }
            assert_eq!(current_bytes(), 100 * 8);
        }
        assert_eq!(current_bytes(), 0);
        assert_eq!(peak_bytes(), 150 * 8);
    }
}
