//! Global sparse frame sampling.
//!
//! Reduces an untrimmed clip of `N` frames to a fixed-length index sequence of
//! `T` frames via `i_t = floor(N * t / T)` for `t = 1..=T`, clamped below to 1
//! so short clips (`N < T`) hold their early frames instead of indexing frame 0.
//! Indices are 1-based; convert at file-read boundaries only.

use crate::error::{Error, Result};

/// Fixed-length, nondecreasing frame index sequence into a source clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndices {
    indices: Vec<usize>,
    source_length: usize,
}

impl SampleIndices {
    /// 1-based frame indices, length exactly `t_target`.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// 0-based indices for buffer access.
    pub fn zero_based(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|&i| i - 1)
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniformly sample `t_target` frame indices from a clip of `n_frames`.
pub fn sample_indices(n_frames: usize, t_target: usize) -> Result<SampleIndices> {
    if n_frames == 0 || t_target == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample_indices needs positive sizes, got N={n_frames}, T={t_target}"
        )));
    }
    let indices = (1..=t_target)
        .map(|t| (n_frames * t / t_target).max(1))
        .collect();
    Ok(SampleIndices {
        indices,
        source_length: n_frames,
    })
}
