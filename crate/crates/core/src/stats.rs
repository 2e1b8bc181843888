//! Streaming safe-softmax statistics and their merge rule.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernel::dot;
use crate::types::{DenseMatrix, Real};

/// Running `(max, scaled sum)` over a stream of logits, plus the target logit
/// if the target index was inside the streamed range.
///
/// `m + ln(a)` is the log-sum-exp of everything streamed so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxStats<T> {
    pub m: T,
    pub a: T,
    pub z_target: T,
    pub target_found: bool,
}

impl<T: Real> Default for SoftmaxStats<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> SoftmaxStats<T> {
    /// Stats of an empty stream; the neutral element of [`merge_stats`].
    pub fn identity() -> Self {
        Self {
            m: T::neg_infinity(),
            a: T::zero(),
            z_target: T::zero(),
            target_found: false,
        }
    }

    /// Fold one logit into the running statistics.
    #[inline(always)]
    pub fn push(&mut self, z: T) {
        if z > self.m {
            self.a = self.a * (self.m - z).exp() + T::one();
            self.m = z;
        } else {
            self.a = self.a + (z - self.m).exp();
        }
    }

    #[inline(always)]
    pub fn capture_target(&mut self, z: T) {
        self.z_target = z;
        self.target_found = true;
    }

    pub fn logsumexp(&self) -> T {
        self.m + self.a.ln()
    }

    /// Cross-entropy `-(z_target - logsumexp)`, evaluated as
    /// `(m - z_target) + ln a` so that large common offsets cancel exactly.
    #[inline]
    pub fn loss(&self) -> T {
        (self.m - self.z_target) + self.a.ln()
    }

    /// Softmax probability of a logit `z` from the final statistics.
    #[inline(always)]
    pub fn prob(&self, z: T) -> T {
        (z - self.m).exp() / self.a
    }
}

/// Combine the statistics of two disjoint streams.
pub fn merge_stats<T: Real>(s1: &SoftmaxStats<T>, s2: &SoftmaxStats<T>) -> Result<SoftmaxStats<T>> {
    merge_at(s1, s2, 0)
}

pub(crate) fn merge_at<T: Real>(
    s1: &SoftmaxStats<T>,
    s2: &SoftmaxStats<T>,
    position: usize,
) -> Result<SoftmaxStats<T>> {
    if s1.target_found && s2.target_found {
        return Err(Error::DuplicateTarget { position });
    }
    let m = s1.m.max(s2.m);
    let scaled = |s: &SoftmaxStats<T>| {
        if s.a == T::zero() {
            T::zero()
        } else {
            s.a * (s.m - m).exp()
        }
    };
    let a = scaled(s1) + scaled(s2);
    let (z_target, target_found) = if s1.target_found {
        (s1.z_target, true)
    } else if s2.target_found {
        (s2.z_target, true)
    } else {
        (T::zero(), false)
    };
    Ok(SoftmaxStats {
        m,
        a,
        z_target,
        target_found,
    })
}

/// Stream the logits `h · W_v` for `v` in `vocab_range` through the online
/// safe-softmax update, in ascending `v`.
///
/// `target` is the global target index, or `None` for an ignored position.
pub fn stream_stats<T: Real>(
    h: &[T],
    weight: &DenseMatrix<T>,
    target: Option<usize>,
    vocab_range: Range<usize>,
) -> SoftmaxStats<T> {
    let mut s = SoftmaxStats::identity();
    for v in vocab_range {
        let z = dot(h, weight.row(v));
        s.push(z);
        if target == Some(v) {
            s.capture_target(z);
        }
    }
    s
}
