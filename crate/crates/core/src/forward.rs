//! Fused projection + cross-entropy forward pass.
//!
//! Each position streams its logits `h · W_v` through the online safe-softmax
//! update and keeps only `(m, a, z_target)`; the `N x V` logits matrix never
//! exists. The windowed variant splits the vocabulary into fixed-size windows
//! that can be scanned independently and merges the per-window statistics in
//! ascending window order.

use crate::error::{Error, Result};
use crate::kernel::{map_ordered, split_ranges, ExecConfig};
use crate::ledger::MemoryLedger;
use crate::loss::{reduce_losses, LossValue, Reduction};
use crate::stats::{merge_at, SoftmaxStats};
use crate::sweep::{scan_rows, VocabSlice, Worker};
use crate::types::{validate_problem, DenseMatrix, Real, TargetVector};

/// Loss plus the per-position statistics cache consumed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutput<T> {
    pub loss: LossValue<T>,
    pub stats: Vec<SoftmaxStats<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub window_size: usize,
    pub exec: ExecConfig,
}

impl WindowConfig {
    pub fn new(window_size: usize, exec: ExecConfig) -> Self {
        Self { window_size, exec }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        self.exec.validate()?;
        if self.window_size == 0 || (vocab > 0 && self.window_size > vocab) {
            return Err(Error::InvalidConfig(format!(
                "window size {} outside [1, {vocab}]",
                self.window_size
            )));
        }
        Ok(())
    }

    pub fn window_count(&self, vocab: usize) -> usize {
        vocab.div_ceil(self.window_size)
    }
}

/// Bytes of one cached stats entry.
pub fn stats_bytes<T>() -> usize {
    std::mem::size_of::<SoftmaxStats<T>>()
}

/// Turn finished statistics into per-position losses and reduce them.
pub(crate) fn finish_loss<T: Real>(
    stats: &[SoftmaxStats<T>],
    targets: &TargetVector,
    reduction: Reduction,
    ledger: &MemoryLedger,
) -> Result<LossValue<T>> {
    let _losses_charge = ledger.reserve_elems::<T>(stats.len());
    let mut losses = Vec::with_capacity(stats.len());
    for (n, s) in stats.iter().enumerate() {
        if targets.get(n).is_none() {
            losses.push(T::zero());
            continue;
        }
        if !s.target_found {
            return Err(Error::TargetNotFound { position: n });
        }
        losses.push(s.loss());
    }
    Ok(reduce_losses(losses, targets, reduction))
}

/// Fused forward over the whole vocabulary in a single window.
pub fn fused_forward<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
    reduction: Reduction,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<FusedOutput<T>> {
    let dims = validate_problem(hidden, weight, targets)?;
    exec.validate()?;
    let n = dims.positions;

    let _cache_charge = ledger.reserve(n * stats_bytes::<T>());
    let mut stats = vec![SoftmaxStats::identity(); n];

    let chunks = split_ranges(n, exec.workers);
    let _scratch_charge = ledger.reserve(chunks.len() * Worker::<T>::bytes(&exec.tiles));
    let vocab = VocabSlice::of(weight, 0..dims.vocab);
    let mut jobs = Vec::with_capacity(chunks.len());
    let mut rest = stats.as_mut_slice();
    for range in chunks {
        let (head, tail) = rest.split_at_mut(range.len());
        rest = tail;
        jobs.push((range, head));
    }
    map_ordered(jobs, |(range, out)| {
        let mut worker = Worker::new(&exec.tiles);
        scan_rows(hidden, range, vocab, targets, &exec.tiles, out, &mut worker);
    });

    let loss = finish_loss(&stats, targets, reduction, ledger)?;
    Ok(FusedOutput { loss, stats })
}

/// Fused forward with the vocabulary split into windows of `cfg.window_size`.
///
/// Every (position chunk, window) pair is an independent job; the epilogue
/// folds each position's window statistics left to right.
pub fn fused_forward_windowed<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
    reduction: Reduction,
    cfg: &WindowConfig,
    ledger: &MemoryLedger,
) -> Result<FusedOutput<T>> {
    let dims = validate_problem(hidden, weight, targets)?;
    cfg.validate(dims.vocab)?;
    let n = dims.positions;
    let tiles = &cfg.exec.tiles;

    let windows = split_windows(dims.vocab, cfg.window_size);
    let _partials_charge = ledger.reserve(windows.len() * n * stats_bytes::<T>());
    let mut partials = vec![SoftmaxStats::identity(); windows.len() * n];

    let chunks = split_ranges(n, cfg.exec.workers);
    let _scratch_charge =
        ledger.reserve(chunks.len() * windows.len() * Worker::<T>::bytes(tiles));
    let mut jobs = Vec::with_capacity(chunks.len() * windows.len());
    let mut rest = partials.as_mut_slice();
    for window in &windows {
        for range in &chunks {
            let (head, tail) = rest.split_at_mut(range.len());
            rest = tail;
            jobs.push((window.clone(), range.clone(), head));
        }
    }
    map_ordered(jobs, |(window, range, out)| {
        let mut worker = Worker::new(tiles);
        let vocab = VocabSlice::of(weight, window);
        scan_rows(hidden, range, vocab, targets, tiles, out, &mut worker);
    });

    let _cache_charge = ledger.reserve(n * stats_bytes::<T>());
    let mut stats = Vec::with_capacity(n);
    for pos in 0..n {
        let mut acc = partials[pos];
        for w in 1..windows.len() {
            acc = merge_at(&acc, &partials[w * n + pos], pos)?;
        }
        stats.push(acc);
    }
    drop(partials);

    let loss = finish_loss(&stats, targets, reduction, ledger)?;
    Ok(FusedOutput { loss, stats })
}

pub(crate) fn split_windows(vocab: usize, window: usize) -> Vec<std::ops::Range<usize>> {
    (0..vocab)
        .step_by(window.max(1))
        .map(|lo| lo..(lo + window).min(vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::TileConfig;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    /// Materialize-everything oracle written without any shared helpers.
    fn oracle_losses(h: &DenseMatrix<f64>, w: &DenseMatrix<f64>, y: &[usize]) -> Vec<f64> {
        (0..h.rows())
            .map(|n| {
                let z: Vec<f64> = (0..w.rows())
                    .map(|v| (0..h.cols()).map(|k| h.get(n, k) * w.get(v, k)).sum())
                    .collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - z[y[n]]
            })
            .collect()
    }

    #[test]
    fn zero_hidden_gives_log_vocab() {
        let h = DenseMatrix::<f32>::zeros(3, 5);
        let w = DenseMatrix::from_vec(4, 5, (0..20).map(|i| i as f32 * 0.1).collect()).unwrap();
        let y = TargetVector::from_indices(&[0, 1, 3]);
        let out = fused_forward(&h, &w, &y, Reduction::Mean, &ExecConfig::sequential(), &MemoryLedger::new())
            .unwrap();
        assert!((out.loss.reduced().unwrap() - 4f32.ln()).abs() < 1e-6);
        assert!((out.loss.reduced().unwrap() - 1.386_294_4).abs() < 1e-6);
    }

    #[test]
    fn matches_materialized_oracle_across_tilings() {
        let (n, d, v) = (13, 21, 150);
        let h = lcg_matrix(n, d, 1);
        let w = lcg_matrix(v, d, 2);
        let y: Vec<usize> = (0..n).map(|i| (i * 37) % v).collect();
        let targets = TargetVector::from_indices(&y);
        let expect = oracle_losses(&h, &w, &y);
        for tiles in [
            TileConfig::default(),
            TileConfig { vocab_tile: 7, dim_tile: 8, row_panel: 3 },
            TileConfig { vocab_tile: 1, dim_tile: 16, row_panel: 1 },
        ] {
            for workers in [1, 2, 5] {
                let exec = ExecConfig { workers, tiles };
                let out = fused_forward(&h, &w, &targets, Reduction::None, &exec, &MemoryLedger::new())
                    .unwrap();
                for (a, b) in out.loss.per_position().unwrap().iter().zip(&expect) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn bits_independent_of_workers_and_tiles() {
        let h = lcg_matrix(17, 40, 3).into_vec().into_iter().map(|x| x as f32).collect();
        let h = DenseMatrix::from_vec(17, 40, h).unwrap();
        let w = lcg_matrix(90, 40, 4).into_vec().into_iter().map(|x| x as f32).collect();
        let w = DenseMatrix::from_vec(90, 40, w).unwrap();
        let y = TargetVector::from_indices(&(0..17).map(|i| i * 5).collect::<Vec<_>>());
        let base = fused_forward(&h, &w, &y, Reduction::Sum, &ExecConfig::sequential(), &MemoryLedger::new())
            .unwrap();
        for workers in [2, 3, 17] {
            let exec = ExecConfig {
                workers,
                tiles: TileConfig { vocab_tile: 11, dim_tile: 16, row_panel: 5 },
            };
            let out = fused_forward(&h, &w, &y, Reduction::Sum, &exec, &MemoryLedger::new()).unwrap();
            assert_eq!(out, base);
        }
    }

    #[test]
    fn ignored_positions_skip_and_mean_counts_valid() {
        let h = lcg_matrix(4, 6, 5);
        let w = lcg_matrix(9, 6, 6);
        let y = TargetVector::new(vec![1, -100, 4, -100]).with_ignore_index(-100);
        let exec = ExecConfig::sequential();
        let per = fused_forward(&h, &w, &y, Reduction::None, &exec, &MemoryLedger::new()).unwrap();
        let per = per.loss.per_position().unwrap().to_vec();
        assert_eq!(per[1], 0.0);
        assert_eq!(per[3], 0.0);
        let mean = fused_forward(&h, &w, &y, Reduction::Mean, &exec, &MemoryLedger::new()).unwrap();
        assert!((mean.loss.reduced().unwrap() - (per[0] + per[2]) / 2.0).abs() < 1e-15);
        assert!(!mean.stats[1].target_found);

        let all = TargetVector::new(vec![-1; 4]).with_ignore_index(-1);
        let out = fused_forward(&h, &w, &all, Reduction::Mean, &exec, &MemoryLedger::new()).unwrap();
        assert_eq!(out.loss, LossValue::Reduced(0.0));
    }

    #[test]
    fn single_vocab_entry_has_zero_loss() {
        let h = lcg_matrix(3, 4, 7);
        let w = lcg_matrix(1, 4, 8);
        let y = TargetVector::from_indices(&[0, 0, 0]);
        let out = fused_forward(&h, &w, &y, Reduction::None, &ExecConfig::sequential(), &MemoryLedger::new())
            .unwrap();
        assert!(out.loss.per_position().unwrap().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn single_window_is_bitwise_unwindowed() {
        let h = lcg_matrix(9, 10, 9);
        let w = lcg_matrix(33, 10, 10);
        let y = TargetVector::from_indices(&[0, 32, 5, 6, 7, 8, 1, 2, 3]);
        let exec = ExecConfig::with_workers(2);
        let plain = fused_forward(&h, &w, &y, Reduction::Mean, &exec, &MemoryLedger::new()).unwrap();
        let win = fused_forward_windowed(&h, &w, &y, Reduction::Mean, &WindowConfig::new(33, exec), &MemoryLedger::new())
            .unwrap();
        assert_eq!(plain, win);
    }

    #[test]
    fn window_sizes_agree() {
        let h = lcg_matrix(8, 12, 11);
        let w = lcg_matrix(41, 12, 12);
        let y = TargetVector::from_indices(&[40, 0, 1, 20, 39, 7, 8, 9]);
        let exec = ExecConfig::sequential();
        let plain = fused_forward(&h, &w, &y, Reduction::Sum, &exec, &MemoryLedger::new()).unwrap();
        let l0 = plain.loss.reduced().unwrap();
        for ws in [1, 2, 3, 20, 40, 41] {
            let out = fused_forward_windowed(&h, &w, &y, Reduction::Sum, &WindowConfig::new(ws, exec), &MemoryLedger::new())
                .unwrap();
            assert!((out.loss.reduced().unwrap() - l0).abs() <= 1e-12 * l0.abs());
            assert!(out.stats.iter().all(|s| s.target_found && s.a > 0.0));
        }
    }

    #[test]
    fn window_config_rejects_out_of_range() {
        let h = lcg_matrix(2, 2, 1);
        let w = lcg_matrix(5, 2, 2);
        let y = TargetVector::from_indices(&[0, 1]);
        for ws in [0, 6] {
            let r = fused_forward_windowed(&h, &w, &y, Reduction::Sum, &WindowConfig::new(ws, ExecConfig::sequential()), &MemoryLedger::new());
            assert!(matches!(r, Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn ledger_balanced_and_independent_of_vocab() {
        let h = lcg_matrix(10, 8, 1);
        let y = TargetVector::from_indices(&[0; 10]);
        let exec = ExecConfig::with_workers(3);
        let mut peaks = Vec::new();
        for v in [100, 400] {
            let w = lcg_matrix(v, 8, 2);
            let ledger = MemoryLedger::new();
            fused_forward(&h, &w, &y, Reduction::Mean, &exec, &ledger).unwrap();
            assert_eq!(ledger.current_bytes(), 0);
            peaks.push(ledger.peak_bytes());
        }
        assert_eq!(peaks[0], peaks[1]);
        assert!(peaks[0] >= 10 * stats_bytes::<f64>());
    }
}
