//! Panel sweeps shared by the forward, backward and sharded passes.
//!
//! A panel is a run of consecutive positions. Within a panel the vocabulary
//! is visited tile by tile in ascending order and each tile is applied to
//! every active position before the next tile is loaded, so a position sees
//! its logits in ascending vocabulary order and a weight row sees its
//! positions in ascending order.

use std::ops::Range;

use crate::kernel::{axpy_rows, axpy_strided, logits_tile, TileConfig, TileScratch, ROW_BLOCK};
use crate::stats::SoftmaxStats;
use crate::types::{DenseMatrix, Real, TargetVector};

/// Contiguous weight rows `offset .. offset + len` of the global vocabulary.
#[derive(Clone, Copy)]
pub(crate) struct VocabSlice<'a, T> {
    pub rows: &'a [T],
    pub offset: usize,
    pub len: usize,
}

impl<'a, T: Real> VocabSlice<'a, T> {
    pub fn of(weight: &'a DenseMatrix<T>, range: Range<usize>) -> Self {
        let d = weight.cols();
        Self {
            rows: &weight.as_slice()[range.start * d..range.end * d],
            offset: range.start,
            len: range.len(),
        }
    }

    /// A shard matrix whose row 0 is global vocabulary index `offset`.
    pub fn shard(weight: &'a DenseMatrix<T>, offset: usize) -> Self {
        Self {
            rows: weight.as_slice(),
            offset,
            len: weight.rows(),
        }
    }
}

/// Scratch owned by one worker.
pub(crate) struct Worker<T> {
    pub tile: TileScratch<T>,
    active: Vec<usize>,
    /// Gradient coefficients of one vocabulary tile for a whole panel,
    /// stored column-major (`coef[j * row_panel + p]`) so that each weight
    /// row sees its positions contiguously.
    coef: Vec<T>,
    row_panel: usize,
}

impl<T: Real> Worker<T> {
    pub fn new(tiles: &TileConfig) -> Self {
        Self {
            tile: TileScratch::new(tiles.vocab_tile),
            active: Vec::with_capacity(tiles.row_panel),
            coef: vec![T::zero(); tiles.vocab_tile * tiles.row_panel],
            row_panel: tiles.row_panel,
        }
    }

    pub fn bytes(tiles: &TileConfig) -> usize {
        TileScratch::<T>::bytes(tiles.vocab_tile)
            + tiles.row_panel * std::mem::size_of::<usize>()
            + tiles.vocab_tile * tiles.row_panel * std::mem::size_of::<T>()
    }
}

/// Forward statistics for every position in `rows` over `vocab`; `out[i]`
/// belongs to position `rows.start + i`. Ignored positions get identity stats.
pub(crate) fn scan_rows<T: Real>(
    hidden: &DenseMatrix<T>,
    rows: Range<usize>,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    tiles: &TileConfig,
    out: &mut [SoftmaxStats<T>],
    worker: &mut Worker<T>,
) {
    debug_assert_eq!(out.len(), rows.len());
    let base = rows.start;
    let mut p0 = rows.start;
    while p0 < rows.end {
        let p1 = (p0 + tiles.row_panel).min(rows.end);
        let mut active = std::mem::take(&mut worker.active);
        collect_active(targets, p0..p1, &mut active);
        scan_panel(hidden, &active, base, vocab, targets, tiles, out, worker);
        worker.active = active;
        p0 = p1;
    }
}

fn collect_active(targets: &TargetVector, panel: Range<usize>, active: &mut Vec<usize>) {
    active.clear();
    active.extend(panel.filter(|&n| targets.get(n).is_some()));
}

#[allow(clippy::too_many_arguments)]
fn scan_panel<T: Real>(
    hidden: &DenseMatrix<T>,
    active: &[usize],
    base: usize,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    tiles: &TileConfig,
    out: &mut [SoftmaxStats<T>],
    worker: &mut Worker<T>,
) {
    for &n in active {
        out[n - base] = SoftmaxStats::identity();
    }
    let d = hidden.cols();
    let mut t0 = 0;
    while t0 < vocab.len {
        let nt = tiles.vocab_tile.min(vocab.len - t0);
        let w_tile = &vocab.rows[t0 * d..(t0 + nt) * d];
        let g_lo = vocab.offset + t0;
        for block in active.chunks(ROW_BLOCK) {
            let refs = block_rows(hidden, block);
            logits_tile(&refs[..block.len()], w_tile, nt, d, tiles.dim_tile, &mut worker.tile);
            for (r, &n) in block.iter().enumerate() {
                let z = worker.tile.row(r, nt);
                let s = &mut out[n - base];
                for &zj in z {
                    s.push(zj);
                }
                if let Some(t) = targets.get(n) {
                    if t >= g_lo && t < g_lo + nt {
                        s.capture_target(z[t - g_lo]);
                    }
                }
            }
        }
        t0 += nt;
    }
}

/// Gradient accumulation for the positions in `rows` over `vocab`.
///
/// For each active position `n` and vocabulary entry `v` this adds
/// `g = gamma[n] * (p_v - [v == y_n])` times `W_v` into `dh` (rows local to
/// `rows.start`) and `g * H_n` into `dw` (rows local to `vocab.offset`).
/// `dh` rows are summed unscaled and multiplied by `gamma[n]` once at the end
/// of the panel, so they must start at zero.
/// `stats` and `gamma` are indexed by global position.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grad_rows<T: Real>(
    hidden: &DenseMatrix<T>,
    rows: Range<usize>,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    stats: &[SoftmaxStats<T>],
    gamma: &[T],
    tiles: &TileConfig,
    dh: &mut [T],
    dw: &mut [T],
    worker: &mut Worker<T>,
) {
    let mut p0 = rows.start;
    while p0 < rows.end {
        let p1 = (p0 + tiles.row_panel).min(rows.end);
        let mut active = std::mem::take(&mut worker.active);
        collect_active(targets, p0..p1, &mut active);
        grad_panel(
            hidden, &active, rows.start, vocab, targets, stats, gamma, tiles, dh, dw, worker,
        );
        worker.active = active;
        p0 = p1;
    }
}

/// Forward stats then unit-scaled gradients, one panel at a time: every
/// position finishes its stats pass before its gradient pass begins.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_and_grad_rows<T: Real>(
    hidden: &DenseMatrix<T>,
    rows: Range<usize>,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    unit_gamma: &[T],
    tiles: &TileConfig,
    out: &mut [SoftmaxStats<T>],
    dh: &mut [T],
    dw: &mut [T],
    worker: &mut Worker<T>,
) {
    let base = rows.start;
    let mut p0 = rows.start;
    while p0 < rows.end {
        let p1 = (p0 + tiles.row_panel).min(rows.end);
        let mut active = std::mem::take(&mut worker.active);
        collect_active(targets, p0..p1, &mut active);
        scan_panel(hidden, &active, base, vocab, targets, tiles, out, worker);
        grad_panel_local(
            hidden, &active, base, vocab, targets, out, unit_gamma, tiles, dh, dw, worker,
        );
        worker.active = active;
        p0 = p1;
    }
}

#[allow(clippy::too_many_arguments)]
fn grad_panel<T: Real>(
    hidden: &DenseMatrix<T>,
    active: &[usize],
    base: usize,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    stats: &[SoftmaxStats<T>],
    gamma: &[T],
    tiles: &TileConfig,
    dh: &mut [T],
    dw: &mut [T],
    worker: &mut Worker<T>,
) {
    grad_panel_with(hidden, active, base, vocab, targets, tiles, dh, dw, worker, |n| {
        (stats[n], gamma[n])
    })
}

#[allow(clippy::too_many_arguments)]
fn grad_panel_local<T: Real>(
    hidden: &DenseMatrix<T>,
    active: &[usize],
    base: usize,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    local_stats: &[SoftmaxStats<T>],
    gamma: &[T],
    tiles: &TileConfig,
    dh: &mut [T],
    dw: &mut [T],
    worker: &mut Worker<T>,
) {
    grad_panel_with(hidden, active, base, vocab, targets, tiles, dh, dw, worker, |n| {
        (local_stats[n - base], gamma[n])
    })
}

#[allow(clippy::too_many_arguments)]
fn grad_panel_with<T: Real, F: Fn(usize) -> (SoftmaxStats<T>, T)>(
    hidden: &DenseMatrix<T>,
    active: &[usize],
    base: usize,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    tiles: &TileConfig,
    dh: &mut [T],
    dw: &mut [T],
    worker: &mut Worker<T>,
    lookup: F,
) {
    let d = hidden.cols();
    let panel_rows: Vec<&[T]> = active.iter().map(|&n| hidden.row(n)).collect();
    let np = active.len();
    let stride = worker.row_panel;
    debug_assert!(np <= stride);
    let mut t0 = 0;
    while t0 < vocab.len {
        let nt = tiles.vocab_tile.min(vocab.len - t0);
        let w_tile = &vocab.rows[t0 * d..(t0 + nt) * d];
        let g_lo = vocab.offset + t0;
        for (b, block) in active.chunks(ROW_BLOCK).enumerate() {
            let refs = block_rows(hidden, block);
            logits_tile(&refs[..block.len()], w_tile, nt, d, tiles.dim_tile, &mut worker.tile);
            // logits -> unit coefficients p - [v = y], in place. The upstream
            // factor is applied per row to dh after the sweep and per
            // coefficient to dw.
            for (r, &n) in block.iter().enumerate() {
                let (s, gamma) = lookup(n);
                let g = worker.tile.row_mut(r, nt);
                let target = targets
                    .get(n)
                    .filter(|&t| t >= g_lo && t < g_lo + nt)
                    .map(|t| (t - g_lo, g[t - g_lo]));
                for gj in g.iter_mut() {
                    *gj = s.prob(*gj);
                }
                if let Some((j, zt)) = target {
                    g[j] = s.prob(zt) - T::one();
                }
                let p = b * ROW_BLOCK + r;
                for (j, &gj) in g.iter().enumerate() {
                    worker.coef[j * stride + p] = gamma * gj;
                }
                let dh_row = &mut dh[(n - base) * d..(n - base + 1) * d];
                axpy_strided(dh_row, worker.tile.row(r, nt), w_tile, d);
            }
        }
        for j in 0..nt {
            let dw_row = &mut dw[(t0 + j) * d..(t0 + j + 1) * d];
            axpy_rows(dw_row, &worker.coef[j * stride..j * stride + np], &panel_rows);
        }
        t0 += nt;
    }
    for &n in active {
        let gamma = lookup(n).1;
        if gamma != T::one() {
            for x in &mut dh[(n - base) * d..(n - base + 1) * d] {
                *x = gamma * *x;
            }
        }
    }
}

#[inline]
fn block_rows<'a, T: Real>(hidden: &'a DenseMatrix<T>, block: &[usize]) -> [&'a [T]; ROW_BLOCK] {
    let mut refs: [&[T]; ROW_BLOCK] = [&[]; ROW_BLOCK];
    for (slot, &n) in refs.iter_mut().zip(block) {
        *slot = hidden.row(n);
    }
    refs
}
