//! Blocked dot-product kernels and the worker scheduling shared by every pass.
//!
//! Every logit is produced by the same lane-split accumulation: element `k`
//! of the hidden dimension always lands in lane `k % LANES`, and the lanes
//! are summed in a fixed tree. A logit therefore has the same bits no matter
//! which tile, row block or worker computed it.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::types::Real;

pub const LANES: usize = 8;

/// Rows of hidden states processed together against one vocabulary tile.
pub const ROW_BLOCK: usize = 4;

type Lanes<T> = [T; LANES];

/// Cache-blocking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    /// Vocabulary rows per tile.
    pub vocab_tile: usize,
    /// Hidden-dimension columns per tile; a multiple of [`LANES`].
    pub dim_tile: usize,
    /// Positions swept against one vocabulary tile before moving on.
    pub row_panel: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            vocab_tile: 64,
            dim_tile: 64,
            row_panel: 64,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_tile == 0 || self.row_panel == 0 {
            return Err(Error::InvalidConfig("tile sizes must be positive".into()));
        }
        if self.dim_tile == 0 || self.dim_tile % LANES != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim_tile must be a positive multiple of {LANES}"
            )));
        }
        Ok(())
    }
}

/// Worker count and tiling for one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub workers: usize,
    pub tiles: TileConfig,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            workers: default_workers(),
            tiles: TileConfig::default(),
        }
    }
}

impl ExecConfig {
    pub fn with_workers(workers: usize) -> Self {
        Self {
            workers,
            ..Self::default()
        }
    }

    pub fn sequential() -> Self {
        Self::with_workers(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidConfig("worker count must be positive".into()));
        }
        self.tiles.validate()
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Split `0..len` into at most `parts` contiguous ranges; the first
/// `len % parts` ranges get one extra element. Never yields empty ranges.
pub fn split_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.min(len).max(1);
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(start..start + size);
        start += size;
    }
    if len == 0 {
        out.clear();
    }
    out
}

/// Run `f` over `jobs` and return the results in job order.
///
/// Runs on the rayon pool when the `parallel` feature is on; the output is
/// identical either way because jobs never share mutable state.
pub(crate) fn map_ordered<I, O, F>(jobs: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if jobs.len() > 1 {
            return jobs.into_par_iter().map(f).collect();
        }
    }
    jobs.into_iter().map(f).collect()
}

#[inline(always)]
fn reduce_lanes<T: Real>(a: &Lanes<T>) -> T {
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

#[inline(always)]
fn accumulate<T: Real, const R: usize>(acc: &mut [Lanes<T>; R], rows: &[&[T]; R], w: &[T]) {
    let n = w.len();
    for row in rows {
        assert!(row.len() >= n);
    }
    let full = n - n % LANES;
    let mut k = 0;
    while k < full {
        // SAFETY: k + LANES <= full <= n <= every row length, checked above.
        unsafe {
            let wp = w.as_ptr().add(k);
            for r in 0..R {
                let hp = rows[r].as_ptr().add(k);
                for l in 0..LANES {
                    acc[r][l] = acc[r][l] + *hp.add(l) * *wp.add(l);
                }
            }
        }
        k += LANES;
    }
    for l in 0..n - full {
        for r in 0..R {
            acc[r][l] = acc[r][l] + rows[r][full + l] * w[full + l];
        }
    }
}

/// Plain dot product with the canonical lane order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let mut acc = [[T::zero(); LANES]; 1];
    accumulate(&mut acc, &[a], b);
    reduce_lanes(&acc[0])
}

/// Per-worker scratch for one row block against one vocabulary tile.
pub(crate) struct TileScratch<T> {
    lanes: Vec<[Lanes<T>; ROW_BLOCK]>,
    /// Logits (or gradient coefficients), row-major `ROW_BLOCK x vocab_tile`.
    pub values: Vec<T>,
    vocab_tile: usize,
}

impl<T: Real> TileScratch<T> {
    pub fn new(vocab_tile: usize) -> Self {
        Self {
            lanes: vec![[[T::zero(); LANES]; ROW_BLOCK]; vocab_tile],
            values: vec![T::zero(); ROW_BLOCK * vocab_tile],
            vocab_tile,
        }
    }

    /// Bytes held by one scratch instance.
    pub fn bytes(vocab_tile: usize) -> usize {
        vocab_tile * ROW_BLOCK * (LANES + 1) * std::mem::size_of::<T>()
    }

    #[inline]
    pub fn row(&self, r: usize, len: usize) -> &[T] {
        &self.values[r * self.vocab_tile..r * self.vocab_tile + len]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize, len: usize) -> &mut [T] {
        &mut self.values[r * self.vocab_tile..r * self.vocab_tile + len]
    }
}

/// Compute `values[r][j] = dot(rows[r], w_tile row j)` for `rows.len() <= ROW_BLOCK`.
///
/// `w_tile` holds `nv <= vocab_tile` contiguous rows of length `d`.
pub(crate) fn logits_tile<T: Real>(
    rows: &[&[T]],
    w_tile: &[T],
    nv: usize,
    d: usize,
    dim_tile: usize,
    scratch: &mut TileScratch<T>,
) {
    match rows.len() {
        4 => logits_tile_n::<T, 4>(rows.try_into().unwrap(), w_tile, nv, d, dim_tile, scratch),
        3 => logits_tile_n::<T, 3>(rows.try_into().unwrap(), w_tile, nv, d, dim_tile, scratch),
        2 => logits_tile_n::<T, 2>(rows.try_into().unwrap(), w_tile, nv, d, dim_tile, scratch),
        1 => logits_tile_n::<T, 1>(rows.try_into().unwrap(), w_tile, nv, d, dim_tile, scratch),
        n => panic!("row block of {n} rows"),
    }
}

fn logits_tile_n<T: Real, const R: usize>(
    rows: &[&[T]; R],
    w_tile: &[T],
    nv: usize,
    d: usize,
    dim_tile: usize,
    scratch: &mut TileScratch<T>,
) {
    debug_assert!(nv <= scratch.vocab_tile && w_tile.len() == nv * d);
    let vt = scratch.vocab_tile;
    if d == 0 {
        for r in 0..R {
            scratch.values[r * vt..r * vt + nv].fill(T::zero());
        }
        return;
    }
    let zero = [T::zero(); LANES];
    if d <= dim_tile {
        // single hidden tile: keep the accumulators in registers
        for j in 0..nv {
            let mut acc = [zero; R];
            accumulate(&mut acc, rows, &w_tile[j * d..(j + 1) * d]);
            for r in 0..R {
                scratch.values[r * vt + j] = reduce_lanes(&acc[r]);
            }
        }
        return;
    }
    for lanes in &mut scratch.lanes[..nv] {
        for acc in lanes.iter_mut().take(R) {
            *acc = zero;
        }
    }
    let mut k0 = 0;
    while k0 < d {
        let k1 = (k0 + dim_tile).min(d);
        let sub: [&[T]; R] = std::array::from_fn(|r| &rows[r][k0..k1]);
        for j in 0..nv {
            let lanes = &mut scratch.lanes[j];
            let acc: &mut [Lanes<T>; R] = (&mut lanes[..R]).try_into().unwrap();
            accumulate(acc, &sub, &w_tile[j * d + k0..j * d + k1]);
        }
        k0 = k1;
    }
    for j in 0..nv {
        for r in 0..R {
            scratch.values[r * vt + j] = reduce_lanes(&scratch.lanes[j][r]);
        }
    }
}

/// `y += alpha * x`
#[cfg(test)]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `y += Σ_i coeffs[i] * x_i` where `x_i = x[i*stride ..]`, applied per
/// element in ascending `i`; bitwise equal to repeated [`axpy`] calls.
pub(crate) fn axpy_strided<T: Real>(y: &mut [T], coeffs: &[T], x: &[T], stride: usize) {
    let n = y.len();
    if coeffs.is_empty() {
        return;
    }
    assert!(stride >= n && x.len() >= (coeffs.len() - 1) * stride + n);
    // Four lane groups at a time give four independent add chains per
    // coefficient; each element still sums in ascending `i`.
    const GROUPS: usize = 4;
    let wide = n - n % (GROUPS * LANES);
    let mut k = 0;
    while k < wide {
        let mut acc: [Lanes<T>; GROUPS] =
            std::array::from_fn(|q| y[k + q * LANES..k + (q + 1) * LANES].try_into().unwrap());
        for (i, &c) in coeffs.iter().enumerate() {
            // SAFETY: i*stride + k + GROUPS*LANES <= (len-1)*stride + n <= x.len().
            unsafe {
                let xp = x.as_ptr().add(i * stride + k);
                for (q, a) in acc.iter_mut().enumerate() {
                    for l in 0..LANES {
                        a[l] = a[l] + c * *xp.add(q * LANES + l);
                    }
                }
            }
        }
        for (q, a) in acc.iter().enumerate() {
            y[k + q * LANES..k + (q + 1) * LANES].copy_from_slice(a);
        }
        k += GROUPS * LANES;
    }
    let full = n - n % LANES;
    while k < full {
        let mut acc: Lanes<T> = y[k..k + LANES].try_into().unwrap();
        for (i, &c) in coeffs.iter().enumerate() {
            // SAFETY: i*stride + k + LANES <= (len-1)*stride + n <= x.len(), checked above.
            unsafe {
                let xp = x.as_ptr().add(i * stride + k);
                for l in 0..LANES {
                    acc[l] = acc[l] + c * *xp.add(l);
                }
            }
        }
        y[k..k + LANES].copy_from_slice(&acc);
        k += LANES;
    }
    for k in full..n {
        let mut a = y[k];
        for (i, &c) in coeffs.iter().enumerate() {
            a = a + c * x[i * stride + k];
        }
        y[k] = a;
    }
}

/// `y += Σ_i coeffs[i] * rows[i]`, same element order as [`axpy_strided`].
pub(crate) fn axpy_rows<T: Real>(y: &mut [T], coeffs: &[T], rows: &[&[T]]) {
    let n = y.len();
    assert!(coeffs.len() == rows.len() && rows.iter().all(|r| r.len() >= n));
    const GROUPS: usize = 4;
    let wide = n - n % (GROUPS * LANES);
    let mut k = 0;
    while k < wide {
        let mut acc: [Lanes<T>; GROUPS] =
            std::array::from_fn(|q| y[k + q * LANES..k + (q + 1) * LANES].try_into().unwrap());
        for (&c, row) in coeffs.iter().zip(rows) {
            // SAFETY: k + GROUPS*LANES <= n <= row.len(), checked above.
            unsafe {
                let xp = row.as_ptr().add(k);
                for (q, a) in acc.iter_mut().enumerate() {
                    for l in 0..LANES {
                        a[l] = a[l] + c * *xp.add(q * LANES + l);
                    }
                }
            }
        }
        for (q, a) in acc.iter().enumerate() {
            y[k + q * LANES..k + (q + 1) * LANES].copy_from_slice(a);
        }
        k += GROUPS * LANES;
    }
    let full = n - n % LANES;
    while k < full {
        let mut acc: Lanes<T> = y[k..k + LANES].try_into().unwrap();
        for (&c, row) in coeffs.iter().zip(rows) {
            // SAFETY: k + LANES <= n <= row.len(), checked above.
            unsafe {
                let xp = row.as_ptr().add(k);
                for l in 0..LANES {
                    acc[l] = acc[l] + c * *xp.add(l);
                }
            }
        }
        y[k..k + LANES].copy_from_slice(&acc);
        k += LANES;
    }
    for k in full..n {
        let mut a = y[k];
        for (&c, row) in coeffs.iter().zip(rows) {
            a = a + c * row[k];
        }
        y[k] = a;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn split_ranges_ceil_first() {
        assert_eq!(split_ranges(8, 2), vec![0..4, 4..8]);
        assert_eq!(split_ranges(7, 2), vec![0..4, 4..7]);
        assert_eq!(split_ranges(5, 5), vec![0..1, 1..2, 2..3, 3..4, 4..5]);
        assert_eq!(split_ranges(3, 8).len(), 3);
        assert!(split_ranges(0, 4).is_empty());
    }

    #[test]
    fn dot_close_to_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        assert!((dot(&a, &b) - naive(&a, &b)).abs() < 1e-12);
        assert_eq!(dot::<f64>(&[], &[]), 0.0);
    }

    #[test]
    fn tile_bits_independent_of_blocking() {
        // d spans several hidden tiles with a ragged tail
        let d = 150;
        let nv = 5;
        let rows: Vec<Vec<f32>> = (0..4)
            .map(|r| (0..d).map(|k| ((r * 31 + k) as f32 * 0.173).sin()).collect())
            .collect();
        let w: Vec<f32> = (0..nv * d).map(|k| (k as f32 * 0.071).cos()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        for dim_tile in [8, 64, 256] {
            for take in 1..=4 {
                let mut s = TileScratch::new(8);
                logits_tile(&refs[..take], &w, nv, d, dim_tile, &mut s);
                for r in 0..take {
                    for j in 0..nv {
                        let expect = dot(&rows[r], &w[j * d..(j + 1) * d]);
                        assert_eq!(s.row(r, nv)[j].to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn fused_axpys_match_sequential_bits() {
        let d = 19;
        let x: Vec<f32> = (0..5 * d).map(|k| (k as f32 * 0.37).sin()).collect();
        let c = [0.3f32, -1.7, 2.5, 1e-3, -0.9];
        let y0: Vec<f32> = (0..d).map(|k| (k as f32).cos()).collect();
        let mut seq = y0.clone();
        for (i, &ci) in c.iter().enumerate() {
            axpy(&mut seq, ci, &x[i * d..(i + 1) * d]);
        }
        let mut strided = y0.clone();
        axpy_strided(&mut strided, &c, &x, d);
        let rows: Vec<&[f32]> = x.chunks(d).collect();
        let mut by_rows = y0.clone();
        axpy_rows(&mut by_rows, &c, &rows);
        assert_eq!(seq, strided);
        assert_eq!(seq, by_rows);
    }

    #[test]
    fn tile_with_zero_hidden_dim() {
        let row: [f32; 0] = [];
        let mut s = TileScratch::<f32>::new(4);
        s.values.fill(7.0);
        logits_tile(&[&row[..]], &[], 4, 0, 64, &mut s);
        assert_eq!(s.row(0, 4), &[0.0; 4]);
    }
}

