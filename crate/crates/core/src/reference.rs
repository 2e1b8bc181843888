//! Two-stage baseline: materialize the logits, then apply safe-softmax
//! cross-entropy. Serves as the correctness oracle and the memory baseline.

use crate::backward::{effective_gamma, UpstreamGradient};
use crate::error::{Error, Result};
use crate::kernel::{
    axpy_rows, axpy_strided, default_workers, logits_tile, map_ordered, split_ranges, TileConfig,
    TileScratch, ROW_BLOCK,
};
use crate::ledger::{MemoryLedger, Tracked};
use crate::loss::{reduce_losses, LossValue, Reduction};
use crate::types::{validate_problem, DenseMatrix, Real, TargetVector};

/// `Z = H · Wᵀ`, charged to `ledger` for as long as the result lives.
pub fn project_logits<'l, T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    ledger: &'l MemoryLedger,
) -> Result<Tracked<'l, DenseMatrix<T>>> {
    if hidden.cols() != weight.cols() {
        return Err(Error::DimensionMismatch(format!(
            "hidden states have {} columns, weights have {}",
            hidden.cols(),
            weight.cols()
        )));
    }
    let (n, v, d) = (hidden.rows(), weight.rows(), hidden.cols());
    let charge = ledger.reserve_elems::<T>(n * v);
    let mut z = DenseMatrix::zeros(n, v);
    if v > 0 {
        // rows are independent, so the split does not affect the result
        let chunks = split_ranges(n, default_workers());
        let mut jobs = Vec::with_capacity(chunks.len());
        let mut rest = z.as_mut_slice();
        for range in chunks {
            let (head, tail) = rest.split_at_mut(range.len() * v);
            rest = tail;
            jobs.push((range, head));
        }
        let tiles = TileConfig::default();
        map_ordered(jobs, |(range, out)| {
            let mut scratch = TileScratch::new(tiles.vocab_tile);
            let base = range.start;
            for r0 in range.clone().step_by(ROW_BLOCK) {
                let r1 = (r0 + ROW_BLOCK).min(range.end);
                let rows: Vec<&[T]> = (r0..r1).map(|i| hidden.row(i)).collect();
                for t0 in (0..v).step_by(tiles.vocab_tile) {
                    let nt = tiles.vocab_tile.min(v - t0);
                    let w_tile = &weight.as_slice()[t0 * d..(t0 + nt) * d];
                    logits_tile(&rows, w_tile, nt, d, tiles.dim_tile, &mut scratch);
                    for (r, i) in (r0..r1).enumerate() {
                        let dst = &mut out[(i - base) * v + t0..(i - base) * v + t0 + nt];
                        dst.copy_from_slice(scratch.row(r, nt));
                    }
                }
            }
        });
    }
    Ok(Tracked::new(z, charge))
}

/// Safe-softmax cross-entropy from materialized logits.
pub fn ce_loss_from_logits<T: Real>(
    logits: &DenseMatrix<T>,
    targets: &TargetVector,
    reduction: Reduction,
) -> Result<LossValue<T>> {
    if logits.rows() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows but {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    targets.validate(logits.cols())?;
    let losses = (0..logits.rows())
        .map(|n| match targets.get(n) {
            None => T::zero(),
            Some(y) => {
                let row = logits.row(n);
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let sum = row.iter().fold(T::zero(), |acc, &z| acc + (z - m).exp());
                (m - row[y]) + sum.ln()
            }
        })
        .collect();
    Ok(reduce_losses(losses, targets, reduction))
}

/// Canonical forward: project, reduce, drop the logits.
pub fn reference_forward<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
    reduction: Reduction,
    ledger: &MemoryLedger,
) -> Result<LossValue<T>> {
    validate_problem(hidden, weight, targets)?;
    let z = project_logits(hidden, weight, ledger)?;
    let _loss_charge = ledger.reserve_elems::<T>(targets.len());
    ce_loss_from_logits(&z, targets, reduction)
}

/// Explicit backward through the materialized softmax.
///
/// The logits buffer is turned into `P` and then into the scaled logit
/// gradient `G = Γ_n (P - onehot)` in place; `∂H = G·W`, `∂W = Gᵀ·H`.
pub fn reference_backward<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
    reduction: Reduction,
    upstream: &UpstreamGradient<T>,
    ledger: &MemoryLedger,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let dims = validate_problem(hidden, weight, targets)?;
    let gamma = effective_gamma(upstream, reduction, targets)?;
    let (n, d, v) = (dims.positions, dims.hidden, dims.vocab);

    let mut g = project_logits(hidden, weight, ledger)?;
    for i in 0..n {
        let row = g.row_mut(i);
        let Some(y) = targets.get(i) else {
            row.fill(T::zero());
            continue;
        };
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for z in row.iter_mut() {
            *z = (*z - m).exp();
            sum = sum + *z;
        }
        for p in row.iter_mut() {
            *p = *p / sum;
        }
        for (j, p) in row.iter_mut().enumerate() {
            let indicator = if j == y { T::one() } else { T::zero() };
            *p = gamma[i] * (*p - indicator);
        }
    }

    let mut dh = DenseMatrix::zeros(n, d);
    let mut dw = DenseMatrix::zeros(v, d);
    // ∂H_i accumulates vocabulary rows in ascending order, ∂W_j positions in
    // ascending order; both walk the weights one vocabulary tile at a time.
    let TileConfig {
        vocab_tile,
        row_panel,
        ..
    } = TileConfig::default();
    let mut coeffs = Vec::with_capacity(row_panel);
    for j0 in (0..v).step_by(vocab_tile) {
        let j1 = (j0 + vocab_tile).min(v);
        let w_tile = &weight.as_slice()[j0 * d..j1 * d];
        for i in 0..n {
            axpy_strided(dh.row_mut(i), &g.row(i)[j0..j1], w_tile, d);
        }
        for i0 in (0..n).step_by(row_panel) {
            let i1 = (i0 + row_panel).min(n);
            let rows: Vec<&[T]> = (i0..i1).map(|i| hidden.row(i)).collect();
            for j in j0..j1 {
                coeffs.clear();
                coeffs.extend((i0..i1).map(|i| g.get(i, j)));
                axpy_rows(dw.row_mut(j), &coeffs, &rows);
            }
        }
    }
    Ok((dh, dw))
}
