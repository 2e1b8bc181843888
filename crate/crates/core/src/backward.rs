//! Backward passes for the fused operator.
//!
//! Two routes produce `∂H` and `∂W` without an `N x V` buffer:
//!
//! * [`fused_backward_recompute`] re-derives every logit from `H` and `W`,
//!   turns it into a probability with the cached `(m, a)`, and accumulates
//!   `g_v = Γ_n (p_v - [v = y_n])` into both gradients. Works for any upstream.
//! * [`fused_forward_with_partial_grads`] accumulates the unscaled gradients
//!   during the forward pass; [`scale_partial_grads`] applies a scalar
//!   upstream afterwards. Only valid for scalar (mean/sum) losses.
//!
//! `∂H` rows are owned by exactly one worker. `∂W` is accumulated into one
//! private buffer per worker and the buffers are summed in worker order.

use crate::error::{Error, Result};
use crate::forward::{finish_loss, stats_bytes};
use crate::kernel::{map_ordered, split_ranges, ExecConfig};
use crate::ledger::MemoryLedger;
use crate::loss::{LossValue, Reduction};
use crate::stats::SoftmaxStats;
use crate::sweep::{grad_rows, scan_and_grad_rows, VocabSlice, Worker};
use crate::types::{validate_problem, DenseMatrix, Real, TargetVector};

/// Gradient of the training objective with respect to this operator's loss.
#[derive(Debug, Clone, PartialEq)]
pub enum UpstreamGradient<T> {
    /// For mean or sum reduction.
    Scalar(T),
    /// One value per position, for reduction `None`.
    PerPosition(Vec<T>),
}

/// Per-position scale `Γ_n` folding the upstream gradient and the reduction.
/// Ignored positions get zero.
pub fn effective_gamma<T: Real>(
    upstream: &UpstreamGradient<T>,
    reduction: Reduction,
    targets: &TargetVector,
) -> Result<Vec<T>> {
    let n = targets.len();
    let per: Vec<T> = match (upstream, reduction) {
        (UpstreamGradient::Scalar(g), Reduction::Sum | Reduction::Mean) => {
            vec![scalar_gamma_eff(*g, reduction, targets)?; n]
        }
        (UpstreamGradient::PerPosition(v), Reduction::None) => {
            if v.len() != n {
                return Err(Error::InconsistentUpstream(format!(
                    "{} upstream values for {n} positions",
                    v.len()
                )));
            }
            v.clone()
        }
        (UpstreamGradient::Scalar(_), Reduction::None) => {
            return Err(Error::InconsistentUpstream(
                "reduction none needs a per-position upstream".into(),
            ))
        }
        (UpstreamGradient::PerPosition(_), r) => {
            return Err(Error::InconsistentUpstream(format!(
                "reduction {r} needs a scalar upstream"
            )))
        }
    };
    Ok(per
        .into_iter()
        .enumerate()
        .map(|(i, g)| if targets.get(i).is_some() { g } else { T::zero() })
        .collect())
}

/// Scalar applied to unscaled partial gradients: `γ / N_valid` for mean
/// (zero when every position is ignored), `γ` for sum.
pub fn scalar_gamma_eff<T: Real>(upstream: T, reduction: Reduction, targets: &TargetVector) -> Result<T> {
    match reduction {
        Reduction::Sum => Ok(upstream),
        Reduction::Mean => {
            let valid = targets.valid_count();
            Ok(if valid == 0 {
                T::zero()
            } else {
                upstream / T::cast(valid as f64)
            })
        }
        Reduction::None => Err(Error::UnsupportedReduction("none")),
    }
}

fn check_stats<T: Real>(stats: &[SoftmaxStats<T>], targets: &TargetVector) -> Result<()> {
    if stats.len() != targets.len() {
        return Err(Error::MissingStats {
            expected: targets.len(),
            found: stats.len(),
        });
    }
    for (position, s) in stats.iter().enumerate() {
        if targets.get(position).is_some() && !(s.target_found && s.a > T::zero()) {
            return Err(Error::TargetNotFound { position });
        }
    }
    Ok(())
}

/// Sum per-worker `∂W` buffers in worker order into `out`.
fn merge_dw<T: Real>(out: &mut DenseMatrix<T>, partials: Vec<Vec<T>>) {
    for p in partials {
        for (o, x) in out.as_mut_slice().iter_mut().zip(p) {
            *o = *o + x;
        }
    }
}

/// Backward pass that recomputes logits and uses the forward's cached stats.
#[allow(clippy::too_many_arguments)]
pub fn fused_backward_recompute<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
    stats: &[SoftmaxStats<T>],
    upstream: &UpstreamGradient<T>,
    reduction: Reduction,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let dims = validate_problem(hidden, weight, targets)?;
    exec.validate()?;
    check_stats(stats, targets)?;
    let _gamma_charge = ledger.reserve_elems::<T>(dims.positions);
    let gamma = effective_gamma(upstream, reduction, targets)?;
    let vocab = VocabSlice::of(weight, 0..dims.vocab);
    Ok(backward_over(hidden, vocab, targets, stats, &gamma, exec, ledger))
}

/// Shared driver: gradients for all positions against the weight rows in `vocab`.
/// Returns `∂H` (N x d) and `∂W` restricted to `vocab` (len x d).
pub(crate) fn backward_over<T: Real>(
    hidden: &DenseMatrix<T>,
    vocab: VocabSlice<'_, T>,
    targets: &TargetVector,
    stats: &[SoftmaxStats<T>],
    gamma: &[T],
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> (DenseMatrix<T>, DenseMatrix<T>) {
    let (n, d) = (hidden.rows(), hidden.cols());
    let mut dh = DenseMatrix::zeros(n, d);
    let mut dw = DenseMatrix::zeros(vocab.len, d);
    let chunks = split_ranges(n, exec.workers);
    let tiles = &exec.tiles;
    let _scratch_charge = ledger.reserve(chunks.len() * Worker::<T>::bytes(tiles));

    if chunks.len() <= 1 {
        if let Some(range) = chunks.into_iter().next() {
            let mut worker = Worker::new(tiles);
            grad_rows(
                hidden, range, vocab, targets, stats, gamma, tiles,
                dh.as_mut_slice(), dw.as_mut_slice(), &mut worker,
            );
        }
        return (dh, dw);
    }

    let _partials_charge = ledger.reserve_elems::<T>(chunks.len() * vocab.len * d);
    let mut jobs = Vec::with_capacity(chunks.len());
    let mut rest = dh.as_mut_slice();
    for range in chunks {
        let (head, tail) = rest.split_at_mut(range.len() * d);
        rest = tail;
        jobs.push((range, head));
    }
    let partials = map_ordered(jobs, |(range, dh_rows)| {
        let mut worker = Worker::new(tiles);
        let mut local = vec![T::zero(); vocab.len * d];
        grad_rows(
            hidden, range, vocab, targets, stats, gamma, tiles, dh_rows, &mut local, &mut worker,
        );
        local
    });
    merge_dw(&mut dw, partials);
    (dh, dw)
}

/// Gradients accumulated during the forward pass, not yet scaled by any
/// upstream factor: row `n` of `dh` is `Σ_v (p_v - [v = y_n]) W_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialGradients<T> {
    pub dh: DenseMatrix<T>,
    pub dw: DenseMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialForward<T> {
    pub loss: LossValue<T>,
    pub grads: PartialGradients<T>,
    pub stats: Vec<SoftmaxStats<T>>,
}

/// Forward pass that also accumulates the unscaled gradients.
pub fn fused_forward_with_partial_grads<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
    reduction: Reduction,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<PartialForward<T>> {
    if reduction == Reduction::None {
        return Err(Error::UnsupportedReduction("none"));
    }
    let dims = validate_problem(hidden, weight, targets)?;
    exec.validate()?;
    let (n, d, v) = (dims.positions, dims.hidden, dims.vocab);
    let tiles = &exec.tiles;

    let _cache_charge = ledger.reserve(n * stats_bytes::<T>());
    let mut stats = vec![SoftmaxStats::identity(); n];
    let _unit_charge = ledger.reserve_elems::<T>(n);
    let unit = vec![T::one(); n];
    let vocab = VocabSlice::of(weight, 0..v);

    let mut dh = DenseMatrix::zeros(n, d);
    let mut dw = DenseMatrix::zeros(v, d);
    let chunks = split_ranges(n, exec.workers);
    let _scratch_charge = ledger.reserve(chunks.len() * Worker::<T>::bytes(tiles));
    let partial_count = if chunks.len() > 1 { chunks.len() } else { 0 };
    let _partials_charge = ledger.reserve_elems::<T>(partial_count * v * d);

    let mut jobs = Vec::with_capacity(chunks.len());
    let mut stats_rest = stats.as_mut_slice();
    let mut dh_rest = dh.as_mut_slice();
    for range in chunks {
        let (s_head, s_tail) = stats_rest.split_at_mut(range.len());
        let (h_head, h_tail) = dh_rest.split_at_mut(range.len() * d);
        stats_rest = s_tail;
        dh_rest = h_tail;
        jobs.push((range, s_head, h_head));
    }
    if partial_count == 0 {
        for (range, out, dh_rows) in jobs {
            let mut worker = Worker::new(tiles);
            scan_and_grad_rows(
                hidden, range, vocab, targets, &unit, tiles, out, dh_rows,
                dw.as_mut_slice(), &mut worker,
            );
        }
    } else {
        let partials = map_ordered(jobs, |(range, out, dh_rows)| {
            let mut worker = Worker::new(tiles);
            let mut local = vec![T::zero(); v * d];
            scan_and_grad_rows(
                hidden, range, vocab, targets, &unit, tiles, out, dh_rows, &mut local, &mut worker,
            );
            local
        });
        merge_dw(&mut dw, partials);
    }

    let loss = finish_loss(&stats, targets, reduction, ledger)?;
    Ok(PartialForward {
        loss,
        grads: PartialGradients { dh, dw },
        stats,
    })
}

/// Final gradients from partial ones and a scalar upstream.
pub fn scale_partial_grads<T: Real>(
    grads: &PartialGradients<T>,
    gamma_eff: T,
) -> (DenseMatrix<T>, DenseMatrix<T>) {
    let scale = |m: &DenseMatrix<T>| {
        let data = m.as_slice().iter().map(|&x| gamma_eff * x).collect();
        DenseMatrix::from_vec(m.rows(), m.cols(), data).expect("same shape")
    };
    (scale(&grads.dh), scale(&grads.dw))
}
