//! In-process simulation of data, tensor and sequence parallel execution.
//!
//! Ranks are plain values: each rank computes on its own slice and publishes
//! an immutable partial result, and the epilogue reduces the partials in rank
//! order. Tensor parallelism shards the vocabulary (rows of `W`), sequence
//! parallelism shards positions (rows of `H`) and is gathered back into a
//! tensor-parallel layout, data parallelism replicates `W` over micro-batches.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::backward::{backward_over, effective_gamma, fused_backward_recompute, UpstreamGradient};
use crate::error::{Error, Result};
use crate::forward::{finish_loss, fused_forward, stats_bytes, FusedOutput};
use crate::kernel::{map_ordered, split_ranges, ExecConfig};
use crate::ledger::MemoryLedger;
use crate::loss::Reduction;
use crate::stats::{merge_at, SoftmaxStats};
use crate::sweep::{scan_rows, VocabSlice, Worker};
use crate::types::{DenseMatrix, Real, TargetVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParallelMode {
    Data,
    Tensor,
    Sequence,
}

impl fmt::Display for ParallelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParallelMode::Data => "dp",
            ParallelMode::Tensor => "tp",
            ParallelMode::Sequence => "sp",
        })
    }
}

impl FromStr for ParallelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dp" => Ok(ParallelMode::Data),
            "tp" => Ok(ParallelMode::Tensor),
            "sp" => Ok(ParallelMode::Sequence),
            other => Err(Error::InvalidConfig(format!("unknown parallel mode '{other}'"))),
        }
    }
}

/// Partition of one axis (vocabulary for TP, positions for SP/DP) over ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLayout {
    mode: ParallelMode,
    axis_len: usize,
    ranges: Vec<Range<usize>>,
}

impl ShardLayout {
    /// Even split; the first `axis_len % ranks` ranks get one extra row.
    pub fn new(mode: ParallelMode, axis_len: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 || ranks > axis_len {
            return Err(Error::InvalidLayout(format!(
                "{ranks} ranks over an axis of length {axis_len}"
            )));
        }
        Self::from_ranges(mode, axis_len, split_ranges(axis_len, ranks))
    }

    pub fn from_ranges(mode: ParallelMode, axis_len: usize, ranges: Vec<Range<usize>>) -> Result<Self> {
        let layout = Self {
            mode,
            axis_len,
            ranges,
        };
        check_ranges(layout.ranges.iter().cloned(), axis_len)?;
        Ok(layout)
    }

    pub fn mode(&self) -> ParallelMode {
        self.mode
    }

    pub fn axis_len(&self) -> usize {
        self.axis_len
    }

    pub fn rank_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

fn check_ranges(ranges: impl Iterator<Item = Range<usize>>, axis_len: usize) -> Result<()> {
    let mut expect = 0;
    let mut count = 0;
    for (rank, r) in ranges.enumerate() {
        count += 1;
        if r.is_empty() {
            return Err(Error::InvalidLayout(format!("rank {rank} has an empty range")));
        }
        if r.start < expect {
            return Err(Error::InvalidLayout(format!("rank {rank} overlaps its predecessor")));
        }
        if r.start > expect {
            return Err(Error::InvalidLayout(format!("gap before rank {rank}")));
        }
        expect = r.end;
    }
    if count == 0 {
        return Err(Error::InvalidLayout("no ranks".into()));
    }
    if expect != axis_len {
        return Err(Error::InvalidLayout(format!(
            "ranges cover [0, {expect}) but the axis has length {axis_len}"
        )));
    }
    Ok(())
}

/// One rank's slice: rows `range` of the sharded matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard<T> {
    pub rank: usize,
    pub range: Range<usize>,
    pub data: DenseMatrix<T>,
}

/// Slice the rows of `matrix` per `layout`: `W` for TP, `H` for SP and DP.
pub fn shard<T: Real>(matrix: &DenseMatrix<T>, layout: &ShardLayout) -> Result<Vec<Shard<T>>> {
    if matrix.rows() != layout.axis_len {
        return Err(Error::InvalidLayout(format!(
            "layout covers {} rows but the matrix has {}",
            layout.axis_len,
            matrix.rows()
        )));
    }
    Ok(layout
        .ranges
        .iter()
        .enumerate()
        .map(|(rank, r)| Shard {
            rank,
            range: r.clone(),
            data: matrix.slice_rows(r.clone()),
        })
        .collect())
}

fn check_shards<T: Real>(shards: &[Shard<T>]) -> Result<usize> {
    let axis = shards.last().map_or(0, |s| s.range.end);
    check_ranges(shards.iter().map(|s| s.range.clone()), axis)?;
    let cols = shards[0].data.cols();
    for s in shards {
        if s.data.rows() != s.range.len() || s.data.cols() != cols {
            return Err(Error::InvalidLayout(format!(
                "rank {} holds a {}x{} slice for range {:?}",
                s.rank,
                s.data.rows(),
                s.data.cols(),
                s.range
            )));
        }
    }
    Ok(axis)
}

/// Statistics a TP rank publishes for every position over its vocabulary shard.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPartial<T> {
    pub rank: usize,
    pub stats: Vec<SoftmaxStats<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpForward<T> {
    pub output: FusedOutput<T>,
    pub partials: Vec<RankPartial<T>>,
}

/// How many ranks captured the target logit, per position.
pub fn target_claims<T>(partials: &[RankPartial<T>]) -> Vec<usize> {
    let n = partials.first().map_or(0, |p| p.stats.len());
    (0..n)
        .map(|i| partials.iter().filter(|p| p.stats[i].target_found).count())
        .collect()
}

/// Tensor-parallel forward: every rank streams its vocabulary shard, then the
/// per-position stats are merged in rank order and broadcast as the cache.
pub fn tp_forward<T: Real>(
    hidden: &DenseMatrix<T>,
    w_shards: &[Shard<T>],
    targets: &TargetVector,
    reduction: Reduction,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<TpForward<T>> {
    if w_shards.is_empty() {
        return Err(Error::InvalidLayout("no ranks".into()));
    }
    let vocab = check_shards(w_shards)?;
    exec.validate()?;
    check_hidden(hidden, &w_shards[0].data, targets, vocab)?;
    let n = hidden.rows();
    let tiles = &exec.tiles;

    let chunks = split_ranges(n, exec.workers);
    let _messages = ledger.reserve(w_shards.len() * n * stats_bytes::<T>());
    let _scratch =
        ledger.reserve(w_shards.len() * chunks.len() * Worker::<T>::bytes(tiles));
    let partials = map_ordered(w_shards.iter().collect(), |s| {
        let mut stats = vec![SoftmaxStats::identity(); n];
        let slice = VocabSlice::shard(&s.data, s.range.start);
        let mut rest = stats.as_mut_slice();
        for range in &chunks {
            let (head, tail) = rest.split_at_mut(range.len());
            rest = tail;
            let mut worker = Worker::new(tiles);
            scan_rows(hidden, range.clone(), slice, targets, tiles, head, &mut worker);
        }
        RankPartial {
            rank: s.rank,
            stats,
        }
    });

    let _cache = ledger.reserve(n * stats_bytes::<T>());
    let mut merged = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = partials[0].stats[i];
        for p in &partials[1..] {
            acc = merge_at(&acc, &p.stats[i], i)?;
        }
        merged.push(acc);
    }
    let loss = finish_loss(&merged, targets, reduction, ledger)?;
    Ok(TpForward {
        output: FusedOutput {
            loss,
            stats: merged,
        },
        partials,
    })
}

fn check_hidden<T: Real>(
    hidden: &DenseMatrix<T>,
    any_weight: &DenseMatrix<T>,
    targets: &TargetVector,
    vocab: usize,
) -> Result<()> {
    if hidden.cols() != any_weight.cols() {
        return Err(Error::DimensionMismatch(format!(
            "hidden states have {} columns, weight shards have {}",
            hidden.cols(),
            any_weight.cols()
        )));
    }
    if hidden.rows() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} hidden rows but {} targets",
            hidden.rows(),
            targets.len()
        )));
    }
    targets.validate(vocab)
}

/// Reassemble `H` from sequence-parallel slices, in rank order.
pub fn sp_to_tp_gather<T: Real>(h_shards: &[Shard<T>]) -> Result<DenseMatrix<T>> {
    if h_shards.is_empty() {
        return Err(Error::InvalidLayout("no ranks".into()));
    }
    let n = check_shards(h_shards)?;
    let d = h_shards[0].data.cols();
    let mut data = Vec::with_capacity(n * d);
    for s in h_shards {
        data.extend_from_slice(s.data.as_slice());
    }
    Ok(DenseMatrix::from_vec(n, d, data)?.with_storage(h_shards[0].data.storage()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpGradients<T> {
    /// Rank-ordered sum of every rank's contribution.
    pub dh: DenseMatrix<T>,
    /// Gradient of each rank's weight shard.
    pub dw_shards: Vec<DenseMatrix<T>>,
}

impl<T: Real> TpGradients<T> {
    /// Stack the shard gradients back into a `V x d` matrix.
    pub fn concat_dw(&self) -> DenseMatrix<T> {
        let d = self.dh.cols();
        let rows = self.dw_shards.iter().map(DenseMatrix::rows).sum();
        let data = self.dw_shards.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        DenseMatrix::from_vec(rows, d, data).expect("shards share the hidden width")
    }
}

/// Tensor-parallel backward using the merged stats broadcast by [`tp_forward`].
#[allow(clippy::too_many_arguments)]
pub fn tp_backward<T: Real>(
    hidden: &DenseMatrix<T>,
    w_shards: &[Shard<T>],
    targets: &TargetVector,
    merged_stats: &[SoftmaxStats<T>],
    upstream: &UpstreamGradient<T>,
    reduction: Reduction,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<TpGradients<T>> {
    if w_shards.is_empty() {
        return Err(Error::InvalidLayout("no ranks".into()));
    }
    let vocab = check_shards(w_shards)?;
    exec.validate()?;
    check_hidden(hidden, &w_shards[0].data, targets, vocab)?;
    if merged_stats.len() != hidden.rows() {
        return Err(Error::MissingStats {
            expected: hidden.rows(),
            found: merged_stats.len(),
        });
    }
    for (position, s) in merged_stats.iter().enumerate() {
        if targets.get(position).is_some() && !(s.target_found && s.a > T::zero()) {
            return Err(Error::TargetNotFound { position });
        }
    }
    let _gamma_charge = ledger.reserve_elems::<T>(hidden.rows());
    let gamma = effective_gamma(upstream, reduction, targets)?;
    let _messages = ledger.reserve_elems::<T>(w_shards.len() * hidden.rows() * hidden.cols());
    let per_rank = map_ordered(w_shards.iter().collect(), |s| {
        let slice = VocabSlice::shard(&s.data, s.range.start);
        backward_over(hidden, slice, targets, merged_stats, &gamma, exec, ledger)
    });

    let mut dw_shards = Vec::with_capacity(per_rank.len());
    let mut dh: Option<DenseMatrix<T>> = None;
    for (dh_r, dw_r) in per_rank {
        dw_shards.push(dw_r);
        dh = Some(match dh {
            None => dh_r,
            Some(mut acc) => {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(dh_r.as_slice()) {
                    *a = *a + *b;
                }
                acc
            }
        });
    }
    Ok(TpGradients {
        dh: dh.expect("at least one rank"),
        dw_shards,
    })
}

/// One data-parallel micro-batch.
#[derive(Debug, Clone)]
pub struct Replica<T> {
    pub hidden: DenseMatrix<T>,
    pub targets: TargetVector,
}

/// Split a batch into equal micro-batches, one per data-parallel rank.
pub fn dp_split<T: Real>(
    hidden: &DenseMatrix<T>,
    targets: &TargetVector,
    ranks: usize,
) -> Result<Vec<Replica<T>>> {
    if ranks == 0 || hidden.rows() % ranks != 0 {
        return Err(Error::InvalidLayout(format!(
            "{} positions do not split evenly over {ranks} replicas",
            hidden.rows()
        )));
    }
    let layout = ShardLayout::new(ParallelMode::Data, hidden.rows(), ranks)?;
    Ok(shard(hidden, &layout)?
        .into_iter()
        .map(|s| Replica {
            targets: targets.slice(s.range.clone()),
            hidden: s.data,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpStep<T> {
    /// Mean of the replica losses.
    pub loss: T,
    pub rank_losses: Vec<T>,
    /// Mean of the replica weight gradients.
    pub dw: DenseMatrix<T>,
    /// Each replica's hidden-state gradient.
    pub dh: Vec<DenseMatrix<T>>,
}

/// One data-parallel step: independent fused forward + backward per replica,
/// then a rank-ordered mean of losses and weight gradients.
pub fn dp_step<T: Real>(
    replicas: &[Replica<T>],
    weight: &DenseMatrix<T>,
    reduction: Reduction,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<DpStep<T>> {
    let first = replicas
        .first()
        .ok_or_else(|| Error::InvalidLayout("no replicas".into()))?;
    if replicas.iter().any(|r| r.hidden.rows() != first.hidden.rows()) {
        return Err(Error::InvalidLayout(
            "replicas must hold equal-size micro-batches".into(),
        ));
    }
    if reduction == Reduction::None {
        return Err(Error::UnsupportedReduction("none"));
    }
    let mut rank_losses = Vec::with_capacity(replicas.len());
    let mut dh = Vec::with_capacity(replicas.len());
    let mut dw_sum: Option<DenseMatrix<T>> = None;
    for r in replicas {
        let fwd = fused_forward(&r.hidden, weight, &r.targets, reduction, exec, ledger)?;
        let (dh_r, dw_r) = fused_backward_recompute(
            &r.hidden,
            weight,
            &r.targets,
            &fwd.stats,
            &UpstreamGradient::Scalar(T::one()),
            reduction,
            exec,
            ledger,
        )?;
        rank_losses.push(fwd.loss.total());
        dh.push(dh_r);
        dw_sum = Some(match dw_sum {
            None => dw_r,
            Some(mut acc) => {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(dw_r.as_slice()) {
                    *a = *a + *b;
                }
                acc
            }
        });
    }
    let ranks = T::cast(replicas.len() as f64);
    let mut dw = dw_sum.expect("at least one replica");
    for x in dw.as_mut_slice() {
        *x = *x / ranks;
    }
    let loss = rank_losses.iter().fold(T::zero(), |a, &b| a + b) / ranks;
    Ok(DpStep {
        loss,
        rank_losses,
        dw,
        dh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{rng, InstanceSpec};

    #[test]
    fn layouts_ceil_first() {
        let tp = ShardLayout::new(ParallelMode::Tensor, 8, 2).unwrap();
        assert_eq!(tp.ranges(), &[0..4, 4..8]);
        let tp = ShardLayout::new(ParallelMode::Tensor, 7, 2).unwrap();
        assert_eq!(tp.ranges(), &[0..4, 4..7]);
        let sp = ShardLayout::new(ParallelMode::Sequence, 5, 5).unwrap();
        assert_eq!(sp.ranges(), &[0..1, 1..2, 2..3, 3..4, 4..5]);
    }

    #[test]
    fn invalid_layouts_rejected() {
        use ParallelMode::Tensor;
        assert!(ShardLayout::new(Tensor, 3, 4).is_err());
        assert!(ShardLayout::new(Tensor, 3, 0).is_err());
        for ranges in [vec![0..2, 2..2, 2..4], vec![0..3, 2..4], vec![0..1, 2..4], vec![0..3]] {
            assert!(matches!(
                ShardLayout::from_ranges(Tensor, 4, ranges),
                Err(Error::InvalidLayout(_))
            ));
        }
    }

    #[test]
    fn gather_round_trip() {
        let inst = InstanceSpec::new(7, 3, 4).generate::<f32>(&mut rng(1));
        for r in [1, 2, 3, 7] {
            let layout = ShardLayout::new(ParallelMode::Sequence, 7, r).unwrap();
            let parts = shard(&inst.hidden, &layout).unwrap();
            assert_eq!(sp_to_tp_gather(&parts).unwrap(), inst.hidden);
        }
        let layout = ShardLayout::new(ParallelMode::Sequence, 7, 3).unwrap();
        let mut parts = shard(&inst.hidden, &layout).unwrap();
        parts.swap(0, 1);
        assert!(sp_to_tp_gather(&parts).is_err());
    }

    #[test]
    fn tp_single_rank_is_plain_fused() {
        let inst = InstanceSpec::new(9, 6, 20).generate::<f32>(&mut rng(2));
        let exec = ExecConfig::with_workers(2);
        let layout = ShardLayout::new(ParallelMode::Tensor, 20, 1).unwrap();
        let ws = shard(&inst.weight, &layout).unwrap();
        let ledger = MemoryLedger::new();
        let tp = tp_forward(&inst.hidden, &ws, &inst.targets, Reduction::Mean, &exec, &ledger).unwrap();
        let plain = fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, &exec, &ledger).unwrap();
        assert_eq!(tp.output, plain);
        let up = UpstreamGradient::Scalar(1.0);
        let g = tp_backward(&inst.hidden, &ws, &inst.targets, &tp.output.stats, &up, Reduction::Mean, &exec, &ledger).unwrap();
        let (dh, dw) = fused_backward_recompute(&inst.hidden, &inst.weight, &inst.targets, &plain.stats, &up, Reduction::Mean, &exec, &ledger)
            .unwrap();
        assert_eq!(g.dh, dh);
        assert_eq!(g.concat_dw(), dw);
        assert_eq!(ledger.current_bytes(), 0);
    }

    #[test]
    fn tp_target_in_last_slot_claimed_once() {
        let mut inst = InstanceSpec::new(3, 4, 10).generate::<f64>(&mut rng(3));
        inst.targets = TargetVector::from_indices(&[9, 9, 0]);
        let layout = ShardLayout::new(ParallelMode::Tensor, 10, 3).unwrap();
        let ws = shard(&inst.weight, &layout).unwrap();
        let exec = ExecConfig::sequential();
        let tp = tp_forward(&inst.hidden, &ws, &inst.targets, Reduction::Sum, &exec, &MemoryLedger::new()).unwrap();
        assert_eq!(target_claims(&tp.partials), vec![1, 1, 1]);
        assert!(tp.partials[2].stats[0].target_found);
        let plain = fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Sum, &exec, &MemoryLedger::new()).unwrap();
        let (a, b) = (tp.output.loss.total(), plain.loss.total());
        assert!((a - b).abs() < 1e-12 * b.abs());
    }

    #[test]
    fn tp_overlapping_shards_rejected() {
        let inst = InstanceSpec::new(2, 2, 6).generate::<f64>(&mut rng(4));
        let ws = vec![
            Shard { rank: 0, range: 0..4, data: inst.weight.slice_rows(0..4) },
            Shard { rank: 1, range: 2..6, data: inst.weight.slice_rows(2..6) },
        ];
        let r = tp_forward(&inst.hidden, &ws, &inst.targets, Reduction::Sum, &ExecConfig::sequential(), &MemoryLedger::new());
        assert!(matches!(r, Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn tp_backward_zero_upstream() {
        let inst = InstanceSpec::new(4, 3, 8).generate::<f64>(&mut rng(5));
        let layout = ShardLayout::new(ParallelMode::Tensor, 8, 2).unwrap();
        let ws = shard(&inst.weight, &layout).unwrap();
        let exec = ExecConfig::sequential();
        let ledger = MemoryLedger::new();
        let tp = tp_forward(&inst.hidden, &ws, &inst.targets, Reduction::Sum, &exec, &ledger).unwrap();
        let g = tp_backward(&inst.hidden, &ws, &inst.targets, &tp.output.stats, &UpstreamGradient::Scalar(0.0), Reduction::Sum, &exec, &ledger)
            .unwrap();
        assert!(g.dh.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.dw_shards.iter().all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
        let r = tp_backward(&inst.hidden, &ws, &inst.targets, &tp.output.stats[..3], &UpstreamGradient::Scalar(1.0), Reduction::Sum, &exec, &ledger);
        assert!(matches!(r, Err(Error::MissingStats { .. })));
    }

    #[test]
    fn dp_single_replica_is_plain() {
        let inst = InstanceSpec::new(6, 4, 11).generate::<f64>(&mut rng(6));
        let exec = ExecConfig::sequential();
        let ledger = MemoryLedger::new();
        let reps = dp_split(&inst.hidden, &inst.targets, 1).unwrap();
        let step = dp_step(&reps, &inst.weight, Reduction::Mean, &exec, &ledger).unwrap();
        let fwd = fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, &exec, &ledger).unwrap();
        let (_, dw) = fused_backward_recompute(&inst.hidden, &inst.weight, &inst.targets, &fwd.stats, &UpstreamGradient::Scalar(1.0), Reduction::Mean, &exec, &ledger)
            .unwrap();
        assert_eq!(step.loss, fwd.loss.total());
        assert_eq!(step.dw, dw);
    }

    #[test]
    fn dp_rejects_unequal_and_none() {
        let inst = InstanceSpec::new(5, 2, 3).generate::<f64>(&mut rng(7));
        assert!(dp_split(&inst.hidden, &inst.targets, 2).is_err());
        let reps = vec![
            Replica { hidden: inst.hidden.slice_rows(0..2), targets: inst.targets.slice(0..2) },
            Replica { hidden: inst.hidden.slice_rows(2..5), targets: inst.targets.slice(2..5) },
        ];
        let exec = ExecConfig::sequential();
        assert!(matches!(
            dp_step(&reps, &inst.weight, Reduction::Mean, &exec, &MemoryLedger::new()),
            Err(Error::InvalidLayout(_))
        ));
        let reps = dp_split(&inst.hidden.slice_rows(0..4), &inst.targets.slice(0..4), 2).unwrap();
        assert!(dp_step(&reps, &inst.weight, Reduction::None, &exec, &MemoryLedger::new()).is_err());
    }

    #[test]
    fn dp_all_ignored_replica_halves_first() {
        let inst = InstanceSpec::new(4, 3, 7).generate::<f64>(&mut rng(8));
        let exec = ExecConfig::sequential();
        let first = Replica { hidden: inst.hidden.slice_rows(0..2), targets: inst.targets.slice(0..2) };
        let masked = Replica {
            hidden: inst.hidden.slice_rows(2..4),
            targets: TargetVector::new(vec![-100, -100]).with_ignore_index(-100),
        };
        let solo = dp_step(std::slice::from_ref(&first), &inst.weight, Reduction::Mean, &exec, &MemoryLedger::new()).unwrap();
        let pair = dp_step(&[first, masked], &inst.weight, Reduction::Mean, &exec, &MemoryLedger::new()).unwrap();
        assert_eq!(pair.rank_losses[1], 0.0);
        assert!((pair.loss - solo.loss / 2.0).abs() < 1e-15);
        for (a, b) in pair.dw.as_slice().iter().zip(solo.dw.as_slice()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }
}
