//! Randomized equivalence suites shared by the `verify` command and the
//! acceptance tests.
//!
//! Each suite reports the worst error it saw next to its threshold. Matrices
//! are compared relative to the largest reference magnitude, scalars relative
//! to `max(|reference|, 1)`, unless a suite says otherwise.

use std::fmt;

use rand::Rng;

use crate::backward::{
    fused_backward_recompute, fused_forward_with_partial_grads, scalar_gamma_eff,
    scale_partial_grads, UpstreamGradient,
};
use crate::error::{Error, Result};
use crate::forward::{fused_forward, fused_forward_windowed, WindowConfig};
use crate::gen::{derive_seed, rng, InstanceSpec};
use crate::kernel::ExecConfig;
use crate::ledger::MemoryLedger;
use crate::loss::{LossValue, Reduction};
use crate::parallel_sim::{
    dp_split, dp_step, shard, sp_to_tp_gather, target_claims, tp_backward, tp_forward,
    ParallelMode, ShardLayout,
};
use crate::reference::{reference_backward, reference_forward};
use crate::types::{DenseMatrix, Precision, Real, Storage, TargetVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    /// Worst observed error, or the measured quantity for non-error suites.
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn error_bound(name: &'static str, value: f64, limit: f64, detail: String) -> Self {
        Self {
            name,
            value,
            limit,
            // NaN must fail.
            passed: value <= limit,
            detail,
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {} value={:.3e} limit={:.1e}  {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.value,
            self.limit,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn first_failure(&self) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| !s.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub precision: Precision,
    pub seed: u64,
    pub workers: usize,
    /// Extra window size to include in the window sweep.
    pub window: Option<usize>,
    /// 1 runs the default rank sets; anything else runs exactly that count.
    pub ranks: usize,
    pub mode: Option<ParallelMode>,
    pub oracle_instances: usize,
    pub gradient_instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            seed: 42,
            workers: crate::kernel::default_workers(),
            window: None,
            ranks: 1,
            mode: None,
            oracle_instances: 200,
            gradient_instances: 50,
        }
    }
}

/// Thresholds per compute precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub oracle: f64,
    pub path: f64,
    pub window: f64,
    pub shard: f64,
    pub stability: f64,
}

impl Tolerances {
    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::F64 => Self {
                oracle: 1e-10,
                path: 1e-12,
                window: 1e-12,
                shard: 1e-12,
                stability: 1e-10,
            },
            Precision::F32 | Precision::Bf16 => Self {
                oracle: 1e-5,
                path: 1e-6,
                window: 1e-6,
                shard: 1e-6,
                stability: 1e-4,
            },
        }
    }
}

pub const GRADIENT_REFERENCE_TOL: f64 = 1e-10;
pub const FINITE_DIFF_TOL: f64 = 1e-6;
pub const FINITE_DIFF_FLOOR: f64 = 1e-8;

fn f<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `|a - b| / max(|b|, 1)`.
pub fn scalar_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest elementwise difference over the largest reference magnitude.
pub fn matrix_err<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> f64 {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return f64::INFINITY;
    }
    let scale = b.as_slice().iter().fold(0.0f64, |m, &x| m.max(f(x).abs()));
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0f64, |m, (&x, &y)| m.max((f(x) - f(y)).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

fn loss_err<T: Real>(a: &LossValue<T>, b: &LossValue<T>) -> f64 {
    match (a, b) {
        (LossValue::Reduced(x), LossValue::Reduced(y)) => scalar_err(f(*x), f(*y)),
        (LossValue::PerPosition(x), LossValue::PerPosition(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .fold(0.0, |m, (&p, &q)| m.max(scalar_err(f(p), f(q)))),
        _ => f64::INFINITY,
    }
}

fn max_nan(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Run every default suite at the configured precision.
pub fn run(cfg: &VerifyConfig) -> VerifyReport {
    let mut suites = match cfg.precision {
        Precision::F64 => typed_suites::<f64>(cfg),
        Precision::F32 | Precision::Bf16 => typed_suites::<f32>(cfg),
    };
    suites.insert(1, gradient_reference(cfg));
    suites.insert(2, gradient_finite_diff(cfg));
    VerifyReport { suites }
}

fn typed_suites<T: Real>(cfg: &VerifyConfig) -> Vec<SuiteReport> {
    let mut out = vec![
        oracle_loss::<T>(cfg),
        path_equivalence::<T>(cfg),
        window_sweep::<T>(cfg),
    ];
    out.extend(shard_suites::<T>(cfg));
    out.push(stability::<T>(cfg.precision));
    out
}

fn exec(cfg: &VerifyConfig) -> ExecConfig {
    ExecConfig::with_workers(cfg.workers)
}

const REDUCTIONS: [Reduction; 3] = [Reduction::Mean, Reduction::Sum, Reduction::None];

/// A random small problem; `i` selects the reduction and whether targets use
/// the ignore index.
fn random_spec(r: &mut impl Rng, i: usize, max_n: usize, max_d: usize, max_v: usize, storage: Storage) -> InstanceSpec {
    let n = r.gen_range(1..=max_n);
    let d = r.gen_range(1..=max_d);
    let v = r.gen_range(1..=max_v);
    let scale = if r.gen_bool(0.5) { 1.0 } else { 1.0 / (d as f64).sqrt() };
    let ignore = if i % 2 == 1 { 0.25 } else { 0.0 };
    InstanceSpec::new(n, d, v)
        .with_scale(scale)
        .with_ignore_fraction(ignore)
        .with_storage(storage)
}

pub fn oracle_loss<T: Real>(cfg: &VerifyConfig) -> SuiteReport {
    let tol = Tolerances::for_precision(cfg.precision).oracle;
    let exec = exec(cfg);
    let mut worst = 0.0f64;
    let mut failure = None;
    for i in 0..cfg.oracle_instances {
        let mut r = rng(derive_seed(cfg.seed, &[1, i as u64]));
        let spec = random_spec(&mut r, i, 64, 64, 1024, cfg.precision.storage());
        let inst = spec.generate::<T>(&mut r);
        let reduction = REDUCTIONS[i % 3];
        let ledger = MemoryLedger::new();
        let err = match (
            fused_forward(&inst.hidden, &inst.weight, &inst.targets, reduction, &exec, &ledger),
            reference_forward(&inst.hidden, &inst.weight, &inst.targets, reduction, &ledger),
        ) {
            (Ok(a), Ok(b)) => loss_err(&a.loss, &b),
            (Err(e), _) | (_, Err(e)) => {
                failure.get_or_insert(format!("instance {i}: {e}"));
                f64::INFINITY
            }
        };
        worst = max_nan(worst, err);
    }
    let detail = failure.unwrap_or_else(|| {
        format!("{} instances, fused vs reference loss", cfg.oracle_instances)
    });
    SuiteReport::error_bound("oracle_loss", worst, tol, detail)
}

fn random_upstream(r: &mut impl Rng, reduction: Reduction, n: usize) -> UpstreamGradient<f64> {
    match reduction {
        Reduction::None => UpstreamGradient::PerPosition((0..n).map(|_| r.gen_range(-2.0..2.0)).collect()),
        _ => UpstreamGradient::Scalar(r.gen_range(0.25..2.0)),
    }
}

fn gradient_instances(cfg: &VerifyConfig) -> impl Iterator<Item = (usize, crate::gen::Instance<f64>, Reduction, UpstreamGradient<f64>)> + '_ {
    (0..cfg.gradient_instances).map(move |i| {
        let mut r = rng(derive_seed(cfg.seed, &[2, i as u64]));
        let inst = random_spec(&mut r, i, 8, 8, 16, Storage::SameAsCompute).generate::<f64>(&mut r);
        let reduction = REDUCTIONS[i % 3];
        let up = random_upstream(&mut r, reduction, inst.targets.len());
        (i, inst, reduction, up)
    })
}

/// Always F64: fused recompute gradients against the two-stage reference.
pub fn gradient_reference(cfg: &VerifyConfig) -> SuiteReport {
    let exec = exec(cfg);
    let mut worst = 0.0f64;
    let mut failure = None;
    for (i, inst, reduction, up) in gradient_instances(cfg) {
        let ledger = MemoryLedger::new();
        let run = || -> Result<f64> {
            let fwd = fused_forward(&inst.hidden, &inst.weight, &inst.targets, reduction, &exec, &ledger)?;
            let (dh, dw) = fused_backward_recompute(
                &inst.hidden, &inst.weight, &inst.targets, &fwd.stats, &up, reduction, &exec, &ledger,
            )?;
            let (rh, rw) = reference_backward(&inst.hidden, &inst.weight, &inst.targets, reduction, &up, &ledger)?;
            Ok(elementwise_err(&dh, &rh).max(elementwise_err(&dw, &rw)))
        };
        let err = run().unwrap_or_else(|e| {
            failure.get_or_insert(format!("instance {i}: {e}"));
            f64::INFINITY
        });
        worst = max_nan(worst, err);
    }
    let detail = failure.unwrap_or_else(|| {
        format!("{} f64 instances, fused vs reference gradients", cfg.gradient_instances)
    });
    SuiteReport::error_bound("gradient_reference", worst, GRADIENT_REFERENCE_TOL, detail)
}

/// `max_i |a_i - b_i| / max(|b_i|, 1)`.
fn elementwise_err(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (&x, &y)| max_nan(m, scalar_err(x, y)))
}

fn objective(
    h: &DenseMatrix<f64>,
    w: &DenseMatrix<f64>,
    y: &TargetVector,
    reduction: Reduction,
    up: &UpstreamGradient<f64>,
    exec: &ExecConfig,
) -> Result<f64> {
    let out = fused_forward(h, w, y, reduction, exec, &MemoryLedger::new())?;
    Ok(match (&out.loss, up) {
        (LossValue::Reduced(l), UpstreamGradient::Scalar(g)) => g * l,
        (LossValue::PerPosition(ls), UpstreamGradient::PerPosition(gs)) => {
            ls.iter().zip(gs).map(|(l, g)| l * g).sum()
        }
        _ => return Err(Error::InconsistentUpstream("upstream shape does not match reduction".into())),
    })
}

/// Always F64: central differences of the fused objective against the fused
/// backward. An entry passes when `|fd - g| <= 1e-6 * max(|fd|, 1e-2)`, i.e.
/// 1e-6 relative with a 1e-8 absolute floor.
pub fn gradient_finite_diff(cfg: &VerifyConfig) -> SuiteReport {
    const STEP: f64 = 1e-5;
    let exec = exec(cfg);
    let floor = FINITE_DIFF_FLOOR / FINITE_DIFF_TOL;
    let mut worst = 0.0f64;
    let mut failure = None;
    for (i, inst, reduction, up) in gradient_instances(cfg) {
        let run = || -> Result<f64> {
            let ledger = MemoryLedger::new();
            let fwd = fused_forward(&inst.hidden, &inst.weight, &inst.targets, reduction, &exec, &ledger)?;
            let (dh, dw) = fused_backward_recompute(
                &inst.hidden, &inst.weight, &inst.targets, &fwd.stats, &up, reduction, &exec, &ledger,
            )?;
            let mut worst = 0.0f64;
            for which in 0..2 {
                let (base, grad) = if which == 0 { (&inst.hidden, &dh) } else { (&inst.weight, &dw) };
                for k in 0..base.as_slice().len() {
                    let probe = |delta: f64| {
                        let mut m = base.clone();
                        m.as_mut_slice()[k] += delta;
                        let (h, w) = if which == 0 { (&m, &inst.weight) } else { (&inst.hidden, &m) };
                        objective(h, w, &inst.targets, reduction, &up, &exec)
                    };
                    let fd = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
                    let g = grad.as_slice()[k];
                    worst = max_nan(worst, (fd - g).abs() / fd.abs().max(floor));
                }
            }
            Ok(worst)
        };
        let err = run().unwrap_or_else(|e| {
            failure.get_or_insert(format!("instance {i}: {e}"));
            f64::INFINITY
        });
        worst = max_nan(worst, err);
    }
    let detail = failure.unwrap_or_else(|| {
        format!("{} f64 instances, central differences, floor {FINITE_DIFF_FLOOR:e}", cfg.gradient_instances)
    });
    SuiteReport::error_bound("gradient_finite_diff", worst, FINITE_DIFF_TOL, detail)
}

/// Recompute backward vs partial gradients accumulated in the forward pass.
pub fn path_equivalence<T: Real>(cfg: &VerifyConfig) -> SuiteReport {
    let tol = Tolerances::for_precision(cfg.precision).path;
    let exec = exec(cfg);
    let count = cfg.gradient_instances.max(1);
    let mut worst = 0.0f64;
    let mut failure = None;
    for i in 0..count {
        let mut r = rng(derive_seed(cfg.seed, &[3, i as u64]));
        let inst = random_spec(&mut r, i, 64, 64, 1024, cfg.precision.storage()).generate::<T>(&mut r);
        let (h, w, y) = (&inst.hidden, &inst.weight, &inst.targets);
        let reduction = [Reduction::Mean, Reduction::Sum][i % 2];
        let gamma = T::cast(r.gen_range(0.25..2.0));
        let run = || -> Result<f64> {
            let ledger = MemoryLedger::new();
            let fwd = fused_forward(h, w, y, reduction, &exec, &ledger)?;
            let (dh, dw) = fused_backward_recompute(
                h, w, y, &fwd.stats, &UpstreamGradient::Scalar(gamma), reduction, &exec, &ledger,
            )?;
            let partial = fused_forward_with_partial_grads(h, w, y, reduction, &exec, &ledger)?;
            let (ph, pw) = scale_partial_grads(&partial.grads, scalar_gamma_eff(gamma, reduction, y)?);
            Ok(matrix_err(&ph, &dh)
                .max(matrix_err(&pw, &dw))
                .max(loss_err(&partial.loss, &fwd.loss)))
        };
        let err = run().unwrap_or_else(|e| {
            failure.get_or_insert(format!("instance {i}: {e}"));
            f64::INFINITY
        });
        worst = max_nan(worst, err);
    }

    let inst = InstanceSpec::new(3, 4, 5).generate::<T>(&mut rng(cfg.seed));
    let rejected = matches!(
        fused_forward_with_partial_grads(&inst.hidden, &inst.weight, &inst.targets, Reduction::None, &exec, &MemoryLedger::new()),
        Err(Error::UnsupportedReduction(_))
    );
    let mut report = SuiteReport::error_bound(
        "path_equivalence",
        worst,
        tol,
        failure.unwrap_or_else(|| format!("{count} instances, mean and sum; none rejected: {rejected}")),
    );
    report.passed &= rejected;
    report
}

/// Losses for window sizes {1, 3, 16, 128, 256, 257} on a V=257 instance.
pub fn window_sweep<T: Real>(cfg: &VerifyConfig) -> SuiteReport {
    let tol = Tolerances::for_precision(cfg.precision).window;
    let (n, d, v) = (32, 32, 257);
    let exec = exec(cfg);
    let inst = InstanceSpec::benchmark(n, d, v)
        .with_storage(cfg.precision.storage())
        .generate::<T>(&mut rng(derive_seed(cfg.seed, &[4])));
    let (h, w, y) = (&inst.hidden, &inst.weight, &inst.targets);
    let mut windows = vec![1, 3, 16, 128, 256, 257];
    if let Some(extra) = cfg.window.filter(|&x| (1..=v).contains(&x) && !windows.contains(&x)) {
        windows.push(extra);
    }
    let run = || -> Result<(f64, bool)> {
        let ledger = MemoryLedger::new();
        let plain = fused_forward(h, w, y, Reduction::Mean, &exec, &ledger)?;
        let mut worst = 0.0f64;
        let mut bitwise = false;
        for &ws in &windows {
            let out = fused_forward_windowed(h, w, y, Reduction::Mean, &WindowConfig::new(ws, exec), &ledger)?;
            worst = max_nan(worst, loss_err(&out.loss, &plain.loss));
            if ws == v {
                bitwise = out == plain;
            }
        }
        Ok((worst, bitwise))
    };
    match run() {
        Ok((worst, bitwise)) => {
            let mut rep = SuiteReport::error_bound(
                "window_sweep",
                worst,
                tol,
                format!("windows {windows:?}; W=V bitwise identical: {bitwise}"),
            );
            rep.passed &= bitwise;
            rep
        }
        Err(e) => SuiteReport::error_bound("window_sweep", f64::INFINITY, tol, e.to_string()),
    }
}

fn shard_sizes(cfg: &VerifyConfig, default: &[usize]) -> Vec<usize> {
    if cfg.ranks <= 1 {
        default.to_vec()
    } else {
        vec![cfg.ranks]
    }
}

/// TP, SP-then-TP and DP against single-rank execution, filtered by `cfg.mode`.
pub fn shard_suites<T: Real>(cfg: &VerifyConfig) -> Vec<SuiteReport> {
    let tol = Tolerances::for_precision(cfg.precision).shard;
    let exec = exec(cfg);
    let max_r = cfg.ranks.max(4);
    let (n, d, v) = (6 * max_r, 16, (2 * max_r + 1).max(37));
    let storage = cfg.precision.storage();
    let masked = InstanceSpec::benchmark(n, d, v)
        .with_ignore_fraction(0.2)
        .with_storage(storage)
        .generate::<T>(&mut rng(derive_seed(cfg.seed, &[5])));
    let dense = InstanceSpec::benchmark(n, d, v)
        .with_storage(storage)
        .generate::<T>(&mut rng(derive_seed(cfg.seed, &[6])));

    let single = |inst: &crate::gen::Instance<T>| -> Result<(T, DenseMatrix<T>, DenseMatrix<T>)> {
        let ledger = MemoryLedger::new();
        let fwd = fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, &exec, &ledger)?;
        let (dh, dw) = fused_backward_recompute(
            &inst.hidden, &inst.weight, &inst.targets, &fwd.stats, &UpstreamGradient::Scalar(T::one()),
            Reduction::Mean, &exec, &ledger,
        )?;
        Ok((fwd.loss.total(), dh, dw))
    };

    let tp_case = |r: usize, gather: bool| -> Result<(f64, bool)> {
        let (loss0, dh0, dw0) = single(&masked)?;
        let hidden = if gather {
            let layout = ShardLayout::new(ParallelMode::Sequence, n, r)?;
            sp_to_tp_gather(&shard(&masked.hidden, &layout)?)?
        } else {
            masked.hidden.clone()
        };
        let layout = ShardLayout::new(ParallelMode::Tensor, v, r)?;
        let ws = shard(&masked.weight, &layout)?;
        let ledger = MemoryLedger::new();
        let fwd = tp_forward(&hidden, &ws, &masked.targets, Reduction::Mean, &exec, &ledger)?;
        let once = target_claims(&fwd.partials)
            .iter()
            .enumerate()
            .all(|(i, &c)| c == usize::from(masked.targets.get(i).is_some()));
        let g = tp_backward(
            &hidden, &ws, &masked.targets, &fwd.output.stats, &UpstreamGradient::Scalar(T::one()),
            Reduction::Mean, &exec, &ledger,
        )?;
        let err = scalar_err(f(fwd.output.loss.total()), f(loss0))
            .max(matrix_err(&g.dh, &dh0))
            .max(matrix_err(&g.concat_dw(), &dw0));
        Ok((err, once))
    };

    let dp_case = |r: usize| -> Result<(f64, bool)> {
        let (loss0, dh0, dw0) = single(&dense)?;
        let replicas = dp_split(&dense.hidden, &dense.targets, r)?;
        let step = dp_step(&replicas, &dense.weight, Reduction::Mean, &exec, &MemoryLedger::new())?;
        let inv = T::one() / T::cast(r as f64);
        let mut dh = Vec::with_capacity(n * d);
        for m in &step.dh {
            dh.extend(m.as_slice().iter().map(|&x| x * inv));
        }
        let dh = DenseMatrix::from_vec(n, d, dh)?;
        let err = scalar_err(f(step.loss), f(loss0))
            .max(matrix_err(&dh, &dh0))
            .max(matrix_err(&step.dw, &dw0));
        Ok((err, true))
    };

    let mut out = Vec::new();
    let wants = |m: ParallelMode| cfg.mode.is_none_or(|x| x == m);
    let mut collect = |name: &'static str, ranks: Vec<usize>, case: &dyn Fn(usize) -> Result<(f64, bool)>| {
        let mut worst = 0.0f64;
        let mut once_ok = true;
        let mut failure = None;
        for &r in &ranks {
            match case(r) {
                Ok((e, once)) => {
                    worst = max_nan(worst, e);
                    once_ok &= once;
                }
                Err(e) => {
                    worst = f64::INFINITY;
                    failure.get_or_insert(format!("R={r}: {e}"));
                }
            }
        }
        let detail = failure.unwrap_or_else(|| format!("ranks {ranks:?}; target claimed once: {once_ok}"));
        let mut rep = SuiteReport::error_bound(name, worst, tol, detail);
        rep.passed &= once_ok;
        out.push(rep);
    };
    if wants(ParallelMode::Tensor) {
        collect("shard_tp", shard_sizes(cfg, &[1, 2, 3, 4]), &|r| tp_case(r, false));
    }
    if wants(ParallelMode::Sequence) {
        collect("shard_sp", shard_sizes(cfg, &[1, 2, 3, 4]), &|r| tp_case(r, true));
    }
    if wants(ParallelMode::Data) {
        collect("shard_dp", shard_sizes(cfg, &[2]), &dp_case);
    }
    out
}

/// Loss with no max subtraction; overflows once any logit passes ~88 (f32)
/// or ~709 (f64).
pub fn naive_unsafe_loss<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
) -> T {
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..hidden.rows() {
        let Some(t) = targets.get(i) else { continue };
        let mut sum = T::zero();
        let mut zt = T::zero();
        for v in 0..weight.rows() {
            let z = crate::kernel::dot(hidden.row(i), weight.row(v));
            sum = sum + z.exp();
            if v == t {
                zt = z;
            }
        }
        total = total + (sum.ln() - zt);
        count += 1;
    }
    total / T::cast(count.max(1) as f64)
}

/// Instance whose logits are `x_n · w_v + offset`, with every value dyadic so
/// the shifted logits are exact in f32. Returns the shifted instance and the
/// safe-softmax mean loss of the unshifted logits, computed in f64.
pub fn offset_instance<T: Real>(offset: f64) -> (DenseMatrix<T>, DenseMatrix<T>, TargetVector, f64) {
    let (n, v) = (6, 11);
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 - 2.5) / 4.0).collect();
    let ws: Vec<f64> = (0..v).map(|j| ((j * 7 % v) as f64 - 5.0) / 8.0).collect();
    let targets: Vec<usize> = (0..n).map(|i| (3 * i + 1) % v).collect();
    let h = DenseMatrix::from_rows(&xs.iter().map(|&x| vec![T::cast(x), T::one()]).collect::<Vec<_>>())
        .expect("rectangular");
    let w = DenseMatrix::from_rows(&ws.iter().map(|&x| vec![T::cast(x), T::cast(offset)]).collect::<Vec<_>>())
        .expect("rectangular");
    let mut oracle = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let z: Vec<f64> = ws.iter().map(|&w| x * w).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&zj| (zj - m).exp()).sum::<f64>().ln();
        oracle += lse - z[targets[i]];
    }
    (h, w, TargetVector::from_indices(&targets), oracle / n as f64)
}

/// Logits offset by +1e4: the fused loss must stay finite and match the
/// unshifted oracle while the unsafe exponential overflows.
pub fn stability<T: Real>(precision: Precision) -> SuiteReport {
    let tol = Tolerances::for_precision(precision).stability;
    let (h, w, y, oracle) = offset_instance::<T>(1e4);
    let naive = naive_unsafe_loss(&h, &w, &y);
    let fused = fused_forward(&h, &w, &y, Reduction::Mean, &ExecConfig::sequential(), &MemoryLedger::new());
    let (err, finite) = match fused {
        Ok(out) => {
            let l = f(out.loss.total());
            ((l - oracle).abs() / oracle.abs(), l.is_finite())
        }
        Err(_) => (f64::INFINITY, false),
    };
    let naive_overflows = !naive.is_finite();
    let mut rep = SuiteReport::error_bound(
        "stability",
        err,
        tol,
        format!("fused finite: {finite}; unsafe exp overflows: {naive_overflows}"),
    );
    rep.passed &= finite && naive_overflows;
    rep
}

/// Transient peaks of the fused and canonical forward passes at two
/// vocabulary sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryProbe {
    pub vocabs: [usize; 2],
    pub fused_peak: [usize; 2],
    pub canonical_peak: [usize; 2],
}

impl MemoryProbe {
    pub fn canonical_growth(&self) -> f64 {
        self.canonical_peak[1] as f64 / self.canonical_peak[0] as f64
    }
}

pub fn memory_probe(n: usize, d: usize, vocabs: [usize; 2], workers: usize, seed: u64) -> Result<MemoryProbe> {
    let exec = ExecConfig::with_workers(workers);
    let mut fused_peak = [0; 2];
    let mut canonical_peak = [0; 2];
    for (k, &v) in vocabs.iter().enumerate() {
        let inst = InstanceSpec::benchmark(n, d, v).generate::<f32>(&mut rng(derive_seed(seed, &[7, v as u64])));
        let ledger = MemoryLedger::new();
        fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, &exec, &ledger)?;
        fused_peak[k] = ledger.peak_bytes();
        let ledger = MemoryLedger::new();
        reference_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, &ledger)?;
        canonical_peak[k] = ledger.peak_bytes();
    }
    Ok(MemoryProbe {
        vocabs,
        fused_peak,
        canonical_peak,
    })
}
