//! Latency and ledger-accounted memory measurements over a `(B·T, V)` grid.
//!
//! Every case generates its instance from the sweep seed and the grid point
//! only, so all methods at one point see the same data and repeated sweeps are
//! reproducible. Memory figures come from a [`MemoryLedger`] that the case
//! charges for the buffers a training step would hold: the method's own
//! transients plus the gradient outputs and the cached softmax statistics.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::backward::{
    fused_backward_recompute, fused_forward_with_partial_grads, scalar_gamma_eff,
    scale_partial_grads, UpstreamGradient,
};
use crate::error::{Error, Result};
use crate::forward::{fused_forward, fused_forward_windowed, stats_bytes, WindowConfig};
use crate::gen::{derive_seed, rng, InstanceSpec};
use crate::kernel::ExecConfig;
use crate::ledger::MemoryLedger;
use crate::loss::Reduction;
use crate::reference::{reference_backward, reference_forward};
use crate::types::{Precision, Real, TargetVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Canonical,
    Fused,
    FusedWindowed,
    FusedPartialGrad,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Canonical,
        Method::Fused,
        Method::FusedWindowed,
        Method::FusedPartialGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Canonical => "canonical",
            Method::Fused => "fused",
            Method::FusedWindowed => "fused_windowed",
            Method::FusedPartialGrad => "fused_partial_grad",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Method::Canonical => "Canonical",
            Method::Fused => "Fused",
            Method::FusedWindowed => "Fused (windowed)",
            Method::FusedPartialGrad => "Fused (partial grad)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    PlotData,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            "plotdata" => Ok(Format::PlotData),
            other => Err(Error::InvalidConfig(format!("unknown format '{other}'"))),
        }
    }
}

/// One grid point and method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseConfig {
    pub bt: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub method: Method,
    pub precision: Precision,
    pub reduction: Reduction,
    /// `None` means one window spanning the whole vocabulary.
    pub window_size: Option<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub workers: usize,
    /// Skip the backward pass. The partial-gradient method still produces
    /// its gradients, since that is part of its forward.
    pub forward_only: bool,
}

impl CaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bt == 0 || self.vocab == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "bt, vocab and hidden must be positive (got {}, {}, {})",
                self.bt, self.vocab, self.hidden
            )));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be at least 1".into()));
        }
        if self.window_size == Some(0) {
            return Err(Error::InvalidConfig("window size must be positive".into()));
        }
        ExecConfig::with_workers(self.workers).validate()
    }

    fn window(&self) -> usize {
        self.window_size.unwrap_or(self.vocab).min(self.vocab)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub bt_values: Vec<usize>,
    pub vocab_values: Vec<usize>,
    pub hidden: usize,
    pub methods: Vec<Method>,
    pub precision: Precision,
    pub reduction: Reduction,
    pub window_size: Option<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub workers: usize,
    pub forward_only: bool,
}

impl Default for BenchConfig {
    /// The desk-scale grid.
    fn default() -> Self {
        Self {
            bt_values: vec![1024, 4096],
            vocab_values: vec![8192, 32768],
            hidden: 256,
            methods: vec![Method::Canonical, Method::Fused],
            precision: Precision::F32,
            reduction: Reduction::Mean,
            window_size: None,
            repeats: 5,
            warmup: 2,
            seed: 42,
            workers: crate::kernel::default_workers(),
            forward_only: false,
        }
    }
}

impl BenchConfig {
    /// Grid points in sweep order: `bt` outermost, then `vocab`, then method.
    pub fn cases(&self) -> Result<Vec<CaseConfig>> {
        if self.bt_values.is_empty() {
            return Err(Error::EmptyGrid("bt"));
        }
        if self.vocab_values.is_empty() {
            return Err(Error::EmptyGrid("vocab"));
        }
        if self.methods.is_empty() {
            return Err(Error::EmptyGrid("method"));
        }
        let mut out = Vec::new();
        for &bt in &self.bt_values {
            for &vocab in &self.vocab_values {
                for &method in &self.methods {
                    let case = CaseConfig {
                        bt,
                        vocab,
                        hidden: self.hidden,
                        method,
                        precision: self.precision,
                        reduction: self.reduction,
                        window_size: self.window_size,
                        repeats: self.repeats,
                        warmup: self.warmup,
                        seed: self.seed,
                        workers: self.workers,
                        forward_only: self.forward_only,
                    };
                    case.validate()?;
                    out.push(case);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub bt: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub method: Method,
    pub precision: Precision,
    pub window_size: usize,
    pub workers: usize,
    /// Median over the timed repeats.
    pub latency_s: f64,
    pub latency_min_s: f64,
    pub latency_max_s: f64,
    pub aux_peak_bytes: usize,
    pub loss: f64,
}

/// Run one case: `warmup` discarded runs, then `repeats` timed ones.
pub fn run_case(case: &CaseConfig) -> Result<BenchRecord> {
    case.validate()?;
    match case.precision {
        Precision::F64 => run_typed::<f64>(case),
        Precision::F32 | Precision::Bf16 => run_typed::<f32>(case),
    }
}

fn run_typed<T: Real>(case: &CaseConfig) -> Result<BenchRecord> {
    let seed = derive_seed(case.seed, &[case.bt as u64, case.vocab as u64, case.hidden as u64]);
    let inst = InstanceSpec::benchmark(case.bt, case.hidden, case.vocab)
        .with_storage(case.precision.storage())
        .generate::<T>(&mut rng(seed));
    let exec = ExecConfig::with_workers(case.workers);

    for _ in 0..case.warmup {
        step(case, &inst, &exec, &MemoryLedger::new())?;
    }
    let mut times = Vec::with_capacity(case.repeats);
    let mut peak = 0;
    let mut loss = T::zero();
    for _ in 0..case.repeats {
        let ledger = MemoryLedger::new();
        let start = Instant::now();
        loss = step(case, &inst, &exec, &ledger)?;
        times.push(start.elapsed().as_secs_f64());
        peak = ledger.peak_bytes();
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRecord {
        bt: case.bt,
        vocab: case.vocab,
        hidden: case.hidden,
        method: case.method,
        precision: case.precision,
        window_size: case.window(),
        workers: case.workers,
        latency_s: median(&times),
        latency_min_s: times[0],
        latency_max_s: times[times.len() - 1],
        aux_peak_bytes: peak,
        loss: loss.to_f64().unwrap_or(f64::NAN),
    })
}

fn median(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

fn unit_upstream<T: Real>(reduction: Reduction, targets: &TargetVector) -> UpstreamGradient<T> {
    match reduction {
        Reduction::None => UpstreamGradient::PerPosition(vec![T::one(); targets.len()]),
        _ => UpstreamGradient::Scalar(T::one()),
    }
}

/// One training step of `case.method`; returns the reduced (or summed) loss.
fn step<T: Real>(
    case: &CaseConfig,
    inst: &crate::gen::Instance<T>,
    exec: &ExecConfig,
    ledger: &MemoryLedger,
) -> Result<T> {
    let (h, w, y) = (&inst.hidden, &inst.weight, &inst.targets);
    let (n, d, v) = (case.bt, case.hidden, case.vocab);
    let upstream = unit_upstream::<T>(case.reduction, y);
    let backward = !case.forward_only;
    let produces_grads = backward || case.method == Method::FusedPartialGrad;
    let _outputs = ledger.reserve_elems::<T>(if produces_grads { (n + v) * d } else { 0 });

    let loss = match case.method {
        Method::Canonical => {
            let loss = reference_forward(h, w, y, case.reduction, ledger)?;
            if backward {
                reference_backward(h, w, y, case.reduction, &upstream, ledger)?;
            }
            loss
        }
        Method::Fused | Method::FusedWindowed => {
            let out = if case.method == Method::Fused {
                fused_forward(h, w, y, case.reduction, exec, ledger)?
            } else {
                let cfg = WindowConfig::new(case.window(), *exec);
                fused_forward_windowed(h, w, y, case.reduction, &cfg, ledger)?
            };
            if backward {
                let _cache = ledger.reserve(n * stats_bytes::<T>());
                fused_backward_recompute(h, w, y, &out.stats, &upstream, case.reduction, exec, ledger)?;
            }
            out.loss
        }
        Method::FusedPartialGrad => {
            let out = fused_forward_with_partial_grads(h, w, y, case.reduction, exec, ledger)?;
            if backward {
                let gamma = scalar_gamma_eff(T::one(), case.reduction, y)?;
                scale_partial_grads(&out.grads, gamma);
            }
            out.loss
        }
    };
    Ok(loss.total())
}

/// Run every case of the grid strictly in sequence.
pub fn sweep(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.cases()?.iter().map(run_case).collect()
}

/// A non-canonical record whose loss strays from the canonical one at the
/// same grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub bt: usize,
    pub vocab: usize,
    pub method: Method,
    pub rel_err: f64,
}

/// Compare every method's loss with the canonical loss at the same grid point.
pub fn cross_check(records: &[BenchRecord], rel_tol: f64) -> Vec<Mismatch> {
    let canonical: BTreeMap<(usize, usize), f64> = records
        .iter()
        .filter(|r| r.method == Method::Canonical)
        .map(|r| ((r.bt, r.vocab), r.loss))
        .collect();
    records
        .iter()
        .filter(|r| r.method != Method::Canonical)
        .filter_map(|r| {
            let c = *canonical.get(&(r.bt, r.vocab))?;
            let rel_err = (r.loss - c).abs() / c.abs().max(f64::MIN_POSITIVE);
            (!(rel_err <= rel_tol)).then_some(Mismatch {
                bt: r.bt,
                vocab: r.vocab,
                method: r.method,
                rel_err,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "bt,vocab,hidden,method,precision,latency_s,latency_min_s,latency_max_s,aux_peak_bytes,loss";

pub fn emit(records: &[BenchRecord], format: Format) -> Result<String> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(match format {
        Format::Csv => to_csv(records),
        Format::Markdown => to_markdown(records),
        Format::PlotData => plot_files(records)?
            .into_iter()
            .map(|(_, body)| body)
            .collect::<Vec<_>>()
            .join("\n\n"),
    })
}

fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{:.9},{:.9},{:.9},{},{:e}",
            r.bt,
            r.vocab,
            r.hidden,
            r.method,
            r.precision,
            r.latency_s,
            r.latency_min_s,
            r.latency_max_s,
            r.aux_peak_bytes,
            r.loss
        )
        .unwrap();
    }
    out
}

fn thousands(x: usize) -> String {
    let s = x.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Two column groups, latency then memory, each with one column per method in
/// first-appearance order. `B×T` is printed only on the first row of a group.
fn to_markdown(records: &[BenchRecord]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut points: Vec<(usize, usize)> = Vec::new();
    let mut cells = BTreeMap::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !points.contains(&(r.bt, r.vocab)) {
            points.push((r.bt, r.vocab));
        }
        cells.insert((r.bt, r.vocab, r.method), r);
    }

    let mut out = String::from("| B×T | V |");
    for m in &methods {
        write!(out, " Latency (ms) {} |", m.title()).unwrap();
    }
    for m in &methods {
        write!(out, " Memory (MB) {} |", m.title()).unwrap();
    }
    out.push_str("\n|---:|---:|");
    for _ in 0..2 * methods.len() {
        out.push_str("---:|");
    }
    out.push('\n');

    let mut last_bt = None;
    for &(bt, vocab) in &points {
        let bt_cell = if last_bt == Some(bt) { String::new() } else { thousands(bt) };
        last_bt = Some(bt);
        write!(out, "| {bt_cell} | {} |", thousands(vocab)).unwrap();
        for m in &methods {
            match cells.get(&(bt, vocab, *m)) {
                Some(r) => write!(out, " {:.2} |", r.latency_s * 1e3).unwrap(),
                None => out.push_str(" - |"),
            }
        }
        for m in &methods {
            match cells.get(&(bt, vocab, *m)) {
                Some(r) => write!(out, " {:.2} |", r.aux_peak_bytes as f64 / (1u64 << 20) as f64).unwrap(),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// One whitespace-separated series per `(method, bt)`, rows keyed by vocab.
/// Returns `(file name, contents)` pairs in first-appearance order.
pub fn plot_files(records: &[BenchRecord]) -> Result<Vec<(String, String)>> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut order: Vec<(Method, usize)> = Vec::new();
    for r in records {
        if !order.contains(&(r.method, r.bt)) {
            order.push((r.method, r.bt));
        }
    }
    Ok(order
        .into_iter()
        .map(|(method, bt)| {
            let mut body = format!(
                "# method={method} bt={bt}\n# vocab latency_s latency_min_s latency_max_s aux_peak_bytes loss\n"
            );
            let mut rows: Vec<&BenchRecord> =
                records.iter().filter(|r| r.method == method && r.bt == bt).collect();
            rows.sort_by_key(|r| r.vocab);
            for r in rows {
                writeln!(
                    body,
                    "{} {:.9} {:.9} {:.9} {} {:e}",
                    r.vocab, r.latency_s, r.latency_min_s, r.latency_max_s, r.aux_peak_bytes, r.loss
                )
                .unwrap();
            }
            (format!("{method}_bt{bt}.dat"), body)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(bt: usize, vocab: usize, method: Method, ms: f64, bytes: usize) -> BenchRecord {
        BenchRecord {
            bt,
            vocab,
            hidden: 256,
            method,
            precision: Precision::F32,
            window_size: vocab,
            workers: 1,
            latency_s: ms / 1e3,
            latency_min_s: ms / 1e3,
            latency_max_s: ms / 1e3,
            aux_peak_bytes: bytes,
            loss: 9.25,
        }
    }

    fn small(methods: Vec<Method>) -> BenchConfig {
        BenchConfig {
            bt_values: vec![8, 16],
            vocab_values: vec![32, 64],
            hidden: 8,
            methods,
            repeats: 1,
            warmup: 0,
            workers: 1,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn sweep_order_is_row_major() {
        let recs = sweep(&small(vec![Method::Canonical, Method::Fused])).unwrap();
        let keys: Vec<_> = recs.iter().map(|r| (r.bt, r.vocab, r.method)).collect();
        assert_eq!(
            keys,
            vec![
                (8, 32, Method::Canonical),
                (8, 32, Method::Fused),
                (8, 64, Method::Canonical),
                (8, 64, Method::Fused),
                (16, 32, Method::Canonical),
                (16, 32, Method::Fused),
                (16, 64, Method::Canonical),
                (16, 64, Method::Fused),
            ]
        );
        assert!(cross_check(&recs, 1e-5).is_empty());
    }

    #[test]
    fn empty_grid_rejected() {
        let mut cfg = small(vec![Method::Fused]);
        cfg.vocab_values.clear();
        assert_eq!(sweep(&cfg), Err(Error::EmptyGrid("vocab")));
        assert_eq!(emit(&[], Format::Csv), Err(Error::EmptyInput));
    }

    #[test]
    fn all_methods_agree_and_repeat_exactly() {
        let mut cfg = small(Method::ALL.to_vec());
        cfg.window_size = Some(7);
        let a = sweep(&cfg).unwrap();
        let b = sweep(&cfg).unwrap();
        assert!(cross_check(&a, 1e-5).is_empty(), "{:?}", cross_check(&a, 1e-5));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.aux_peak_bytes, x.loss), (y.aux_peak_bytes, y.loss));
        }
    }

    #[test]
    fn canonical_peak_doubles_with_vocab() {
        let cfg = BenchConfig {
            bt_values: vec![256],
            vocab_values: vec![64, 128],
            hidden: 2,
            ..small(vec![Method::Canonical])
        };
        let recs = sweep(&cfg).unwrap();
        assert!(recs[1].aux_peak_bytes as f64 >= 1.9 * recs[0].aux_peak_bytes as f64);
    }

    #[test]
    fn fused_growth_is_the_weight_gradient() {
        let recs = sweep(&small(vec![Method::Fused])).unwrap();
        let grown = recs[1].aux_peak_bytes - recs[0].aux_peak_bytes;
        assert_eq!(grown, (64 - 32) * 8 * 4);
        let mut cfg = small(vec![Method::Fused]);
        cfg.forward_only = true;
        let recs = sweep(&cfg).unwrap();
        assert_eq!(recs[0].aux_peak_bytes, recs[1].aux_peak_bytes);
    }

    #[test]
    fn single_record_csv_has_two_lines() {
        let csv = emit(&[record(1024, 8192, Method::Fused, 1.5, 100)], Format::Csv).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "1024,8192,256,fused,f32,0.001500000,0.001500000,0.001500000,100,9.25e0");
    }

    #[test]
    fn markdown_golden() {
        let mib = 1 << 20;
        let recs = vec![
            record(1024, 8192, Method::Canonical, 12.5, 34 * mib),
            record(1024, 8192, Method::Fused, 10.0, 3 * mib),
            record(1024, 32768, Method::Canonical, 50.0, 130 * mib),
            record(1024, 32768, Method::Fused, 39.25, 9 * mib),
            record(4096, 8192, Method::Canonical, 51.0, 136 * mib),
            record(4096, 8192, Method::Fused, 40.0, 5 * mib),
        ];
        let expected = "\
| B×T | V | Latency (ms) Canonical | Latency (ms) Fused | Memory (MB) Canonical | Memory (MB) Fused |
|---:|---:|---:|---:|---:|---:|
| 1,024 | 8,192 | 12.50 | 10.00 | 34.00 | 3.00 |
|  | 32,768 | 50.00 | 39.25 | 130.00 | 9.00 |
| 4,096 | 8,192 | 51.00 | 40.00 | 136.00 | 5.00 |
";
        assert_eq!(emit(&recs, Format::Markdown).unwrap(), expected);
    }

    #[test]
    fn plot_series_per_method_and_bt() {
        let recs = vec![
            record(8, 64, Method::Fused, 1.0, 10),
            record(8, 32, Method::Fused, 1.0, 10),
            record(8, 32, Method::Canonical, 1.0, 10),
            record(16, 32, Method::Fused, 1.0, 10),
        ];
        let files = plot_files(&recs).unwrap();
        let names: Vec<_> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["fused_bt8.dat", "canonical_bt8.dat", "fused_bt16.dat"]);
        let rows: Vec<_> = files[0].1.lines().filter(|l| !l.starts_with('#')).collect();
        assert!(rows[0].starts_with("32 ") && rows[1].starts_with("64 "));
    }
}
