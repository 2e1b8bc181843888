use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fused_ce::backward::{effective_gamma, UpstreamGradient};
use fused_ce::bench::{self, BenchConfig, Format, Method};
use fused_ce::gen::{rng, InstanceSpec, IGNORE_INDEX};
use fused_ce::kernel::{default_workers, dot};
use fused_ce::parallel_sim::ParallelMode;
use fused_ce::verify::{self, VerifyConfig};
use fused_ce::{
    fused_forward, reference_forward, DenseMatrix, Error, ExecConfig, MemoryLedger, Precision, Real,
    Reduction, SoftmaxStats, TargetVector,
};

const VERIFY_FAILED: u8 = 1;
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "fused-ce", version, about = "Fused output projection + cross-entropy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized equivalence suites.
    Verify(Common),
    /// Time and measure the canonical and fused paths over a grid.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods: canonical, fused, fused_windowed, fused_partial_grad.
        #[arg(long, value_delimiter = ',', default_value = "canonical,fused")]
        methods: Vec<Method>,
        /// Skip the backward pass.
        #[arg(long)]
        forward_only: bool,
    },
    /// Print the streaming trace for one position of a tiny instance.
    Demo {
        #[command(flatten)]
        common: Common,
        /// Hidden states, rows separated by ';' and values by ','.
        #[arg(long = "h")]
        hidden_values: Option<String>,
        /// Weight rows, same layout as --h.
        #[arg(long = "w")]
        weight_values: Option<String>,
        /// Targets, comma-separated; -100 marks an ignored position.
        #[arg(long = "y", allow_hyphen_values = true)]
        target_values: Option<String>,
        /// Position whose trace is printed.
        #[arg(long, default_value_t = 0)]
        position: usize,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Hidden size d.
    #[arg(long)]
    hidden: Option<usize>,
    /// Positions B·T; a comma-separated list for bench.
    #[arg(long, value_delimiter = ',')]
    bt: Vec<usize>,
    /// Vocabulary sizes; a comma-separated list for bench.
    #[arg(long, value_delimiter = ',')]
    vocab: Vec<usize>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value = "mean")]
    reduction: Reduction,
    /// Vocabulary window size; defaults to the whole vocabulary.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    #[arg(long)]
    parallel_mode: Option<ParallelMode>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Destination file; a directory for plotdata. Standard output if omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

impl Common {
    fn check(&self) -> Result<(), String> {
        let positive = |name: &str, xs: &[usize]| {
            if xs.contains(&0) {
                Err(format!("--{name} values must be positive"))
            } else {
                Ok(())
            }
        };
        positive("bt", &self.bt)?;
        positive("vocab", &self.vocab)?;
        positive("hidden", self.hidden.as_slice())?;
        positive("window", self.window.as_slice())?;
        positive("ranks", &[self.ranks])?;
        positive("repeats", &[self.repeats])?;
        positive("workers", &[self.workers])?;
        Ok(())
    }
}

enum Failure {
    Usage(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DimensionMismatch(_)
            | Error::TargetOutOfRange { .. }
            | Error::UnsupportedReduction(_)
            | Error::InvalidLayout(_)
            | Error::InvalidConfig(_)
            | Error::EmptyGrid(_)
            | Error::EmptyInput => Failure::Usage(e.to_string()),
            other => Failure::Verify(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Verify(format!("i/o error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Verify(common) => run_verify(&common),
        Command::Bench {
            common,
            methods,
            forward_only,
        } => run_bench(&common, methods, forward_only),
        Command::Demo {
            common,
            hidden_values,
            weight_values,
            target_values,
            position,
        } => run_demo(&common, hidden_values, weight_values, target_values, position),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(VERIFY_FAILED)
        }
    }
}

/// Write through a temporary file in the destination directory so a failed
/// run never leaves a partial file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn deliver(output: Option<&Path>, text: &str) -> io::Result<()> {
    match output {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => io::stdout().write_all(text.as_bytes()),
    }
}

fn run_verify(common: &Common) -> Result<(), Failure> {
    common.check().map_err(Failure::Usage)?;
    let cfg = VerifyConfig {
        precision: common.precision,
        seed: common.seed,
        workers: common.workers,
        window: common.window,
        ranks: common.ranks,
        mode: common.parallel_mode,
        ..VerifyConfig::default()
    };
    let report = verify::run(&cfg);
    deliver(common.output.as_deref(), &report.to_string())?;
    match report.first_failure() {
        None => Ok(()),
        Some(s) => Err(Failure::Verify(format!("suite {} failed", s.name))),
    }
}

fn run_bench(common: &Common, methods: Vec<Method>, forward_only: bool) -> Result<(), Failure> {
    common.check().map_err(Failure::Usage)?;
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        bt_values: if common.bt.is_empty() { defaults.bt_values } else { common.bt.clone() },
        vocab_values: if common.vocab.is_empty() { defaults.vocab_values } else { common.vocab.clone() },
        hidden: common.hidden.unwrap_or(defaults.hidden),
        methods,
        precision: common.precision,
        reduction: common.reduction,
        window_size: common.window,
        repeats: common.repeats,
        warmup: common.warmup,
        seed: common.seed,
        workers: common.workers,
        forward_only,
    };
    cfg.cases()?;
    let records = bench::sweep(&cfg)?;
    let tol = verify::Tolerances::for_precision(common.precision).oracle;
    if let Some(m) = bench::cross_check(&records, tol).first() {
        return Err(Failure::Verify(format!(
            "{} loss differs from canonical by {:.3e} at bt={} vocab={}",
            m.method, m.rel_err, m.bt, m.vocab
        )));
    }
    match (common.format, common.output.as_deref()) {
        (Format::PlotData, Some(dir)) => {
            fs::create_dir_all(dir)?;
            for (name, body) in bench::plot_files(&records)? {
                write_atomic(&dir.join(name), body.as_bytes())?;
            }
            Ok(())
        }
        (format, output) => Ok(deliver(output, &bench::emit(&records, format)?)?),
    }
}

const DEMO_MAX_N: usize = 8;
const DEMO_MAX_V: usize = 16;
const DEMO_MAX_D: usize = 8;

fn parse_matrix(flag: &str, text: &str) -> Result<DenseMatrix<f64>, Failure> {
    let rows = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(format!("--{flag}: {e}")))?;
    Ok(DenseMatrix::from_rows(&rows)?)
}

fn run_demo(
    common: &Common,
    hidden: Option<String>,
    weight: Option<String>,
    targets: Option<String>,
    position: usize,
) -> Result<(), Failure> {
    common.check().map_err(Failure::Usage)?;
    let (h, w, y) = match (hidden, weight, targets) {
        (Some(h), Some(w), Some(y)) => {
            let raw = y
                .split(',')
                .map(|t| t.trim().parse::<i64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(format!("--y: {e}")))?;
            let mut y = TargetVector::new(raw);
            if y.raw().contains(&IGNORE_INDEX) {
                y = y.with_ignore_index(IGNORE_INDEX);
            }
            (parse_matrix("h", &h)?, parse_matrix("w", &w)?, y)
        }
        (None, None, None) => {
            let n = common.bt.first().copied().unwrap_or(2);
            let v = common.vocab.first().copied().unwrap_or(5);
            let d = common.hidden.unwrap_or(3);
            check_cap(n, v, d)?;
            let inst = InstanceSpec::new(n, d, v).generate::<f64>(&mut rng(common.seed));
            (inst.hidden, inst.weight, inst.targets)
        }
        _ => return Err(Failure::Usage("--h, --w and --y must be given together".into())),
    };
    check_cap(h.rows(), w.rows(), h.cols())?;
    if position >= h.rows() {
        return Err(Failure::Usage(format!("--position {position} but N = {}", h.rows())));
    }
    let text = match common.precision {
        Precision::F64 => demo_trace(&h, &w, &y, position, common)?,
        Precision::F32 | Precision::Bf16 => {
            let cast = |m: &DenseMatrix<f64>| {
                let data = m.as_slice().iter().map(|&x| x as f32).collect();
                DenseMatrix::from_vec(m.rows(), m.cols(), data).map(|m| m.with_storage(common.precision.storage()))
            };
            demo_trace(&cast(&h)?, &cast(&w)?, &y, position, common)?
        }
    };
    deliver(common.output.as_deref(), &text)?;
    Ok(())
}

fn check_cap(n: usize, v: usize, d: usize) -> Result<(), Failure> {
    if n > DEMO_MAX_N || v > DEMO_MAX_V || d > DEMO_MAX_D {
        return Err(Failure::Usage(format!(
            "demo is limited to N <= {DEMO_MAX_N}, V <= {DEMO_MAX_V}, d <= {DEMO_MAX_D} (got N={n}, V={v}, d={d})"
        )));
    }
    Ok(())
}

fn demo_trace<T: Real>(
    h: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    y: &TargetVector,
    position: usize,
    common: &Common,
) -> Result<String, Failure> {
    use std::fmt::Write as _;

    let (n, d, v) = (h.rows(), h.cols(), w.rows());
    let exec = ExecConfig::with_workers(1);
    let ledger = MemoryLedger::new();
    let fwd = fused_forward(h, w, y, common.reduction, &exec, &ledger)?;
    let reference = reference_forward(h, w, y, common.reduction, &ledger)?;

    let mut out = String::new();
    let o = &mut out;
    writeln!(o, "instance: N={n} V={v} d={d} precision={} reduction={}", common.precision, common.reduction).unwrap();
    let Some(target) = y.get(position) else {
        writeln!(o, "position {position} is ignored: loss 0, zero gradient").unwrap();
        writeln!(o, "batch loss (fused) = {}", fwd.loss.total()).unwrap();
        return Ok(out);
    };
    writeln!(o, "position {position}, target {target}").unwrap();
    writeln!(o, "streaming pass:").unwrap();
    let mut s = SoftmaxStats::<T>::identity();
    let logits: Vec<T> = (0..v).map(|j| dot(h.row(position), w.row(j))).collect();
    for (j, &z) in logits.iter().enumerate() {
        s.push(z);
        if j == target {
            s.capture_target(z);
        }
        writeln!(o, "  v={j:<2} z={z}  m={}  a={}", s.m, s.a).unwrap();
    }
    writeln!(o, "final: m={} a={} z_target={}", s.m, s.a, s.z_target).unwrap();
    writeln!(o, "loss = (m - z_target) + ln a = {}", s.loss()).unwrap();

    let upstream = match common.reduction {
        Reduction::None => UpstreamGradient::PerPosition(vec![T::one(); n]),
        _ => UpstreamGradient::Scalar(T::one()),
    };
    let gamma = effective_gamma(&upstream, common.reduction, y)?[position];
    writeln!(o, "gradient terms, gamma = {gamma}:").unwrap();
    let mut dh = vec![T::zero(); d];
    for (j, &z) in logits.iter().enumerate() {
        let p = s.prob(z);
        let g = gamma * (p - if j == target { T::one() } else { T::zero() });
        for (acc, &wk) in dh.iter_mut().zip(w.row(j)) {
            *acc = *acc + g * wk;
        }
        writeln!(o, "  v={j:<2} p={p}  g={g}").unwrap();
    }
    let dh: Vec<String> = dh.iter().map(|x| x.to_string()).collect();
    writeln!(o, "dH[{position}] = [{}]", dh.join(", ")).unwrap();
    writeln!(o, "batch loss: fused = {}  reference = {}", fwd.loss.total(), reference.total()).unwrap();
    Ok(out)
}
