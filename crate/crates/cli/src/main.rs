//! Command-line front end for the FIO inverse factorization: build
//! factorizations, run direct and preconditioned-CG solves, sweep problem
//! sizes for scaling data, and reproduce the benchmark tables.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fio_core::dense::{gaussian_matrix, rng_from_seed, CVec};
use fio_core::problem::FioProblem;
use fio_core::solver::{
    build_inverse, estimate_errors, solve_direct, solve_pcg, BuildParams, FioInverse,
    Preconditioner,
};
use fio_core::FioError;

const SCHEMA_VERSION: u32 = 1;
const CONTAINER_MAGIC: &[u8; 4] = b"FIOF";
const CONTAINER_VERSION: u32 = 1;
const DENSE_CHECK_CAP: usize = 4096;

#[derive(Parser)]
#[command(
    name = "fio",
    about = "Approximate inversion of discrete Fourier integral operators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an inverse factorization and report stage timings.
    Factor(FactorArgs),
    /// Solve K f = u with the factorization as direct solver or CG preconditioner.
    Solve(SolveArgs),
    /// Sweep problem sizes and emit (N, time) series for build and apply.
    Bench(BenchArgs),
    /// Reproduce a benchmark table row-by-row.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Clone)]
struct Config {
    /// Problem family.
    #[arg(long, value_enum, default_value = "uniform1d")]
    problem: ProblemKind,
    /// Points per dimension (total DOFs are n in 1D, n^2 in 2D).
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Gaussian amplitude variance (gauss1d only).
    #[arg(long)]
    sigma2: Option<f64>,
    /// Butterfly compression tolerance.
    #[arg(long, default_value_t = 1e-6)]
    eps_bff: f64,
    /// Peeling tolerance.
    #[arg(long, default_value_t = 1e-8)]
    eps_peel: f64,
    /// Skeletonization (inversion) tolerance.
    #[arg(long, default_value_t = 1e-6)]
    eps_hif: f64,
    /// Butterfly rank cap (peeling uses twice this).
    #[arg(long)]
    rank: Option<usize>,
    /// Extra random probes beyond the rank caps.
    #[arg(long)]
    oversample: Option<usize>,
    /// Target points per leaf of the hierarchical tree.
    #[arg(long)]
    leaf_size: Option<usize>,
    /// Use the diagonally pre-scaled skeletonization from the start
    /// (otherwise it is entered automatically on an indefinite pivot).
    #[arg(long, default_value_t = false)]
    scaled: bool,
    /// Random seed; identical seeds give identical results.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative residual target for CG.
    #[arg(long, default_value_t = 1e-8)]
    solve_tol: f64,
    /// CG iteration cap.
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Preconditioner for the normal equations.
    #[arg(long, value_enum, default_value = "inverse")]
    precond: PrecondArg,
    /// Record format.
    #[arg(long, value_enum, default_value = "json")]
    output: OutputFmt,
    /// Enable O(N^2) dense-operator error estimates (refused above 4096 DOFs).
    #[arg(long, default_value_t = false)]
    dense_check: bool,
    /// Write the factorization to a binary container.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Read a previously saved factorization instead of rebuilding.
    #[arg(long)]
    load: Option<PathBuf>,
}

#[derive(Args)]
struct FactorArgs {
    #[command(flatten)]
    config: Config,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    config: Config,
    /// JSON file with the right-hand side as [[re, im], ...]; random if absent.
    #[arg(long)]
    rhs_file: Option<PathBuf>,
    /// Apply the factorization once as a direct solver instead of running CG.
    #[arg(long, default_value_t = false)]
    direct: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: Config,
    /// Comma-separated list of per-dimension sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1024,4096")]
    sizes: Vec<usize>,
    /// Write the series to this path instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Table to reproduce.
    #[arg(value_enum)]
    table: TableId,
    /// Largest total DOF count to include.
    #[arg(long, default_value_t = 4096)]
    max_n: usize,
    #[arg(long, value_enum, default_value = "csv")]
    output: OutputFmt,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write rows to this path instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ProblemKind {
    Uniform1d,
    Gauss1d,
    Ellipse2d,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PrecondArg {
    Inverse,
    Adjoint,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OutputFmt {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TableId {
    T3,
    T4,
    T5,
    T6,
}

/// One benchmark record; the flat schema is shared by JSON and CSV output.
#[derive(Serialize, Default)]
struct BenchRecord {
    schema_version: u32,
    command: String,
    problem: String,
    n: usize,
    total_size: usize,
    sigma2: Option<f64>,
    eps_bff: f64,
    eps_peel: f64,
    eps_hif: f64,
    rank: usize,
    oversample: usize,
    leaf_size: usize,
    seed: u64,
    solve_tol: f64,
    max_iter: usize,
    precond: String,
    e_a: Option<f64>,
    e_s: Option<f64>,
    n_i: Option<usize>,
    t_s: Option<f64>,
    converged: Option<bool>,
    t_butterfly: Option<f64>,
    t_peel: Option<f64>,
    t_invert: Option<f64>,
    t_build_total: Option<f64>,
    memory_bytes_estimate: u64,
}

const RECORD_CSV_HEADER: &str = "schema_version,command,problem,n,total_size,sigma2,eps_bff,\
eps_peel,eps_hif,rank,oversample,leaf_size,seed,solve_tol,max_iter,precond,e_a,e_s,n_i,t_s,\
converged,t_butterfly,t_peel,t_invert,t_build_total,memory_bytes_estimate";

impl BenchRecord {
    fn csv_row(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(|x| x.to_string()).unwrap_or_default()
        }
        [
            self.schema_version.to_string(),
            self.command.clone(),
            self.problem.clone(),
            self.n.to_string(),
            self.total_size.to_string(),
            opt(&self.sigma2),
            self.eps_bff.to_string(),
            self.eps_peel.to_string(),
            self.eps_hif.to_string(),
            self.rank.to_string(),
            self.oversample.to_string(),
            self.leaf_size.to_string(),
            self.seed.to_string(),
            self.solve_tol.to_string(),
            self.max_iter.to_string(),
            self.precond.clone(),
            opt(&self.e_a),
            opt(&self.e_s),
            opt(&self.n_i),
            opt(&self.t_s),
            opt(&self.converged),
            opt(&self.t_butterfly),
            opt(&self.t_peel),
            opt(&self.t_invert),
            opt(&self.t_build_total),
            self.memory_bytes_estimate.to_string(),
        ]
        .join(",")
    }
}

enum CliError {
    Config(String),
    Numerical(String),
}

impl From<FioError> for CliError {
    fn from(e: FioError) -> Self {
        match &e {
            FioError::InvalidInput(_) | FioError::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Factor(a) => cmd_factor(&a),
        Command::Solve(a) => cmd_solve(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}

impl Config {
    fn dim(&self) -> usize {
        match self.problem {
            ProblemKind::Ellipse2d => 2,
            _ => 1,
        }
    }

    fn total_size(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    fn validate(&self) -> CliResult<()> {
        if self.n < 4 || self.n % 2 != 0 {
            return Err(CliError::Config(format!(
                "--n must be even and at least 4, got {}",
                self.n
            )));
        }
        for (name, v) in [
            ("--eps-bff", self.eps_bff),
            ("--eps-peel", self.eps_peel),
            ("--eps-hif", self.eps_hif),
            ("--solve-tol", self.solve_tol),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CliError::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if let Some(s2) = self.sigma2 {
            if self.problem != ProblemKind::Gauss1d {
                return Err(CliError::Config(
                    "--sigma2 only applies to --problem gauss1d".to_string(),
                ));
            }
            if s2 <= 0.0 {
                return Err(CliError::Config(format!(
                    "--sigma2 must be positive, got {s2}"
                )));
            }
        }
        if self.dense_check && self.total_size() > DENSE_CHECK_CAP {
            return Err(CliError::Config(format!(
                "--dense-check is limited to {DENSE_CHECK_CAP} total DOFs, got {}",
                self.total_size()
            )));
        }
        if self.max_iter == 0 {
            return Err(CliError::Config("--max-iter must be positive".to_string()));
        }
        Ok(())
    }

    fn make_problem(&self) -> CliResult<FioProblem> {
        Ok(match self.problem {
            ProblemKind::Uniform1d => FioProblem::uniform_1d(self.n)?,
            ProblemKind::Gauss1d => {
                FioProblem::gaussian_1d_default(self.n, self.sigma2.unwrap_or(0.1))?
            }
            ProblemKind::Ellipse2d => FioProblem::ellipse_2d(self.n)?,
        })
    }

    fn build_params(&self) -> BuildParams {
        let mut p = BuildParams::default_for_dim(self.dim());
        p.eps_bff = self.eps_bff;
        p.eps_peel = self.eps_peel;
        p.eps_hif = self.eps_hif;
        if let Some(r) = self.rank {
            p.bf_rank = r;
            p.peel_rank = 2 * r;
        }
        if let Some(o) = self.oversample {
            p.oversample = o;
        }
        if let Some(l) = self.leaf_size {
            p.leaf_size = l;
        }
        p.scaled_hif = self.scaled;
        p.seed = self.seed;
        p
    }

    fn base_record(&self, command: &str) -> BenchRecord {
        let params = self.build_params();
        BenchRecord {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            problem: format!("{:?}", self.problem).to_lowercase(),
            n: self.n,
            total_size: self.total_size(),
            sigma2: self.sigma2,
            eps_bff: self.eps_bff,
            eps_peel: self.eps_peel,
            eps_hif: self.eps_hif,
            rank: params.bf_rank,
            oversample: params.oversample,
            leaf_size: params.leaf_size,
            seed: self.seed,
            solve_tol: self.solve_tol,
            max_iter: self.max_iter,
            precond: format!("{:?}", self.precond).to_lowercase(),
            ..BenchRecord::default()
        }
    }

    /// Build from scratch or load from the container, per the flags.
    fn obtain_inverse(&self) -> CliResult<FioInverse> {
        if let Some(path) = &self.load {
            return load_inverse(path);
        }
        let problem = self.make_problem()?;
        let inv = build_inverse(&problem, &self.build_params())?;
        if let Some(path) = &self.save {
            save_inverse(path, &inv)?;
        }
        Ok(inv)
    }
}

fn memory_estimate(inv: &FioInverse) -> u64 {
    // complex scalars, 16 bytes each
    ((inv.bf.nnz() + inv.g.nnz()) as u64) * 16
}

fn emit_record(fmt: OutputFmt, rec: &BenchRecord) -> CliResult<()> {
    match fmt {
        OutputFmt::Json => println!(
            "{}",
            serde_json::to_string_pretty(rec).expect("record serialization")
        ),
        OutputFmt::Csv => {
            println!("{RECORD_CSV_HEADER}");
            println!("{}", rec.csv_row());
        }
    }
    Ok(())
}

fn fill_build_info(rec: &mut BenchRecord, inv: &FioInverse) {
    rec.t_butterfly = Some(inv.build_timings.butterfly);
    rec.t_peel = Some(inv.build_timings.peel);
    rec.t_invert = Some(inv.build_timings.invert);
    rec.t_build_total = Some(inv.build_timings.total());
    rec.memory_bytes_estimate = memory_estimate(inv);
}

fn cmd_factor(args: &FactorArgs) -> CliResult<()> {
    let cfg = &args.config;
    cfg.validate()?;
    let inv = cfg.obtain_inverse()?;
    let mut rec = cfg.base_record("factor");
    fill_build_info(&mut rec, &inv);
    if cfg.dense_check {
        let problem = cfg.make_problem()?;
        let (e_a, e_s) = estimate_errors(&problem, &inv, cfg.seed.wrapping_add(100))?;
        rec.e_a = Some(e_a);
        rec.e_s = Some(e_s);
    }
    for w in inv.bf.warnings.iter().chain(inv.g.warnings.iter()) {
        eprintln!("warning: {w}");
    }
    emit_record(cfg.output, &rec)
}

fn random_rhs(n: usize, seed: u64) -> CVec {
    let mut rng = rng_from_seed(seed);
    CVec::from_column_slice(gaussian_matrix(n, 1, &mut rng).as_slice())
}

fn read_rhs(path: &PathBuf, n: usize) -> CliResult<CVec> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let pairs: Vec<[f64; 2]> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("rhs file must be JSON [[re, im], ...]: {e}")))?;
    if pairs.len() != n {
        return Err(CliError::Config(format!(
            "rhs length {} does not match problem size {n}",
            pairs.len()
        )));
    }
    Ok(CVec::from_iterator(
        n,
        pairs
            .into_iter()
            .map(|[re, im]| fio_core::dense::C64::new(re, im)),
    ))
}

fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let cfg = &args.config;
    cfg.validate()?;
    let inv = if cfg.load.is_some() {
        cfg.obtain_inverse().map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!(
                "{msg}; build one first with `fio factor --save <path>`"
            )),
            other => other,
        })?
    } else {
        cfg.obtain_inverse()?
    };
    let n = inv.bf.n;
    if n != cfg.total_size() {
        return Err(CliError::Config(format!(
            "loaded factorization has {n} DOFs but the problem flags give {}",
            cfg.total_size()
        )));
    }
    let rhs = match &args.rhs_file {
        Some(path) => read_rhs(path, n)?,
        None => random_rhs(n, cfg.seed.wrapping_add(7)),
    };
    let mut rec = cfg.base_record("solve");
    fill_build_info(&mut rec, &inv);
    if args.direct {
        let t = Instant::now();
        let _f = solve_direct(&inv, &rhs)?;
        rec.t_s = Some(t.elapsed().as_secs_f64());
        rec.n_i = Some(0);
        rec.converged = Some(true);
    } else {
        let precond = match cfg.precond {
            PrecondArg::Inverse => Preconditioner::Inverse,
            PrecondArg::Adjoint => Preconditioner::Adjoint,
        };
        let (_x, report) = solve_pcg(&inv, &rhs, precond, cfg.solve_tol, cfg.max_iter)?;
        rec.n_i = Some(report.iterations);
        rec.t_s = Some(report.solve_time);
        rec.converged = Some(report.converged);
    }
    if cfg.dense_check {
        let problem = cfg.make_problem()?;
        let (e_a, e_s) = estimate_errors(&problem, &inv, cfg.seed.wrapping_add(100))?;
        rec.e_a = Some(e_a);
        rec.e_s = Some(e_s);
    }
    emit_record(cfg.output, &rec)
}

#[derive(Serialize)]
struct BenchPoint {
    n: usize,
    total_size: usize,
    t_butterfly: f64,
    t_peel: f64,
    t_invert: f64,
    t_build_total: f64,
    t_apply: f64,
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (m * sxy - sx * sy) / (m * sxx - sx * sx)
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let cfg = &args.config;
    cfg.validate()?;
    if args.sizes.is_empty() {
        return Err(CliError::Config("--sizes must not be empty".to_string()));
    }
    let mut points = Vec::new();
    for &n in &args.sizes {
        let mut c = cfg.clone();
        c.n = n;
        c.validate()?;
        let problem = c.make_problem()?;
        let inv = build_inverse(&problem, &c.build_params())?;
        let rhs = random_rhs(inv.bf.n, c.seed.wrapping_add(7));
        // warm-up apply excluded from timing, then median of three
        let _ = solve_direct(&inv, &rhs)?;
        let mut times = [0.0f64; 3];
        for t in &mut times {
            let t0 = Instant::now();
            let _ = solve_direct(&inv, &rhs)?;
            *t = t0.elapsed().as_secs_f64();
        }
        points.push(BenchPoint {
            n,
            total_size: inv.bf.n,
            t_butterfly: inv.build_timings.butterfly,
            t_peel: inv.build_timings.peel,
            t_invert: inv.build_timings.invert,
            t_build_total: inv.build_timings.total(),
            t_apply: median3(times),
        });
    }
    let build_pts: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.total_size as f64, p.t_build_total))
        .collect();
    let apply_pts: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.total_size as f64, p.t_apply))
        .collect();
    let mut out = String::new();
    match cfg.output {
        OutputFmt::Json => {
            let doc = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "series": points,
                "build_slope": if points.len() > 1 { Some(loglog_slope(&build_pts)) } else { None },
                "apply_slope": if points.len() > 1 { Some(loglog_slope(&apply_pts)) } else { None },
            });
            out.push_str(&serde_json::to_string_pretty(&doc).expect("series serialization"));
            out.push('\n');
        }
        OutputFmt::Csv => {
            out.push_str("n,total_size,t_butterfly,t_peel,t_invert,t_build_total,t_apply\n");
            for p in &points {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    p.n, p.total_size, p.t_butterfly, p.t_peel, p.t_invert, p.t_build_total,
                    p.t_apply
                ));
            }
            if points.len() > 1 {
                eprintln!(
                    "build-time log-log slope: {:.3}; apply-time slope: {:.3}",
                    loglog_slope(&build_pts),
                    loglog_slope(&apply_pts)
                );
            }
        }
    }
    match &args.out {
        Some(path) => fs::write(path, out)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TableRow {
    n_total: usize,
    e_a: Option<f64>,
    eps: f64,
    e_s: Option<f64>,
    n_i: Option<usize>,
    t_s: Option<f64>,
    n_i_adjoint: Option<usize>,
    t_s_adjoint: Option<f64>,
}

/// Error estimation in `reproduce` uses O(N^2) dense applies per probe;
/// above this many DOFs the error columns are left empty.
const REPRODUCE_ERROR_CAP: usize = 16384;

fn cmd_reproduce(args: &ReproduceArgs) -> CliResult<()> {
    let sizes_1d = [1024usize, 4096, 16384, 65536, 262144];
    let sizes_2d = [64usize, 128, 256, 512];
    let (problem_kind, sigma2, eps_list, sizes): (ProblemKind, Option<f64>, Vec<f64>, Vec<usize>) =
        match args.table {
            TableId::T3 => (
                ProblemKind::Uniform1d,
                None,
                vec![1e-6, 1e-3],
                sizes_1d.to_vec(),
            ),
            TableId::T4 => (
                ProblemKind::Gauss1d,
                Some(0.1),
                vec![1e-5, 1e-3],
                sizes_1d.to_vec(),
            ),
            TableId::T5 => (
                ProblemKind::Gauss1d,
                Some(0.05),
                vec![1e-4, 1e-3],
                sizes_1d.to_vec(),
            ),
            TableId::T6 => (ProblemKind::Ellipse2d, None, vec![1e-3], sizes_2d.to_vec()),
        };
    let mut rows = Vec::new();
    for &n in &sizes {
        let dim = if problem_kind == ProblemKind::Ellipse2d {
            2
        } else {
            1
        };
        let total = n.pow(dim);
        if total > args.max_n {
            continue;
        }
        for &eps in &eps_list {
            let cfg = Config {
                problem: problem_kind,
                n,
                sigma2,
                eps_bff: 1e-6f64.min(eps),
                eps_peel: eps,
                eps_hif: eps,
                rank: None,
                oversample: None,
                leaf_size: None,
                scaled: false,
                seed: args.seed,
                solve_tol: 1e-8,
                max_iter: 5000,
                precond: PrecondArg::Inverse,
                output: args.output,
                dense_check: false,
                save: None,
                load: None,
            };
            cfg.validate()?;
            let problem = cfg.make_problem()?;
            let inv = build_inverse(&problem, &cfg.build_params())?;
            let rhs = random_rhs(inv.bf.n, args.seed.wrapping_add(7));
            let (_x, rep_inv) = solve_pcg(&inv, &rhs, Preconditioner::Inverse, 1e-8, 5000)?;
            let (_x, rep_adj) = solve_pcg(&inv, &rhs, Preconditioner::Adjoint, 1e-8, 5000)?;
            let (e_a, e_s) = if total <= REPRODUCE_ERROR_CAP {
                let (a, s) = estimate_errors(&problem, &inv, args.seed.wrapping_add(100))?;
                (Some(a), Some(s))
            } else {
                (None, None)
            };
            rows.push(TableRow {
                n_total: total,
                e_a,
                eps,
                e_s,
                n_i: Some(rep_inv.iterations),
                t_s: Some(rep_inv.solve_time),
                n_i_adjoint: Some(rep_adj.iterations),
                t_s_adjoint: Some(rep_adj.solve_time),
            });
            eprintln!(
                "row: N={total} eps={eps:e} n_i={} adjoint n_i={}",
                rep_inv.iterations, rep_adj.iterations
            );
        }
    }
    let mut out = String::new();
    match args.output {
        OutputFmt::Json => {
            let doc = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "table": format!("{:?}", args.table).to_lowercase(),
                "rows": rows,
            });
            out.push_str(&serde_json::to_string_pretty(&doc).expect("rows serialization"));
            out.push('\n');
        }
        OutputFmt::Csv => {
            out.push_str("n_total,e_a,eps,e_s,n_i,t_s,n_i_adjoint,t_s_adjoint\n");
            for r in &rows {
                fn opt<T: ToString>(v: &Option<T>) -> String {
                    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
                }
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.n_total,
                    opt(&r.e_a),
                    r.eps,
                    opt(&r.e_s),
                    opt(&r.n_i),
                    opt(&r.t_s),
                    opt(&r.n_i_adjoint),
                    opt(&r.t_s_adjoint),
                ));
            }
        }
    }
    match &args.out {
        Some(path) => fs::write(path, out)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn save_inverse(path: &PathBuf, inv: &FioInverse) -> CliResult<()> {
    let payload =
        bincode::serialize(inv).map_err(|e| CliError::Config(format!("serialization: {e}")))?;
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
    let write = |f: &mut fs::File, bytes: &[u8]| {
        f.write_all(bytes)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    };
    write(&mut f, CONTAINER_MAGIC)?;
    write(&mut f, &CONTAINER_VERSION.to_le_bytes())?;
    write(&mut f, &(payload.len() as u64).to_le_bytes())?;
    write(&mut f, &payload)?;
    Ok(())
}

fn load_inverse(path: &PathBuf) -> CliResult<FioInverse> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[0..4] != CONTAINER_MAGIC {
        return Err(CliError::Config(format!(
            "{} is not a factorization container",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(CliError::Config(format!(
            "container version {version} unsupported (expected {CONTAINER_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + len {
        return Err(CliError::Config(format!(
            "{} is truncated or corrupt",
            path.display()
        )));
    }
    bincode::deserialize(&bytes[16..])
        .map_err(|e| CliError::Config(format!("container payload: {e}")))
}
