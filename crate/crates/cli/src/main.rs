//! `projinf` command-line front end.
//!
//! Exit codes: 0 success, 1 a probe failed, 2 bad invocation or input.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use projinf::influence::influence_gram;
use projinf::io::{self as pio, Curvature};
use projinf::leakage::leakage_report;
use projinf::linalg::{CurvatureOperator, KroneckerPair, Matrix, RankPolicy};
use projinf::planner::{
    effective_dim, plan_factorized, plan_leakage_sketch_size, plan_sketch_size, span_dimension, DEFAULT_C,
};
use projinf::report::{to_json_string, write_csv, write_csv_records};
use projinf::rng::{derive_seed, streams};
use projinf::sketch::{build_sketch, FamilyKind, RealizedSketch};
use projinf::sweep::{run_sweep, PairSource, SweepConfig};
use projinf::synth::{generate_gradients, GradientShape};
use projinf::verify::{run_suite, Suite};
use projinf::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "projinf", version, about = "Influence scores under random projection")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic per-example gradients (GRDF).
    Gen(GenArgs),
    /// Decompose the empirical Fisher of a gradient file and cache it.
    Fisher(FisherArgs),
    /// Decompose K-FAC factors (KFCF) and cache them.
    KfacLoad(KfacArgs),
    /// Sketch size for a target accuracy.
    Plan(PlanArgs),
    /// Train-by-test influence scores as CSV.
    Attribute(AttributeArgs),
    /// Error percentiles across lambdas and sketch sizes.
    Sweep(SweepArgs),
    /// Run the property probes.
    Verify(VerifyArgs),
    /// Ordered eigenvalues and the effective-dimension curve.
    Spectrum(SpectrumArgs),
    /// Leakage of test gradients outside range(F).
    Leakage(LeakageArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// `powerlaw:<exponent>`, `flat`, or `hard:<k>,<r>,<eta>`.
    #[arg(long, default_value = "powerlaw:1")]
    spectrum: ShapeArg,
    /// Eigenvalue scale of the hard instance.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FisherArgs {
    grads: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    rank_tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KfacArgs {
    factors: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    rank_tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Accuracy {
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Planner constant.
    #[arg(long = "c", default_value_t = DEFAULT_C)]
    c: f64,
}

#[derive(Args)]
struct PlanArgs {
    curvature: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[command(flatten)]
    acc: Accuracy,
    /// Per-factor sizes for a Kronecker curvature.
    #[arg(long)]
    factorized: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SizeArgs {
    /// `gaussian`, `rademacher`, `sjl:<s>`, or `kron:<famA>x<famE>`.
    #[arg(long)]
    sketch: Option<SketchArg>,
    /// Sketch size (per factor for Kronecker sketches).
    #[arg(long, conflicts_with = "m_mult")]
    m: Option<usize>,
    /// Sketch size as a multiple of d_λ.
    #[arg(long)]
    m_mult: Option<f64>,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Cached curvature; defaults to the Fisher of the training gradients.
    #[arg(long)]
    curvature: Option<PathBuf>,
    #[arg(long)]
    lambda: f64,
    #[command(flatten)]
    size: SizeArgs,
    #[command(flatten)]
    acc: Accuracy,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    curvature: PathBuf,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    /// Comma-separated multipliers of d_λ.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    m_mult: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    /// Draw pairs from these gradient rows instead of F^{1/2} z.
    #[arg(long)]
    grads: Option<PathBuf>,
    #[arg(long, default_value = "gaussian")]
    sketch: SketchArg,
    /// Record wall time per row (makes output machine dependent).
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SpectrumArgs {
    curvature: PathBuf,
    /// CSV of ordered eigenvalues.
    #[arg(long)]
    out: PathBuf,
    /// CSV of the d_λ curve; defaults to `<out stem>_dlambda.csv`.
    #[arg(long)]
    dlambda_out: Option<PathBuf>,
}

#[derive(Args)]
struct LeakageArgs {
    curvature: PathBuf,
    /// Training gradients; row `--row` is `g`.
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Test gradients, one per row. The sketch defaults to Gaussian at the planned leakage size.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[command(flatten)]
    size: SizeArgs,
    #[command(flatten)]
    acc: Accuracy,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Debug)]
struct ShapeArg(GradientShape);

impl FromStr for ShapeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
        let int = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        match head {
            "flat" if rest.is_empty() => Ok(Self(GradientShape::Flat)),
            "powerlaw" => Ok(Self(GradientShape::PowerLaw(if rest.is_empty() { 1.0 } else { num(rest)? }))),
            "hard" => match rest.split(',').collect::<Vec<_>>()[..] {
                [k, r, eta] => Ok(Self(GradientShape::Hard { k: int(k)?, r: int(r)?, eta: num(eta)?, lambda: 1.0 })),
                _ => Err("hard needs k,r,eta".into()),
            },
            _ => Err(format!("unknown spectrum {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum SketchArg {
    Dense(FamilyKind),
    Kron(FamilyKind, FamilyKind),
}

fn parse_family(s: &str) -> std::result::Result<FamilyKind, String> {
    match s {
        "gaussian" => Ok(FamilyKind::Gaussian),
        "rademacher" => Ok(FamilyKind::Rademacher),
        "sjl" => Ok(FamilyKind::SparseJl(None)),
        _ => match s.strip_prefix("sjl:") {
            Some(x) => x
                .parse::<usize>()
                .ok()
                .filter(|&s| s > 0)
                .map(|s| FamilyKind::SparseJl(Some(s)))
                .ok_or_else(|| format!("bad sparsity in {s:?}")),
            None => Err(format!("unknown sketch family {s:?}")),
        },
    }
}

impl FromStr for SketchArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.strip_prefix("kron:") {
            Some(rest) => {
                let (a, e) = rest.split_once('x').ok_or("kron sketch is kron:<famA>x<famE>")?;
                Ok(Self::Kron(parse_family(a)?, parse_family(e)?))
            }
            None => Ok(Self::Dense(parse_family(s)?)),
        }
    }
}

/// An error that maps to exit code 2.
struct Failure(String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self(e.to_string())
    }
}

type CmdResult = std::result::Result<ExitCode, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure(msg.into())
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit_json<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut w = sink(out)?;
    w.write_all(to_json_string(value)?.as_bytes())?;
    Ok(w.flush()?)
}

fn policy(rank_tol: f64) -> Result<RankPolicy> {
    RankPolicy::new(rank_tol, 0.0)
}

fn curvature_summary(c: &Curvature) -> Result<serde_json::Value> {
    let eig = c.eig()?;
    Ok(json!({
        "kind": match c { Curvature::Dense(_) => "dense", Curvature::Kronecker(_) => "kronecker" },
        "dim": eig.dim(),
        "rank": eig.rank(),
        "trace": eig.trace(),
        "lambda_max": eig.lambda_max(),
        "lambda_min_plus": eig.lambda_min_plus().ok(),
    }))
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let shape = match a.spectrum.0 {
        GradientShape::Hard { k, r, eta, .. } => GradientShape::Hard { k, r, eta, lambda: a.lambda },
        s => s,
    };
    let g = generate_gradients(a.n, a.d, &shape, a.seed.unwrap_or(0))?;
    pio::save_gradients(&a.out, &g)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_fisher(a: FisherArgs) -> CmdResult {
    let g = pio::load_gradients(&a.grads)?;
    let c = Curvature::Dense(pio::fisher_eig(&g, policy(a.rank_tol)?)?);
    pio::save_curvature(&a.out, &c)?;
    emit_json(&None, &curvature_summary(&c)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_kfac_load(a: KfacArgs) -> CmdResult {
    let (fa, fe) = pio::load_factors(&a.factors)?;
    let c = Curvature::Kronecker(KroneckerPair::new(fa, fe, policy(a.rank_tol)?)?);
    pio::save_curvature(&a.out, &c)?;
    emit_json(&None, &curvature_summary(&c)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(a: PlanArgs) -> CmdResult {
    let c = pio::load_curvature(&a.curvature)?;
    let (eps, delta, cc) = (a.acc.eps, a.acc.delta, a.acc.c);
    if a.factorized {
        let Curvature::Kronecker(p) = &c else {
            return Err(usage("--factorized needs a Kronecker curvature (kfac-load)"));
        };
        emit_json(&a.out, &plan_factorized(p.eig_a(), p.eig_e(), a.lambda, eps, delta, cc)?)?;
    } else {
        emit_json(&a.out, &plan_sketch_size(&c.eig()?, a.lambda, eps, delta, cc)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Builds the sketch requested by `size`, or `None` for the exact path.
fn realize_sketch(size: &SizeArgs, acc: &Accuracy, c: &Curvature, lambda: f64, seed: u64) -> std::result::Result<Option<RealizedSketch>, Failure> {
    let Some(arg) = size.sketch else {
        if size.m.is_some() || size.m_mult.is_some() {
            return Err(usage("--m/--m-mult need --sketch"));
        }
        return Ok(None);
    };
    let seed = derive_seed(seed, streams::SKETCH, 0);
    let eig = c.eig()?;
    let sized = |d_lambda: f64, planned: usize| -> usize {
        match (size.m, size.m_mult) {
            (Some(m), _) => m,
            (None, Some(k)) => ((k * d_lambda).ceil() as usize).max(1),
            (None, None) => planned,
        }
    };
    match arg {
        SketchArg::Dense(fam) => {
            let (d_lambda, planned) = if lambda > 0.0 {
                let plan = plan_sketch_size(&eig, lambda, acc.eps, acc.delta, acc.c)?;
                (plan.d_lambda, plan.m_recommended)
            } else {
                (eig.rank() as f64, eig.rank().max(1))
            };
            Ok(Some(build_sketch(&fam.spec(sized(d_lambda, planned), eig.dim(), seed))?))
        }
        SketchArg::Kron(fa, fe) => {
            let Curvature::Kronecker(p) = c else {
                return Err(usage("a kron sketch needs a Kronecker curvature (kfac-load)"));
            };
            let (ma, me) = if let Some(m) = size.m {
                (m, m)
            } else {
                let plan = plan_factorized(p.eig_a(), p.eig_e(), lambda, acc.eps, acc.delta, acc.c)?;
                match size.m_mult {
                    Some(k) => (((k * plan.d_a_eff).ceil() as usize).max(1), ((k * plan.d_e_eff).ceil() as usize).max(1)),
                    None => (plan.m_a_recommended, plan.m_e_recommended),
                }
            };
            Ok(Some(build_sketch(&fa.kron_spec(fe, (ma, p.dim_a()), (me, p.dim_e()), seed)?)?))
        }
    }
}

fn cmd_attribute(a: AttributeArgs) -> CmdResult {
    let train = pio::load_gradients(&a.train)?;
    let test = pio::load_gradients(&a.test)?;
    let c = match &a.curvature {
        Some(p) => pio::load_curvature(p)?,
        None => Curvature::Dense(pio::fisher_eig(&train, RankPolicy::default())?),
    };
    let sk = realize_sketch(&a.size, &a.acc, &c, a.lambda, a.common.seed)?;
    let pol = c.eig()?.policy();
    let scores = influence_gram(&train, &test, &c.operator(), a.lambda, sk.as_ref(), pol)?;
    let records = (0..scores.nrows())
        .flat_map(|i| (0..scores.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| vec![i.to_string(), j.to_string(), format!("{:?}", scores[(i, j)])]);
    write_csv_records(sink(&a.common.out)?, &["train_idx", "test_idx", "score"], records)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let c = pio::load_curvature(&a.curvature)?;
    let SketchArg::Dense(family) = a.sketch else {
        return Err(usage("sweep takes a dense sketch family; Kronecker curvature is swept through its product decomposition"));
    };
    let source = match &a.grads {
        Some(p) => PairSource::Rows(pio::load_gradients(p)?),
        None => PairSource::Range,
    };
    let mut cfg = SweepConfig::new(a.lambdas, a.m_mult, a.trials, a.common.seed);
    cfg.pairs = a.pairs;
    cfg.family = family;
    cfg.timings = a.timings;
    let rows = run_sweep(&c.eig()?, &source, &cfg)?;
    write_csv(sink(&a.common.out)?, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let suite = Suite::from_str(&a.suite).map_err(|_| usage(format!("unknown suite {:?}; expected one of {}", a.suite, Suite::NAMES.join(", "))))?;
    let results = run_suite(suite, a.common.seed)?;
    for r in &results {
        eprintln!("{}", r.summary());
    }
    let all = results.iter().all(|r| r.pass);
    emit_json(&a.common.out, &json!({ "pass": all, "suite": a.suite, "seed": a.common.seed, "results": results }))?;
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn default_dlambda_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "spectrum".into());
    out.with_file_name(format!("{stem}_dlambda.csv"))
}

fn cmd_spectrum(a: SpectrumArgs) -> CmdResult {
    let eig = pio::load_curvature(&a.curvature)?.eig()?;
    let rows = eig.lambdas().iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), format!("{l:?}")]);
    write_csv_records(sink(&Some(a.out.clone()))?, &["i", "lambda_i"], rows)?;
    let grid: Vec<f64> = (-6..=6).map(|k| 10f64.powi(k)).collect();
    let curve = grid
        .iter()
        .map(|&l| effective_dim(&eig, l).map(|d| vec![format!("{l:?}"), format!("{d:?}")]))
        .collect::<Result<Vec<_>>>()?;
    let path = a.dlambda_out.unwrap_or_else(|| default_dlambda_path(&a.out));
    write_csv_records(sink(&Some(path))?, &["lambda", "d_lambda"], curve)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_leakage(a: LeakageArgs) -> CmdResult {
    let c = pio::load_curvature(&a.curvature)?;
    if matches!(c, Curvature::Kronecker(_)) {
        return Err(usage("leakage against Kronecker curvature needs rank-one test gradients; use the library's factorized_leakage"));
    }
    let eig = c.eig()?;
    let train = pio::load_gradients(&a.train)?;
    let test = pio::load_gradients(&a.test)?;
    if a.row >= train.nrows() {
        return Err(usage(format!("--row {} out of range ({} rows)", a.row, train.nrows())));
    }
    let g = train.row(a.row).transpose();
    let perps: Vec<_> = (0..test.nrows())
        .map(|j| projinf::leakage::decompose(&eig, &test.row(j).transpose()).map(|x| x.1))
        .collect::<Result<_>>()?;
    let stacked = Matrix::from_fn(perps.len(), eig.dim(), |i, j| perps[i][j]);
    let k_prime = span_dimension(&stacked, eig.policy());
    let plan = plan_leakage_sketch_size(eig.rank(), test.nrows(), k_prime, a.acc.eps, a.acc.delta, a.acc.c)?;
    // Defaults to a Gaussian sketch at the planned leakage size, clipped to d
    // like the regular planner's recommendation.
    let sized = SizeArgs {
        sketch: Some(a.size.sketch.unwrap_or(SketchArg::Dense(FamilyKind::Gaussian))),
        m: a.size.m.or(Some(plan.m.min(eig.dim()))).filter(|_| a.size.m_mult.is_none()),
        m_mult: a.size.m_mult,
    };
    let sk = realize_sketch(&sized, &a.acc, &c, a.lambda, a.common.seed)?.expect("sketch requested");
    let f = CurvatureOperator::Eigen(eig.clone());
    let reports = (0..test.nrows())
        .map(|j| leakage_report(&sk, &f, &eig, a.lambda, a.acc.eps, &g, &test.row(j).transpose()))
        .collect::<Result<Vec<_>>>()?;
    emit_json(&a.common.out, &json!({ "plan": plan, "k_prime": k_prime, "m_used": sk.m(), "reports": reports }))?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> CmdResult {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Fisher(a) => cmd_fisher(a),
        Command::KfacLoad(a) => cmd_kfac_load(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Leakage(a) => cmd_leakage(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
