//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! process exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use projinf::io::fisher_eig;
use projinf::linalg::{compact_eig, CompactEigen, RankPolicy, SymmetricMatrix};
use projinf::planner::effective_dim;
use projinf::report::{to_json_string, write_csv};
use projinf::sketch::FamilyKind;
use projinf::sweep::{run_sweep, PairSource, SweepConfig};
use projinf::synth::{generate_gradients, random_psd, DenseInstanceSpec, GradientShape, KronInstanceSpec, LambdaSpec, Spectrum};
use projinf::verify::kfac::CALIBRATED_C_KFAC;
use projinf::verify::leakage::CALIBRATED_C_LEAKAGE;
use projinf::verify::sandwich::{calibration_corpus, CALIBRATED_C, CALIBRATION_SEED};
use projinf::verify::*;
use projinf::Result;

/// Seed for every held-out run; disjoint from the calibration seed.
const HELD_OUT: u64 = 20_261_016;

/// The sharper bound quoted for the 200-trial factorized and leakage runs.
const QUOTED_LIMIT: f64 = 0.13;

type Criterion = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { pass: true, notes: Vec::new() }
    }

    fn require(&mut self, ok: bool, note: String) {
        self.pass &= ok;
        self.notes.push(if ok { note } else { format!("FAILED {note}") });
    }

    fn probe(&mut self, r: &ProbeResult) {
        for c in &r.checks {
            let op = match c.direction {
                Direction::AtMost => "<=",
                Direction::AtLeast => ">=",
            };
            self.require(c.pass, format!("{}.{}={:.4e} {op} {:.4e}", r.name, c.name, c.statistic, c.threshold));
        }
    }

    fn stat(&mut self, r: &ProbeResult, check: &str, limit: f64) {
        let s = r.check(check).map_or(f64::NAN, |c| c.statistic);
        self.require(s <= limit, format!("{}.{check}={s:.4} <= {limit}", r.name));
    }

    fn within(&mut self, elapsed: Duration, secs: u64) {
        self.require(elapsed <= Duration::from_secs(secs), format!("runtime {:.1}s <= {secs}s", elapsed.as_secs_f64()));
    }
}

fn dichotomy() -> Result<Outcome> {
    let start = Instant::now();
    let r = probe_unregularized_dichotomy(&DichotomySetup {
        dim: 64,
        ranks: (0..20).map(|i| 4 + (i * 28) / 19).collect(),
        seeds_per_instance: 20,
        pairs: 50,
        base_seed: HELD_OUT,
        family: FamilyKind::Gaussian,
    })?;
    let mut o = Outcome::new();
    o.probe(&r);
    o.require(r.trials == 400, format!("trials={}", r.trials));
    o.within(start.elapsed(), 60);
    Ok(o)
}

fn regularized_upper_bound() -> Result<Outcome> {
    let start = Instant::now();
    let mut o = Outcome::new();
    let corpus = calibration_corpus();
    let cal = sandwich::calibrate_constant(&corpus, 0.25, 0.1, 400, CALIBRATION_SEED)?;
    o.require(cal.c == CALIBRATED_C && cal.c <= 64.0, format!("calibrated C={} (pinned {CALIBRATED_C})", cal.c));
    for (i, instance) in corpus.into_iter().enumerate() {
        let cfg = ProbeConfig::new(400, HELD_OUT + i as u64, 0.25, 0.1).with_c(cal.c);
        let r = probe_sandwich(&SandwichSetup { cfg, instance })?;
        o.probe(&r);
        o.stat(&r, "uniform_failure_rate", failure_threshold(0.1, 400));
        o.notes.push(format!("spectrum {i}: d_λ={:.3} m={}", r.details["d_lambda"], r.details["m"]));
    }
    o.within(start.elapsed(), 300);
    Ok(o)
}

fn rate() -> Result<Outcome> {
    let r = probe_rate(&RateSetup {
        trials: 200,
        base_seed: HELD_OUT,
        instance: DenseInstanceSpec {
            dim: 512,
            rank: 64,
            spectrum: Spectrum::PowerLaw(2.0),
            lambda: LambdaSpec::EffectiveDim(8.0),
        },
        family: FamilyKind::Gaussian,
        multipliers: vec![2, 8, 32],
    })?;
    let mut o = Outcome::new();
    o.probe(&r);
    o.require(r.checks.len() == 4, "two ratios: 2→8 and 8→32 times ceil(d_λ)".into());
    Ok(o)
}

fn lower_bound() -> Result<Outcome> {
    let start = Instant::now();
    let inst = HardInstance::new(8, 16, 48, 1.0, 0.5 / 288.0)?;
    let r = probe_lower_bound(&inst, 0.5, 32, 500, HELD_OUT)?;
    let mut o = Outcome::new();
    o.probe(&r);
    o.within(start.elapsed(), 60);
    Ok(o)
}

fn anti_concentration() -> Result<Outcome> {
    let r = probe_anti_concentration(128, 32, 2000, HELD_OUT, FamilyKind::Gaussian)?;
    let mut o = Outcome::new();
    o.probe(&r);
    o.require((r.details["frobenius_target"] - 8.25).abs() < 1e-12, "k(k+1)/m = 8.25".into());
    Ok(o)
}

fn factorized_barrier() -> Result<Outcome> {
    let r = probe_factorized_barrier(&KronBarrierSetup {
        dim_a: 8,
        rank_a: 3,
        dim_e: 8,
        rank_e: 4,
        seeds: 50,
        pairs: 20,
        base_seed: HELD_OUT,
    })?;
    let mut o = Outcome::new();
    o.probe(&r);
    Ok(o)
}

fn kron_corpus() -> Vec<KronInstanceSpec> {
    [(12, 6), (16, 8), (24, 8)]
        .iter()
        .map(|&(d, r)| KronInstanceSpec {
            dim_a: d,
            rank_a: r,
            spectrum_a: Spectrum::PowerLaw(1.0),
            dim_e: d,
            rank_e: r,
            spectrum_e: Spectrum::PowerLaw(1.0),
            lambda: LambdaSpec::Fixed(0.1),
        })
        .collect()
}

fn factorized_upper_bound() -> Result<Outcome> {
    let mut o = Outcome::new();
    let run = |instance: &KronInstanceSpec, seed: u64, c: f64| {
        probe_factorized_deviation(&KronDeviationSetup { cfg: ProbeConfig::new(200, seed, 0.3, 0.1).with_c(c), instance: instance.clone() })
    };
    let cal = sandwich::calibrate_with(|c| {
        for inst in kron_corpus() {
            let r = run(&inst, CALIBRATION_SEED, c)?;
            if !r.pass || r.check("influence_failure_rate").is_none_or(|x| x.statistic > QUOTED_LIMIT) {
                return Ok(false);
            }
        }
        Ok(true)
    })?;
    o.require(cal.c == CALIBRATED_C_KFAC, format!("calibrated C={} (pinned {CALIBRATED_C_KFAC})", cal.c));
    for (i, inst) in kron_corpus().iter().enumerate() {
        let r = run(inst, HELD_OUT + i as u64, cal.c)?;
        o.probe(&r);
        o.stat(&r, "influence_failure_rate", QUOTED_LIMIT);
        o.stat(&r, "triangle_violations", 0.0);
    }
    Ok(o)
}

fn application_identities() -> Result<Outcome> {
    let r = probe_application_identities(100, HELD_OUT)?;
    let mut o = Outcome::new();
    o.probe(&r);
    o.require(r.trials == 100, format!("instances={}", r.trials));
    Ok(o)
}

fn leakage() -> Result<Outcome> {
    let mut o = Outcome::new();
    let setup = |seed: u64, c: f64| LeakageSetup {
        cfg: ProbeConfig::new(200, seed, 0.3, 0.1).with_c(c),
        dim: 256,
        rank: 16,
        spectrum: Spectrum::PowerLaw(1.0),
        lambda: 0.1,
        test_gradients: 32,
    };
    let cal = sandwich::calibrate_with(|c| {
        let r = probe_leakage(&setup(CALIBRATION_SEED, c))?;
        Ok(r.pass && r.check("regularized_failure_rate").is_some_and(|x| x.statistic <= QUOTED_LIMIT))
    })?;
    o.require(cal.c == CALIBRATED_C_LEAKAGE, format!("calibrated C={} (pinned {CALIBRATED_C_LEAKAGE})", cal.c));
    let held = setup(HELD_OUT, cal.c);
    let r = probe_leakage(&held)?;
    o.probe(&r);
    o.stat(&r, "regularized_failure_rate", QUOTED_LIMIT);
    o.require(r.details["union_regime"] == 1.0 && r.details["k"] == 32.0, format!("k={} union regime", r.details["k"]));
    o.probe(&probe_leakage_decay(&held)?);
    let f = probe_factorized_leakage(&FactorizedLeakageSetup {
        cfg: ProbeConfig::new(200, HELD_OUT, 0.3, 0.1).with_c(cal.c),
        instance: KronInstanceSpec {
            dim_a: 16,
            rank_a: 6,
            spectrum_a: Spectrum::PowerLaw(1.0),
            dim_e: 16,
            rank_e: 6,
            spectrum_e: Spectrum::PowerLaw(1.0),
            lambda: LambdaSpec::Fixed(0.1),
        },
        test_gradients: 8,
    })?;
    o.probe(&f);
    o.stat(&f, "regularized_failure_rate", QUOTED_LIMIT);
    Ok(o)
}

fn effective_dimension() -> Result<Outcome> {
    let mut o = Outcome::new();
    let closed = |diag: &[f64], lambda: f64| diag.iter().map(|l| l / (l + lambda)).sum::<f64>();
    let from_diag = |diag: &[f64]| compact_eig(&SymmetricMatrix::from_diagonal(diag)?, RankPolicy::default());
    for (label, diag, want) in [("identity_4", vec![1.0; 4], 2.0), ("diag_3_1_0", vec![3.0, 1.0, 0.0], 1.25)] {
        let got = effective_dim(&from_diag(&diag)?, 1.0)?;
        o.require((got - want).abs() <= 1e-12 && (closed(&diag, 1.0) - want).abs() <= 1e-12, format!("{label}: {got} vs {want}"));
    }
    let hard = HardInstance::new(8, 16, 48, 1.0, 0.5 / 288.0)?;
    let eta = hard.eta;
    let want = 8.0 * 0.5 + 8.0 * eta / (eta + 1.0);
    let got = effective_dim(&hard.eig()?, 1.0)?;
    o.require((got - want).abs() <= 1e-12, format!("hard: {got} vs {want}"));

    let grid: Vec<f64> = (-6..=6).map(|k| 10f64.powi(k)).collect();
    let mut corpus: Vec<CompactEigen> = calibration_corpus()
        .iter()
        .enumerate()
        .map(|(i, s)| s.realize(HELD_OUT + i as u64).map(|x| x.eig))
        .collect::<Result<_>>()?;
    for spec in kron_corpus() {
        let pair = spec.realize(HELD_OUT)?.pair;
        corpus.extend([pair.eig_a().clone(), pair.eig_e().clone(), pair.product_eig()?]);
    }
    corpus.push(random_psd(256, 16, &Spectrum::PowerLaw(1.0), HELD_OUT)?);
    corpus.push(hard.eig()?);
    let mut bad = 0;
    for eig in &corpus {
        let curve = grid.iter().map(|&l| effective_dim(eig, l)).collect::<Result<Vec<_>>>()?;
        let bounded = curve.iter().all(|&d| d <= eig.rank() as f64);
        let monotone = curve.windows(2).all(|w| w[1] < w[0]);
        bad += usize::from(!(bounded && monotone));
    }
    o.require(bad == 0, format!("{} instances: d_λ <= r and decreasing on 13-point grid ({bad} bad)", corpus.len()));
    Ok(o)
}

fn determinism() -> Result<Outcome> {
    let mut o = Outcome::new();
    let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool");
    let (serial, parallel) = (pool(1), pool(4));

    let grads = generate_gradients(300, 48, &GradientShape::PowerLaw(1.0), HELD_OUT)?;
    let eig = fisher_eig(&grads, RankPolicy::default())?;
    let mut cfg = SweepConfig::new(vec![1e-3, 1e-2, 1e-1], vec![1.0, 4.0, 16.0], 2, HELD_OUT);
    cfg.pairs = 50;
    let source = PairSource::Rows(grads);
    let sweep_csv = || -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_csv(&mut buf, &run_sweep(&eig, &source, &cfg)?)?;
        Ok(buf)
    };
    let a = parallel.install(sweep_csv)?;
    let b = parallel.install(sweep_csv)?;
    let c = serial.install(sweep_csv)?;
    o.require(a == b && a == c, format!("sweep CSV ({} bytes) identical across reruns and 1 vs 4 threads", a.len()));

    let verify_json = || -> Result<String> { to_json_string(&run_suite(Suite::All, HELD_OUT)?) };
    let a = parallel.install(verify_json)?;
    let b = parallel.install(verify_json)?;
    let c = serial.install(verify_json)?;
    o.require(a == b && a == c, format!("verify JSON ({} bytes) identical across reruns and 1 vs 4 threads", a.len()));
    Ok(o)
}

fn main() -> ExitCode {
    // Accept and ignore libtest flags such as `--nocapture`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "exact-preservation dichotomy", dichotomy),
        (2, "regularized upper bound", regularized_upper_bound),
        (3, "m^-1/2 rate", rate),
        (4, "lower bound on hard instance", lower_bound),
        (5, "anti-concentration", anti_concentration),
        (6, "factorized exactness and barrier", factorized_barrier),
        (7, "factorized upper bound", factorized_upper_bound),
        (8, "factorized application identities", application_identities),
        (9, "leakage", leakage),
        (10, "effective-dimension analytics", effective_dimension),
        (11, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome { pass: false, notes: vec![format!("error: {e}")] });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {title} [{:.1}s]", start.elapsed().as_secs_f64());
        for n in &outcome.notes {
            println!("    {n}");
        }
        failed += usize::from(!outcome.pass);
    }
    println!("acceptance: {failed} criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
