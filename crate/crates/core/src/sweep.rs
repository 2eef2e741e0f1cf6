//! Error-versus-sketch-size sweeps: one row per `(λ, multiplier, trial)`
//! cell with percentile summaries over random pairs.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{ErrorProbe, SketchedSystem};
use crate::leakage::decompose;
use crate::linalg::{CompactEigen, CurvatureOperator, Matrix, Vector};
use crate::planner::effective_dim;
use crate::report::percentile;
use crate::rng::{derive_seed, gaussian_vector, rng_from_seed, streams};
use crate::sketch::{build_sketch, FamilyKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub m: usize,
    pub trial: usize,
    pub seed: u64,
    pub d_lambda: f64,
    pub eps_lambda_p50: f64,
    pub eps_lambda_p95: f64,
    /// 95th percentile of `|τ̃_λ(g, g'_⊥)| / (‖g‖ ‖g'_⊥‖ (1/λ + 2‖F‖/λ²))`;
    /// zero when `F` has full rank.
    pub leakage_p95: f64,
    /// Zero unless timings were requested, so reports stay byte-stable.
    pub wall_time_ms: u64,
}

/// Where the pairs `(g, g')` come from.
#[derive(Clone, Debug)]
pub enum PairSource {
    /// Random training rows (in `range(F)` when `F` is their Fisher).
    Rows(Matrix),
    /// `F^{1/2} z` with `z` standard Gaussian.
    Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub trials: usize,
    pub pairs: usize,
    pub seed: u64,
    pub family: FamilyKind,
    pub timings: bool,
}

impl SweepConfig {
    pub fn new(lambdas: Vec<f64>, multipliers: Vec<f64>, trials: usize, seed: u64) -> Self {
        Self { lambdas, multipliers, trials, pairs: 200, seed, family: FamilyKind::Gaussian, timings: false }
    }

    fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.multipliers.is_empty() || self.trials == 0 || self.pairs == 0 {
            return Err(Error::OutOfRangeParam("sweep needs lambdas, multipliers, trials >= 1 and pairs >= 1".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::NonPositiveLambda(*l));
        }
        if let Some(k) = self.multipliers.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::OutOfRangeParam(format!("multiplier must be positive, got {k}")));
        }
        Ok(())
    }
}

fn draw_pair<R: Rng>(eig: &CompactEigen, source: &PairSource, rng: &mut R) -> (Vector, Vector) {
    match source {
        PairSource::Rows(g) => {
            let i = rng.random_range(0..g.nrows());
            let j = rng.random_range(0..g.nrows());
            (g.row(i).transpose(), g.row(j).transpose())
        }
        PairSource::Range => {
            let s = eig.sqrt_factor();
            (&s * gaussian_vector(rng, eig.rank()), &s * gaussian_vector(rng, eig.rank()))
        }
    }
}

fn run_cell(eig: &CompactEigen, source: &PairSource, cfg: &SweepConfig, lambda: f64, mult: f64, trial: usize, seed: u64) -> Result<SweepRow> {
    let start = Instant::now();
    let d_lambda = effective_dim(eig, lambda)?;
    let m = ((mult * d_lambda).ceil() as usize).max(1);
    let sk = build_sketch(&cfg.family.spec(m, eig.dim(), derive_seed(seed, streams::SKETCH, 0)))?;
    let f = CurvatureOperator::Eigen(eig.clone());
    let system = SketchedSystem::new(&sk, &f, eig.policy())?;
    let probe = ErrorProbe::new(eig, &sk, &system);
    let mut rng = rng_from_seed(derive_seed(seed, streams::PAIRS, 0));
    let leak_scale = 1.0 / lambda + 2.0 * eig.lambda_max() / (lambda * lambda);
    let mut errs = Vec::with_capacity(cfg.pairs);
    let mut leaks = Vec::with_capacity(cfg.pairs);
    for _ in 0..cfg.pairs {
        let (g, h) = draw_pair(eig, source, &mut rng);
        if let Some(e) = probe.normalized_error(lambda, &g, &h)? {
            errs.push(e);
        }
        let (_, perp) = decompose(eig, &gaussian_vector(&mut rng, eig.dim()))?;
        let denom = g.norm() * perp.norm() * leak_scale;
        leaks.push(if denom > 0.0 && perp.norm() > 1e-12 {
            system.score(lambda, &sk.apply(&g)?, &sk.apply(&perp)?)?.abs() / denom
        } else {
            0.0
        });
    }
    Ok(SweepRow {
        lambda,
        m,
        trial,
        seed,
        d_lambda,
        eps_lambda_p50: percentile(&errs, 50.0),
        eps_lambda_p95: percentile(&errs, 95.0),
        leakage_p95: percentile(&leaks, 95.0),
        wall_time_ms: if cfg.timings { start.elapsed().as_millis() as u64 } else { 0 },
    })
}

/// Runs every cell (in parallel) and returns rows in `(λ, multiplier, trial)`
/// order. Cell `i` in that order uses `derive_seed(seed, SWEEP, i)`, so the
/// output does not depend on the thread count.
pub fn run_sweep(eig: &CompactEigen, source: &PairSource, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if eig.rank() == 0 {
        return Err(Error::ZeroRank);
    }
    if let PairSource::Rows(g) = source {
        crate::error::check_dim("run_sweep (pair rows)", eig.dim(), g.ncols())?;
        if g.nrows() == 0 {
            return Err(Error::OutOfRangeParam("no pair rows".into()));
        }
    }
    let cells: Vec<(f64, f64, usize)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| cfg.multipliers.iter().flat_map(move |&k| (0..cfg.trials).map(move |t| (l, k, t))))
        .collect();
    cells
        .par_iter()
        .enumerate()
        .map(|(i, &(l, k, t))| run_cell(eig, source, cfg, l, k, t, derive_seed(cfg.seed, streams::SWEEP, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_psd, Spectrum};

    fn eig() -> CompactEigen {
        random_psd(40, 10, &Spectrum::PowerLaw(1.0), 3).unwrap()
    }

    #[test]
    fn p95_decreases_with_multiplier() {
        let e = eig();
        let mut cfg = SweepConfig::new(vec![0.01, 0.1, 1.0], vec![1.0, 4.0, 16.0, 64.0], 1, 9);
        cfg.pairs = 100;
        let rows = run_sweep(&e, &PairSource::Range, &cfg).unwrap();
        assert_eq!(rows.len(), 12);
        for chunk in rows.chunks(4) {
            assert!(chunk.windows(2).all(|w| w[1].eps_lambda_p95 < w[0].eps_lambda_p95), "{chunk:?}");
        }
        assert!(rows.iter().all(|r| r.eps_lambda_p50 >= 0.0 && r.leakage_p95 >= 0.0 && r.wall_time_ms == 0));
    }

    #[test]
    fn heavy_regularization_is_easy() {
        let e = eig();
        let mut cfg = SweepConfig::new(vec![1e6], vec![1.0], 1, 1);
        cfg.pairs = 50;
        let rows = run_sweep(&e, &PairSource::Range, &cfg).unwrap();
        assert_eq!(rows[0].m, 1);
        assert!(rows[0].eps_lambda_p95 <= 0.1);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let e = eig();
        let cfg = SweepConfig::new(vec![0.1], vec![2.0, 8.0], 3, 5);
        let par = run_sweep(&e, &PairSource::Range, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let ser = pool.install(|| run_sweep(&e, &PairSource::Range, &cfg)).unwrap();
        assert_eq!(par, ser);
    }

    #[test]
    fn rejects_zero_lambda() {
        let cfg = SweepConfig::new(vec![0.0], vec![1.0], 1, 1);
        assert!(run_sweep(&eig(), &PairSource::Range, &cfg).is_err());
    }
}
