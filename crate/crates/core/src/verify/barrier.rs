//! Exactness without regularization holds iff the sketch is injective on
//! `range(F)`; for Kronecker sketches iff each factor is injective on its
//! factor's range.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{fraction, max_of, run_trials, Check, ProbeResult};
use crate::error::Result;
use crate::influence::{tau_exact, ErrorProbe, SketchedSystem};
use crate::linalg::{kron_vec, CompactEigen, CurvatureOperator, KroneckerPair, Matrix, RankPolicy, Vector};
use crate::rng::{derive_seed, gaussian_vector, rng_from_seed, streams, unit_vector};
use crate::sketch::{build_sketch, FamilyKind, RealizedSketch};
use crate::synth::{random_psd, Spectrum};

/// Sketched systems here resolve rank down to `sqrt(1e-13)` relative singular
/// value: a square `PU` is full rank, just occasionally ill-conditioned.
fn barrier_policy() -> RankPolicy {
    RankPolicy::new(1e-13, 0.0).expect("valid policy")
}

const EXACT_TOL: f64 = 1e-8;
const VIOLATION_RATIO: f64 = 1e-9;
/// Eigenvalues in `[0.1, 10]` force `τ₀(Uz, Uz) >= 0.1` for unit `z`.
const SPECTRUM: Spectrum = Spectrum::LogUniform { lo: 0.1, hi: 10.0 };

/// Unit `z` with `‖M z‖` minimal; `None` when `M` has full column rank.
fn null_vector(m: &Matrix) -> Option<Vector> {
    let (rows, cols) = m.shape();
    // Zero-padding to a square matrix makes the SVD return a full right basis.
    let mut padded = Matrix::zeros(rows.max(cols), cols);
    padded.rows_mut(0, rows).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let (imin, smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, s)| (i, *s))?;
    let smax = svd.singular_values.max();
    if smin > 1e-12 * smax.max(f64::MIN_POSITIVE) {
        return None;
    }
    Some(vt.row(imin).transpose())
}

/// Largest normalized error `|τ̃₀ − τ₀| / sqrt(τ₀(g,g) τ₀(g',g'))` over
/// `pairs` random pairs in `range(F)`.
pub fn dichotomy_exact_error(eig: &CompactEigen, sk: &RealizedSketch, pairs: usize, seed: u64) -> Result<f64> {
    let f = CurvatureOperator::Eigen(eig.clone());
    let system = SketchedSystem::new(sk, &f, barrier_policy())?;
    let probe = ErrorProbe::new(eig, sk, &system);
    let mut rng = rng_from_seed(seed);
    let basis = eig.basis();
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let g = basis * gaussian_vector(&mut rng, eig.rank());
        let h = basis * gaussian_vector(&mut rng, eig.rank());
        if let Some(e) = probe.normalized_error(0.0, &g, &h)? {
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// A gradient the sketch cannot see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub tau_exact: f64,
    pub tau_sketched: f64,
}

impl Violation {
    pub fn confirmed(&self) -> bool {
        self.tau_exact > 0.0 && self.tau_sketched.abs() <= VIOLATION_RATIO * self.tau_exact
    }
}

/// `g = U z` with `PUz = 0`, when such `z` exists.
pub fn dichotomy_violation(eig: &CompactEigen, sk: &RealizedSketch) -> Result<Option<Violation>> {
    let pu = sk.apply_matrix(eig.basis())?;
    let Some(z) = null_vector(&pu) else {
        return Ok(None);
    };
    let g = eig.basis() * z;
    let f = CurvatureOperator::Eigen(eig.clone());
    let system = SketchedSystem::new(sk, &f, barrier_policy())?;
    let pg = sk.apply(&g)?;
    Ok(Some(Violation {
        tau_exact: tau_exact(eig, 0.0, &g, &g)?,
        tau_sketched: system.score(0.0, &pg, &pg)?,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomySetup {
    pub dim: usize,
    /// One random instance per entry.
    pub ranks: Vec<usize>,
    pub seeds_per_instance: usize,
    pub pairs: usize,
    pub base_seed: u64,
    pub family: FamilyKind,
}

struct DichotomyTrial {
    seed: u64,
    exact_error: f64,
    violation: Option<Violation>,
}

/// `m = r`: exact on every sampled pair. `m = r − 1`: a blind direction exists.
pub fn probe_unregularized_dichotomy(setup: &DichotomySetup) -> Result<ProbeResult> {
    let per = setup.seeds_per_instance;
    let instances: Vec<CompactEigen> = setup
        .ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| random_psd(setup.dim, r, &SPECTRUM, derive_seed(setup.base_seed, streams::INSTANCE, i as u64)))
        .collect::<Result<_>>()?;
    let trials = run_trials(instances.len() * per, |t| {
        let eig = &instances[t / per];
        let r = eig.rank();
        let seed = derive_seed(setup.base_seed, streams::PROBE_BARRIER, t as u64);
        let full = build_sketch(&setup.family.spec(r, setup.dim, derive_seed(seed, streams::SKETCH, 0)))?;
        let exact_error = dichotomy_exact_error(eig, &full, setup.pairs, derive_seed(seed, streams::PAIRS, 0))?;
        let violation = if r >= 2 {
            let short = build_sketch(&setup.family.spec(r - 1, setup.dim, derive_seed(seed, streams::SKETCH, 1)))?;
            dichotomy_violation(eig, &short)?
        } else {
            None
        };
        Ok(DichotomyTrial { seed, exact_error, violation })
    })?;
    let max_error = max_of(trials.iter().map(|t| t.exact_error));
    let found = fraction(trials.iter().map(|t| t.violation.as_ref().is_some_and(Violation::confirmed)));
    let min_tau = trials
        .iter()
        .filter_map(|t| t.violation.as_ref().map(|v| v.tau_exact))
        .fold(f64::INFINITY, f64::min);
    let worst_ratio = max_of(
        trials
            .iter()
            .filter_map(|t| t.violation.as_ref().map(|v| v.tau_sketched.abs() / v.tau_exact)),
    );
    let checks = vec![
        Check::at_most("max_exact_error", max_error, EXACT_TOL),
        Check::at_least("violation_fraction", found, 1.0),
        Check::at_least("min_violation_tau0", min_tau, 0.1),
    ];
    let details = BTreeMap::from([("worst_violation_ratio".to_string(), worst_ratio)]);
    Ok(ProbeResult::new(
        "unregularized_dichotomy",
        trials.iter().map(|t| t.seed).collect(),
        trials.iter().map(|t| t.exact_error).collect(),
        checks,
        details,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronBarrierSetup {
    pub dim_a: usize,
    pub rank_a: usize,
    pub dim_e: usize,
    pub rank_e: usize,
    pub seeds: usize,
    pub pairs: usize,
    pub base_seed: u64,
}

/// Outcome of one `(m_A, m_E)` quadrant.
fn quadrant(
    pair: &KroneckerPair,
    product: &CompactEigen,
    m_a: usize,
    m_e: usize,
    pairs: usize,
    seed: u64,
) -> Result<(bool, f64)> {
    let (ea, ee) = (pair.eig_a(), pair.eig_e());
    let pa = build_sketch(&FamilyKind::Gaussian.spec(m_a, pair.dim_a(), derive_seed(seed, streams::KRON_FACTOR_A, 0)))?;
    let pe = build_sketch(&FamilyKind::Gaussian.spec(m_e, pair.dim_e(), derive_seed(seed, streams::KRON_FACTOR_E, 0)))?;
    let expect_exact = m_a >= ea.rank() && m_e >= ee.rank();
    let mut rng = rng_from_seed(derive_seed(seed, streams::PAIRS, 0));
    if expect_exact {
        let sk = RealizedSketch::kronecker(pa, pe)?;
        let f = CurvatureOperator::Kronecker(pair.clone());
        let system = SketchedSystem::new(&sk, &f, barrier_policy())?;
        let probe = ErrorProbe::new(product, &sk, &system);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let g = product.basis() * gaussian_vector(&mut rng, product.rank());
            let h = product.basis() * gaussian_vector(&mut rng, product.rank());
            if let Some(e) = probe.normalized_error(0.0, &g, &h)? {
                worst = worst.max(e);
            }
        }
        return Ok((worst <= EXACT_TOL, worst));
    }
    // Blind direction: a null vector of the deficient factor tensored with an
    // in-range vector of the other factor.
    let a_null = null_vector(&pa.apply_matrix(ea.basis())?);
    let e_null = null_vector(&pe.apply_matrix(ee.basis())?);
    let (a_vec, e_vec) = match (a_null, e_null) {
        (Some(z), _) if m_a < ea.rank() => (ea.basis() * z, ee.basis() * unit_vector(&mut rng, ee.rank())),
        (_, Some(z)) => (ea.basis() * unit_vector(&mut rng, ea.rank()), ee.basis() * z),
        _ => return Ok((false, f64::NAN)),
    };
    let g = kron_vec(&a_vec, &e_vec);
    let sk = RealizedSketch::kronecker(pa, pe)?;
    let f = CurvatureOperator::Kronecker(pair.clone());
    let system = SketchedSystem::new(&sk, &f, barrier_policy())?;
    let pg = sk.apply(&g)?;
    let v = Violation {
        tau_exact: tau_exact(product, 0.0, &g, &g)?,
        tau_sketched: system.score(0.0, &pg, &pg)?,
    };
    Ok((v.confirmed(), v.tau_sketched.abs() / v.tau_exact))
}

/// All four `(m_A, m_E)` quadrants around the factor ranks.
pub fn probe_factorized_barrier(setup: &KronBarrierSetup) -> Result<ProbeResult> {
    let sizes = [
        (setup.rank_a, setup.rank_e),
        (setup.rank_a - 1, setup.rank_e),
        (setup.rank_a, setup.rank_e - 1),
        (setup.rank_a - 1, setup.rank_e - 1),
    ];
    let trials = run_trials(setup.seeds, |t| {
        let seed = derive_seed(setup.base_seed, streams::PROBE_KFAC_BARRIER, t as u64);
        let ea = random_psd(setup.dim_a, setup.rank_a, &SPECTRUM, derive_seed(seed, streams::INSTANCE, 0))?;
        let ee = random_psd(setup.dim_e, setup.rank_e, &SPECTRUM, derive_seed(seed, streams::INSTANCE, 1))?;
        let pair = KroneckerPair::from_eigs(ea, ee)?;
        let product = pair.product_eig()?;
        let outcomes = sizes
            .iter()
            .enumerate()
            .map(|(q, &(ma, me))| quadrant(&pair, &product, ma, me, setup.pairs, derive_seed(seed, streams::SKETCH, q as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok((seed, outcomes))
    })?;
    let mut checks = vec![Check::at_least(
        "conformance",
        fraction(trials.iter().flat_map(|(_, o)| o.iter().map(|x| x.0))),
        1.0,
    )];
    let labels = ["full", "a_deficient", "e_deficient", "both_deficient"];
    for (q, label) in labels.iter().enumerate() {
        checks.push(Check::at_least(label, fraction(trials.iter().map(|(_, o)| o[q].0)), 1.0));
    }
    let details = BTreeMap::from([(
        "max_full_error".to_string(),
        max_of(trials.iter().map(|(_, o)| o[0].1)),
    )]);
    Ok(ProbeResult::new(
        "factorized_barrier",
        trials.iter().map(|t| t.0).collect(),
        trials.iter().map(|(_, o)| fraction(o.iter().map(|x| x.0))).collect(),
        checks,
        details,
    ))
}
