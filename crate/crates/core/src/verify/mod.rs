//! Seeded, repeatable probes that check the sketching guarantees numerically.
//!
//! Every probe is a pure function of its configuration: trial `t` draws its
//! randomness from `derive_seed(base_seed, probe_stream, t)`, trials run in
//! parallel, and results are collected in trial order.
//!
//! Two kinds of checks appear. Deterministic implications (algebraic facts
//! about one realized sketch) must hold on every seed. Statistical claims use
//! the failure-rate protocol: an event promised with probability `1 − δ` may
//! fail on at most `δ + 2 sqrt(δ/T)` of `T` trials.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_spectral_norm, Matrix};
use crate::sketch::FamilyKind;

pub mod barrier;
pub mod kfac;
pub mod leakage;
pub mod lower;
pub mod sandwich;

pub use barrier::{
    dichotomy_exact_error, dichotomy_violation, probe_factorized_barrier,
    probe_unregularized_dichotomy, DichotomySetup, KronBarrierSetup, Violation,
};
pub use kfac::{
    cross_term_case, deviation_terms, probe_application_identities, probe_cross_term,
    probe_factorized_deviation, CrossTermCase, CrossTermSetup, DeviationTerms, KronDeviationSetup,
};
pub use leakage::{
    probe_factorized_leakage, probe_leakage, probe_leakage_decay, FactorizedLeakageSetup,
    LeakageSetup,
};
pub use lower::{probe_anti_concentration, probe_lower_bound, HardInstance};
pub use sandwich::{
    calibrate_constant, calibrate_with, probe_rate, probe_sandwich, sandwich_quantities,
    CalibrationReport, RateSetup, SandwichQuantities, SandwichSetup, CALIBRATION_GRID,
};

/// Comparison direction of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Pass when `statistic <= threshold`.
    AtMost,
    /// Pass when `statistic >= threshold`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub direction: Direction,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, statistic: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            threshold,
            direction: Direction::AtMost,
            pass: statistic <= threshold,
        }
    }

    pub fn at_least(name: &str, statistic: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            threshold,
            direction: Direction::AtLeast,
            pass: statistic >= threshold,
        }
    }

    /// `lo <= statistic <= hi`, reported as two checks.
    pub fn within(name: &str, statistic: f64, lo: f64, hi: f64) -> [Self; 2] {
        [
            Self::at_least(&format!("{name}_lower"), statistic, lo),
            Self::at_most(&format!("{name}_upper"), statistic, hi),
        ]
    }
}

/// Outcome of one probe.
///
/// `statistic`, `threshold` and `direction` mirror the first (primary) check;
/// `pass` requires every check to pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub pass: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub direction: Direction,
    pub trials: usize,
    /// Per-trial seeds, in trial order.
    pub seeds: Vec<u64>,
    /// Per-trial value of the primary quantity, aligned with `seeds`.
    pub values: Vec<f64>,
    pub checks: Vec<Check>,
    pub details: BTreeMap<String, f64>,
}

impl ProbeResult {
    pub fn new(
        name: &str,
        seeds: Vec<u64>,
        values: Vec<f64>,
        checks: Vec<Check>,
        details: BTreeMap<String, f64>,
    ) -> Self {
        let primary = checks.first().cloned().unwrap_or_else(|| Check::at_most("none", 0.0, 0.0));
        Self {
            name: name.into(),
            pass: checks.iter().all(|c| c.pass),
            statistic: primary.statistic,
            threshold: primary.threshold,
            direction: primary.direction,
            trials: seeds.len(),
            seeds,
            values,
            checks,
            details,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// JSON with keys sorted at every level.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("probe results serialize")
    }

    /// One human-readable line: `PASS name: statistic vs threshold`.
    pub fn summary(&self) -> String {
        let op = match self.direction {
            Direction::AtMost => "<=",
            Direction::AtLeast => ">=",
        };
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        format!(
            "{} {}: {:.6} {op} {:.6}{}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.statistic,
            self.threshold,
            if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
        )
    }
}

/// Shared knobs for the statistical probes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub trials: usize,
    pub base_seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub family: FamilyKind,
    /// Planner constant used to size sketches.
    pub c: f64,
}

impl ProbeConfig {
    pub fn new(trials: usize, base_seed: u64, epsilon: f64, delta: f64) -> Self {
        Self {
            trials,
            base_seed,
            epsilon,
            delta,
            family: FamilyKind::Gaussian,
            c: crate::planner::DEFAULT_C,
        }
    }

    pub fn with_c(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    pub fn with_family(mut self, family: FamilyKind) -> Self {
        self.family = family;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::OutOfRangeParam("trials must be >= 1".into()));
        }
        for (name, v) in [("epsilon", self.epsilon), ("delta", self.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::OutOfRangeParam(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::OutOfRangeParam(format!("C must be > 0, got {}", self.c)));
        }
        Ok(())
    }
}

/// Largest tolerated empirical failure rate for a `1 − δ` event over `T` trials.
pub fn failure_threshold(delta: f64, trials: usize) -> f64 {
    delta + 2.0 * (delta / trials as f64).sqrt()
}

/// Runs `f(t)` for `t in 0..trials` in parallel; output is in trial order.
pub(crate) fn run_trials<T, F>(trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..trials).into_par_iter().map(f).collect()
}

pub(crate) fn fraction(flags: impl IntoIterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        hit += f as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Median with the lower/upper middle averaged.
pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

/// `‖D (Q − I) D‖₂` with `D = diag(sqrt(w))`: the whitened covariance deviation
/// `‖B^T (P^T P − I) B‖₂` expressed in the eigenbasis of `F`, where
/// `Q = (PU)^T (PU)` and `w_j = λ_j / (λ_j + λ)`.
pub fn whitened_deviation(q: &Matrix, weights: &[f64]) -> f64 {
    let r = weights.len();
    let s: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let dev = Matrix::from_fn(r, r, |i, j| {
        s[i] * s[j] * (q[(i, j)] - if i == j { 1.0 } else { 0.0 })
    });
    sym_spectral_norm(&dev)
}

/// `sup |τ̃_λ(g,g') − τ_λ(g,g')| / sqrt(τ₀(g,g) τ₀(g',g'))` over all
/// `g, g' ∈ range(F)`, for the sketch whose range Gram is `Q = (PU)^T (PU)`.
///
/// With `K = Λ^{1/2} Q Λ^{1/2}` the sketched score of `g = U Λ^{1/2} y` is
/// `y^T K (K + λ)^{-1} y'` and the exact one `y^T diag(w) y'`, so the supremum
/// is the spectral norm of the difference. This equals
/// `‖F(F+λI)^{-1} − G(G+λI)^{-1}‖₂` with `G = F^{1/2} P^T P F^{1/2}`.
pub fn uniform_influence_error(q: &Matrix, lambdas: &[f64], lambda: f64) -> f64 {
    let r = lambdas.len();
    if r == 0 {
        return 0.0;
    }
    let h: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    let k = Matrix::from_fn(r, r, |i, j| h[i] * h[j] * q[(i, j)]);
    let k = (&k + k.transpose()) * 0.5;
    let se = SymmetricEigen::new(k);
    let f: Vec<f64> = se
        .eigenvalues
        .iter()
        .map(|&s| {
            let s = s.max(0.0);
            s / (s + lambda)
        })
        .collect();
    let v = &se.eigenvectors;
    let mut diff = Matrix::zeros(r, r);
    for i in 0..r {
        for j in 0..=i {
            let mut acc = 0.0;
            for (t, ft) in f.iter().enumerate() {
                acc += v[(i, t)] * ft * v[(j, t)];
            }
            if i == j {
                acc -= lambdas[i] / (lambdas[i] + lambda);
            }
            diff[(i, j)] = acc;
            diff[(j, i)] = acc;
        }
    }
    sym_spectral_norm(&diff)
}

/// Named probe groups for the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Barrier,
    Sandwich,
    Lower,
    Anti,
    Kfac,
    Leakage,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "barrier" => Self::Barrier,
            "sandwich" => Self::Sandwich,
            "lower" => Self::Lower,
            "anti" => Self::Anti,
            "kfac" => Self::Kfac,
            "leakage" => Self::Leakage,
            other => return Err(Error::InvalidSpec(format!("unknown suite '{other}'"))),
        })
    }
}

impl Suite {
    pub const NAMES: [&'static str; 7] = ["all", "barrier", "sandwich", "lower", "anti", "kfac", "leakage"];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

/// Runs a suite with small default configurations (seconds, not minutes).
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<ProbeResult>> {
    use crate::synth::{DenseInstanceSpec, KronInstanceSpec, LambdaSpec, Spectrum};
    let mut out = Vec::new();
    if suite.includes(Suite::Barrier) {
        out.push(probe_unregularized_dichotomy(&DichotomySetup {
            dim: 32,
            ranks: vec![4, 8, 16],
            seeds_per_instance: 5,
            pairs: 20,
            base_seed: seed,
            family: FamilyKind::Gaussian,
        })?);
        out.push(probe_factorized_barrier(&KronBarrierSetup {
            dim_a: 8,
            rank_a: 3,
            dim_e: 8,
            rank_e: 4,
            seeds: 10,
            pairs: 10,
            base_seed: seed,
        })?);
    }
    if suite.includes(Suite::Sandwich) {
        let setup = SandwichSetup {
            cfg: ProbeConfig::new(100, seed, 0.25, 0.1).with_c(sandwich::CALIBRATED_C),
            instance: DenseInstanceSpec {
                dim: 128,
                rank: 32,
                spectrum: Spectrum::PowerLaw(1.0),
                lambda: LambdaSpec::EffectiveDim(4.0),
            },
        };
        out.push(probe_sandwich(&setup)?);
    }
    if suite.includes(Suite::Lower) {
        out.push(probe_lower_bound(&HardInstance::new(8, 16, 48, 1.0, 0.5 / 288.0)?, 0.5, 32, 200, seed)?);
    }
    if suite.includes(Suite::Anti) {
        out.push(probe_anti_concentration(128, 32, 500, seed, FamilyKind::Gaussian)?);
    }
    if suite.includes(Suite::Kfac) {
        out.push(probe_application_identities(20, seed)?);
        out.push(probe_cross_term(&CrossTermSetup {
            dim_a: 6,
            rank_a: 3,
            dim_e: 5,
            rank_e: 2,
            m_a: 8,
            m_e: 8,
            seeds: 50,
            base_seed: seed,
        })?);
        out.push(probe_factorized_deviation(&KronDeviationSetup {
            cfg: ProbeConfig::new(50, seed, 0.3, 0.1).with_c(kfac::CALIBRATED_C_KFAC),
            instance: KronInstanceSpec {
                dim_a: 12,
                rank_a: 6,
                spectrum_a: Spectrum::PowerLaw(1.0),
                dim_e: 12,
                rank_e: 6,
                spectrum_e: Spectrum::PowerLaw(1.0),
                lambda: LambdaSpec::Fixed(0.1),
            },
        })?);
    }
    if suite.includes(Suite::Leakage) {
        out.push(probe_leakage(&LeakageSetup {
            cfg: ProbeConfig::new(50, seed, 0.3, 0.1).with_c(leakage::CALIBRATED_C_LEAKAGE),
            dim: 64,
            rank: 8,
            spectrum: Spectrum::PowerLaw(1.0),
            lambda: 0.1,
            test_gradients: 8,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{CompactEigen, RankPolicy};
    use crate::rng::{gaussian_vector, rng_from_seed};
    use crate::sketch::{build_sketch, RealizedSketch, SketchSpec};
    use crate::influence::{ErrorProbe, SketchedSystem};
    use crate::linalg::CurvatureOperator;
    use crate::synth::random_psd;
    use crate::synth::Spectrum;

    #[test]
    fn threshold_formula() {
        assert!((failure_threshold(0.1, 400) - 0.131_622_776_601_683_8).abs() < 1e-15);
    }

    #[test]
    fn median_and_fraction() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(fraction([true, false, true, true]), 0.75);
    }

    #[test]
    fn identity_sketch_has_no_error() {
        let w = [0.9, 0.5, 0.1];
        let q = Matrix::identity(3, 3);
        assert_eq!(whitened_deviation(&q, &w), 0.0);
        assert!(uniform_influence_error(&q, &[9.0, 1.0, 1.0 / 9.0], 1.0) < 1e-15);
    }

    // The closed-form supremum dominates every sampled pair and is nearly
    // attained by the top singular pair.
    #[test]
    fn uniform_error_dominates_pairs() {
        let eig: CompactEigen = random_psd(40, 6, &Spectrum::PowerLaw(1.0), 3).unwrap();
        let lambda = 0.05;
        let sk: RealizedSketch = build_sketch(&SketchSpec::gaussian(12, 40, 9)).unwrap();
        let pu = sk.apply_matrix(eig.basis()).unwrap();
        let sup = uniform_influence_error(&pu.tr_mul(&pu), eig.lambdas(), lambda);
        let f = CurvatureOperator::Eigen(eig.clone());
        let system = SketchedSystem::new(&sk, &f, RankPolicy::default()).unwrap();
        let probe = ErrorProbe::new(&eig, &sk, &system);
        let mut rng = rng_from_seed(4);
        let mut best: f64 = 0.0;
        for _ in 0..300 {
            let g = eig.sqrt_factor() * gaussian_vector(&mut rng, 6);
            let h = eig.sqrt_factor() * gaussian_vector(&mut rng, 6);
            let e = probe.normalized_error(lambda, &g, &h).unwrap().unwrap();
            assert!(e <= sup + 1e-10);
            best = best.max(e);
        }
        assert!(best > 0.3 * sup);
    }

    #[test]
    fn json_keys_are_sorted() {
        let r = ProbeResult::new(
            "x",
            vec![1, 2],
            vec![0.5, 0.25],
            vec![Check::at_most("rate", 0.1, 0.2)],
            BTreeMap::from([("zeta".to_string(), 1.0), ("alpha".to_string(), 2.0)]),
        );
        let v = r.to_json();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["checks", "details", "direction", "name", "pass", "seeds", "statistic", "threshold", "trials", "values"]);
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.find("\"alpha\"").unwrap() < s.find("\"zeta\"").unwrap());
        assert!(r.pass);
    }

    #[test]
    fn suite_names_parse() {
        for n in Suite::NAMES {
            assert!(n.parse::<Suite>().is_ok());
        }
        assert!("bogus".parse::<Suite>().is_err());
    }
}
