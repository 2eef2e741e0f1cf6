//! Range/kernel splits of test gradients and the sketch-induced leakage term.
//!
//! The exact form `τ_λ(g, g'_⊥)` vanishes for `g ∈ range(F)` and
//! `g'_⊥ ∈ ker(F)` because `(F + λI)^{-1}` preserves both subspaces. A sketch
//! mixes them through `P^T P`, which leaves a residual `τ̃_λ(g, g'_⊥)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::influence::{tau_exact, SketchedSystem};
use crate::linalg::{kron_vec, CompactEigen, CurvatureOperator, KroneckerPair, Vector};
use crate::planner::leakage_bounds;
use crate::sketch::RealizedSketch;

/// `(U U^T g', g' − U U^T g')`.
///
/// The kernel part is projected a second time so its range residue sits at
/// rounding level relative to itself, and it is exactly zero when `F` has
/// full rank or when it is indistinguishable from rounding noise.
pub fn decompose(eig: &CompactEigen, g_prime: &Vector) -> Result<(Vector, Vector)> {
    let mut par = eig.project_range(g_prime)?;
    let mut perp = g_prime - &par;
    let noise = 64.0 * f64::EPSILON * (eig.dim().max(1) as f64).sqrt() * g_prime.norm();
    if eig.rank() == eig.dim() || perp.norm() <= noise {
        return Ok((g_prime.clone(), Vector::zeros(g_prime.len())));
    }
    let back = eig.project_range(&perp)?;
    perp -= &back;
    par += back;
    Ok((par, perp))
}

/// Factor-level splits of a rank-one test gradient `a' ⊗ e'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSplit {
    pub a_par: Vector,
    pub a_perp: Vector,
    pub e_par: Vector,
    pub e_perp: Vector,
    /// `a_∥⊗e_⊥ + a_⊥⊗e_∥ + a_⊥⊗e_⊥`, the kernel component of `a' ⊗ e'` under `A ⊗ E`.
    pub g_perp: Vector,
}

pub fn decompose_factorized(
    eig_a: &CompactEigen,
    eig_e: &CompactEigen,
    a_prime: &Vector,
    e_prime: &Vector,
) -> Result<FactorSplit> {
    let (a_par, a_perp) = decompose(eig_a, a_prime)?;
    let (e_par, e_perp) = decompose(eig_e, e_prime)?;
    let g_perp = kron_vec(&a_par, &e_perp) + kron_vec(&a_perp, &e_par) + kron_vec(&a_perp, &e_perp);
    Ok(FactorSplit {
        a_par,
        a_perp,
        e_par,
        e_perp,
        g_perp,
    })
}

/// `|τ_λ(g, g_⊥)|` must stay below `NON_COUPLING_TOL · ‖g‖ ‖g_⊥‖ · max(1/λ, 1/λ⁺_min)`.
pub const NON_COUPLING_TOL: f64 = 1e-9;

fn coupling_scale(eig: &CompactEigen, lambda: f64, norm_g: f64, norm_perp: f64) -> f64 {
    let inv_min = eig.lambda_min_plus().map(|l| 1.0 / l).unwrap_or(0.0);
    let inv_lambda = if lambda > 0.0 { 1.0 / lambda } else { 0.0 };
    norm_g * norm_perp * inv_min.max(inv_lambda)
}

/// Sketched leakage and its exact counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageTerm {
    /// `τ̃_λ(g, g_⊥)`.
    pub sketched: f64,
    /// `τ_λ(g, g_⊥)`, zero up to rounding.
    pub exact: f64,
}

/// Sketched/exact pair evaluation against one decomposed sketched curvature.
#[derive(Clone, Copy)]
pub struct LeakageProbe<'a> {
    pub eig: &'a CompactEigen,
    pub sketch: &'a RealizedSketch,
    pub system: &'a SketchedSystem,
}

impl<'a> LeakageProbe<'a> {
    pub fn new(eig: &'a CompactEigen, sketch: &'a RealizedSketch, system: &'a SketchedSystem) -> Self {
        Self {
            eig,
            sketch,
            system,
        }
    }

    /// Re-projects `g` onto `range(F)` and `g_perp` onto `ker(F)`, then
    /// evaluates both forms. Fails if the exact form is not numerically zero.
    pub fn term(&self, lambda: f64, g: &Vector, g_perp: &Vector) -> Result<LeakageTerm> {
        let g = self.eig.project_range(g)?;
        let (_, g_perp) = decompose(self.eig, g_perp)?;
        let exact = tau_exact(self.eig, lambda, &g, &g_perp)?;
        let scale = coupling_scale(self.eig, lambda, g.norm(), g_perp.norm());
        if exact.abs() > NON_COUPLING_TOL * scale {
            return Err(Error::NumericalBreakdown(format!(
                "exact range/kernel coupling {exact:e} exceeds {:e}",
                NON_COUPLING_TOL * scale
            )));
        }
        let sketched = self
            .system
            .score(lambda, &self.sketch.apply(&g)?, &self.sketch.apply(&g_perp)?)?;
        Ok(LeakageTerm { sketched, exact })
    }

    /// Triangle split of the total error for `g ∈ range(F)` (re-projected).
    pub fn split(&self, lambda: f64, g: &Vector, g_prime: &Vector) -> Result<ErrorSplit> {
        let g = self.eig.project_range(g)?;
        let (par, perp) = decompose(self.eig, g_prime)?;
        let pg = self.sketch.apply(&g)?;
        let in_range = (self.system.score(lambda, &pg, &self.sketch.apply(&par)?)?
            - tau_exact(self.eig, lambda, &g, &par)?)
        .abs();
        let leakage = self.term(lambda, &g, &perp)?.sketched.abs();
        let total = (self.system.score(lambda, &pg, &self.sketch.apply(g_prime)?)?
            - tau_exact(self.eig, lambda, &g, g_prime)?)
        .abs();
        let scale = coupling_scale(self.eig, lambda, g.norm(), g_prime.norm()).max(total);
        if total > in_range + leakage + 1e-9 * scale.max(1.0) {
            return Err(Error::NumericalBreakdown(format!(
                "triangle split violated: {total:e} > {in_range:e} + {leakage:e}"
            )));
        }
        Ok(ErrorSplit {
            in_range,
            leakage,
            total,
        })
    }
}

/// `τ̃_λ(g, g_⊥)` with both inputs re-projected.
pub fn leakage_term(
    sk: &RealizedSketch,
    f: &CurvatureOperator,
    eig: &CompactEigen,
    lambda: f64,
    g: &Vector,
    g_perp: &Vector,
) -> Result<LeakageTerm> {
    check_dim("leakage_term", f.dim(), eig.dim())?;
    let system = SketchedSystem::new(sk, f, eig.policy())?;
    LeakageProbe::new(eig, sk, &system).term(lambda, g, g_perp)
}

/// Components of `|τ̃_λ(g, g') − τ_λ(g, g')|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSplit {
    /// `|τ̃_λ(g, g'_∥) − τ_λ(g, g'_∥)|`.
    pub in_range: f64,
    /// `|τ̃_λ(g, g'_⊥)|`.
    pub leakage: f64,
    /// `|τ̃_λ(g, g') − τ_λ(g, g')|`.
    pub total: f64,
}

/// Splits the total error into its in-range and leakage parts. `g` is treated
/// as a training gradient and projected onto `range(F)`.
pub fn total_error_split(
    sk: &RealizedSketch,
    f: &CurvatureOperator,
    eig: &CompactEigen,
    lambda: f64,
    g: &Vector,
    g_prime: &Vector,
) -> Result<ErrorSplit> {
    check_dim("total_error_split", f.dim(), eig.dim())?;
    let system = SketchedSystem::new(sk, f, eig.policy())?;
    LeakageProbe::new(eig, sk, &system).split(lambda, g, g_prime)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub norm_g_par: f64,
    pub norm_g_perp: f64,
    pub tau_exact_perp: f64,
    pub leakage_value: f64,
    /// `None` when `F = 0` (no nonzero eigenvalue).
    pub bound_unreg: Option<f64>,
    /// `None` at `λ = 0`.
    pub bound_reg: Option<f64>,
    pub epsilon: f64,
    pub lambda: f64,
    pub m: usize,
    pub seed: Option<u64>,
}

/// Leakage of one test gradient against a training gradient, with the
/// closed-form bounds at accuracy `epsilon`.
pub fn leakage_report(
    sk: &RealizedSketch,
    f: &CurvatureOperator,
    eig: &CompactEigen,
    lambda: f64,
    epsilon: f64,
    g: &Vector,
    g_prime: &Vector,
) -> Result<LeakageReport> {
    let (par, perp) = decompose(eig, g_prime)?;
    let term = leakage_term(sk, f, eig, lambda, g, &perp)?;
    let norm_g = eig.project_range(g)?.norm();
    let (bound_unreg, bound_reg) = if lambda > 0.0 {
        let b = leakage_bounds(eig, lambda, epsilon, norm_g, perp.norm())?;
        (Some(b.unregularized).filter(|x| x.is_finite()), Some(b.regularized))
    } else {
        let b = leakage_bounds(eig, 1.0, epsilon, norm_g, perp.norm())?;
        (Some(b.unregularized).filter(|x| x.is_finite()), None)
    };
    Ok(LeakageReport {
        norm_g_par: par.norm(),
        norm_g_perp: perp.norm(),
        tau_exact_perp: term.exact,
        leakage_value: term.sketched,
        bound_unreg,
        bound_reg,
        epsilon,
        lambda,
        m: sk.m(),
        seed: sk.seed(),
    })
}

/// Test gradient against Kronecker curvature.
#[derive(Clone, Debug)]
pub enum FactorizedTestGradient {
    RankOne { a: Vector, e: Vector },
    General(Vector),
}

/// Leakage of a rank-one test gradient under a Kronecker sketch and curvature.
///
/// General test gradients are rejected: the factorized guarantee only covers
/// `g' = a' ⊗ e'`.
pub fn factorized_leakage(
    sk: &RealizedSketch,
    pair: &KroneckerPair,
    system: &SketchedSystem,
    lambda: f64,
    g: &Vector,
    test: &FactorizedTestGradient,
) -> Result<(FactorSplit, LeakageTerm)> {
    let FactorizedTestGradient::RankOne { a, e } = test else {
        return Err(Error::Unsupported(
            "factorized leakage needs a rank-one test gradient a' ⊗ e'".into(),
        ));
    };
    if !sk.is_kronecker() {
        return Err(Error::FamilyMismatch("factorized leakage needs a Kronecker sketch".into()));
    }
    let split = decompose_factorized(pair.eig_a(), pair.eig_e(), a, e)?;
    // Projections through the factor bases: U_F = U_A ⊗ U_E.
    let g = kron_project(pair, g)?;
    let exact = kron_tau(pair, lambda, &g, &split.g_perp)?;
    let sketched = system.score(lambda, &sk.apply(&g)?, &sk.apply(&split.g_perp)?)?;
    Ok((split, LeakageTerm { sketched, exact }))
}

/// `(U_A U_A^T ⊗ U_E U_E^T) v`.
pub fn kron_project(pair: &KroneckerPair, v: &Vector) -> Result<Vector> {
    let g = crate::linalg::unvec(v, pair.dim_e(), pair.dim_a())?;
    let (ua, ue) = (pair.eig_a().basis(), pair.eig_e().basis());
    let proj = ue * (ue.tr_mul(&g) * ua) * ua.transpose();
    Ok(crate::linalg::vec_of(&proj))
}

/// Exact `τ_λ` under `A ⊗ E` via the product eigenbasis.
fn kron_tau(pair: &KroneckerPair, lambda: f64, x: &Vector, y: &Vector) -> Result<f64> {
    let gx = crate::linalg::unvec(x, pair.dim_e(), pair.dim_a())?;
    let gy = crate::linalg::unvec(y, pair.dim_e(), pair.dim_a())?;
    let (ua, ue) = (pair.eig_a().basis(), pair.eig_e().basis());
    let cx = ue.tr_mul(&gx) * ua;
    let cy = ue.tr_mul(&gy) * ua;
    let mut range = 0.0;
    for (i, &al) in pair.eig_a().lambdas().iter().enumerate() {
        for (j, &ga) in pair.eig_e().lambdas().iter().enumerate() {
            range += cx[(j, i)] * cy[(j, i)] / (al * ga + lambda);
        }
    }
    if lambda == 0.0 {
        return Ok(range);
    }
    let rx = gx - ue * &cx * ua.transpose();
    let ry = gy - ue * &cy * ua.transpose();
    Ok(range + rx.dot(&ry) / lambda)
}
