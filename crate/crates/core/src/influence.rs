//! Exact and sketched influence scores `g^T (F + λI)^{-1} g'`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    gram_eig, unvec, vec_of, CompactEigen, CurvatureOperator, Matrix, RankPolicy, Vector,
};
use crate::sketch::{build_sketch, sketched_eig, RealizedSketch, SketchSpec};

/// Self-norms at or below this make the normalized error undefined.
pub const SELF_NORM_FLOOR: f64 = 1e-14;

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfRangeParam(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )))
    }
}

/// `x^T (F + λI)^{-1} y` (or `x^T F^† y` at `λ = 0`) in a form that is
/// exactly symmetric in `(x, y)`: the range part goes through the
/// eigen-coefficients and the kernel part through projection residuals.
fn eig_bilinear(eig: &CompactEigen, lambda: f64, x: &Vector, y: &Vector) -> f64 {
    let u = eig.basis();
    let cx = u.tr_mul(x);
    let cy = u.tr_mul(y);
    let range: f64 = cx
        .iter()
        .zip(cy.iter())
        .zip(eig.lambdas())
        .map(|((a, b), &l)| a * b / (l + lambda))
        .sum();
    if lambda == 0.0 {
        return range;
    }
    let rx = x - u * &cx;
    let ry = y - u * &cy;
    range + rx.dot(&ry) / lambda
}

/// `τ_λ(g, g')`; `λ = 0` uses the pseudoinverse.
pub fn tau_exact(eig: &CompactEigen, lambda: f64, g: &Vector, g_prime: &Vector) -> Result<f64> {
    check_lambda(lambda)?;
    check_dim("tau_exact (g)", eig.dim(), g.len())?;
    check_dim("tau_exact (g')", eig.dim(), g_prime.len())?;
    Ok(eig_bilinear(eig, lambda, g, g_prime))
}

#[derive(Clone, Debug)]
enum SystemKind {
    Dense(CompactEigen),
    /// Decompositions of `Â = P_A A P_A^T` and `Ê = P_E E P_E^T`.
    Kronecker { a: CompactEigen, e: CompactEigen },
}

/// The sketched curvature `P F P^T`, decomposed once and reusable for any
/// `λ` and any number of sketched gradient pairs.
///
/// The pseudoinverse cutoff is taken relative to the sketched spectrum's
/// own largest eigenvalue.
#[derive(Clone, Debug)]
pub struct SketchedSystem {
    kind: SystemKind,
    m: usize,
}

impl SketchedSystem {
    pub fn new(sk: &RealizedSketch, f: &CurvatureOperator, policy: RankPolicy) -> Result<Self> {
        check_dim("SketchedSystem::new", sk.d(), f.dim())?;
        let kind = match (f, sk.factors()) {
            (CurvatureOperator::Kronecker(pair), Some((pa, pe))) => SystemKind::Kronecker {
                a: gram_eig(&pa.apply_matrix(&pair.eig_a().sqrt_factor())?, policy)?,
                e: gram_eig(&pe.apply_matrix(&pair.eig_e().sqrt_factor())?, policy)?,
            },
            _ => SystemKind::Dense(sketched_eig(sk, f, policy)?),
        };
        Ok(Self { kind, m: sk.m() })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Rank of the sketched curvature.
    pub fn rank(&self) -> usize {
        match &self.kind {
            SystemKind::Dense(e) => e.rank(),
            SystemKind::Kronecker { a, e } => a.rank() * e.rank(),
        }
    }

    /// `(P F P^T + λI)^{-1} w`, or `(P F P^T)^† w` at `λ = 0`.
    pub fn solve(&self, lambda: f64, w: &Vector) -> Result<Vector> {
        check_lambda(lambda)?;
        check_dim("SketchedSystem::solve", self.m, w.len())?;
        let out = match &self.kind {
            SystemKind::Dense(e) => e.solve(lambda, w)?,
            SystemKind::Kronecker { a, e } => kron_solve(a, e, lambda, w)?,
        };
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NumericalBreakdown("non-finite sketched solve".into()))
        }
    }

    /// `(Pg)^T (P F P^T + λI)^{-1} (Pg')` from already-sketched gradients.
    pub fn score(&self, lambda: f64, pg: &Vector, pg_prime: &Vector) -> Result<f64> {
        check_lambda(lambda)?;
        check_dim("SketchedSystem::score (Pg)", self.m, pg.len())?;
        check_dim("SketchedSystem::score (Pg')", self.m, pg_prime.len())?;
        let s = match &self.kind {
            SystemKind::Dense(e) => eig_bilinear(e, lambda, pg, pg_prime),
            SystemKind::Kronecker { .. } => pg.dot(&self.solve(lambda, pg_prime)?),
        };
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::NumericalBreakdown("non-finite sketched score".into()))
        }
    }
}

/// `(Â ⊗ Ê + λI)^{-1} w` in the product eigenbasis; `λ = 0` gives `Â^† ⊗ Ê^†`.
fn kron_solve(a: &CompactEigen, e: &CompactEigen, lambda: f64, w: &Vector) -> Result<Vector> {
    let x = unvec(w, e.dim(), a.dim())?;
    let (ua, ue) = (a.basis(), e.basis());
    let c = ue.tr_mul(&x) * ua;
    let mut scaled = c.clone();
    for (i, &al) in a.lambdas().iter().enumerate() {
        for (j, &ga) in e.lambdas().iter().enumerate() {
            scaled[(j, i)] = c[(j, i)] / (al * ga + lambda);
        }
    }
    if lambda == 0.0 {
        return Ok(vec_of(&(ue * scaled * ua.transpose())));
    }
    // Range part minus its kernel-complement double count, plus x / λ.
    let core = scaled - c / lambda;
    Ok(vec_of(&(ue * core * ua.transpose() + x / lambda)))
}

/// `τ̃_λ(g, g') = (Pg)^T (P F P^T + λI_m)^{-1} (Pg')`.
pub fn tau_sketched(
    sk: &RealizedSketch,
    f: &CurvatureOperator,
    lambda: f64,
    g: &Vector,
    g_prime: &Vector,
) -> Result<f64> {
    check_dim("tau_sketched (g)", f.dim(), g.len())?;
    check_dim("tau_sketched (g')", f.dim(), g_prime.len())?;
    let system = SketchedSystem::new(sk, f, RankPolicy::default())?;
    system.score(lambda, &sk.apply(g)?, &sk.apply(g_prime)?)
}

/// Rows of `grads` (`n × d`) sketched: returns `n × m`.
pub fn sketch_rows(sk: &RealizedSketch, grads: &Matrix) -> Result<Matrix> {
    check_dim("sketch_rows", sk.d(), grads.ncols())?;
    Ok(sk.apply_matrix(&grads.transpose())?.transpose())
}

/// Attribution matrix: entry `(i, j)` is the score of train row `i` against
/// test row `j`, exact or sketched.
pub fn influence_gram(
    train: &Matrix,
    test: &Matrix,
    f: &CurvatureOperator,
    lambda: f64,
    sketch: Option<&RealizedSketch>,
    policy: RankPolicy,
) -> Result<Matrix> {
    check_lambda(lambda)?;
    check_dim("influence_gram (train)", f.dim(), train.ncols())?;
    check_dim("influence_gram (test)", f.dim(), test.ncols())?;
    match sketch {
        None => {
            let eig = f.eig(policy)?;
            Ok(bilinear_gram(&eig, lambda, train, test))
        }
        Some(sk) => {
            let system = SketchedSystem::new(sk, f, policy)?;
            let ptrain = sketch_rows(sk, train)?;
            let ptest = sketch_rows(sk, test)?;
            match &system.kind {
                SystemKind::Dense(e) => Ok(bilinear_gram(e, lambda, &ptrain, &ptest)),
                SystemKind::Kronecker { .. } => {
                    let cols: Vec<Vector> = (0..ptest.nrows())
                        .into_par_iter()
                        .map(|j| {
                            let y = ptest.row(j).transpose();
                            system.solve(lambda, &y).map(|s| &ptrain * s)
                        })
                        .collect::<Result<_>>()?;
                    Ok(Matrix::from_columns(&cols))
                }
            }
        }
    }
}

/// Batched [`eig_bilinear`] over row sets.
fn bilinear_gram(eig: &CompactEigen, lambda: f64, x: &Matrix, y: &Matrix) -> Matrix {
    let u = eig.basis();
    let cx = x * u;
    let cy = y * u;
    let mut wx = cx.clone();
    for (j, &l) in eig.lambdas().iter().enumerate() {
        wx.column_mut(j).scale_mut(1.0 / (l + lambda));
    }
    let range = &wx * cy.transpose();
    if lambda == 0.0 {
        return range;
    }
    let rx = x - &cx * u.transpose();
    let ry = y - &cy * u.transpose();
    range + rx * ry.transpose() / lambda
}

/// `ε_λ = |τ̃_λ − τ_λ| / sqrt(τ₀(g,g) τ₀(g',g'))`; `None` when a self-norm is
/// at or below [`SELF_NORM_FLOOR`].
///
/// `τ₀` only sees the range component of its argument, so the self-norms are
/// those of the range-projected gradients.
pub fn normalized_error(
    eig: &CompactEigen,
    sk: &RealizedSketch,
    f: &CurvatureOperator,
    lambda: f64,
    g: &Vector,
    g_prime: &Vector,
) -> Result<Option<f64>> {
    let system = SketchedSystem::new(sk, f, eig.policy())?;
    ErrorProbe::new(eig, sk, &system).normalized_error(lambda, g, g_prime)
}

/// Exact and sketched evaluation sharing one decomposition each.
#[derive(Clone, Copy)]
pub struct ErrorProbe<'a> {
    pub eig: &'a CompactEigen,
    pub sketch: &'a RealizedSketch,
    pub system: &'a SketchedSystem,
}

/// Scores and self-norms for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEvaluation {
    pub tau_exact: f64,
    pub tau_sketched: f64,
    pub self_norm_g: f64,
    pub self_norm_g_prime: f64,
}

impl PairEvaluation {
    pub fn normalized_error(&self) -> Option<f64> {
        if self.self_norm_g <= SELF_NORM_FLOOR || self.self_norm_g_prime <= SELF_NORM_FLOOR {
            None
        } else {
            Some(
                (self.tau_sketched - self.tau_exact).abs()
                    / (self.self_norm_g.sqrt() * self.self_norm_g_prime.sqrt()),
            )
        }
    }
}

impl<'a> ErrorProbe<'a> {
    pub fn new(eig: &'a CompactEigen, sketch: &'a RealizedSketch, system: &'a SketchedSystem) -> Self {
        Self {
            eig,
            sketch,
            system,
        }
    }

    pub fn evaluate(&self, lambda: f64, g: &Vector, g_prime: &Vector) -> Result<PairEvaluation> {
        let tau = tau_exact(self.eig, lambda, g, g_prime)?;
        let tilde = self
            .system
            .score(lambda, &self.sketch.apply(g)?, &self.sketch.apply(g_prime)?)?;
        Ok(PairEvaluation {
            tau_exact: tau,
            tau_sketched: tilde,
            self_norm_g: tau_exact(self.eig, 0.0, g, g)?,
            self_norm_g_prime: tau_exact(self.eig, 0.0, g_prime, g_prime)?,
        })
    }

    pub fn normalized_error(&self, lambda: f64, g: &Vector, g_prime: &Vector) -> Result<Option<f64>> {
        Ok(self.evaluate(lambda, g, g_prime)?.normalized_error())
    }
}

/// One influence computation: exact score, and the sketched one when a
/// sketch is given.
#[derive(Clone, Debug)]
pub struct InfluenceQuery {
    pub lambda: f64,
    pub g: Vector,
    pub g_prime: Vector,
    pub curvature: CurvatureOperator,
    pub sketch: Option<SketchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub tau_exact: f64,
    pub tau_sketched: Option<f64>,
    pub normalized_error: Option<f64>,
    pub self_norms: (f64, f64),
    pub seed: Option<u64>,
    pub m: Option<usize>,
}

impl InfluenceQuery {
    pub fn run(&self, policy: RankPolicy) -> Result<InfluenceReport> {
        check_lambda(self.lambda)?;
        let eig = self.curvature.eig(policy)?;
        let tau = tau_exact(&eig, self.lambda, &self.g, &self.g_prime)?;
        let self_norms = (
            tau_exact(&eig, 0.0, &self.g, &self.g)?,
            tau_exact(&eig, 0.0, &self.g_prime, &self.g_prime)?,
        );
        let Some(spec) = &self.sketch else {
            return Ok(InfluenceReport {
                tau_exact: tau,
                tau_sketched: None,
                normalized_error: None,
                self_norms,
                seed: None,
                m: None,
            });
        };
        let sk = build_sketch(spec)?;
        let system = SketchedSystem::new(&sk, &self.curvature, policy)?;
        let pair = ErrorProbe::new(&eig, &sk, &system).evaluate(self.lambda, &self.g, &self.g_prime)?;
        Ok(InfluenceReport {
            tau_exact: tau,
            tau_sketched: Some(pair.tau_sketched),
            normalized_error: pair.normalized_error(),
            self_norms,
            seed: Some(spec.seed),
            m: Some(spec.m),
        })
    }
}
