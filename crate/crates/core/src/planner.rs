//! Effective dimension, sketch-size planning and closed-form leakage bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CompactEigen, Matrix, RankPolicy};

/// Default planning constant.
pub const DEFAULT_C: f64 = 16.0;

/// `d_λ(F) = Σ λ_j / (λ_j + λ)`.
pub fn effective_dim(eig: &CompactEigen, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLambda(lambda));
    }
    Ok(eig.lambdas().iter().map(|&l| l / (l + lambda)).sum())
}

fn check_unit_interval(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRangeParam(format!("{name} must lie in (0, 1), got {x}")))
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfRangeParam(format!("{name} must be positive, got {x}")))
    }
}

/// `ceil(C · complexity / ε²)`, at least 1.
pub fn size_from_complexity(c: f64, complexity: f64, epsilon: f64) -> usize {
    let raw = (c * complexity / (epsilon * epsilon)).ceil();
    if raw >= usize::MAX as f64 {
        usize::MAX
    } else {
        (raw as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerReport {
    pub lambda: f64,
    pub d_lambda: f64,
    pub rank: usize,
    pub dim: usize,
    /// `ceil(C (d_λ + ln(1/δ)) / ε²)` before clipping to `d`.
    pub m_required: usize,
    /// `min(d, m_required)`.
    pub m_recommended: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub calibration_c: f64,
    pub capped: bool,
    pub note: Option<String>,
}

/// Sketch size for regularized influence at accuracy `ε` with failure probability `δ`.
///
/// At `λ = 0` no `ε`-dependent size helps: the answer is `m = r`, the
/// smallest size at which a continuous sketch can be injective on `range(F)`.
pub fn plan_sketch_size(
    eig: &CompactEigen,
    lambda: f64,
    epsilon: f64,
    delta: f64,
    c: f64,
) -> Result<PlannerReport> {
    check_unit_interval("epsilon", epsilon)?;
    check_unit_interval("delta", delta)?;
    check_positive("C", c)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::OutOfRangeParam(format!("lambda must be >= 0, got {lambda}")));
    }
    let dim = eig.dim();
    let rank = eig.rank();
    if lambda == 0.0 {
        let m = rank.max(1);
        return Ok(PlannerReport {
            lambda,
            d_lambda: rank as f64,
            rank,
            dim,
            m_required: m,
            m_recommended: m.min(dim),
            epsilon,
            delta,
            calibration_c: c,
            capped: false,
            note: Some(
                "unregularized: exact iff the sketch is injective on range(F), so m = rank(F); \
                 no smaller m gives any multiplicative guarantee"
                    .into(),
            ),
        });
    }
    let d_lambda = effective_dim(eig, lambda)?;
    let required = size_from_complexity(c, d_lambda + (1.0 / delta).ln(), epsilon);
    Ok(PlannerReport {
        lambda,
        d_lambda,
        rank,
        dim,
        m_required: required,
        m_recommended: required.min(dim),
        epsilon,
        delta,
        calibration_c: c,
        capped: required >= dim,
        note: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedPlan {
    pub lambda: f64,
    /// `λ / ‖A‖₂`.
    pub lambda_a: f64,
    /// `λ / ‖E‖₂`.
    pub lambda_e: f64,
    /// `d_{λ_E}(A)`.
    pub d_a_eff: f64,
    /// `d_{λ_A}(E)`.
    pub d_e_eff: f64,
    pub m_a: usize,
    pub m_e: usize,
    pub m_total: usize,
    /// Factor sizes clipped to `d_A`, `d_E`.
    pub m_a_recommended: usize,
    pub m_e_recommended: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub calibration_c: f64,
    /// `‖A‖₂ ‖E‖₂`, the largest admissible `λ`.
    pub lambda_limit: f64,
    pub note: String,
}

/// Factor sizes for a Kronecker sketch of `A ⊗ E`.
pub fn plan_factorized(
    eig_a: &CompactEigen,
    eig_e: &CompactEigen,
    lambda: f64,
    epsilon: f64,
    delta: f64,
    c: f64,
) -> Result<FactorizedPlan> {
    check_unit_interval("epsilon", epsilon)?;
    check_unit_interval("delta", delta)?;
    check_positive("C", c)?;
    check_positive("lambda", lambda)?;
    let (na, ne) = (eig_a.lambda_max(), eig_e.lambda_max());
    if na == 0.0 || ne == 0.0 {
        return Err(Error::ZeroRank);
    }
    let limit = na * ne;
    if lambda > limit {
        return Err(Error::LambdaTooLarge { lambda, limit });
    }
    let lambda_e = lambda / ne;
    let lambda_a = lambda / na;
    let d_a_eff = effective_dim(eig_a, lambda_e)?;
    let d_e_eff = effective_dim(eig_e, lambda_a)?;
    let log_term = (1.0 / delta).ln();
    let m_a = size_from_complexity(c, d_a_eff + log_term, epsilon);
    let m_e = size_from_complexity(c, d_e_eff + log_term, epsilon);
    Ok(FactorizedPlan {
        lambda,
        lambda_a,
        lambda_e,
        d_a_eff,
        d_e_eff,
        m_a,
        m_e,
        m_total: m_a.saturating_mul(m_e),
        m_a_recommended: m_a.min(eig_a.dim()),
        m_e_recommended: m_e.min(eig_e.dim()),
        epsilon,
        delta,
        calibration_c: c,
        lambda_limit: limit,
        note: "factor sizes each scale as 1/eps^2, so the total m_A*m_E scales as 1/eps^4".into(),
    })
}

/// Closed-form leakage bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageBounds {
    /// `ε ‖g‖ ‖g'_⊥‖ / λ⁺_min`; `f64::INFINITY` when `F = 0`.
    pub unregularized: f64,
    /// `ε ‖g‖ ‖g'_⊥‖ (1/λ + 2‖F‖₂/λ²)`.
    pub regularized: f64,
}

pub fn leakage_bounds(
    eig: &CompactEigen,
    lambda: f64,
    epsilon: f64,
    norm_g: f64,
    norm_gperp: f64,
) -> Result<LeakageBounds> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLambda(lambda));
    }
    if !(norm_g >= 0.0 && norm_gperp >= 0.0 && epsilon >= 0.0) {
        return Err(Error::OutOfRangeParam("norms and epsilon must be >= 0".into()));
    }
    let scale = epsilon * norm_g * norm_gperp;
    let unregularized = match eig.lambda_min_plus() {
        Ok(l) => scale / l,
        Err(_) if scale == 0.0 => 0.0,
        Err(_) => f64::INFINITY,
    };
    let regularized = scale * (1.0 / lambda + 2.0 * eig.lambda_max() / (lambda * lambda));
    Ok(LeakageBounds {
        unregularized,
        regularized,
    })
}

/// Which complexity term won in [`plan_leakage_sketch_size`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageRegime {
    /// `ln(k/δ)`: polarization plus a union bound over the `k` test gradients.
    Union,
    /// `k' + ln(1/δ)`: one embedding of the span of the kernel components.
    Subspace,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakagePlan {
    pub m: usize,
    pub regime: LeakageRegime,
    pub complexity: f64,
}

/// `ceil(C (r + min(ln(k/δ), k' + ln(1/δ))) / ε²)`. Ties go to the union regime.
pub fn plan_leakage_sketch_size(
    rank: usize,
    k: usize,
    k_prime: usize,
    epsilon: f64,
    delta: f64,
    c: f64,
) -> Result<LeakagePlan> {
    check_unit_interval("epsilon", epsilon)?;
    check_unit_interval("delta", delta)?;
    check_positive("C", c)?;
    if k == 0 || k_prime > k {
        return Err(Error::OutOfRangeParam(format!(
            "need k >= 1 and 0 <= k' <= k (k={k}, k'={k_prime})"
        )));
    }
    let union = (k as f64 / delta).ln();
    let subspace = k_prime as f64 + (1.0 / delta).ln();
    let (regime, extra) = if union <= subspace {
        (LeakageRegime::Union, union)
    } else {
        (LeakageRegime::Subspace, subspace)
    };
    let complexity = rank as f64 + extra;
    Ok(LeakagePlan {
        m: size_from_complexity(c, complexity, epsilon),
        regime,
        complexity,
    })
}

/// `k'`: numerical rank of the kernel components (rows of `kernel_rows`).
pub fn span_dimension(kernel_rows: &Matrix, policy: RankPolicy) -> usize {
    if kernel_rows.nrows() == 0 || kernel_rows.ncols() == 0 {
        return 0;
    }
    let sv = kernel_rows.singular_values();
    let top = sv.max();
    let cutoff = policy.cutoff(top * top);
    sv.iter().filter(|s| *s * *s > cutoff && **s > 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{compact_eig, SymmetricMatrix};
    use approx::assert_relative_eq;

    fn eig_of(diag: &[f64]) -> CompactEigen {
        compact_eig(&SymmetricMatrix::from_diagonal(diag).unwrap(), RankPolicy::default()).unwrap()
    }

    #[test]
    fn effective_dim_examples() {
        assert_relative_eq!(effective_dim(&eig_of(&[1.0; 4]), 1.0).unwrap(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(effective_dim(&eig_of(&[3.0, 1.0, 0.0]), 1.0).unwrap(), 1.25, epsilon = 1e-15);
        let (k, r, eta, lambda) = (8usize, 16usize, 1e-3, 2.0);
        let mut diag = vec![lambda; k];
        diag.extend(vec![eta * lambda; r - k]);
        diag.extend(vec![0.0; 4]);
        let closed = k as f64 / 2.0 + eta * (r - k) as f64 / (1.0 + eta);
        assert_relative_eq!(effective_dim(&eig_of(&diag), lambda).unwrap(), closed, epsilon = 1e-12);
        assert!(matches!(effective_dim(&eig_of(&[1.0]), 0.0), Err(Error::NonPositiveLambda(_))));
    }

    #[test]
    fn plan_formula() {
        // d_λ = 2 from F = diag(1,1,1,1,0,...) at λ = 1 in d = 10^4.
        let mut basis = Matrix::zeros(10_000, 4);
        for i in 0..4 {
            basis[(i, i)] = 1.0;
        }
        let eig = CompactEigen::from_parts(basis, vec![1.0; 4], RankPolicy::default()).unwrap();
        let r = plan_sketch_size(&eig, 1.0, 0.1, 0.05, 16.0).unwrap();
        assert_relative_eq!(r.d_lambda, 2.0);
        // 16 * (2 + ln 20) / 0.01 = 7993.17..., so the ceiling is 7994.
        let expect = (16.0 * (2.0 + 20f64.ln()) / 0.01f64).ceil() as usize;
        assert_eq!(expect, 7994);
        assert_eq!(r.m_required, 7994);
        assert_eq!(r.m_recommended, 7994);
        assert!(!r.capped);
    }

    #[test]
    fn plan_caps_at_dim() {
        let r = plan_sketch_size(&eig_of(&[1.0, 1.0, 0.0]), 1.0, 0.5, 0.1, 16.0).unwrap();
        assert!(r.capped);
        assert_eq!(r.m_recommended, 3);
        assert!(r.m_required > 3);
    }

    #[test]
    fn unregularized_plan_is_rank() {
        let r = plan_sketch_size(&eig_of(&[3.0, 2.0, 1.0, 0.0, 0.0]), 0.0, 0.1, 0.1, 16.0).unwrap();
        assert_eq!(r.m_recommended, 3);
        assert!(r.note.is_some());
    }

    #[test]
    fn plan_rejects_bad_params() {
        let eig = eig_of(&[1.0]);
        assert!(plan_sketch_size(&eig, 1.0, 0.0, 0.1, 16.0).is_err());
        assert!(plan_sketch_size(&eig, 1.0, 0.1, 1.0, 16.0).is_err());
        assert!(plan_sketch_size(&eig, 1.0, 0.1, 0.1, 0.0).is_err());
        assert!(plan_sketch_size(&eig, -1.0, 0.1, 0.1, 16.0).is_err());
    }

    #[test]
    fn factorized_examples() {
        let id = eig_of(&[1.0, 1.0]);
        let p = plan_factorized(&id, &id, 1.0, 0.5, 0.1, 16.0).unwrap();
        assert_eq!((p.lambda_a, p.lambda_e), (1.0, 1.0));
        assert_relative_eq!(p.d_a_eff, 1.0);
        assert_relative_eq!(p.d_e_eff, 1.0);
        assert_eq!(p.m_a, size_from_complexity(16.0, 1.0 + 10f64.ln(), 0.5));
        assert_eq!(p.m_a, p.m_e);

        let p = plan_factorized(&eig_of(&[4.0, 1.0]), &eig_of(&[9.0, 1.0]), 6.0, 0.5, 0.1, 16.0).unwrap();
        assert_relative_eq!(p.lambda_e, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p.lambda_a, 1.5, epsilon = 1e-15);
        assert_relative_eq!(p.d_a_eff, 6.0 / 7.0 + 3.0 / 5.0, epsilon = 1e-14);
        assert_relative_eq!(p.d_e_eff, 9.0 / 10.5 + 1.0 / 2.5, epsilon = 1e-14);

        assert!(matches!(
            plan_factorized(&eig_of(&[4.0, 1.0]), &eig_of(&[9.0, 1.0]), 37.0, 0.5, 0.1, 16.0),
            Err(Error::LambdaTooLarge { .. })
        ));
    }

    #[test]
    fn leakage_bound_examples() {
        let eig = eig_of(&[3.0, 1.0, 0.0]);
        let b = leakage_bounds(&eig, 1.0, 0.1, 1.0, 1.0).unwrap();
        assert_relative_eq!(b.unregularized, 0.1, epsilon = 1e-15);
        assert_relative_eq!(b.regularized, 0.7, epsilon = 1e-15);
        let z = leakage_bounds(&eig, 1.0, 0.1, 1.0, 0.0).unwrap();
        assert_eq!((z.unregularized, z.regularized), (0.0, 0.0));
        let zero = CompactEigen::zero(3, RankPolicy::default());
        assert!(leakage_bounds(&zero, 1.0, 0.1, 1.0, 1.0).unwrap().unregularized.is_infinite());
        assert!(leakage_bounds(&eig, 0.0, 0.1, 1.0, 1.0).is_err());
        // A tiny nonzero eigenvalue makes the unregularized bound the weaker one.
        let hard = eig_of(&[1.0, 1.0, 1e-3, 1e-3, 0.0]);
        let b = leakage_bounds(&hard, 1.0, 0.1, 1.0, 1.0).unwrap();
        assert!(b.unregularized > b.regularized);
    }

    #[test]
    fn leakage_regimes() {
        let p = plan_leakage_sketch_size(4, 1, 1, 0.5, 0.1, 1.0).unwrap();
        assert_eq!(p.regime, LeakageRegime::Union);
        // ln(1e6 / 0.05) = 16.8 beats 50 + ln 20 = 53.0.
        let p = plan_leakage_sketch_size(4, 1_000_000, 50, 0.5, 0.05, 1.0).unwrap();
        assert_eq!(p.regime, LeakageRegime::Union);
        assert_relative_eq!(p.complexity, 4.0 + 2e7f64.ln(), epsilon = 1e-12);
        let p = plan_leakage_sketch_size(4, 1_000_000, 5, 0.5, 0.05, 1.0).unwrap();
        assert_eq!(p.regime, LeakageRegime::Subspace);
        assert_relative_eq!(p.complexity, 4.0 + 5.0 + 20f64.ln(), epsilon = 1e-12);
        let p = plan_leakage_sketch_size(4, 100, 100, 0.5, 0.05, 1.0).unwrap();
        assert_eq!(p.regime, LeakageRegime::Union);
        assert_relative_eq!(p.complexity, 4.0 + 2000f64.ln(), epsilon = 1e-12);
        assert!(plan_leakage_sketch_size(4, 0, 0, 0.5, 0.1, 1.0).is_err());
        assert!(plan_leakage_sketch_size(4, 2, 3, 0.5, 0.1, 1.0).is_err());
    }

    #[test]
    fn span_dimension_counts_independent_rows() {
        let m = Matrix::from_row_slice(3, 4, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(span_dimension(&m, RankPolicy::default()), 2);
        assert_eq!(span_dimension(&Matrix::zeros(2, 3), RankPolicy::default()), 0);
    }
}
