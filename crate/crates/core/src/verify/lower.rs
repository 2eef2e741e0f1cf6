//! Lower-bound witnesses: the diagonal hard instance and the
//! anti-concentration of Gaussian sample covariances.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use super::{fraction, max_of, mean, run_trials, Check, ProbeResult};
use crate::error::{Error, Result};
use crate::influence::{tau_exact, SketchedSystem};
use crate::linalg::{CompactEigen, CurvatureOperator, Matrix, RankPolicy, Vector};
use crate::planner::effective_dim;
use crate::rng::{derive_seed, streams};
use crate::sketch::{build_sketch, gram_error_matrix, FamilyKind};

/// `F = diag(λ 1_k, ηλ 1_{r−k}, 0_{d−r})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardInstance {
    pub k: usize,
    pub r: usize,
    pub d: usize,
    pub lambda: f64,
    pub eta: f64,
}

impl HardInstance {
    pub fn new(k: usize, r: usize, d: usize, lambda: f64, eta: f64) -> Result<Self> {
        if !(k >= 1 && k <= r && r <= d) {
            return Err(Error::OutOfRangeParam(format!("need 1 <= k <= r <= d (k={k}, r={r}, d={d})")));
        }
        if !(lambda > 0.0 && eta > 0.0 && lambda.is_finite() && eta.is_finite()) {
            return Err(Error::OutOfRangeParam("lambda and eta must be positive".into()));
        }
        Ok(Self { k, r, d, lambda, eta })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut v = vec![self.lambda; self.k];
        v.extend(std::iter::repeat_n(self.eta * self.lambda, self.r - self.k));
        v.extend(std::iter::repeat_n(0.0, self.d - self.r));
        v
    }

    pub fn eig(&self) -> Result<CompactEigen> {
        let diag = self.diagonal();
        let basis = Matrix::identity(self.d, self.r);
        CompactEigen::from_parts(basis, diag[..self.r].to_vec(), RankPolicy::default())
    }

    /// `d_λ(F) = k/2 + η(r−k)/(1+η)` at the instance's own `λ`.
    pub fn effective_dim_closed_form(&self) -> f64 {
        self.k as f64 / 2.0 + self.eta * (self.r - self.k) as f64 / (1.0 + self.eta)
    }

    /// `g = F^{1/2} (y_L, 0, 0)`.
    pub fn gradient(&self, y_lead: &Vector) -> Result<Vector> {
        crate::error::check_dim("HardInstance::gradient", self.k, y_lead.len())?;
        let mut g = Vector::zeros(self.d);
        g.rows_mut(0, self.k).copy_from(&(y_lead * self.lambda.sqrt()));
        Ok(g)
    }
}

/// Unit eigenvector of `M = P_L^T P_L` whose eigenvalue is farthest from 1.
fn extreme_direction(p_lead: &Matrix) -> Vector {
    let se = SymmetricEigen::new(p_lead.tr_mul(p_lead));
    let (idx, _) = se
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .expect("k >= 1");
    let mut y = se.eigenvectors.column(idx).into_owned();
    if let Some(first) = y.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            y.neg_mut();
        }
    }
    y
}

/// Frequency of `|τ̃_λ(g,g) − τ_λ(g,g)| >= ε/32` on the hard instance with
/// the proof's choice of `y_L`; passes at `>= 0.02`.
pub fn probe_lower_bound(inst: &HardInstance, epsilon: f64, m: usize, trials: usize, seed: u64) -> Result<ProbeResult> {
    let expected_eta = epsilon / 288.0;
    if (inst.eta - expected_eta).abs() > 1e-12 * expected_eta {
        return Err(Error::RegimeViolation(format!("eta must be eps/288 = {expected_eta}, got {}", inst.eta)));
    }
    if m as f64 > inst.k as f64 / (epsilon * epsilon) {
        return Err(Error::RegimeViolation(format!("m = {m} exceeds k/eps^2")));
    }
    if inst.r - inst.k > m {
        return Err(Error::RegimeViolation(format!("r - k = {} exceeds m = {m}", inst.r - inst.k)));
    }
    if trials == 0 {
        return Err(Error::OutOfRangeParam("trials must be >= 1".into()));
    }
    let eig = inst.eig()?;
    let f = CurvatureOperator::Eigen(eig.clone());
    let lambda = inst.lambda;
    let rows = run_trials(trials, |t| {
        let seed = derive_seed(seed, streams::PROBE_LOWER, t as u64);
        let sk = build_sketch(&FamilyKind::Gaussian.spec(m, inst.d, derive_seed(seed, streams::SKETCH, 0)))?;
        let p = sk.to_dense()?;
        let y = extreme_direction(&p.columns(0, inst.k).into_owned());
        let g = inst.gradient(&y)?;
        let system = SketchedSystem::new(&sk, &f, eig.policy())?;
        let pg = sk.apply(&g)?;
        let tilde = system.score(lambda, &pg, &pg)?;
        let tau = tau_exact(&eig, lambda, &g, &g)?;
        let tau0 = tau_exact(&eig, 0.0, &g, &g)?;
        Ok((seed, (tilde - tau).abs(), tau, tau0))
    })?;
    let freq = fraction(rows.iter().map(|r| r.1 >= epsilon / 32.0));
    let d_lambda = effective_dim(&eig, lambda)?;
    let checks = vec![
        Check::at_least("error_frequency", freq, 0.02),
        Check::at_most("tau_lambda_deviation", max_of(rows.iter().map(|r| (r.2 - 0.5).abs())), 1e-12),
        Check::at_most("tau_zero_deviation", max_of(rows.iter().map(|r| (r.3 - 1.0).abs())), 1e-12),
        Check::at_most("d_lambda_closed_form", (d_lambda - inst.effective_dim_closed_form()).abs(), 1e-12),
    ];
    let details = BTreeMap::from([
        ("d_lambda".to_string(), d_lambda),
        ("m".to_string(), m as f64),
        ("median_error".to_string(), super::median(&rows.iter().map(|r| r.1).collect::<Vec<_>>())),
    ]);
    Ok(ProbeResult::new(
        "lower_bound",
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
        checks,
        details,
    ))
}

/// `S = P^T P` for an `m × k` sketch `P` (rows scaled by `1/sqrt(m)`):
/// frequency of `‖S − I‖₂ >= sqrt(k/m)/2` and the mean of `‖S − I‖_F²`.
///
/// For the Gaussian family both are checked (`>= 0.02`, and within 15% of
/// `k(k+1)/m`). Other families are reported without a pass/fail criterion.
pub fn probe_anti_concentration(m: usize, k: usize, trials: usize, seed: u64, family: FamilyKind) -> Result<ProbeResult> {
    if m == 0 || k == 0 || trials == 0 {
        return Err(Error::OutOfRangeParam("m, k and trials must be >= 1".into()));
    }
    let level = (k as f64 / m as f64).sqrt() / 2.0;
    let rows = run_trials(trials, |t| {
        let seed = derive_seed(seed, streams::PROBE_ANTI, t as u64);
        let sk = build_sketch(&family.spec(m, k, derive_seed(seed, streams::SKETCH, 0)))?;
        let dev = gram_error_matrix(&sk)?;
        Ok((seed, crate::linalg::sym_spectral_norm(&dev), dev.norm_squared()))
    })?;
    let freq = fraction(rows.iter().map(|r| r.1 >= level));
    let frob = mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    let target = (k * (k + 1)) as f64 / m as f64;
    let checks = if family == FamilyKind::Gaussian {
        let mut c = vec![Check::at_least("deviation_frequency", freq, 0.02)];
        c.extend(Check::within("frobenius_mean_ratio", frob / target, 0.85, 1.15));
        c
    } else {
        vec![Check::at_least("reported_frequency", freq, 0.0)]
    };
    let details = BTreeMap::from([
        ("frequency".to_string(), freq),
        ("frobenius_mean".to_string(), frob),
        ("frobenius_target".to_string(), target),
        ("level".to_string(), level),
    ]);
    let name = match family {
        FamilyKind::Gaussian => "anti_concentration".to_string(),
        other => format!("anti_concentration_experiment_{}", other.name()),
    };
    Ok(ProbeResult::new(&name, rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect(), checks, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn hard_instance_identities() {
        let inst = HardInstance::new(8, 16, 40, 2.0, 1e-3).unwrap();
        let eig = inst.eig().unwrap();
        assert!((effective_dim(&eig, 2.0).unwrap() - inst.effective_dim_closed_form()).abs() < 1e-12);
        let mut y = Vector::zeros(8);
        y[3] = 1.0;
        let g = inst.gradient(&y).unwrap();
        assert!((tau_exact(&eig, 2.0, &g, &g).unwrap() - 0.5).abs() < 1e-15);
        assert!((tau_exact(&eig, 0.0, &g, &g).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regime_violations_are_errors() {
        let ok = HardInstance::new(8, 16, 48, 1.0, 0.5 / 288.0).unwrap();
        assert!(matches!(probe_lower_bound(&ok, 0.5, 33, 1, 0), Err(Error::RegimeViolation(_))));
        assert!(matches!(probe_lower_bound(&ok, 0.4, 32, 1, 0), Err(Error::RegimeViolation(_))));
        let wide = HardInstance::new(8, 48, 48, 1.0, 0.5 / 288.0).unwrap();
        assert!(matches!(probe_lower_bound(&wide, 0.5, 32, 1, 0), Err(Error::RegimeViolation(_))));
    }

    // Reference for k = m = 1: Pr(|w² − 1| >= 1/2) from 10^5 direct draws.
    #[test]
    fn scalar_anti_concentration_matches_oracle() {
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let w: f64 = rng.sample(StandardNormal);
                (w * w - 1.0).abs() >= 0.5
            })
            .count();
        let oracle = hits as f64 / n as f64;
        assert!((oracle - 0.741).abs() < 0.01);
        let r = probe_anti_concentration(1, 1, 4000, 3, FamilyKind::Gaussian).unwrap();
        assert!((r.details["frequency"] - oracle).abs() < 0.03, "{}", r.details["frequency"]);
    }

    #[test]
    fn small_lower_bound_probe() {
        let inst = HardInstance::new(8, 16, 48, 1.0, 0.5 / 288.0).unwrap();
        let r = probe_lower_bound(&inst, 0.5, 32, 60, 5).unwrap();
        assert!(r.pass, "{}", r.summary());
    }
}
