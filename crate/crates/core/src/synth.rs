//! Synthetic curvature instances and gradient generators.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CompactEigen, KroneckerPair, Matrix, RankPolicy, Vector};
use crate::planner::effective_dim;
use crate::rng::{derive_seed, gaussian_vector, rng_from_seed, streams};

/// Shape of the nonzero spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Spectrum {
    /// `λ_j = j^{-exponent}`, `j = 1..r`.
    PowerLaw(f64),
    /// All ones.
    Flat,
    /// Log-uniform draws in `[lo, hi]`, sorted descending.
    LogUniform { lo: f64, hi: f64 },
    /// Given values (length must equal the rank).
    Explicit(Vec<f64>),
}

impl Spectrum {
    pub fn values<R: Rng + ?Sized>(&self, r: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mut v = match self {
            Self::PowerLaw(alpha) => (1..=r).map(|j| (j as f64).powf(-alpha)).collect(),
            Self::Flat => vec![1.0; r],
            Self::LogUniform { lo, hi } => {
                if !(*lo > 0.0 && hi >= lo) {
                    return Err(Error::OutOfRangeParam(format!("log-uniform range [{lo}, {hi}]")));
                }
                let (a, b) = (lo.ln(), hi.ln());
                (0..r).map(|_| (a + (b - a) * rng.random::<f64>()).exp()).collect()
            }
            Self::Explicit(v) => {
                if v.len() != r {
                    return Err(Error::DimMismatch {
                        context: "Spectrum::Explicit",
                        expected: r,
                        found: v.len(),
                    });
                }
                v.clone()
            }
        };
        v.sort_by(|a, b| b.total_cmp(a));
        Ok(v)
    }
}

/// `d × r` matrix with orthonormal columns, Haar-distributed.
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Matrix {
    let g = Matrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // Fix the sign ambiguity of QR so the distribution is Haar.
    let rdiag = qr.r().diagonal();
    for (j, s) in rdiag.iter().enumerate() {
        if *s < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random PSD matrix of rank `r` in `R^d`: Haar basis, given spectrum.
pub fn random_psd(d: usize, r: usize, spectrum: &Spectrum, seed: u64) -> Result<CompactEigen> {
    if r > d {
        return Err(Error::OutOfRangeParam(format!("rank {r} exceeds dim {d}")));
    }
    let mut rng = rng_from_seed(seed);
    let values = spectrum.values(r, &mut rng)?;
    let basis = random_orthonormal(d, r, &mut rng);
    CompactEigen::from_parts(basis, values, RankPolicy::default())
}

/// `g = U Λ^{1/2} y` with `y ~ N(0, I_r)`: a gradient drawn from `N(0, F)`.
pub fn in_range_gradient<R: Rng + ?Sized>(eig: &CompactEigen, rng: &mut R) -> Vector {
    let y = gaussian_vector(rng, eig.rank());
    eig.sqrt_factor() * y
}

/// Smallest-to-largest bisection on `log λ` for `d_λ(F) = target`.
pub fn lambda_for_effective_dim(eig: &CompactEigen, target: f64) -> Result<f64> {
    let r = eig.rank() as f64;
    if !(target > 0.0 && target < r) {
        return Err(Error::OutOfRangeParam(format!(
            "target effective dimension {target} must lie in (0, {r})"
        )));
    }
    let (mut lo, mut hi) = (eig.lambda_min_plus()? * 1e-12, eig.lambda_max() * 1e12);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if effective_dim(eig, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-13 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// How an instance picks its regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaSpec {
    Fixed(f64),
    /// Choose `λ` with `d_λ(F)` equal to the target.
    EffectiveDim(f64),
}

impl LambdaSpec {
    pub fn resolve(&self, eig: &CompactEigen) -> Result<f64> {
        match self {
            Self::Fixed(l) => Ok(*l),
            Self::EffectiveDim(t) => lambda_for_effective_dim(eig, *t),
        }
    }
}

/// Dense synthetic instance recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseInstanceSpec {
    pub dim: usize,
    pub rank: usize,
    pub spectrum: Spectrum,
    pub lambda: LambdaSpec,
}

#[derive(Clone, Debug)]
pub struct DenseInstance {
    pub eig: CompactEigen,
    pub lambda: f64,
}

impl DenseInstanceSpec {
    pub fn realize(&self, seed: u64) -> Result<DenseInstance> {
        let eig = random_psd(self.dim, self.rank, &self.spectrum, seed)?;
        let lambda = self.lambda.resolve(&eig)?;
        Ok(DenseInstance { eig, lambda })
    }
}

/// Kronecker synthetic instance recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronInstanceSpec {
    pub dim_a: usize,
    pub rank_a: usize,
    pub spectrum_a: Spectrum,
    pub dim_e: usize,
    pub rank_e: usize,
    pub spectrum_e: Spectrum,
    /// `λ` for the product `A ⊗ E`.
    pub lambda: LambdaSpec,
}

#[derive(Clone, Debug)]
pub struct KronInstance {
    pub pair: KroneckerPair,
    pub lambda: f64,
}

impl KronInstanceSpec {
    pub fn realize(&self, seed: u64) -> Result<KronInstance> {
        let eig_a = random_psd(self.dim_a, self.rank_a, &self.spectrum_a, derive_seed(seed, streams::KRON_FACTOR_A, 0))?;
        let eig_e = random_psd(self.dim_e, self.rank_e, &self.spectrum_e, derive_seed(seed, streams::KRON_FACTOR_E, 0))?;
        let pair = KroneckerPair::from_eigs(eig_a, eig_e)?;
        let lambda = match &self.lambda {
            LambdaSpec::Fixed(l) => *l,
            spec => spec.resolve(&pair.product_eig()?)?,
        };
        Ok(KronInstance { pair, lambda })
    }
}

/// Gradient corpus recipe for the CLI generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GradientShape {
    /// Coordinate `j` (1-based) scaled by `j^{-exponent/2}`, so the Fisher
    /// approaches `diag(j^{-exponent})`.
    PowerLaw(f64),
    /// I.i.d. standard normal entries; Fisher approaches `I`.
    Flat,
    /// Rows realizing exactly `F = diag(λ 1_k, ηλ 1_{r−k}, 0)`.
    Hard { k: usize, r: usize, eta: f64, lambda: f64 },
}

/// `n × d` gradient rows. Row `i` draws from its own derived stream.
pub fn generate_gradients(n: usize, d: usize, shape: &GradientShape, seed: u64) -> Result<Matrix> {
    if n == 0 || d == 0 {
        return Err(Error::OutOfRangeParam("n and d must be positive".into()));
    }
    match shape {
        GradientShape::PowerLaw(_) | GradientShape::Flat => {
            let alpha = match shape {
                GradientShape::PowerLaw(a) => *a,
                _ => 0.0,
            };
            let scales: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-alpha / 2.0)).collect();
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng_from_seed(derive_seed(seed, streams::GENERATOR, i as u64));
                    scales
                        .iter()
                        .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            Ok(Matrix::from_row_iterator(n, d, rows.into_iter().flatten()))
        }
        GradientShape::Hard { k, r, eta, lambda } => {
            let (k, r) = (*k, *r);
            if !(k <= r && r <= d && r <= n && *eta > 0.0 && *lambda > 0.0) {
                return Err(Error::OutOfRangeParam(format!(
                    "hard instance needs k <= r <= min(n, d), eta > 0, lambda > 0 (k={k}, r={r}, n={n}, d={d})"
                )));
            }
            // Row i < r is sqrt(n λ_i) e_i; the rest are zero, so (1/n) G^T G = diag(λ_i).
            let mut g = Matrix::zeros(n, d);
            for i in 0..r {
                let li = if i < k { *lambda } else { eta * lambda };
                g[(i, i)] = (n as f64 * li).sqrt();
            }
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{compact_eig, SymmetricMatrix};
    use approx::assert_relative_eq;

    #[test]
    fn orthonormal_columns() {
        let mut rng = rng_from_seed(1);
        let q = random_orthonormal(20, 7, &mut rng);
        assert!((q.tr_mul(&q) - Matrix::identity(7, 7)).amax() < 1e-12);
    }

    #[test]
    fn psd_instance_has_requested_spectrum() {
        let eig = random_psd(30, 5, &Spectrum::PowerLaw(1.0), 2).unwrap();
        assert_eq!(eig.rank(), 5);
        for (j, l) in eig.lambdas().iter().enumerate() {
            assert_relative_eq!(*l, 1.0 / (j + 1) as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn lambda_bisection_hits_target() {
        let eig = random_psd(40, 20, &Spectrum::PowerLaw(1.5), 3).unwrap();
        let l = lambda_for_effective_dim(&eig, 4.0).unwrap();
        assert_relative_eq!(effective_dim(&eig, l).unwrap(), 4.0, epsilon = 1e-9);
        assert!(lambda_for_effective_dim(&eig, 20.0).is_err());
    }

    #[test]
    fn hard_gradients_realize_the_instance() {
        let g = generate_gradients(20, 24, &GradientShape::Hard { k: 8, r: 16, eta: 1e-3, lambda: 1.0 }, 0).unwrap();
        let f = SymmetricMatrix::empirical_fisher(&g).unwrap();
        let e = compact_eig(&f, RankPolicy::default()).unwrap();
        assert_eq!(e.rank(), 16);
        for (i, l) in e.lambdas().iter().enumerate() {
            let expect = if i < 8 { 1.0 } else { 1e-3 };
            assert_relative_eq!(*l, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn flat_fisher_is_near_identity() {
        let d = 16;
        let g = generate_gradients(10 * d, d, &GradientShape::Flat, 4).unwrap();
        let e = compact_eig(&SymmetricMatrix::empirical_fisher(&g).unwrap(), RankPolicy::default()).unwrap();
        let median = e.lambdas()[d / 2];
        assert!(e.lambda_max() / median <= 2.0);
    }

    #[test]
    fn single_row_has_rank_one() {
        let g = generate_gradients(1, 9, &GradientShape::PowerLaw(1.0), 5).unwrap();
        let e = compact_eig(&SymmetricMatrix::empirical_fisher(&g).unwrap(), RankPolicy::default()).unwrap();
        assert_eq!(e.rank(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_gradients(5, 6, &GradientShape::PowerLaw(1.0), 9).unwrap();
        let b = generate_gradients(5, 6, &GradientShape::PowerLaw(1.0), 9).unwrap();
        assert_eq!(a, b);
    }
}
