//! Dense PSD linear algebra: compact eigendecompositions, pseudoinverse and
//! ridge solves, Kronecker pairs.
//!
//! Vectors over a Kronecker product space use the column-major `vec`
//! convention: for `G` of shape `d_E × d_A`, `vec(G)[a * d_E + e] = G[(e, a)]`,
//! so `vec(e a^T) = a ⊗ e` and `(A ⊗ E) vec(G) = vec(E G A^T)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default ceiling on `d_A * d_E` for dense Kronecker materialization.
pub const KRON_DENSE_CAP: usize = 4096;

/// A finite, exactly symmetric square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix {
    inner: Matrix,
}

impl SymmetricMatrix {
    /// Symmetrizes `m` as `(m + m^T) / 2`. Fails on non-square or non-finite input.
    pub fn new(mut m: Matrix) -> Result<Self> {
        check_dim("SymmetricMatrix::new (square)", m.nrows(), m.ncols())?;
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("SymmetricMatrix"));
        }
        let d = m.nrows();
        for j in 0..d {
            for i in (j + 1)..d {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Ok(Self { inner: m })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            inner: Matrix::identity(d, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            inner: Matrix::zeros(d, d),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    /// Scaled Gram matrix `(1/n) G^T G` of an `n × d` row matrix.
    pub fn empirical_fisher(rows: &Matrix) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::OutOfRangeParam("empty gradient matrix".into()));
        }
        let n = rows.nrows() as f64;
        Self::new(rows.tr_mul(rows) / n)
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_inner(self) -> Matrix {
        self.inner
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        check_dim("SymmetricMatrix::mul_vec", self.dim(), v.len())?;
        Ok(&self.inner * v)
    }
}

/// Eigenvalue cutoff: keep `λ_i > max(abs_tol, rel_tol * λ_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl RankPolicy {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Result<Self> {
        let ok = rel_tol.is_finite()
            && abs_tol.is_finite()
            && rel_tol >= 0.0
            && abs_tol >= 0.0
            && (rel_tol > 0.0 || abs_tol > 0.0);
        if ok {
            Ok(Self { rel_tol, abs_tol })
        } else {
            Err(Error::InvalidPolicy { rel_tol, abs_tol })
        }
    }

    pub fn cutoff(&self, lambda_max: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * lambda_max.max(0.0))
    }
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 0.0,
        }
    }
}

/// Compact eigendecomposition `F = U Λ U^T` keeping only the retained
/// (strictly positive) eigenvalues, sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactEigen {
    dim: usize,
    basis: Matrix,
    lambdas: Vec<f64>,
    policy: RankPolicy,
}

impl CompactEigen {
    /// Assembles a decomposition from a column-orthonormal basis and eigenvalues.
    ///
    /// Pairs are re-sorted descending, pairs at or below the policy cutoff are
    /// dropped and columns are sign-normalized.
    pub fn from_parts(basis: Matrix, lambdas: Vec<f64>, policy: RankPolicy) -> Result<Self> {
        check_dim("CompactEigen::from_parts", basis.ncols(), lambdas.len())?;
        if basis.iter().chain(lambdas.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("CompactEigen"));
        }
        let dim = basis.nrows();
        let lambda_max = lambdas.iter().cloned().fold(0.0_f64, f64::max);
        let cutoff = policy.cutoff(lambda_max);
        if let Some(&neg) = lambdas
            .iter()
            .filter(|&&l| l < -cutoff)
            .min_by(|a, b| a.total_cmp(b))
        {
            return Err(Error::NotPsd {
                eigenvalue: neg,
                cutoff,
            });
        }
        let mut order: Vec<usize> = (0..lambdas.len()).filter(|&i| lambdas[i] > cutoff).collect();
        // Stable sort keeps the solver's order among ties.
        order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
        let mut out = Matrix::zeros(dim, order.len());
        for (k, &i) in order.iter().enumerate() {
            let mut col = basis.column(i).into_owned();
            sign_normalize(&mut col);
            out.set_column(k, &col);
        }
        Ok(Self {
            dim,
            basis: out,
            lambdas: order.iter().map(|&i| lambdas[i]).collect(),
            policy,
        })
    }

    /// The zero operator on `R^dim`.
    pub fn zero(dim: usize, policy: RankPolicy) -> Self {
        Self {
            dim,
            basis: Matrix::zeros(dim, 0),
            lambdas: Vec::new(),
            policy,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn policy(&self) -> RankPolicy {
        self.policy
    }

    /// Largest eigenvalue, or 0 for the zero operator.
    pub fn lambda_max(&self) -> f64 {
        self.lambdas.first().copied().unwrap_or(0.0)
    }

    pub fn trace(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    /// Smallest retained eigenvalue.
    pub fn lambda_min_plus(&self) -> Result<f64> {
        self.lambdas.last().copied().ok_or(Error::ZeroRank)
    }

    /// `U U^T v`.
    pub fn project_range(&self, v: &Vector) -> Result<Vector> {
        check_dim("project_range", self.dim, v.len())?;
        Ok(&self.basis * self.basis.tr_mul(v))
    }

    /// `F v = U Λ U^T v`.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        self.spectral_apply(v, |l| l)
    }

    /// `U f(Λ) U^T v`; `f` is applied to retained eigenvalues only.
    pub fn spectral_apply(&self, v: &Vector, f: impl Fn(f64) -> f64) -> Result<Vector> {
        check_dim("spectral_apply", self.dim, v.len())?;
        let mut c = self.basis.tr_mul(v);
        for (ci, &l) in c.iter_mut().zip(&self.lambdas) {
            *ci *= f(l);
        }
        Ok(&self.basis * c)
    }

    /// Moore-Penrose pseudoinverse applied to `v`.
    pub fn pinv_apply(&self, v: &Vector) -> Result<Vector> {
        self.spectral_apply(v, |l| 1.0 / l)
    }

    /// `(F + λI)^{-1} v`, including the kernel complement `(v - U U^T v) / λ`.
    pub fn ridge_apply(&self, lambda: f64, v: &Vector) -> Result<Vector> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::NonPositiveLambda(lambda));
        }
        check_dim("ridge_apply", self.dim, v.len())?;
        let c = self.basis.tr_mul(v);
        let mut w = c.clone();
        for ((wi, ci), &l) in w.iter_mut().zip(c.iter()).zip(&self.lambdas) {
            // 1/(l+λ) - 1/λ, folded so the range part is one multiply.
            *wi = ci * (1.0 / (l + lambda) - 1.0 / lambda);
        }
        Ok(&self.basis * w + v / lambda)
    }

    /// `(F + λI)^{-1} v` for `λ > 0`, `F^† v` for `λ = 0`.
    pub fn solve(&self, lambda: f64, v: &Vector) -> Result<Vector> {
        if lambda == 0.0 {
            self.pinv_apply(v)
        } else {
            self.ridge_apply(lambda, v)
        }
    }

    /// Dense `U Λ U^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.basis.clone();
        for (j, &l) in self.lambdas.iter().enumerate() {
            scaled.column_mut(j).scale_mut(l);
        }
        scaled * self.basis.transpose()
    }

    /// `U Λ^{1/2}`, a `d × r` factor with `F = W W^T`.
    pub fn sqrt_factor(&self) -> Matrix {
        let mut w = self.basis.clone();
        for (j, &l) in self.lambdas.iter().enumerate() {
            w.column_mut(j).scale_mut(l.sqrt());
        }
        w
    }
}

fn sign_normalize(col: &mut Vector) {
    let scale = col.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(first) = col.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            col.neg_mut();
        }
    }
}

/// Symmetric eigendecomposition of `F`, thresholded by `policy`.
pub fn compact_eig(f: &SymmetricMatrix, policy: RankPolicy) -> Result<CompactEigen> {
    let d = f.dim();
    if d == 0 {
        return Ok(CompactEigen::zero(0, policy));
    }
    let eig = SymmetricEigen::new(f.as_matrix().clone());
    let lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    CompactEigen::from_parts(eig.eigenvectors, lambdas, policy)
}

/// Eigendecomposition of `W W^T` from the thin SVD of `W` (`n × k`).
///
/// Avoids forming `W W^T`, so small eigenvalues keep relative accuracy.
pub fn gram_eig(w: &Matrix, policy: RankPolicy) -> Result<CompactEigen> {
    let (n, k) = w.shape();
    if n == 0 || k == 0 {
        return Ok(CompactEigen::zero(n, policy));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gram_eig"));
    }
    let svd = w.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::NumericalBreakdown("SVD did not return U".into()))?;
    let lambdas: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    CompactEigen::from_parts(u, lambdas, policy)
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().amax()
}

/// `(d_E × d_A)` column-major reshape of a vector of length `d_A * d_E`.
pub fn unvec(v: &Vector, d_e: usize, d_a: usize) -> Result<Matrix> {
    check_dim("unvec", d_e * d_a, v.len())?;
    Ok(Matrix::from_column_slice(d_e, d_a, v.as_slice()))
}

/// Column-major flattening of `G`.
pub fn vec_of(g: &Matrix) -> Vector {
    Vector::from_column_slice(g.as_slice())
}

/// `a ⊗ e` under the crate's vec convention.
pub fn kron_vec(a: &Vector, e: &Vector) -> Vector {
    vec_of(&(e * a.transpose()))
}

/// PSD Kronecker pair `F = A ⊗ E` with cached factor decompositions.
#[derive(Clone, Debug)]
pub struct KroneckerPair {
    a: SymmetricMatrix,
    e: SymmetricMatrix,
    eig_a: CompactEigen,
    eig_e: CompactEigen,
}

impl KroneckerPair {
    pub fn new(a: SymmetricMatrix, e: SymmetricMatrix, policy: RankPolicy) -> Result<Self> {
        let eig_a = compact_eig(&a, policy)?;
        let eig_e = compact_eig(&e, policy)?;
        Ok(Self { a, e, eig_a, eig_e })
    }

    /// Builds the pair from factor decompositions alone.
    pub fn from_eigs(eig_a: CompactEigen, eig_e: CompactEigen) -> Result<Self> {
        let a = SymmetricMatrix::new(eig_a.reconstruct())?;
        let e = SymmetricMatrix::new(eig_e.reconstruct())?;
        Ok(Self { a, e, eig_a, eig_e })
    }

    pub fn a(&self) -> &SymmetricMatrix {
        &self.a
    }

    pub fn e(&self) -> &SymmetricMatrix {
        &self.e
    }

    pub fn eig_a(&self) -> &CompactEigen {
        &self.eig_a
    }

    pub fn eig_e(&self) -> &CompactEigen {
        &self.eig_e
    }

    pub fn dim_a(&self) -> usize {
        self.a.dim()
    }

    pub fn dim_e(&self) -> usize {
        self.e.dim()
    }

    pub fn dim(&self) -> usize {
        self.dim_a() * self.dim_e()
    }

    /// `(A ⊗ E) v = vec(E G A^T)` without materializing the product.
    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        let g = unvec(v, self.dim_e(), self.dim_a())?;
        Ok(vec_of(&(self.e.as_matrix() * g * self.a.as_matrix())))
    }

    /// Compact eigendecomposition of `A ⊗ E` from the factor decompositions.
    ///
    /// Eigenpairs are `(α_i γ_j, u_i ⊗ w_j)`; ties keep `(i, j)` lexicographic order.
    pub fn product_eig(&self) -> Result<CompactEigen> {
        let (ua, ue) = (self.eig_a.basis(), self.eig_e.basis());
        let mut basis = Matrix::zeros(self.dim(), self.eig_a.rank() * self.eig_e.rank());
        let mut lambdas = Vec::with_capacity(basis.ncols());
        for (i, &al) in self.eig_a.lambdas().iter().enumerate() {
            for (j, &ga) in self.eig_e.lambdas().iter().enumerate() {
                let col = kron_vec(&ua.column(i).into_owned(), &ue.column(j).into_owned());
                basis.set_column(lambdas.len(), &col);
                lambdas.push(al * ga);
            }
        }
        // The factor cutoffs already decided the rank; do not threshold twice.
        let policy = RankPolicy {
            rel_tol: 0.0,
            abs_tol: 0.0,
        };
        let mut eig = CompactEigen::from_parts(basis, lambdas, policy)?;
        eig.policy = self.eig_a.policy();
        Ok(eig)
    }
}

/// Dense `A ⊗ E`; refuses when `d_A * d_E > cap`.
pub fn kron_dense(pair: &KroneckerPair, cap: usize) -> Result<SymmetricMatrix> {
    if pair.dim() > cap {
        return Err(Error::CapExceeded {
            size: pair.dim(),
            cap,
        });
    }
    SymmetricMatrix::new(pair.a().as_matrix().kronecker(pair.e().as_matrix()))
}

/// A curvature operator: dense, held by its decomposition, or Kronecker-factored.
#[derive(Clone, Debug)]
pub enum CurvatureOperator {
    Dense(SymmetricMatrix),
    Eigen(CompactEigen),
    Kronecker(KroneckerPair),
}

impl CurvatureOperator {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(f) => f.dim(),
            Self::Eigen(e) => e.dim(),
            Self::Kronecker(p) => p.dim(),
        }
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        match self {
            Self::Dense(f) => f.mul_vec(v),
            Self::Eigen(e) => e.apply(v),
            Self::Kronecker(p) => p.mul_vec(v),
        }
    }

    /// Compact eigendecomposition under `policy` (Kronecker: product of factor eigs).
    pub fn eig(&self, policy: RankPolicy) -> Result<CompactEigen> {
        match self {
            Self::Dense(f) => compact_eig(f, policy),
            Self::Eigen(e) => Ok(e.clone()),
            Self::Kronecker(p) => p.product_eig(),
        }
    }

    /// Dense materialization, refusing beyond `cap` rows.
    pub fn to_dense(&self, cap: usize) -> Result<SymmetricMatrix> {
        if self.dim() > cap {
            return Err(Error::CapExceeded {
                size: self.dim(),
                cap,
            });
        }
        match self {
            Self::Dense(f) => Ok(f.clone()),
            Self::Eigen(e) => SymmetricMatrix::new(e.reconstruct()),
            Self::Kronecker(p) => kron_dense(p, cap),
        }
    }
}
