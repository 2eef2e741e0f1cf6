//! Oblivious sketching operators and Kronecker-factorized sketches.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    compact_eig, gram_eig, sym_spectral_norm, unvec, vec_of, CompactEigen, CurvatureOperator,
    Matrix, RankPolicy, SymmetricMatrix, Vector, KRON_DENSE_CAP,
};
use crate::rng::{column_rng, derive_seed, streams};

/// Largest `m * d` a dense sketch may occupy.
pub const DENSE_ENTRY_CAP: usize = 1 << 26;

/// Default nonzeros per column for sparse JL: `min(8, m)`.
pub fn default_sparsity(m: usize) -> usize {
    m.min(8)
}

/// Distribution of a sketching matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SketchFamily {
    Gaussian,
    Rademacher,
    /// Exactly `s` nonzeros `±1/√s` per column.
    SparseJl { s: usize },
    /// `P_A ⊗ P_E`; factors must not be Kronecker themselves.
    Kronecker {
        a: Box<SketchSpec>,
        e: Box<SketchSpec>,
    },
}

/// Recipe for a sketch: family, target dimension `m`, ambient `d`, seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub family: SketchFamily,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
}

impl SketchSpec {
    pub fn gaussian(m: usize, d: usize, seed: u64) -> Self {
        Self {
            family: SketchFamily::Gaussian,
            m,
            d,
            seed,
        }
    }

    pub fn rademacher(m: usize, d: usize, seed: u64) -> Self {
        Self {
            family: SketchFamily::Rademacher,
            m,
            d,
            seed,
        }
    }

    pub fn sparse_jl(m: usize, d: usize, s: usize, seed: u64) -> Self {
        Self {
            family: SketchFamily::SparseJl { s },
            m,
            d,
            seed,
        }
    }

    /// Kronecker spec with `m = m_A m_E`, `d = d_A d_E`. The seed is informational;
    /// each factor carries its own.
    pub fn kronecker(a: SketchSpec, e: SketchSpec, seed: u64) -> Result<Self> {
        let spec = Self {
            m: a.m * e.m,
            d: a.d * e.d,
            family: SketchFamily::Kronecker {
                a: Box::new(a),
                e: Box::new(e),
            },
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 {
            return Err(Error::InvalidSpec(format!(
                "m and d must be positive (m={}, d={})",
                self.m, self.d
            )));
        }
        match &self.family {
            SketchFamily::Gaussian | SketchFamily::Rademacher => {
                let entries = self.m.saturating_mul(self.d);
                if entries > DENSE_ENTRY_CAP {
                    return Err(Error::InvalidSpec(format!(
                        "dense sketch with {entries} entries exceeds {DENSE_ENTRY_CAP}; use sparse JL or Kronecker"
                    )));
                }
            }
            SketchFamily::SparseJl { s } => {
                if *s == 0 || *s > self.m {
                    return Err(Error::InvalidSpec(format!(
                        "sparse JL needs 1 <= s <= m (s={s}, m={})",
                        self.m
                    )));
                }
            }
            SketchFamily::Kronecker { a, e } => {
                if matches!(a.family, SketchFamily::Kronecker { .. })
                    || matches!(e.family, SketchFamily::Kronecker { .. })
                {
                    return Err(Error::InvalidSpec("nested Kronecker factors".into()));
                }
                if self.m != a.m * e.m || self.d != a.d * e.d {
                    return Err(Error::InvalidSpec(
                        "Kronecker m, d must be products of factor sizes".into(),
                    ));
                }
                a.validate()?;
                e.validate()?;
            }
        }
        Ok(())
    }
}

/// Family selector without sizes; used by planners and probes to stamp out specs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    Gaussian,
    Rademacher,
    /// `None` means `default_sparsity(m)`.
    SparseJl(Option<usize>),
}

impl FamilyKind {
    pub fn spec(self, m: usize, d: usize, seed: u64) -> SketchSpec {
        match self {
            Self::Gaussian => SketchSpec::gaussian(m, d, seed),
            Self::Rademacher => SketchSpec::rademacher(m, d, seed),
            Self::SparseJl(s) => {
                SketchSpec::sparse_jl(m, d, s.unwrap_or(default_sparsity(m)).min(m), seed)
            }
        }
    }

    /// Kronecker spec whose factor seeds derive from `seed`.
    pub fn kron_spec(
        self,
        other: FamilyKind,
        (m_a, d_a): (usize, usize),
        (m_e, d_e): (usize, usize),
        seed: u64,
    ) -> Result<SketchSpec> {
        SketchSpec::kronecker(
            self.spec(m_a, d_a, derive_seed(seed, streams::KRON_FACTOR_A, 0)),
            other.spec(m_e, d_e, derive_seed(seed, streams::KRON_FACTOR_E, 0)),
            seed,
        )
    }

    pub fn name(self) -> String {
        match self {
            Self::Gaussian => "gaussian".into(),
            Self::Rademacher => "rademacher".into(),
            Self::SparseJl(Some(s)) => format!("sjl:{s}"),
            Self::SparseJl(None) => "sjl".into(),
        }
    }
}

/// Column-sparse sketch: column `j` has nonzeros at `rows[j*s..(j+1)*s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseColumns {
    m: usize,
    d: usize,
    s: usize,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl SparseColumns {
    pub fn sparsity(&self) -> usize {
        self.s
    }

    /// Row indices and values of column `j`.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let r = j * self.s..(j + 1) * self.s;
        (&self.rows[r.clone()], &self.values[r])
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let (rows, vals) = self.column(j);
            for (&i, &p) in rows.iter().zip(vals) {
                out[i] += p * vj;
            }
        }
    }

    fn apply_transpose(&self, w: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let (rows, vals) = self.column(j);
            *o = rows.iter().zip(vals).map(|(&i, &p)| p * w[i]).sum();
        }
    }

    fn to_dense(&self) -> Matrix {
        let mut p = Matrix::zeros(self.m, self.d);
        for j in 0..self.d {
            let (rows, vals) = self.column(j);
            for (&i, &x) in rows.iter().zip(vals) {
                p[(i, j)] = x;
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Repr {
    Dense(Matrix),
    Sparse(SparseColumns),
    Kronecker(Box<RealizedSketch>, Box<RealizedSketch>),
}

/// A realized sketching operator `P` (`m × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedSketch {
    spec: Option<SketchSpec>,
    m: usize,
    d: usize,
    repr: Repr,
}

/// Builds `P` from its spec. Column `j` draws from its own counter-based
/// stream, so the realization is a pure function of the spec.
pub fn build_sketch(spec: &SketchSpec) -> Result<RealizedSketch> {
    spec.validate()?;
    let (m, d) = (spec.m, spec.d);
    let repr = match &spec.family {
        SketchFamily::Gaussian => {
            let scale = 1.0 / (m as f64).sqrt();
            Repr::Dense(dense_columns(m, d, spec.seed, |rng| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }))
        }
        SketchFamily::Rademacher => {
            let scale = 1.0 / (m as f64).sqrt();
            Repr::Dense(dense_columns(m, d, spec.seed, |rng| {
                if rng.random::<bool>() {
                    scale
                } else {
                    -scale
                }
            }))
        }
        SketchFamily::SparseJl { s } => {
            let s = *s;
            let scale = 1.0 / (s as f64).sqrt();
            let cols: Vec<(Vec<usize>, Vec<f64>)> = (0..d)
                .into_par_iter()
                .map(|j| {
                    let mut rng = column_rng(spec.seed, j);
                    let rows = rand::seq::index::sample(&mut rng, m, s).into_vec();
                    let vals = (0..s)
                        .map(|_| if rng.random::<bool>() { scale } else { -scale })
                        .collect();
                    (rows, vals)
                })
                .collect();
            let (mut rows, mut values) = (Vec::with_capacity(d * s), Vec::with_capacity(d * s));
            for (r, v) in cols {
                rows.extend(r);
                values.extend(v);
            }
            Repr::Sparse(SparseColumns {
                m,
                d,
                s,
                rows,
                values,
            })
        }
        SketchFamily::Kronecker { a, e } => {
            Repr::Kronecker(Box::new(build_sketch(a)?), Box::new(build_sketch(e)?))
        }
    };
    Ok(RealizedSketch {
        spec: Some(spec.clone()),
        m,
        d,
        repr,
    })
}

fn dense_columns(
    m: usize,
    d: usize,
    seed: u64,
    draw: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut rng = column_rng(seed, j);
            (0..m).map(|_| draw(&mut rng)).collect()
        })
        .collect();
    Matrix::from_iterator(m, d, cols.into_iter().flatten())
}

impl RealizedSketch {
    /// Wraps an explicit matrix, for tests and fixed operators such as `P = I`.
    pub fn from_matrix(p: Matrix) -> Self {
        Self {
            spec: None,
            m: p.nrows(),
            d: p.ncols(),
            repr: Repr::Dense(p),
        }
    }

    /// `P = I_d`.
    pub fn identity(d: usize) -> Self {
        Self::from_matrix(Matrix::identity(d, d))
    }

    /// `P_A ⊗ P_E` from realized factors (which must not be Kronecker).
    pub fn kronecker(a: RealizedSketch, e: RealizedSketch) -> Result<Self> {
        if a.is_kronecker() || e.is_kronecker() {
            return Err(Error::InvalidSpec("nested Kronecker factors".into()));
        }
        Ok(Self {
            spec: None,
            m: a.m * e.m,
            d: a.d * e.d,
            repr: Repr::Kronecker(Box::new(a), Box::new(e)),
        })
    }

    pub fn spec(&self) -> Option<&SketchSpec> {
        self.spec.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.spec.as_ref().map(|s| s.seed)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_kronecker(&self) -> bool {
        matches!(self.repr, Repr::Kronecker(..))
    }

    /// The factors `(P_A, P_E)` of a Kronecker sketch.
    pub fn factors(&self) -> Option<(&RealizedSketch, &RealizedSketch)> {
        match &self.repr {
            Repr::Kronecker(a, e) => Some((a, e)),
            _ => None,
        }
    }

    pub fn sparse(&self) -> Option<&SparseColumns> {
        match &self.repr {
            Repr::Sparse(s) => Some(s),
            _ => None,
        }
    }

    /// `P v`.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        check_dim("RealizedSketch::apply", self.d, v.len())?;
        Ok(match &self.repr {
            Repr::Dense(p) => p * v,
            Repr::Sparse(s) => {
                let mut out = Vector::zeros(self.m);
                s.apply(v.as_slice(), out.as_mut_slice());
                out
            }
            Repr::Kronecker(a, e) => {
                let g = unvec(v, e.d, a.d)?;
                vec_of(&apply_factorized_matrix(a, e, &g)?)
            }
        })
    }

    /// `P^T w`.
    pub fn apply_transpose(&self, w: &Vector) -> Result<Vector> {
        check_dim("RealizedSketch::apply_transpose", self.m, w.len())?;
        Ok(match &self.repr {
            Repr::Dense(p) => p.tr_mul(w),
            Repr::Sparse(s) => {
                let mut out = Vector::zeros(self.d);
                s.apply_transpose(w.as_slice(), out.as_mut_slice());
                out
            }
            Repr::Kronecker(a, e) => {
                // (P_A ⊗ P_E)^T = P_A^T ⊗ P_E^T.
                let h = unvec(w, e.m, a.m)?;
                let left = e.apply_transpose_matrix(&h)?;
                vec_of(&a.apply_transpose_matrix(&left.transpose())?.transpose())
            }
        })
    }

    /// `P M` for `M` of shape `d × k`.
    pub fn apply_matrix(&self, mat: &Matrix) -> Result<Matrix> {
        check_dim("RealizedSketch::apply_matrix", self.d, mat.nrows())?;
        match &self.repr {
            Repr::Dense(p) => Ok(p * mat),
            _ => {
                let mut out = Matrix::zeros(self.m, mat.ncols());
                for (j, col) in mat.column_iter().enumerate() {
                    out.set_column(j, &self.apply(&col.into_owned())?);
                }
                Ok(out)
            }
        }
    }

    /// `P^T M` for `M` of shape `m × k`.
    pub fn apply_transpose_matrix(&self, mat: &Matrix) -> Result<Matrix> {
        check_dim("RealizedSketch::apply_transpose_matrix", self.m, mat.nrows())?;
        match &self.repr {
            Repr::Dense(p) => Ok(p.tr_mul(mat)),
            _ => {
                let mut out = Matrix::zeros(self.d, mat.ncols());
                for (j, col) in mat.column_iter().enumerate() {
                    out.set_column(j, &self.apply_transpose(&col.into_owned())?);
                }
                Ok(out)
            }
        }
    }

    /// Dense `m × d` matrix; refuses above [`DENSE_ENTRY_CAP`] entries.
    pub fn to_dense(&self) -> Result<Matrix> {
        let entries = self.m.saturating_mul(self.d);
        if entries > DENSE_ENTRY_CAP {
            return Err(Error::CapExceeded {
                size: entries,
                cap: DENSE_ENTRY_CAP,
            });
        }
        match &self.repr {
            Repr::Dense(p) => Ok(p.clone()),
            Repr::Sparse(s) => Ok(s.to_dense()),
            Repr::Kronecker(a, e) => Ok(a.to_dense()?.kronecker(&e.to_dense()?)),
        }
    }
}

/// `P_E G P_A^T` for `G` of shape `d_E × d_A`; equals `unvec((P_A ⊗ P_E) vec(G))`.
pub fn apply_factorized_matrix(
    sk_a: &RealizedSketch,
    sk_e: &RealizedSketch,
    g: &Matrix,
) -> Result<Matrix> {
    check_dim("apply_factorized_matrix (rows vs d_E)", sk_e.d, g.nrows())?;
    check_dim("apply_factorized_matrix (cols vs d_A)", sk_a.d, g.ncols())?;
    let left = sk_e.apply_matrix(g)?;
    Ok(sk_a.apply_matrix(&left.transpose())?.transpose())
}

/// `P F P^T`, either dense or as the sketched factor pair.
#[derive(Clone, Debug)]
pub enum SketchedCurvature {
    Dense(SymmetricMatrix),
    Kronecker {
        a: SymmetricMatrix,
        e: SymmetricMatrix,
    },
}

impl SketchedCurvature {
    /// Dense `m × m` form (Kronecker: `Â ⊗ Ê`).
    pub fn to_dense(&self) -> Result<SymmetricMatrix> {
        match self {
            Self::Dense(s) => Ok(s.clone()),
            Self::Kronecker { a, e } => SymmetricMatrix::new(a.as_matrix().kronecker(e.as_matrix())),
        }
    }
}

fn sandwich(sk: &RealizedSketch, f: &Matrix) -> Result<SymmetricMatrix> {
    let pf = sk.apply_matrix(f)?;
    SymmetricMatrix::new(sk.apply_matrix(&pf.transpose())?)
}

/// `P F P^T`. Kronecker sketch with Kronecker curvature stays factored;
/// mixed combinations materialize under [`KRON_DENSE_CAP`].
pub fn sketch_curvature(sk: &RealizedSketch, f: &CurvatureOperator) -> Result<SketchedCurvature> {
    check_dim("sketch_curvature", sk.d, f.dim())?;
    match (f, sk.factors()) {
        (CurvatureOperator::Kronecker(pair), Some((pa, pe))) => Ok(SketchedCurvature::Kronecker {
            a: sandwich(pa, pair.a().as_matrix())?,
            e: sandwich(pe, pair.e().as_matrix())?,
        }),
        (CurvatureOperator::Eigen(eig), _) => {
            let v = sk.apply_matrix(&eig.sqrt_factor())?;
            Ok(SketchedCurvature::Dense(SymmetricMatrix::new(&v * v.transpose())?))
        }
        _ => {
            let dense = f.to_dense(KRON_DENSE_CAP).map_err(|_| {
                Error::FamilyMismatch(format!(
                    "cannot materialize a {}-dimensional curvature for this sketch",
                    f.dim()
                ))
            })?;
            Ok(SketchedCurvature::Dense(sandwich(sk, dense.as_matrix())?))
        }
    }
}

/// Compact eigendecomposition of `P F P^T` (dense form).
///
/// When `F` is held by its decomposition the eigenpairs come from the thin
/// SVD of `P U Λ^{1/2}`, which keeps relative accuracy for small eigenvalues.
pub fn sketched_eig(
    sk: &RealizedSketch,
    f: &CurvatureOperator,
    policy: RankPolicy,
) -> Result<CompactEigen> {
    check_dim("sketched_eig", sk.d, f.dim())?;
    match f {
        CurvatureOperator::Eigen(eig) => gram_eig(&sk.apply_matrix(&eig.sqrt_factor())?, policy),
        _ => match sketch_curvature(sk, f)? {
            SketchedCurvature::Dense(s) => compact_eig(&s, policy),
            k @ SketchedCurvature::Kronecker { .. } => compact_eig(&k.to_dense()?, policy),
        },
    }
}

/// `‖M^T (P^T P − I) M‖₂` for `M` of shape `d × s`.
pub fn gram_deviation(sk: &RealizedSketch, mat: &Matrix) -> Result<f64> {
    check_dim("gram_deviation", sk.d, mat.nrows())?;
    let pm = sk.apply_matrix(mat)?;
    let dev = pm.tr_mul(&pm) - mat.tr_mul(mat);
    Ok(sym_spectral_norm(&dev))
}

/// `P^T P − I` as a dense `d × d` matrix (small dims only).
pub fn gram_error_matrix(sk: &RealizedSketch) -> Result<Matrix> {
    let p = sk.to_dense()?;
    Ok(p.tr_mul(&p) - DMatrix::identity(sk.d, sk.d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron_dense, KroneckerPair};
    use crate::rng::{gaussian_vector, rng_from_seed};

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn spec_validation() {
        assert!(SketchSpec::gaussian(0, 3, 1).validate().is_err());
        assert!(SketchSpec::sparse_jl(4, 3, 5, 1).validate().is_err());
        assert!(SketchSpec::sparse_jl(4, 3, 0, 1).validate().is_err());
        assert!(SketchSpec::gaussian(1 << 14, 1 << 13, 1).validate().is_err());
        assert!(SketchSpec::sparse_jl(1 << 14, 1 << 13, 8, 1).validate().is_ok());
        let inner = SketchSpec::kronecker(
            SketchSpec::gaussian(2, 2, 1),
            SketchSpec::gaussian(2, 2, 2),
            0,
        )
        .unwrap();
        assert!(SketchSpec::kronecker(inner, SketchSpec::gaussian(2, 2, 3), 0).is_err());
    }

    #[test]
    fn rademacher_magnitudes() {
        let p = build_sketch(&SketchSpec::rademacher(2, 2, 1)).unwrap().to_dense().unwrap();
        for x in p.iter() {
            assert_eq!(x.abs(), 1.0 / 2f64.sqrt());
        }
    }

    #[test]
    fn sparse_jl_structure() {
        let sk = build_sketch(&SketchSpec::sparse_jl(16, 10, 3, 5)).unwrap();
        let p = sk.to_dense().unwrap();
        for col in p.column_iter() {
            let nz: Vec<f64> = col.iter().copied().filter(|x| *x != 0.0).collect();
            assert_eq!(nz.len(), 3);
            for x in nz {
                assert!((x.abs() - 1.0 / 3f64.sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_envelope() {
        // Monte-Carlo oracle over 50 seeds (m=256, d=64): deviations span
        // roughly [1.07, 1.42], around the edge (1+sqrt(d/m))^2-1 = 1.25.
        // The envelope sits above the observed maximum.
        let envelope = 1.6;
        let devs: Vec<f64> = (0..50)
            .map(|seed| {
                let sk = build_sketch(&SketchSpec::gaussian(256, 64, seed)).unwrap();
                gram_deviation(&sk, &Matrix::identity(64, 64)).unwrap()
            })
            .collect();
        let worst = devs.iter().cloned().fold(0.0, f64::max);
        assert!(worst < envelope, "worst {worst}");
        let mean = devs.iter().sum::<f64>() / 50.0;
        assert!((mean - 1.25).abs() < 0.15, "mean {mean}");
        let sk = build_sketch(&SketchSpec::gaussian(256, 64, 7)).unwrap();
        assert!(gram_deviation(&sk, &Matrix::identity(64, 64)).unwrap() <= envelope);
    }

    #[test]
    fn realization_is_deterministic() {
        for spec in [
            SketchSpec::gaussian(5, 7, 3),
            SketchSpec::rademacher(5, 7, 3),
            SketchSpec::sparse_jl(5, 7, 2, 3),
        ] {
            let a = build_sketch(&spec).unwrap();
            let b = build_sketch(&spec).unwrap();
            assert_eq!(a, b);
            let c = build_sketch(&SketchSpec { seed: 4, ..spec }).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn identity_apply() {
        let sk = RealizedSketch::identity(4);
        let v = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sk.apply(&v).unwrap(), v);
        let k = RealizedSketch::kronecker(RealizedSketch::identity(2), RealizedSketch::identity(2)).unwrap();
        assert_eq!(k.apply(&v).unwrap(), v);
    }

    #[test]
    fn kronecker_apply_matches_dense() {
        for family in [FamilyKind::Gaussian, FamilyKind::Rademacher, FamilyKind::SparseJl(Some(1))] {
            let spec = family.kron_spec(family, (2, 3), (2, 3), 9).unwrap();
            let sk = build_sketch(&spec).unwrap();
            let dense = sk.to_dense().unwrap();
            let mut rng = rng_from_seed(2);
            let v = gaussian_vector(&mut rng, 9);
            let diff = (sk.apply(&v).unwrap() - &dense * &v).amax();
            assert!(diff <= 1e-12, "{diff}");
            let w = gaussian_vector(&mut rng, 4);
            let diff = (sk.apply_transpose(&w).unwrap() - dense.tr_mul(&w)).amax();
            assert!(diff <= 1e-12, "{diff}");
        }
    }

    #[test]
    fn factorized_matrix_examples() {
        let pa = build_sketch(&SketchSpec::gaussian(2, 4, 1)).unwrap();
        let pe = build_sketch(&SketchSpec::gaussian(2, 3, 2)).unwrap();
        assert_eq!(
            apply_factorized_matrix(&pa, &pe, &Matrix::zeros(3, 4)).unwrap(),
            Matrix::zeros(2, 2)
        );
        let g = random_matrix(3, 4, 3);
        let out = apply_factorized_matrix(&pa, &pe, &g).unwrap();
        let dense = pa.to_dense().unwrap().kronecker(&pe.to_dense().unwrap());
        assert!((vec_of(&out) - dense * vec_of(&g)).amax() <= 1e-12);

        let a1 = RealizedSketch::from_matrix(Matrix::from_element(1, 1, 3.0));
        let e1 = RealizedSketch::from_matrix(Matrix::from_element(1, 1, -2.0));
        let s = apply_factorized_matrix(&a1, &e1, &Matrix::from_element(1, 1, 5.0)).unwrap();
        assert_eq!(s[(0, 0)], -30.0);
        assert!(apply_factorized_matrix(&pa, &pe, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn sketch_curvature_examples() {
        let f = SymmetricMatrix::new(random_matrix(4, 4, 1) * random_matrix(4, 4, 1).transpose()).unwrap();
        let op = CurvatureOperator::Dense(f.clone());
        let SketchedCurvature::Dense(s) = sketch_curvature(&RealizedSketch::identity(4), &op).unwrap()
        else {
            panic!("dense expected")
        };
        assert!((s.as_matrix() - f.as_matrix()).amax() <= 1e-12);

        let zero = CurvatureOperator::Dense(SymmetricMatrix::zeros(4));
        let sk = build_sketch(&SketchSpec::gaussian(3, 4, 2)).unwrap();
        let SketchedCurvature::Dense(s) = sketch_curvature(&sk, &zero).unwrap() else {
            panic!("dense expected")
        };
        assert_eq!(s.as_matrix().amax(), 0.0);
    }

    #[test]
    fn kronecker_curvature_matches_dense() {
        let a = SymmetricMatrix::new(random_matrix(3, 3, 4) * random_matrix(3, 3, 4).transpose()).unwrap();
        let e = SymmetricMatrix::new(random_matrix(2, 2, 5) * random_matrix(2, 2, 5).transpose()).unwrap();
        let pair = KroneckerPair::new(a, e, RankPolicy::default()).unwrap();
        let spec = FamilyKind::Gaussian
            .kron_spec(FamilyKind::Gaussian, (2, 3), (2, 2), 6)
            .unwrap();
        let sk = build_sketch(&spec).unwrap();
        let kron = sketch_curvature(&sk, &CurvatureOperator::Kronecker(pair.clone())).unwrap();
        assert!(matches!(kron, SketchedCurvature::Kronecker { .. }));
        let p = sk.to_dense().unwrap();
        let dense = &p * kron_dense(&pair, KRON_DENSE_CAP).unwrap().as_matrix() * p.transpose();
        assert!((kron.to_dense().unwrap().as_matrix() - dense).amax() <= 1e-10);
    }

    #[test]
    fn gram_deviation_examples() {
        let sk = build_sketch(&SketchSpec::gaussian(5, 6, 1)).unwrap();
        assert_eq!(gram_deviation(&sk, &Matrix::zeros(6, 3)).unwrap(), 0.0);
        let m = random_matrix(6, 3, 2);
        assert_eq!(gram_deviation(&RealizedSketch::identity(6), &m).unwrap(), 0.0);
        let explicit = sym_spectral_norm(&(m.transpose() * gram_error_matrix(&sk).unwrap() * &m));
        assert!((gram_deviation(&sk, &m).unwrap() - explicit).abs() <= 1e-10);
    }

    #[test]
    fn sketched_eig_paths_agree() {
        let w = random_matrix(8, 3, 7);
        let f = SymmetricMatrix::new(&w * w.transpose()).unwrap();
        let eig = compact_eig(&f, RankPolicy::default()).unwrap();
        let sk = build_sketch(&SketchSpec::gaussian(5, 8, 8)).unwrap();
        let via_svd = sketched_eig(&sk, &CurvatureOperator::Eigen(eig), RankPolicy::default()).unwrap();
        let via_dense = sketched_eig(&sk, &CurvatureOperator::Dense(f), RankPolicy::default()).unwrap();
        assert_eq!(via_svd.rank(), 3);
        assert!((via_svd.reconstruct() - via_dense.reconstruct()).amax() <= 1e-10);
    }
}
