//! Binary formats: per-example gradients, K-FAC factors, and the cached
//! curvature decomposition.
//!
//! All integers and floats are little-endian. Every file starts with a 4-byte
//! magic and a `u32` version (currently 1).
//!
//! | file | after the header |
//! |------|------------------|
//! | `GRDF` | `n: u64`, `d: u64`, `n·d` f64 row-major |
//! | `KFCF` | `d_A: u64`, `d_A²` f64 row-major, `d_E: u64`, `d_E²` f64 row-major |
//! | `CEIG` | `kind: u32` (0 dense, 1 Kronecker), then one or two eig blocks |
//!
//! An eig block is `dim: u64`, `rank: u64`, `rel_tol: f64`, `abs_tol: f64`,
//! `rank` eigenvalues, then the `dim × rank` basis row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{gram_eig, CompactEigen, CurvatureOperator, KroneckerPair, Matrix, RankPolicy, SymmetricMatrix};

pub const GRADIENT_MAGIC: &[u8; 4] = b"GRDF";
pub const FACTOR_MAGIC: &[u8; 4] = b"KFCF";
pub const EIGEN_MAGIC: &[u8; 4] = b"CEIG";
pub const FORMAT_VERSION: u32 = 1;

/// Largest gradient dimension for which the Fisher is decomposed densely.
pub const FISHER_DIM_CAP: usize = 4096;

/// Absolute asymmetry tolerance for factor blocks, relative to the block's largest entry.
pub const SYMMETRY_TOL: f64 = 1e-9;

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r, what)?))
}

fn get_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r, what)?))
}

fn get_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(get(r, what)?))
}

fn get_usize(r: &mut impl Read, what: &str) -> Result<usize> {
    let x = get_u64(r, what)?;
    usize::try_from(x).map_err(|_| Error::Format(format!("{what} = {x} does not fit in memory")))
}

/// Reads `rows × cols` row-major finite f64s, refusing absurd sizes before allocating.
fn get_matrix(r: &mut impl Read, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= (isize::MAX as usize) / 8)
        .ok_or_else(|| Error::Format(format!("{what}: {rows} x {cols} is too large")))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{what}: payload shorter than {rows} x {cols}")),
        _ => Error::Io(e),
    })?;
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format(format!("{what}: non-finite value")));
    }
    Ok(Matrix::from_row_slice(rows, cols, &vals))
}

fn put_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    for i in 0..m.nrows() {
        put_f64s(w, m.row(i).iter().copied())?;
    }
    Ok(())
}

fn header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let got: [u8; 4] = get(r, "magic")?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = get_u32(r, "version")?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("{what}: trailing bytes after payload"))),
    }
}

/// Writes an `n × d` gradient matrix (one example per row).
pub fn write_gradients(w: &mut impl Write, grads: &Matrix) -> Result<()> {
    if grads.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient file"));
    }
    w.write_all(GRADIENT_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u64(w, grads.nrows() as u64)?;
    put_u64(w, grads.ncols() as u64)?;
    put_matrix(w, grads)
}

pub fn read_gradients(r: &mut impl Read) -> Result<Matrix> {
    header(r, GRADIENT_MAGIC)?;
    let n = get_usize(r, "n")?;
    let d = get_usize(r, "d")?;
    let g = get_matrix(r, n, d, "gradients")?;
    expect_eof(r, "gradients")?;
    Ok(g)
}

fn check_symmetric(m: &Matrix, what: &str) -> Result<SymmetricMatrix> {
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Format(format!("{what} is not symmetric (max asymmetry {asym:e})")));
    }
    SymmetricMatrix::new(m.clone())
}

pub fn write_factors(w: &mut impl Write, a: &SymmetricMatrix, e: &SymmetricMatrix) -> Result<()> {
    w.write_all(FACTOR_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    for block in [a, e] {
        put_u64(w, block.dim() as u64)?;
        put_matrix(w, block.as_matrix())?;
    }
    Ok(())
}

/// Reads `(A, E)`; blocks must be symmetric within [`SYMMETRY_TOL`].
pub fn read_factors(r: &mut impl Read) -> Result<(SymmetricMatrix, SymmetricMatrix)> {
    header(r, FACTOR_MAGIC)?;
    let da = get_usize(r, "d_A")?;
    let a = check_symmetric(&get_matrix(r, da, da, "factor A")?, "factor A")?;
    let de = get_usize(r, "d_E")?;
    let e = check_symmetric(&get_matrix(r, de, de, "factor E")?, "factor E")?;
    expect_eof(r, "factors")?;
    Ok((a, e))
}

/// A decomposed curvature, as cached on disk.
#[derive(Clone, Debug)]
pub enum Curvature {
    Dense(CompactEigen),
    Kronecker(KroneckerPair),
}

impl Curvature {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(e) => e.dim(),
            Self::Kronecker(p) => p.dim(),
        }
    }

    /// Compact eigendecomposition of the full operator.
    pub fn eig(&self) -> Result<CompactEigen> {
        match self {
            Self::Dense(e) => Ok(e.clone()),
            Self::Kronecker(p) => p.product_eig(),
        }
    }

    pub fn operator(&self) -> CurvatureOperator {
        match self {
            Self::Dense(e) => CurvatureOperator::Eigen(e.clone()),
            Self::Kronecker(p) => CurvatureOperator::Kronecker(p.clone()),
        }
    }
}

/// Empirical Fisher `(1/n) Σ g_i g_i^T` of the rows, decomposed through the
/// thin SVD of `G^T / sqrt(n)`.
pub fn fisher_eig(grads: &Matrix, policy: RankPolicy) -> Result<CompactEigen> {
    if grads.nrows() == 0 {
        return Err(Error::OutOfRangeParam("empty gradient matrix".into()));
    }
    if grads.ncols() > FISHER_DIM_CAP {
        return Err(Error::CapExceeded { size: grads.ncols(), cap: FISHER_DIM_CAP });
    }
    gram_eig(&(grads.transpose() / (grads.nrows() as f64).sqrt()), policy)
}

fn put_eig(w: &mut impl Write, eig: &CompactEigen) -> Result<()> {
    let p = eig.policy();
    put_u64(w, eig.dim() as u64)?;
    put_u64(w, eig.rank() as u64)?;
    put_f64s(w, [p.rel_tol, p.abs_tol])?;
    put_f64s(w, eig.lambdas().iter().copied())?;
    put_matrix(w, eig.basis())
}

fn get_eig(r: &mut impl Read) -> Result<CompactEigen> {
    let dim = get_usize(r, "dim")?;
    let rank = get_usize(r, "rank")?;
    if rank > dim {
        return Err(Error::Format(format!("rank {rank} exceeds dim {dim}")));
    }
    let policy = RankPolicy::new(get_f64(r, "rel_tol")?, get_f64(r, "abs_tol")?)?;
    let lambdas = get_matrix(r, 1, rank, "eigenvalues")?;
    let basis = get_matrix(r, dim, rank, "basis")?;
    let eig = CompactEigen::from_parts(basis, lambdas.iter().copied().collect(), policy)?;
    if eig.rank() != rank {
        return Err(Error::Format("cached eigenvalues fall below their own rank policy".into()));
    }
    Ok(eig)
}

pub fn write_curvature(w: &mut impl Write, c: &Curvature) -> Result<()> {
    w.write_all(EIGEN_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    match c {
        Curvature::Dense(e) => {
            put_u32(w, 0)?;
            put_eig(w, e)
        }
        Curvature::Kronecker(p) => {
            put_u32(w, 1)?;
            put_eig(w, p.eig_a())?;
            put_eig(w, p.eig_e())
        }
    }
}

pub fn read_curvature(r: &mut impl Read) -> Result<Curvature> {
    header(r, EIGEN_MAGIC)?;
    let c = match get_u32(r, "kind")? {
        0 => Curvature::Dense(get_eig(r)?),
        1 => {
            let a = get_eig(r)?;
            let e = get_eig(r)?;
            Curvature::Kronecker(KroneckerPair::from_eigs(a, e)?)
        }
        k => return Err(Error::Format(format!("unknown curvature kind {k}"))),
    };
    expect_eof(r, "curvature")?;
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_gradients(path: &Path, grads: &Matrix) -> Result<()> {
    let mut w = create(path)?;
    write_gradients(&mut w, grads)?;
    Ok(w.flush()?)
}

pub fn load_gradients(path: &Path) -> Result<Matrix> {
    read_gradients(&mut open(path)?)
}

pub fn save_factors(path: &Path, a: &SymmetricMatrix, e: &SymmetricMatrix) -> Result<()> {
    let mut w = create(path)?;
    write_factors(&mut w, a, e)?;
    Ok(w.flush()?)
}

pub fn load_factors(path: &Path) -> Result<(SymmetricMatrix, SymmetricMatrix)> {
    read_factors(&mut open(path)?)
}

pub fn save_curvature(path: &Path, c: &Curvature) -> Result<()> {
    let mut w = create(path)?;
    write_curvature(&mut w, c)?;
    Ok(w.flush()?)
}

pub fn load_curvature(path: &Path) -> Result<Curvature> {
    read_curvature(&mut open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes_of(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Vec<u8> {
        let mut v = Vec::new();
        f(&mut v).unwrap();
        v
    }

    #[test]
    fn gradient_layout_is_exact() {
        let g = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = bytes_of(|w| write_gradients(w, &g));
        assert_eq!(&b[..4], b"GRDF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(b.len(), 24 + 6 * 8);
        // Row-major: the second value is g[0,1].
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), 2.0);
        assert_eq!(read_gradients(&mut b.as_slice()).unwrap(), g);
    }

    #[test]
    fn gradient_size_mismatches_are_rejected() {
        let g = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = bytes_of(|w| write_gradients(w, &g));
        assert!(matches!(read_gradients(&mut &b[..b.len() - 1]), Err(Error::Format(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(read_gradients(&mut long.as_slice()), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_gradients(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut nan = b;
        nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_gradients(&mut nan.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn factors_round_trip_and_reject_asymmetry() {
        let a = SymmetricMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0])).unwrap();
        let e = SymmetricMatrix::identity(3);
        let b = bytes_of(|w| write_factors(w, &a, &e));
        assert_eq!(b.len(), 8 + 8 + 4 * 8 + 8 + 9 * 8);
        let (a2, e2) = read_factors(&mut b.as_slice()).unwrap();
        assert_eq!((a2, e2), (a, e));
        let mut skew = b;
        skew[24..32].copy_from_slice(&1.5f64.to_le_bytes());
        assert!(matches!(read_factors(&mut skew.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn curvature_round_trip_is_bit_exact() {
        let g = Matrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let eig = fisher_eig(&g, RankPolicy::default()).unwrap();
        let b = bytes_of(|w| write_curvature(w, &Curvature::Dense(eig.clone())));
        match read_curvature(&mut b.as_slice()).unwrap() {
            Curvature::Dense(e) => assert_eq!(e, eig),
            _ => panic!("kind changed"),
        }
        let pair = KroneckerPair::new(SymmetricMatrix::from_diagonal(&[2.0, 1.0]).unwrap(), SymmetricMatrix::identity(2), RankPolicy::default()).unwrap();
        let b = bytes_of(|w| write_curvature(w, &Curvature::Kronecker(pair.clone())));
        match read_curvature(&mut b.as_slice()).unwrap() {
            Curvature::Kronecker(p) => assert_eq!(p.eig_a(), pair.eig_a()),
            _ => panic!("kind changed"),
        }
    }

    #[test]
    fn orthogonal_pair_fisher() {
        let g = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let eig = fisher_eig(&g, RankPolicy::default()).unwrap();
        assert_eq!(eig.rank(), 2);
        for l in eig.lambdas() {
            assert!((l - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn fisher_refuses_wide_input() {
        let g = Matrix::zeros(1, FISHER_DIM_CAP + 1);
        assert!(matches!(fisher_eig(&g, RankPolicy::default()), Err(Error::CapExceeded { .. })));
    }
}
