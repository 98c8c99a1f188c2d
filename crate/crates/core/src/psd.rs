//! Dense symmetric and positive semidefinite matrix kernel.
//!
//! Everything downstream (ambiguity sets, the stage SDP, the filters) works on
//! small dense covariance matrices, so this module favours robustness over
//! speed: square roots and PSD tests go through a symmetric eigendecomposition.

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative tolerance (w.r.t. the spectral norm) below which negative
/// eigenvalues are treated as round-off and clamped to zero.
pub const TOL_PSD: f64 = 1e-9;

/// Symmetric part `(m + mᵀ)/2`, exactly symmetric in floating point.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: alloc::vec::Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).0[0]
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = sym_eigen(m);
    vals[vals.len() - 1]
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |acc: f64, &s| acc.max(s))
}

/// `V f(Λ) Vᵀ` for a symmetric input.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let mut scaled = vecs.clone();
    for (k, &lam) in vals.iter().enumerate() {
        let fk = f(lam);
        scaled.column_mut(k).scale_mut(fk);
    }
    symmetrize(&(scaled * vecs.transpose()))
}

/// Square root of a symmetric matrix with negative eigenvalues floored at zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, |l| l.max(0.0).sqrt())
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Element of 𝕊ⁿ: a square matrix that is exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Accepts only exactly symmetric, finite, non-empty square matrices.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if !all_finite(&m) {
            return Err(Error::NonFinite("SymMatrix"));
        }
        if m != m.transpose() {
            return Err(Error::NotSymmetric);
        }
        Ok(SymMatrix(m))
    }

    /// Symmetrizes the input instead of rejecting small asymmetries.
    pub fn from_symmetrized(m: &DMatrix<f64>) -> Result<Self> {
        SymMatrix::new(symmetrize(m))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        SymMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Element of 𝕊₊ⁿ. Eigenvalues within `TOL_PSD·‖A‖` below zero are clamped at
/// construction; anything more negative is rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdMatrix {
    base: SymMatrix,
    eig_floor: f64,
}

impl PsdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        PsdMatrix::with_tolerance(m, TOL_PSD)
    }

    /// Like [`PsdMatrix::new`] with an explicit relative clamping tolerance.
    pub fn with_tolerance(m: DMatrix<f64>, tol_psd: f64) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                context: "PsdMatrix",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if !all_finite(&m) {
            return Err(Error::NonFinite("PsdMatrix"));
        }
        let sym = symmetrize(&m);
        let (vals, vecs) = sym_eigen(&sym);
        let scale = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let eig_floor = tol_psd * scale;
        let lo = vals[0];
        if lo < -eig_floor {
            return Err(Error::NotPsd { min_eigenvalue: lo });
        }
        let matrix = if lo < 0.0 {
            let mut scaled = vecs.clone();
            for (k, &lam) in vals.iter().enumerate() {
                scaled.column_mut(k).scale_mut(lam.max(0.0));
            }
            symmetrize(&(scaled * vecs.transpose()))
        } else {
            sym
        };
        Ok(PsdMatrix {
            base: SymMatrix(matrix),
            eig_floor,
        })
    }

    pub fn identity(n: usize) -> Self {
        PsdMatrix {
            base: SymMatrix::identity(n),
            eig_floor: TOL_PSD,
        }
    }

    pub fn zeros(n: usize) -> Self {
        PsdMatrix {
            base: SymMatrix(DMatrix::zeros(n, n)),
            eig_floor: 0.0,
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        PsdMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.base.as_matrix()
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.base.into_matrix()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.base
    }

    pub fn eig_floor(&self) -> f64 {
        self.eig_floor
    }

    pub fn trace(&self) -> f64 {
        self.base.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(self.as_matrix())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if factor < 0.0 {
            return Err(Error::NegativeInput("scale factor"));
        }
        PsdMatrix::new(self.as_matrix() * factor)
    }
}

/// A Gaussian law 𝒩(mean, cov).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    cov: PsdMatrix,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: PsdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                context: "GaussianLaw mean",
                expected: cov.dim(),
                found: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GaussianLaw mean"));
        }
        Ok(GaussianLaw { mean, cov })
    }

    pub fn centered(cov: PsdMatrix) -> Self {
        GaussianLaw {
            mean: DVector::zeros(cov.dim()),
            cov,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &PsdMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root via eigendecomposition.
pub fn matrix_sqrt(a: &PsdMatrix) -> PsdMatrix {
    PsdMatrix {
        base: SymMatrix(sqrt_psd(a.as_matrix())),
        eig_floor: 0.0,
    }
}

/// `Tr((b^{1/2} a b^{1/2})^{1/2})`, the fidelity term of the Bures distance.
pub(crate) fn bures_fidelity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let rb = sqrt_psd(b);
    let inner = &rb * a * &rb;
    sym_eigen(&inner).0.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

/// Squared Bures distance on raw matrices, clamped at zero.
pub(crate) fn bures_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a.trace() + b.trace() - 2.0 * bures_fidelity(a, b)).max(0.0)
}

/// Bures distance ℬ(a, b) between two covariance matrices.
pub fn bures_distance(a: &PsdMatrix, b: &PsdMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "bures_distance",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    // Symmetric average of both orderings so ℬ(a,b) == ℬ(b,a) to round-off.
    let ab = bures_sq(a.as_matrix(), b.as_matrix());
    let ba = bures_sq(b.as_matrix(), a.as_matrix());
    Ok((0.5 * (ab + ba)).sqrt())
}

/// Type-2 Wasserstein (Gelbrich) distance between two Gaussian laws.
pub fn gelbrich_distance(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            context: "gelbrich_distance",
            expected: p.dim(),
            found: q.dim(),
        });
    }
    let mean_sq = (p.mean() - q.mean()).norm_squared();
    let b = bures_distance(p.cov(), q.cov())?;
    Ok((mean_sq + b * b).sqrt())
}

/// True iff `[[b11, b12], [b12ᵀ, b22]]` has minimum eigenvalue ≥ −tol.
pub fn schur_psd_check(
    block_11: &SymMatrix,
    block_12: &DMatrix<f64>,
    block_22: &SymMatrix,
    tol: f64,
) -> Result<bool> {
    let (n1, n2) = (block_11.dim(), block_22.dim());
    if block_12.nrows() != n1 {
        return Err(Error::DimensionMismatch {
            context: "schur_psd_check block_12 rows",
            expected: n1,
            found: block_12.nrows(),
        });
    }
    if block_12.ncols() != n2 {
        return Err(Error::DimensionMismatch {
            context: "schur_psd_check block_12 cols",
            expected: n2,
            found: block_12.ncols(),
        });
    }
    let full = assemble_blocks(block_11.as_matrix(), block_12, block_22.as_matrix());
    Ok(min_eigenvalue(&full) >= -tol)
}

/// `[[a, b], [bᵀ, d]]`.
pub fn assemble_blocks(a: &DMatrix<f64>, b: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let (n1, n2) = (a.nrows(), d.nrows());
    let mut full = DMatrix::zeros(n1 + n2, n1 + n2);
    full.view_mut((0, 0), (n1, n1)).copy_from(a);
    full.view_mut((0, n1), (n1, n2)).copy_from(b);
    full.view_mut((n1, 0), (n2, n1)).copy_from(&b.transpose());
    full.view_mut((n1, n1), (n2, n2)).copy_from(d);
    full
}

/// Block-diagonal `diag(a, b)`.
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assemble_blocks(a, &DMatrix::zeros(a.nrows(), b.nrows()), b)
}

/// Draw `mean + sqrt(cov)·z`, `z ~ 𝒩(0, I)`.
pub fn sample_gaussian<R: Rng + ?Sized>(law: &GaussianLaw, rng: &mut R) -> DVector<f64> {
    GaussianSampler::new(law).sample(rng)
}

/// Caches the covariance square root for repeated draws from one law.
/// Produces exactly the same stream as [`sample_gaussian`].
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    root: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(law: &GaussianLaw) -> Self {
        GaussianSampler {
            mean: law.mean().clone(),
            root: sqrt_psd(law.cov().as_matrix()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        &self.mean + &self.root * z
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ch = symmetrize(m).cholesky()?;
    Some(symmetrize(&ch.inverse()))
}
