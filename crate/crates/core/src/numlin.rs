//! Small dense linear-algebra kernel.
//!
//! Everything here works on `nalgebra::DMatrix<f64>` and is sized for the
//! tiny matrices that show up in finite-state filtering (d up to a few
//! dozen): matrix exponential, numerical rank, eigenvalue location and an
//! orthonormal-basis [`Subspace`] type.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

/// Relative singular-value cutoff used for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;
/// Eigenvalues must satisfy `Re λ < -margin` to count as stable.
pub const DEFAULT_HURWITZ_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("eigenvalue iteration did not converge for a {0}x{0} matrix")]
    EigenFailure(usize),
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

// Padé(13,13) numerator coefficients, Higham (2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn ensure_square(m: &DMatrix<f64>) -> Result<usize, NumError> {
    if m.nrows() != m.ncols() {
        return Err(NumError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{M t}` by scaling and squaring with a degree-13 Padé approximant.
pub fn expm(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, NumError> {
    let n = ensure_square(m)?;
    if !t.is_finite() || m.iter().any(|x| !x.is_finite()) {
        return Err(NumError::NonFinite("expm input"));
    }
    if t == 0.0 || n == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let a = m * t;
    let norm = one_norm(&a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-squarings);

    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &eye * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &eye * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or(NumError::NonFinite("expm Padé solve"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(NumError::NonFinite("expm result"));
    }
    Ok(r)
}

/// Number of singular values above `tol_rel` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, tol_rel: f64) -> usize {
    numerical_rank_scaled(m, tol_rel, 0.0)
}

/// Like [`numerical_rank`] but the cutoff is `tol_rel · max(σ_max, scale)`,
/// so a matrix made of rounding noise relative to `scale` has rank 0.
pub fn numerical_rank_scaled(m: &DMatrix<f64>, tol_rel: f64, scale: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max).max(scale);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol_rel * smax).count()
}

/// All eigenvalues of a real square matrix (Hessenberg reduction + shifted QR).
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, NumError> {
    let n = ensure_square(m)?;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(NumError::NonFinite("eigenvalue input"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or(NumError::EigenFailure(n))?;
    Ok(schur.complex_eigenvalues().iter().cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurwitzCheck {
    pub hurwitz: bool,
    pub max_real_part: f64,
}

/// True iff every eigenvalue has real part `< -margin`.
pub fn is_hurwitz(m: &DMatrix<f64>, margin: f64) -> Result<HurwitzCheck, NumError> {
    let eig = eigenvalues(m)?;
    let max_real_part = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(HurwitzCheck {
        hurwitz: max_real_part < -margin,
        max_real_part,
    })
}

/// A linear subspace of ℝ^d held as a matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    ambient_dim: usize,
    basis: DMatrix<f64>,
    tol: f64,
}

impl Subspace {
    pub fn zero(ambient_dim: usize, tol: f64) -> Self {
        Subspace {
            ambient_dim,
            basis: DMatrix::zeros(ambient_dim, 0),
            tol,
        }
    }

    pub fn full(ambient_dim: usize, tol: f64) -> Self {
        Subspace {
            ambient_dim,
            basis: DMatrix::identity(ambient_dim, ambient_dim),
            tol,
        }
    }

    /// Orthonormalized span of `vectors`.
    pub fn from_vectors(ambient_dim: usize, vectors: &[DVector<f64>], tol: f64) -> Self {
        Subspace::zero(ambient_dim, tol).span_grow(vectors)
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// `d × k` matrix with orthonormal columns.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    /// `‖v − P v‖₂` where `P` is the orthogonal projector onto the subspace.
    pub fn residual(&self, v: &DVector<f64>) -> f64 {
        (v - self.project(v)).norm()
    }

    /// Two passes of modified Gram–Schmidt against the current basis.
    fn orthogonalize(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut r = v.clone();
        for _ in 0..2 {
            for q in self.basis.column_iter() {
                let c = q.dot(&r);
                r.axpy(-c, &q, 1.0);
            }
        }
        r
    }

    fn push(&mut self, unit: DVector<f64>) {
        let k = self.dim();
        let mut basis = DMatrix::zeros(self.ambient_dim, k + 1);
        basis.columns_mut(0, k).copy_from(&self.basis);
        basis.set_column(k, &unit);
        self.basis = basis;
    }

    /// Span of the current basis plus `vectors`. A vector contributes a new
    /// direction when its residual exceeds `tol · max(‖v‖, 1)`.
    pub fn span_grow(&self, vectors: &[DVector<f64>]) -> Subspace {
        let mut out = self.clone();
        for v in vectors {
            assert_eq!(
                v.len(),
                self.ambient_dim,
                "vector length must match ambient dimension"
            );
            if out.dim() == out.ambient_dim {
                break;
            }
            let r = out.orthogonalize(v);
            let rn = r.norm();
            if rn > out.tol * v.norm().max(1.0) {
                out.push(r / rn);
            }
        }
        out
    }

    /// Orthonormal basis of the orthogonal complement; dimensions always add
    /// up to the ambient dimension.
    pub fn orthogonal_complement(&self) -> Subspace {
        let d = self.ambient_dim;
        let mut grown = self.clone();
        let mut added = Vec::new();
        while grown.dim() < d {
            // Greedy pick of the coordinate vector with the largest residual.
            let best = (0..d)
                .map(|i| {
                    grown.orthogonalize(&DVector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 }))
                })
                .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                .expect("ambient dimension is positive");
            let unit = &best / best.norm();
            grown.push(unit.clone());
            added.push(unit);
        }
        let mut basis = DMatrix::zeros(d, added.len());
        for (j, v) in added.iter().enumerate() {
            basis.set_column(j, v);
        }
        Subspace {
            ambient_dim: d,
            basis,
            tol: self.tol,
        }
    }
}
