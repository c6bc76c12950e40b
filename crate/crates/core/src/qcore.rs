//! Dense complex linear algebra on tensor-product spaces.
//!
//! Factor ordering is fixed: the apparatus factor is leftmost, so a basis
//! index on `[n, N]` is `i * N + j` with `i` the apparatus index.

use std::fmt;
use std::sync::{Arc, OnceLock};

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use num_complex::Complex64 as C64;

/// Entrywise tolerance for the Hermitian flag.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Tolerance for `|‖ψ‖ - 1|` on states marked normalized.
pub const NORM_TOL: f64 = 1e-12;

pub(crate) const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub(crate) const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceShape {
    dims: Vec<usize>,
}

impl SpaceShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("shape needs at least one factor".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::InvalidArgument(format!("factor dimension {d} < 1")));
        }
        Ok(Self { dims })
    }

    pub fn single(dim: usize) -> Result<Self> {
        Self::new(vec![dim])
    }

    /// Apparatus dimension `n` first, environment dimension second.
    pub fn bipartite(apparatus: usize, environment: usize) -> Result<Self> {
        Self::new(vec![apparatus, environment])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn apparatus_dim(&self) -> usize {
        self.dims[0]
    }

    /// Product of every factor after the first (1 for a single-factor shape).
    pub fn environment_dim(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn concat(&self, other: &SpaceShape) -> SpaceShape {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        SpaceShape { dims }
    }

    pub fn apparatus_shape(&self) -> SpaceShape {
        SpaceShape { dims: vec![self.dims[0]] }
    }

    pub fn environment_shape(&self) -> SpaceShape {
        SpaceShape { dims: vec![self.environment_dim()] }
    }
}

impl fmt::Display for SpaceShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// A (not necessarily normalized) vector on a tensor-product space.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    shape: SpaceShape,
    amps: Vec<C64>,
}

impl StateVector {
    pub fn new(shape: SpaceShape, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != shape.total_dim() {
            return Err(Error::DimensionMismatch {
                context: "state vector",
                expected: shape.total_dim(),
                found: amps.len(),
            });
        }
        if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::InvalidArgument("state has non-finite amplitudes".into()));
        }
        Ok(Self { shape, amps })
    }

    pub fn from_real(shape: SpaceShape, amps: &[f64]) -> Result<Self> {
        Self::new(shape, amps.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn zeros(shape: SpaceShape) -> Self {
        let d = shape.total_dim();
        Self { shape, amps: vec![ZERO; d] }
    }

    pub fn basis(shape: SpaceShape, index: usize) -> Result<Self> {
        let d = shape.total_dim();
        if index >= d {
            return Err(Error::InvalidArgument(format!("basis index {index} out of range {d}")));
        }
        let mut amps = vec![ZERO; d];
        amps[index] = ONE;
        Ok(Self { shape, amps })
    }

    pub fn shape(&self) -> &SpaceShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amps(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOL
    }

    pub fn require_normalized(&self) -> Result<()> {
        if self.is_normalized() {
            Ok(())
        } else {
            Err(Error::NotNormalized { norm: self.norm() })
        }
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::InvalidArgument("cannot normalize the zero vector".into()));
        }
        Ok(self.scaled(C64::new(1.0 / n, 0.0)))
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        debug_assert_eq!(self.amps.len(), other.amps.len());
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self { shape: self.shape.clone(), amps: self.amps.iter().map(|a| a * c).collect() }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: C64, other: &StateVector) {
        for (a, b) in self.amps.iter_mut().zip(&other.amps) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &StateVector) -> Self {
        let mut out = self.clone();
        out.axpy(-ONE, other);
        out
    }

    pub fn add(&self, other: &StateVector) -> Self {
        let mut out = self.clone();
        out.axpy(ONE, other);
        out
    }

    pub fn conj(&self) -> Self {
        Self { shape: self.shape.clone(), amps: self.amps.iter().map(|a| a.conj()).collect() }
    }

    pub fn distance(&self, other: &StateVector) -> f64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// `|self⟩⟨self|` as an operator.
    pub fn projector(&self) -> Operator {
        let d = self.dim();
        let mat = Mat::from_fn(d, d, |i, j| self.amps[i] * self.amps[j].conj());
        Operator::from_parts(self.shape.clone(), mat, true)
    }

    /// Reinterpret on a new shape with the same total dimension.
    pub fn reshaped(&self, shape: SpaceShape) -> Result<Self> {
        Self::new(shape, self.amps.clone())
    }
}

/// Dense operator on a tensor-product space.
#[derive(Clone)]
pub struct Operator {
    shape: SpaceShape,
    mat: Mat<C64>,
    hermitian: bool,
    spectral: OnceLock<Arc<Spectral>>,
}

impl fmt::Debug for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Operator")
            .field("shape", &self.shape)
            .field("hermitian", &self.hermitian)
            .finish_non_exhaustive()
    }
}

impl Operator {
    pub(crate) fn from_parts(shape: SpaceShape, mat: Mat<C64>, hermitian: bool) -> Self {
        Self { shape, mat, hermitian, spectral: OnceLock::new() }
    }

    /// General operator; flagged Hermitian only when exactly so.
    pub fn new(shape: SpaceShape, mat: Mat<C64>) -> Result<Self> {
        let d = shape.total_dim();
        if mat.nrows() != d || mat.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "operator",
                expected: d,
                found: mat.nrows().max(mat.ncols()),
            });
        }
        let mut op = Self::from_parts(shape, mat, false);
        op.hermitian = op.hermiticity_residual() == 0.0;
        Ok(op)
    }

    /// Hermitian operator; rejects inputs with entrywise residual above
    /// [`HERMITIAN_TOL`] (scaled by the largest entry) and symmetrizes the rest.
    pub fn hermitian(shape: SpaceShape, mat: Mat<C64>) -> Result<Self> {
        let mut op = Self::new(shape, mat)?;
        let scale = op.max_abs().max(1.0);
        let residual = op.hermiticity_residual();
        if residual > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian { residual });
        }
        let d = op.dim();
        for i in 0..d {
            op.mat[(i, i)] = C64::new(op.mat[(i, i)].re, 0.0);
            for j in (i + 1)..d {
                let avg = (op.mat[(i, j)] + op.mat[(j, i)].conj()) * 0.5;
                op.mat[(i, j)] = avg;
                op.mat[(j, i)] = avg.conj();
            }
        }
        op.hermitian = true;
        Ok(op)
    }

    pub fn from_fn(shape: SpaceShape, f: impl FnMut(usize, usize) -> C64) -> Result<Self> {
        let d = shape.total_dim();
        Self::new(shape, Mat::from_fn(d, d, f))
    }

    pub fn hermitian_from_fn(
        shape: SpaceShape,
        f: impl FnMut(usize, usize) -> C64,
    ) -> Result<Self> {
        let d = shape.total_dim();
        Self::hermitian(shape, Mat::from_fn(d, d, f))
    }

    pub fn identity(shape: SpaceShape) -> Self {
        let d = shape.total_dim();
        Self::from_parts(shape, Mat::identity(d, d), true)
    }

    pub fn zeros(shape: SpaceShape) -> Self {
        let d = shape.total_dim();
        Self::from_parts(shape, Mat::zeros(d, d), true)
    }

    pub fn diagonal(shape: SpaceShape, diag: &[f64]) -> Result<Self> {
        let d = shape.total_dim();
        if diag.len() != d {
            return Err(Error::DimensionMismatch { context: "diagonal", expected: d, found: diag.len() });
        }
        let mat = Mat::from_fn(d, d, |i, j| if i == j { C64::new(diag[i], 0.0) } else { ZERO });
        Ok(Self::from_parts(shape, mat, true))
    }

    pub fn from_real_rows(shape: SpaceShape, rows: &[Vec<f64>]) -> Result<Self> {
        let d = shape.total_dim();
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { context: "matrix rows", expected: d, found: rows.len() });
        }
        Self::new(shape, Mat::from_fn(d, d, |i, j| C64::new(rows[i][j], 0.0)))
    }

    pub fn shape(&self) -> &SpaceShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &Mat<C64> {
        &self.mat
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.mat[(i, j)]
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    /// Same matrix on a different shape of equal total dimension.
    pub fn reshaped(&self, shape: SpaceShape) -> Result<Self> {
        if shape.total_dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "reshape",
                expected: self.dim(),
                found: shape.total_dim(),
            });
        }
        Ok(Self::from_parts(shape, self.mat.clone(), self.hermitian))
    }

    pub fn hermiticity_residual(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.mat[(i, j)] - self.mat[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        let d = self.dim();
        let mut m = 0.0f64;
        for j in 0..d {
            for i in 0..d {
                m = m.max(self.mat[(i, j)].norm());
            }
        }
        m
    }

    pub fn max_abs_diff(&self, other: &Operator) -> f64 {
        let d = self.dim();
        let mut m = 0.0f64;
        for j in 0..d {
            for i in 0..d {
                m = m.max((self.mat[(i, j)] - other.mat[(i, j)]).norm());
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.norm_l2()
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.mat[(i, i)]).sum()
    }

    pub fn adjoint(&self) -> Operator {
        Self::from_parts(self.shape.clone(), self.mat.adjoint().to_owned(), self.hermitian)
    }

    pub fn matmul(&self, other: &Operator) -> Operator {
        Self::from_parts(self.shape.clone(), &self.mat * &other.mat, false)
    }

    pub fn add(&self, other: &Operator) -> Operator {
        Self::from_parts(self.shape.clone(), &self.mat + &other.mat, self.hermitian && other.hermitian)
    }

    pub fn sub(&self, other: &Operator) -> Operator {
        Self::from_parts(self.shape.clone(), &self.mat - &other.mat, self.hermitian && other.hermitian)
    }

    pub fn scale(&self, c: f64) -> Operator {
        let mat = Mat::from_fn(self.dim(), self.dim(), |i, j| self.mat[(i, j)] * c);
        Self::from_parts(self.shape.clone(), mat, self.hermitian)
    }

    pub fn scale_complex(&self, c: C64) -> Operator {
        let mat = Mat::from_fn(self.dim(), self.dim(), |i, j| self.mat[(i, j)] * c);
        Self::from_parts(self.shape.clone(), mat, self.hermitian && c.im == 0.0)
    }

    /// `self + c·I`.
    pub fn shift(&self, c: f64) -> Operator {
        let mut mat = self.mat.clone();
        for i in 0..self.dim() {
            mat[(i, i)] += C64::new(c, 0.0);
        }
        Self::from_parts(self.shape.clone(), mat, self.hermitian)
    }

    pub fn apply(&self, psi: &StateVector) -> StateVector {
        StateVector { shape: psi.shape.clone(), amps: matvec(&self.mat, psi.amps()) }
    }

    /// `⟨a|self|b⟩`.
    pub fn expectation(&self, a: &StateVector, b: &StateVector) -> C64 {
        a.inner(&self.apply(b))
    }

    /// Cached Hermitian eigendecomposition. Safe for concurrent read-through
    /// population: racing threads may both compute, one result is kept.
    pub fn spectral(&self) -> Result<Arc<Spectral>> {
        if let Some(s) = self.spectral.get() {
            return Ok(Arc::clone(s));
        }
        let s = Arc::new(eigh(self)?);
        Ok(Arc::clone(self.spectral.get_or_init(|| s)))
    }
}

/// Eigenvalues ascending with a unitary matrix of eigenvectors (columns).
#[derive(Clone, Debug)]
pub struct Spectral {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat<C64>,
}

impl Spectral {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(λ) V†`.
    pub fn reconstruct(&self) -> Mat<C64> {
        let d = self.dim();
        let scaled = Mat::from_fn(d, d, |i, j| self.eigenvectors[(i, j)] * self.eigenvalues[j]);
        &scaled * self.eigenvectors.adjoint()
    }

    /// `V diag(e^{-iλ dt}) V†`.
    pub fn propagator(&self, dt: f64) -> Mat<C64> {
        let d = self.dim();
        let phases: Vec<C64> = self.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l * dt)).collect();
        let scaled = Mat::from_fn(d, d, |i, j| self.eigenvectors[(i, j)] * phases[j]);
        &scaled * self.eigenvectors.adjoint()
    }

    /// Coordinates `V† ψ` in the eigenbasis.
    pub fn to_eigenbasis(&self, amps: &[C64]) -> Vec<C64> {
        matvec_adjoint(&self.eigenvectors, amps)
    }

    /// `V diag(e^{-iλ dt}) coeffs`.
    pub fn from_eigenbasis(&self, coeffs: &[C64], dt: f64) -> Vec<C64> {
        let phased: Vec<C64> = coeffs
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, &l)| c * C64::from_polar(1.0, -l * dt))
            .collect();
        matvec(&self.eigenvectors, &phased)
    }

    /// `e^{-iH dt} ψ` in O(D²) without forming the propagator.
    pub fn evolve(&self, amps: &[C64], dt: f64) -> Vec<C64> {
        if dt == 0.0 {
            return amps.to_vec();
        }
        self.from_eigenbasis(&self.to_eigenbasis(amps), dt)
    }
}

pub(crate) fn matvec(m: &Mat<C64>, v: &[C64]) -> Vec<C64> {
    let col = faer::ColRef::from_slice(v);
    let out = m * col;
    (0..out.nrows()).map(|i| out[i]).collect()
}

pub(crate) fn matvec_adjoint(m: &Mat<C64>, v: &[C64]) -> Vec<C64> {
    let col = faer::ColRef::from_slice(v);
    let out = m.adjoint() * col;
    (0..out.nrows()).map(|i| out[i]).collect()
}

/// Kronecker product with `a` as the leftmost factor.
pub fn tensor(a: &Operator, b: &Operator) -> Operator {
    let (da, db) = (a.dim(), b.dim());
    let mat = Mat::from_fn(da * db, da * db, |r, c| {
        a.mat[(r / db, c / db)] * b.mat[(r % db, c % db)]
    });
    Operator::from_parts(a.shape.concat(&b.shape), mat, a.hermitian && b.hermitian)
}

/// `|a⟩ ⊗ |b⟩`.
pub fn tensor_states(a: &StateVector, b: &StateVector) -> StateVector {
    let mut amps = Vec::with_capacity(a.dim() * b.dim());
    for x in a.amps() {
        amps.extend(b.amps().iter().map(|y| x * y));
    }
    StateVector { shape: a.shape.concat(&b.shape), amps }
}

/// `Tr_E ρ` on a shape whose first factor is the apparatus.
pub fn partial_trace_env(rho: &Operator) -> Result<Operator> {
    let n = rho.shape.apparatus_dim();
    let env = rho.shape.environment_dim();
    if rho.dim() != n * env {
        return Err(Error::DimensionMismatch { context: "partial trace", expected: n * env, found: rho.dim() });
    }
    let mat = Mat::from_fn(n, n, |i, k| (0..env).map(|j| rho.mat[(i * env + j, k * env + j)]).sum());
    let out = Operator::from_parts(rho.shape.apparatus_shape(), mat, rho.hermitian);
    Ok(out)
}

/// Reduced apparatus density `Tr_E |ψ⟩⟨ψ|` of a pure state, computed as `M M†`
/// with `M` the `n × N` reshaping of ψ.
pub fn reduced_density(psi: &StateVector) -> Operator {
    let n = psi.shape.apparatus_dim();
    let env = psi.shape.environment_dim();
    let a = psi.amps();
    let m = Mat::from_fn(n, env, |i, j| a[i * env + j]);
    let rho = &m * m.adjoint();
    Operator::from_parts(psi.shape.apparatus_shape(), rho, true)
}

/// Purity `Tr ρ²` of a density operator.
pub fn purity(rho: &Operator) -> f64 {
    let d = rho.dim();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += (rho.mat[(i, j)] * rho.mat[(j, i)]).re;
        }
    }
    s
}

/// Hermitian eigendecomposition with eigenvalues ascending.
pub fn eigh(a: &Operator) -> Result<Spectral> {
    if !a.hermitian {
        return Err(Error::NotHermitian { residual: a.hermiticity_residual() });
    }
    let evd = a.mat.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let eigenvalues: Vec<f64> = (0..s.nrows()).map(|i| s[i].re).collect();
    Ok(Spectral { eigenvalues, eigenvectors: evd.U().to_owned() })
}

/// Unitary `e^{-i h dt}` (ħ = 1), built from the cached spectral data of `h`.
pub fn propagator(h: &Operator, dt: f64) -> Result<Operator> {
    if dt == 0.0 {
        return Ok(Operator::from_parts(h.shape.clone(), Mat::identity(h.dim(), h.dim()), false));
    }
    let spec = h.spectral()?;
    Ok(Operator::from_parts(h.shape.clone(), spec.propagator(dt), false))
}

/// `‖U†U − I‖_F`.
pub fn unitarity_residual(u: &Operator) -> f64 {
    let d = u.dim();
    let prod = u.mat.adjoint() * &u.mat;
    let id: Mat<C64> = Mat::identity(d, d);
    (&prod - &id).norm_l2()
}

/// Apply an apparatus-factor operator `a ⊗ I_E` to a state without forming
/// the product matrix.
pub fn apply_apparatus(a: &Mat<C64>, psi: &StateVector) -> StateVector {
    let n = psi.shape.apparatus_dim();
    let env = psi.shape.environment_dim();
    debug_assert_eq!(a.nrows(), n);
    let x = psi.amps();
    let mut out = vec![ZERO; x.len()];
    for i in 0..n {
        for k in 0..n {
            let c = a[(i, k)];
            if c == ZERO {
                continue;
            }
            let (dst, src) = (&mut out[i * env..(i + 1) * env], &x[k * env..(k + 1) * env]);
            for (o, s) in dst.iter_mut().zip(src) {
                *o += c * s;
            }
        }
    }
    StateVector { shape: psi.shape.clone(), amps: out }
}
