//! Total-system models: an n-level apparatus coupled to a random-matrix
//! environment, projector families on the apparatus factor, product initial
//! states, and the spectral statistics that feed the echo rate formulas.

use std::sync::Arc;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{self, tensor, tensor_states, Operator, SpaceShape, StateVector, C64, ONE, ZERO};

/// Tolerance for projector idempotency, orthogonality and completeness.
pub const FAMILY_TOL: f64 = 1e-10;

/// Stream ids keep independent draws from one seed uncorrelated.
pub mod stream {
    pub const ENVIRONMENT: u64 = 1;
    pub const COUPLING: u64 = 2;
    pub const ENV_STATE: u64 = 3;
    pub const APPARATUS_STATE: u64 = 4;
    pub const UNITARY: u64 = 5;
    pub const WEIGHTS: u64 = 6;
}

/// Counter-based generator: ChaCha keyed by `seed`, one stream per purpose.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Goe,
    Gue,
    DiagonalBanded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub dim: usize,
    /// Target mean level spacing at the band center.
    pub spacing: f64,
    pub seed: u64,
    /// Half-bandwidth for [`EnsembleKind::DiagonalBanded`].
    #[serde(default = "default_band")]
    pub band: usize,
}

fn default_band() -> usize {
    4
}

impl EnsembleSpec {
    pub fn gue(dim: usize, spacing: f64, seed: u64) -> Self {
        Self { kind: EnsembleKind::Gue, dim, spacing, seed, band: default_band() }
    }

    pub fn goe(dim: usize, spacing: f64, seed: u64) -> Self {
        Self { kind: EnsembleKind::Goe, dim, spacing, seed, band: default_band() }
    }

    /// Draw the matrix. Same `(kind, dim, spacing, seed)` gives bit-identical output.
    pub fn generate(&self) -> Result<Operator> {
        if self.dim == 0 || !(self.spacing > 0.0) {
            return Err(Error::InvalidArgument("ensemble needs dim >= 1 and spacing > 0".into()));
        }
        let mut rng = rng_for(self.seed, stream::ENVIRONMENT);
        let shape = SpaceShape::single(self.dim)?;
        let n = self.dim;
        // Semicircle radius 2σ√N gives a central density √N/(πσ).
        let sigma = self.spacing * (n as f64).sqrt() / std::f64::consts::PI;
        let mut m = Mat::<C64>::zeros(n, n);
        match self.kind {
            EnsembleKind::Gue => {
                for i in 0..n {
                    m[(i, i)] = C64::new(sigma * gaussian(&mut rng), 0.0);
                    for j in (i + 1)..n {
                        let z = C64::new(gaussian(&mut rng), gaussian(&mut rng))
                            * (sigma * std::f64::consts::FRAC_1_SQRT_2);
                        m[(i, j)] = z;
                        m[(j, i)] = z.conj();
                    }
                }
            }
            EnsembleKind::Goe => {
                for i in 0..n {
                    m[(i, i)] = C64::new(sigma * std::f64::consts::SQRT_2 * gaussian(&mut rng), 0.0);
                    for j in (i + 1)..n {
                        let x = C64::new(sigma * gaussian(&mut rng), 0.0);
                        m[(i, j)] = x;
                        m[(j, i)] = x;
                    }
                }
            }
            EnsembleKind::DiagonalBanded => {
                let center = (n as f64 - 1.0) / 2.0;
                for i in 0..n {
                    m[(i, i)] = C64::new(self.spacing * (i as f64 - center), 0.0);
                    for j in (i + 1)..n.min(i + self.band + 1) {
                        let x = C64::new(0.5 * self.spacing * gaussian(&mut rng), 0.0);
                        m[(i, j)] = x;
                        m[(j, i)] = x;
                    }
                }
            }
        }
        Operator::hermitian(shape, m)
    }
}

/// GUE matrix scaled so every entry has unit second moment, `E|V_ij|² = 1`.
pub fn unit_gue(dim: usize, seed: u64, stream_id: u64) -> Result<Operator> {
    let mut rng = rng_for(seed, stream_id);
    let mut m = Mat::<C64>::zeros(dim, dim);
    for i in 0..dim {
        m[(i, i)] = C64::new(gaussian(&mut rng), 0.0);
        for j in (i + 1)..dim {
            let z = C64::new(gaussian(&mut rng), gaussian(&mut rng)) * std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
        }
    }
    Operator::hermitian(SpaceShape::single(dim)?, m)
}

/// Haar-distributed unitary (columns), drawn as GUE eigenvectors.
pub fn random_unitary(dim: usize, seed: u64) -> Result<Mat<C64>> {
    let g = unit_gue(dim, seed, stream::UNITARY)?;
    Ok(qcore::eigh(&g)?.eigenvectors)
}

/// Normalized complex-Gaussian (Haar) state.
pub fn haar_state(shape: SpaceShape, seed: u64) -> StateVector {
    let mut rng = rng_for(seed, stream::ENV_STATE);
    let d = shape.total_dim();
    let amps = (0..d).map(|_| C64::new(gaussian(&mut rng), gaussian(&mut rng))).collect();
    StateVector::new(shape, amps)
        .and_then(|s| s.normalized())
        .expect("gaussian draw is finite and nonzero")
}

/// Random-phase superposition of the eigenvectors of `h` in the central
/// `fraction` of its spectrum (a thermal-like vector at band center).
pub fn central_band_state(h: &Operator, fraction: f64, seed: u64) -> Result<StateVector> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("band fraction {fraction} not in (0, 1]")));
    }
    let spec = h.spectral()?;
    let d = spec.dim();
    let keep = ((d as f64 * fraction).round() as usize).clamp(1, d);
    let lo = (d - keep) / 2;
    let mut rng = rng_for(seed, stream::ENV_STATE);
    let mut coeffs = vec![ZERO; d];
    for c in coeffs.iter_mut().skip(lo).take(keep) {
        *c = C64::new(gaussian(&mut rng), gaussian(&mut rng));
    }
    let amps = qcore::matvec(&spec.eigenvectors, &coeffs);
    StateVector::new(h.shape().clone(), amps)?.normalized()
}

/// Complete orthogonal family `{P_μ}` on the apparatus factor.
#[derive(Clone, Debug)]
pub struct ProjectorFamily {
    labels: Vec<i64>,
    projectors: Vec<Operator>,
    ranks: Vec<usize>,
}

impl ProjectorFamily {
    pub fn new(labels: Vec<i64>, projectors: Vec<Operator>) -> Result<Self> {
        if labels.len() != projectors.len() || labels.is_empty() {
            return Err(Error::InvalidFamily("labels and projectors must be nonempty and equal in number".into()));
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::InvalidFamily("duplicate labels".into()));
        }
        let n = projectors[0].dim();
        let mut sum = Operator::zeros(projectors[0].shape().clone());
        let mut ranks = Vec::with_capacity(projectors.len());
        for (a, p) in projectors.iter().enumerate() {
            if p.dim() != n {
                return Err(Error::InvalidFamily("projectors have different dimensions".into()));
            }
            if p.hermiticity_residual() > FAMILY_TOL {
                return Err(Error::InvalidFamily(format!("projector {} is not Hermitian", labels[a])));
            }
            for (b, q) in projectors.iter().enumerate() {
                let prod = p.matmul(q);
                let expect = if a == b { p.clone() } else { Operator::zeros(p.shape().clone()) };
                let r = prod.max_abs_diff(&expect);
                if r > FAMILY_TOL {
                    return Err(Error::InvalidFamily(format!(
                        "P_{} P_{} deviates by {r:.3e}",
                        labels[a], labels[b]
                    )));
                }
            }
            let rank = p.trace().re.round();
            if rank < 1.0 {
                return Err(Error::InvalidFamily(format!("projector {} has rank 0", labels[a])));
            }
            ranks.push(rank as usize);
            sum = sum.add(p);
        }
        let resid = sum.max_abs_diff(&Operator::identity(sum.shape().clone()));
        if resid > FAMILY_TOL {
            return Err(Error::InvalidFamily(format!("projectors do not sum to identity ({resid:.3e})")));
        }
        let projectors = projectors
            .into_iter()
            .map(|p| Operator::hermitian(p.shape().clone(), p.mat().clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { labels, projectors, ranks })
    }

    /// Family of orthogonal subspaces, each given by column vectors that are
    /// orthonormalized here. Labels default to `1..=k`.
    pub fn from_subspaces(n: usize, subspaces: &[Vec<Vec<C64>>]) -> Result<Self> {
        let shape = SpaceShape::single(n)?;
        let mut projectors = Vec::new();
        for basis in subspaces {
            let ortho = gram_schmidt(basis, n)?;
            let mut m = Mat::<C64>::zeros(n, n);
            for v in &ortho {
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] += v[i] * v[j].conj();
                    }
                }
            }
            projectors.push(Operator::new(shape.clone(), m)?);
        }
        let labels = (1..=projectors.len() as i64).collect();
        Self::new(labels, projectors)
    }

    /// Rank-1 family from the columns of a unitary.
    pub fn from_unitary_columns(u: &Mat<C64>) -> Result<Self> {
        let n = u.nrows();
        let subspaces: Vec<Vec<Vec<C64>>> =
            (0..u.ncols()).map(|j| vec![(0..n).map(|i| u[(i, j)]).collect()]).collect();
        Self::from_subspaces(n, &subspaces)
    }

    /// Rank-1 family of the canonical basis, labels `1..=n`.
    pub fn computational(n: usize) -> Result<Self> {
        let u = Mat::<C64>::identity(n, n);
        Self::from_unitary_columns(&u)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.labels.len() {
            return Err(Error::InvalidFamily("label count mismatch".into()));
        }
        self.labels = labels;
        Self::new(self.labels, self.projectors)
    }

    pub fn len(&self) -> usize {
        self.projectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projectors.is_empty()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> i64 {
        self.labels[k]
    }

    pub fn index_of(&self, label: i64) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn projector(&self, k: usize) -> &Operator {
        &self.projectors[k]
    }

    pub fn projectors(&self) -> &[Operator] {
        &self.projectors
    }

    pub fn rank(&self, k: usize) -> usize {
        self.ranks[k]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn apparatus_dim(&self) -> usize {
        self.projectors[0].dim()
    }

    pub fn is_rank_one(&self) -> bool {
        self.ranks.iter().all(|&r| r == 1)
    }

    /// `P_k ⊗ I_E` applied to a total-space state.
    pub fn apply(&self, k: usize, psi: &StateVector) -> StateVector {
        qcore::apply_apparatus(self.projectors[k].mat(), psi)
    }

    /// `(I − P_k) ⊗ I_E` applied to a total-space state.
    pub fn apply_complement(&self, k: usize, psi: &StateVector) -> StateVector {
        psi.sub(&self.apply(k, psi))
    }

    /// Lazily formed `P_k ⊗ I_E` on the given total shape.
    pub fn embedded(&self, k: usize, shape: &SpaceShape) -> Operator {
        let id = Operator::identity(shape.environment_shape());
        tensor(&self.projectors[k], &id)
            .reshaped(shape.clone())
            .expect("environment shape matches")
    }

    /// `A = Σ_μ μ P_μ`.
    pub fn observable(&self) -> Operator {
        let mut a = Operator::zeros(self.projectors[0].shape().clone());
        for (l, p) in self.labels.iter().zip(&self.projectors) {
            a = a.add(&p.scale(*l as f64));
        }
        a
    }

    /// Orthonormal basis of `range(P_k)` as column vectors.
    pub fn basis_vectors(&self, k: usize) -> Vec<Vec<C64>> {
        let spec = self.projectors[k].spectral().expect("projectors are Hermitian");
        let n = spec.dim();
        (0..n)
            .filter(|&j| spec.eigenvalues[j] > 0.5)
            .map(|j| (0..n).map(|i| spec.eigenvectors[(i, j)]).collect())
            .collect()
    }

    /// Index `k` whose subspace contains `psi` to within `tol · ‖psi‖`.
    pub fn containing_index(&self, psi: &StateVector, tol: f64) -> Option<usize> {
        let norm = psi.norm();
        (0..self.len()).find(|&k| self.apply_complement(k, psi).norm() <= tol * norm.max(f64::MIN_POSITIVE))
    }

    /// `‖P_k ψ‖²` for every `k`.
    pub fn weights(&self, psi: &StateVector) -> Vec<f64> {
        (0..self.len()).map(|k| self.apply(k, psi).norm_sqr()).collect()
    }

    /// True when `P_k` lies inside some projector of `coarse`, for every k.
    pub fn refines(&self, coarse: &ProjectorFamily, tol: f64) -> bool {
        self.projectors.iter().all(|p| {
            coarse.projectors.iter().any(|q| q.matmul(p).max_abs_diff(p) <= tol)
        })
    }
}

fn gram_schmidt(vectors: &[Vec<C64>], n: usize) -> Result<Vec<Vec<C64>>> {
    let mut out: Vec<Vec<C64>> = Vec::new();
    for v in vectors {
        if v.len() != n {
            return Err(Error::DimensionMismatch { context: "subspace vector", expected: n, found: v.len() });
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for u in &out {
                let c: C64 = u.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                for (x, y) in w.iter_mut().zip(u) {
                    *x -= c * y;
                }
            }
        }
        let norm = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InvalidFamily("subspace vectors are linearly dependent".into()));
        }
        out.push(w.into_iter().map(|x| x / norm).collect());
    }
    Ok(out)
}

/// `H = H_R ⊗ I + I ⊗ H_E + H_I` on `[n, N]`.
#[derive(Clone, Debug)]
pub struct TotalModel {
    shape: SpaceShape,
    h_r: Operator,
    h_e: Operator,
    h_i: Operator,
    h_total: Arc<Operator>,
    coupling_strength: f64,
}

impl TotalModel {
    pub fn new(h_r: Operator, h_e: Operator, h_i: Operator) -> Result<Self> {
        Self::with_strength(h_r, h_e, h_i, f64::NAN)
    }

    fn with_strength(h_r: Operator, h_e: Operator, h_i: Operator, coupling_strength: f64) -> Result<Self> {
        for (name, op) in [("H_R", &h_r), ("H_E", &h_e), ("H_I", &h_i)] {
            if !op.is_hermitian() {
                return Err(Error::InvalidArgument(format!("{name} must be Hermitian")));
            }
        }
        let shape = SpaceShape::bipartite(h_r.dim(), h_e.dim())?;
        if h_i.dim() != shape.total_dim() {
            return Err(Error::DimensionMismatch {
                context: "interaction",
                expected: shape.total_dim(),
                found: h_i.dim(),
            });
        }
        let h_i = h_i.reshaped(shape.clone())?;
        let free = free_hamiltonian(&h_r, &h_e)?;
        let h_total = free.add(&h_i);
        let h_total = Arc::new(Operator::hermitian(shape.clone(), h_total.mat().clone())?);
        Ok(Self { shape, h_r, h_e, h_i, h_total, coupling_strength })
    }

    pub fn shape(&self) -> &SpaceShape {
        &self.shape
    }

    pub fn apparatus_dim(&self) -> usize {
        self.shape.apparatus_dim()
    }

    pub fn environment_dim(&self) -> usize {
        self.shape.environment_dim()
    }

    pub fn h_r(&self) -> &Operator {
        &self.h_r
    }

    pub fn h_e(&self) -> &Operator {
        &self.h_e
    }

    pub fn h_i(&self) -> &Operator {
        &self.h_i
    }

    pub fn h_total(&self) -> &Operator {
        &self.h_total
    }

    /// Shared handle; protocols built from it reuse its cached spectrum.
    pub fn h_total_shared(&self) -> Arc<Operator> {
        Arc::clone(&self.h_total)
    }

    /// Declared coupling scale λ in `H_I = λ Σ_μ |μ⟩⟨μ| ⊗ B_μ`; NaN for a
    /// general interaction.
    pub fn coupling_strength(&self) -> f64 {
        self.coupling_strength
    }

    /// `H_R ⊗ I + I ⊗ H_E`.
    pub fn free(&self) -> Operator {
        free_hamiltonian(&self.h_r, &self.h_e).expect("dimensions validated at construction")
    }

    /// Same model with `H_I` replaced by a full-matrix override.
    pub fn with_interaction(&self, h_i: Operator) -> Result<Self> {
        Self::new(self.h_r.clone(), self.h_e.clone(), h_i)
    }

    /// Environment operator `(⟨a| ⊗ I) O (|b⟩ ⊗ I)` for apparatus vectors a, b.
    pub fn env_block(&self, op: &Operator, bra: &[C64], ket: &[C64]) -> Result<Operator> {
        env_block(op, &self.shape, bra, ket)
    }

    /// `H^E_μ = ⟨μ|H|μ⟩ = E_μ + H_E + H^E_{Iμ}` for a rank-1 apparatus vector.
    pub fn env_hamiltonian(&self, mu: &[C64]) -> Result<Operator> {
        let b = self.env_block(&self.h_total, mu, mu)?;
        Operator::hermitian(b.shape().clone(), b.mat().clone())
    }

    /// `H^E_{Iμ} = ⟨μ|H_I|μ⟩`.
    pub fn env_interaction(&self, mu: &[C64]) -> Result<Operator> {
        let b = self.env_block(&self.h_i, mu, mu)?;
        Operator::hermitian(b.shape().clone(), b.mat().clone())
    }
}

fn free_hamiltonian(h_r: &Operator, h_e: &Operator) -> Result<Operator> {
    let ir = Operator::identity(h_r.shape().clone());
    let ie = Operator::identity(h_e.shape().clone());
    let shape = SpaceShape::bipartite(h_r.dim(), h_e.dim())?;
    tensor(h_r, &ie).add(&tensor(&ir, h_e)).reshaped(shape)
}

pub(crate) fn env_block(op: &Operator, shape: &SpaceShape, bra: &[C64], ket: &[C64]) -> Result<Operator> {
    let n = shape.apparatus_dim();
    let env = shape.environment_dim();
    if bra.len() != n || ket.len() != n {
        return Err(Error::DimensionMismatch { context: "apparatus vector", expected: n, found: bra.len() });
    }
    let m = op.mat();
    let mut out = Mat::<C64>::zeros(env, env);
    for i in 0..n {
        let a = bra[i].conj();
        if a == ZERO {
            continue;
        }
        for k in 0..n {
            let c = a * ket[k];
            if c == ZERO {
                continue;
            }
            for jc in 0..env {
                for jr in 0..env {
                    out[(jr, jc)] += c * m[(i * env + jr, k * env + jc)];
                }
            }
        }
    }
    Operator::new(SpaceShape::single(env)?, out)
}

/// Construct `H_I = λ Σ_μ |μ⟩⟨μ| ⊗ B_μ` on the level basis of
/// `H_R = diag(level_energies)`.
pub fn build_nlevel_model(
    level_energies: &[f64],
    h_e: Operator,
    couplings: &[Operator],
    coupling_strength: f64,
) -> Result<TotalModel> {
    let n = level_energies.len();
    if n < 2 {
        return Err(Error::InvalidArgument("n-level model needs n >= 2".into()));
    }
    if couplings.len() != n {
        return Err(Error::DimensionMismatch { context: "per-level couplings", expected: n, found: couplings.len() });
    }
    let env = h_e.dim();
    for b in couplings {
        if b.dim() != env {
            return Err(Error::DimensionMismatch { context: "coupling operator", expected: env, found: b.dim() });
        }
        if !b.is_hermitian() {
            return Err(Error::NotHermitian { residual: b.hermiticity_residual() });
        }
    }
    let h_r = Operator::diagonal(SpaceShape::single(n)?, level_energies)?;
    let shape = SpaceShape::bipartite(n, env)?;
    let mut m = Mat::<C64>::zeros(n * env, n * env);
    for (mu, b) in couplings.iter().enumerate() {
        for jc in 0..env {
            for jr in 0..env {
                m[(mu * env + jr, mu * env + jc)] = b.get(jr, jc) * coupling_strength;
            }
        }
    }
    let h_i = Operator::hermitian(shape, m)?;
    TotalModel::with_strength(h_r, h_e, h_i, coupling_strength)
}

/// Independent unit-second-moment GUE couplings `B_μ`, one per level.
pub fn random_dephasing_couplings(n: usize, env: usize, seed: u64) -> Result<Vec<Operator>> {
    (0..n).map(|mu| unit_gue(env, seed, 100 + mu as u64)).collect()
}

/// Spectral statistics of a perturbation `εV = H^E_{Iν} − H^E_{Iμ}` in the
/// eigenbasis of `H^E_μ`, restricted to the central half of the spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub delta: f64,
    pub sigma_v: f64,
    pub v_nd_sq: f64,
    pub epsilon: f64,
}

impl PerturbationStats {
    /// Perturbative border `ε_p` solving `2π ε_p v̄²_nd = σ_v Δ`.
    pub fn perturbative_border(&self) -> f64 {
        if self.v_nd_sq == 0.0 {
            return f64::INFINITY;
        }
        self.sigma_v * self.delta / (2.0 * std::f64::consts::PI * self.v_nd_sq)
    }

    /// `Γ = 2π ε² v̄²_nd / Δ`, decay rate of `|f|²` above the border.
    pub fn fgr_rate(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.epsilon * self.epsilon * self.v_nd_sq / self.delta
    }

    /// `ε² σ_v²` with `|f| ≃ exp(−ε² σ_v² t² / 2)` below the border.
    pub fn gaussian_rate(&self) -> f64 {
        self.epsilon * self.epsilon * self.sigma_v * self.sigma_v
    }
}

/// Indices of the central half of a spectrum of size `n`.
pub fn central_window(n: usize) -> std::ops::Range<usize> {
    let lo = n / 4;
    lo..(n - lo)
}

/// Mean nearest-neighbour spacing over the central half of sorted eigenvalues.
pub fn mean_central_spacing(eigenvalues: &[f64]) -> f64 {
    let w = central_window(eigenvalues.len());
    let (a, b) = (w.start, w.end - 1);
    (eigenvalues[b] - eigenvalues[a]) / (b - a) as f64
}

/// Perturbation statistics between two rank-1 levels `mu`, `nu` given as
/// apparatus vectors.
pub fn perturbation_stats(model: &TotalModel, mu: &[C64], nu: &[C64]) -> Result<PerturbationStats> {
    let n_env = model.environment_dim();
    if n_env < 8 {
        return Err(Error::InvalidArgument(format!("environment dimension {n_env} < 8")));
    }
    let h_mu = model.env_hamiltonian(mu)?;
    let diff = model.env_interaction(nu)?.sub(&model.env_interaction(mu)?);
    stats_from_parts(&h_mu, &diff)
}

/// Statistics from `H^E_μ` and the raw difference `εV`.
pub fn stats_from_parts(h_mu: &Operator, eps_v: &Operator) -> Result<PerturbationStats> {
    let n = h_mu.dim();
    if n < 8 {
        return Err(Error::InvalidArgument(format!("environment dimension {n} < 8")));
    }
    let m2 = eps_v.frobenius_norm().powi(2) / (n * n) as f64;
    let epsilon = m2.sqrt();
    let spec = h_mu.spectral()?;
    let delta = mean_central_spacing(&spec.eigenvalues);
    if epsilon == 0.0 {
        return Ok(PerturbationStats { delta, sigma_v: 0.0, v_nd_sq: 0.0, epsilon });
    }
    let u = &spec.eigenvectors;
    let v_eig = u.adjoint() * (eps_v.mat() * u);
    let w = central_window(n);
    let diag: Vec<f64> = w.clone().map(|k| v_eig[(k, k)].re / epsilon).collect();
    let mean = diag.iter().sum::<f64>() / diag.len() as f64;
    let var = diag.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / diag.len() as f64;
    let mut off = 0.0;
    let mut count = 0usize;
    for a in w.clone() {
        for b in w.clone() {
            if a != b {
                off += v_eig[(a, b)].norm_sqr();
                count += 1;
            }
        }
    }
    let v_nd_sq = off / count as f64 / m2;
    Ok(PerturbationStats { delta, sigma_v: var.sqrt(), v_nd_sq, epsilon })
}

/// `|ψ_R⟩ ⊗ |φ_E⟩` for normalized factors.
pub fn product_state(psi_r: &StateVector, phi_e: &StateVector) -> Result<StateVector> {
    psi_r.require_normalized()?;
    phi_e.require_normalized()?;
    if psi_r.shape().dims().len() != 1 || phi_e.shape().dims().len() != 1 {
        return Err(Error::InvalidArgument("product_state expects single-factor inputs".into()));
    }
    Ok(tensor_states(psi_r, phi_e))
}

/// Apparatus state from (possibly unnormalized) coefficients, normalized.
pub fn apparatus_state(coeffs: &[C64]) -> Result<StateVector> {
    StateVector::new(SpaceShape::single(coeffs.len())?, coeffs.to_vec())?.normalized()
}

/// Haar-random apparatus state.
pub fn random_apparatus_state(n: usize, seed: u64) -> StateVector {
    let mut rng = rng_for(seed, stream::APPARATUS_STATE);
    let amps = (0..n).map(|_| C64::new(gaussian(&mut rng), gaussian(&mut rng))).collect();
    StateVector::new(SpaceShape::single(n).expect("n >= 1"), amps)
        .and_then(|s| s.normalized())
        .expect("gaussian draw is finite and nonzero")
}

/// One projector per distinct eigenvalue of `h_r`; eigenvalues closer than
/// `degeneracy_tol` (default `1e-8 · max|λ|`) are merged. Labels `1..=k`.
pub fn eigenprojector_family(h_r: &Operator, degeneracy_tol: Option<f64>) -> Result<ProjectorFamily> {
    let spec = h_r.spectral()?;
    let n = spec.dim();
    let scale = spec.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = degeneracy_tol.unwrap_or(1e-8 * scale);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in 0..n {
        match groups.last_mut() {
            Some(g) if spec.eigenvalues[k] - spec.eigenvalues[*g.last().unwrap()] < tol => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    let subspaces: Vec<Vec<Vec<C64>>> = groups
        .iter()
        .map(|g| g.iter().map(|&j| (0..n).map(|i| spec.eigenvectors[(i, j)]).collect()).collect())
        .collect();
    ProjectorFamily::from_subspaces(n, &subspaces)
}

/// Uniform random draw in `[0, 1)`, used for weights in randomized algorithms.
pub(crate) fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

/// Basis vector `e_k` of `C^n`.
pub fn unit_vec(n: usize, k: usize) -> Vec<C64> {
    let mut v = vec![ZERO; n];
    v[k] = ONE;
    v
}
