//! Schrödinger propagation under piecewise-constant Hamiltonians, the
//! non-transition condition (NTC), block Hamiltonians and the isolatable-system
//! check.

use std::sync::{Arc, Once};

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{env_block, ProjectorFamily, TotalModel};
use crate::qcore::{self, Operator, SpaceShape, StateVector, C64, ZERO};

/// Default ε_x.
pub const DEFAULT_EPS_X: f64 = 1e-6;

/// Uniform sampling `t0, t0 + dt, …, t0 + steps·dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() || steps == 0 {
            return Err(Error::InvalidArgument(format!("time grid needs dt > 0 and steps >= 1 (dt={dt}, steps={steps})")));
        }
        Ok(Self { t0, dt, steps })
    }

    /// `steps` equal intervals covering `[t0, t1]`.
    pub fn spanning(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t1 > t0) || steps == 0 {
            return Err(Error::InvalidArgument(format!("empty window [{t0}, {t1}]")));
        }
        Self::new(t0, (t1 - t0) / steps as f64, steps)
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Sub-grid restricted to `[a, b]`, snapping inward to grid points.
    pub fn restrict(&self, a: f64, b: f64) -> Result<Self> {
        let eps = 1e-9 * self.dt;
        let first = ((a - self.t0 - eps) / self.dt).ceil().max(0.0) as usize;
        let last = (((b - self.t0 + eps) / self.dt).floor() as isize).min(self.steps as isize);
        if last <= first as isize {
            return Err(Error::InvalidArgument(format!("window [{a}, {b}] holds fewer than two grid points")));
        }
        Self::new(self.time(first), self.dt, last as usize - first)
    }
}

/// Piecewise-constant Hamiltonian: segment `i` acts on `[starts[i], starts[i+1])`,
/// the first segment extends to −∞ and the last to +∞.
#[derive(Clone, Debug)]
pub struct Protocol {
    starts: Vec<f64>,
    hams: Vec<Arc<Operator>>,
}

impl Protocol {
    pub fn constant(h: Operator) -> Self {
        Self::constant_shared(Arc::new(h))
    }

    pub fn constant_shared(h: Arc<Operator>) -> Self {
        Self { starts: vec![f64::NEG_INFINITY], hams: vec![h] }
    }

    /// Switch to `h` at time `at`.
    pub fn then(self, at: f64, h: Operator) -> Result<Self> {
        self.then_shared(at, Arc::new(h))
    }

    pub fn then_shared(mut self, at: f64, h: Arc<Operator>) -> Result<Self> {
        if h.dim() != self.hams[0].dim() {
            return Err(Error::DimensionMismatch { context: "protocol segment", expected: self.hams[0].dim(), found: h.dim() });
        }
        if !h.is_hermitian() {
            return Err(Error::NotHermitian { residual: h.hermiticity_residual() });
        }
        if !(at > *self.starts.last().unwrap()) {
            return Err(Error::InvalidArgument("protocol switch times must increase".into()));
        }
        self.starts.push(at);
        self.hams.push(h);
        Ok(self)
    }

    pub fn shape(&self) -> &SpaceShape {
        self.hams[0].shape()
    }

    pub fn dim(&self) -> usize {
        self.hams[0].dim()
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, &Operator)> {
        self.starts.iter().copied().zip(self.hams.iter().map(|h| h.as_ref()))
    }

    /// Switch times, excluding the open start.
    pub fn switch_times(&self) -> &[f64] {
        &self.starts[1..]
    }

    fn segment_index(&self, t: f64) -> usize {
        self.starts.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn hamiltonian_at(&self, t: f64) -> &Operator {
        &self.hams[self.segment_index(t)]
    }

    /// Largest spectral norm over segments.
    pub fn norm_bound(&self) -> Result<f64> {
        let mut m = 0.0f64;
        for h in &self.hams {
            let s = h.spectral()?;
            let e = &s.eigenvalues;
            m = m.max(e[0].abs()).max(e[e.len() - 1].abs());
        }
        Ok(m)
    }

    /// Break `[from, to]` into pieces lying inside single segments.
    fn pieces(&self, from: f64, to: f64) -> Vec<(f64, f64, usize)> {
        let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
        let mut cuts = vec![lo];
        cuts.extend(self.starts[1..].iter().copied().filter(|&s| s > lo && s < hi));
        cuts.push(hi);
        let mut out: Vec<(f64, f64, usize)> = cuts
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (w[0], w[1], self.segment_index(0.5 * (w[0] + w[1]))))
            .collect();
        if from > to {
            out.reverse();
            for p in &mut out {
                *p = (p.1, p.0, p.2);
            }
        }
        out
    }

    /// `U(to, from)|ψ⟩`; `to < from` runs the evolution backwards.
    pub fn propagate(&self, psi: &StateVector, from: f64, to: f64) -> Result<StateVector> {
        let mut amps = psi.amps().to_vec();
        for (a, b, seg) in self.pieces(from, to) {
            amps = self.hams[seg].spectral()?.evolve(&amps, b - a);
        }
        StateVector::new(psi.shape().clone(), amps)
    }

    /// `U(to, from)` as a dense operator.
    pub fn propagator(&self, from: f64, to: f64) -> Result<Operator> {
        let d = self.dim();
        let mut u = Mat::<C64>::identity(d, d);
        for (a, b, seg) in self.pieces(from, to) {
            let step = self.hams[seg].spectral()?.propagator(b - a);
            u = &step * &u;
        }
        Operator::new(self.shape().clone(), u)
    }

    /// States at every grid time, given `psi` at `grid.t0`.
    pub fn trajectory(&self, psi: &StateVector, grid: &TimeGrid) -> Result<Trajectory> {
        let times = grid.times();
        let mut states = Vec::with_capacity(times.len());
        states.push(psi.clone());
        // Anchor in the eigenbasis of the active segment: one matvec per time.
        let mut anchor_t = grid.t0;
        let mut anchor_seg = self.segment_index(anchor_t);
        let mut coeffs = self.hams[anchor_seg].spectral()?.to_eigenbasis(psi.amps());
        let mut prev_t = grid.t0;
        for &t in &times[1..] {
            let seg = self.segment_index(t);
            let crosses = seg != anchor_seg || self.starts[1..].iter().any(|&s| s > anchor_t && s < t);
            if crosses {
                let state = self.propagate(states.last().unwrap(), prev_t, t)?;
                anchor_t = t;
                anchor_seg = seg;
                coeffs = self.hams[seg].spectral()?.to_eigenbasis(state.amps());
                states.push(state);
            } else {
                let amps = self.hams[seg].spectral()?.from_eigenbasis(&coeffs, t - anchor_t);
                states.push(StateVector::new(psi.shape().clone(), amps)?);
            }
            prev_t = t;
        }
        Ok(Trajectory { times, states })
    }
}

impl From<&TotalModel> for Protocol {
    fn from(m: &TotalModel) -> Self {
        Protocol::constant_shared(m.h_total_shared())
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
}

/// `|Ψ(t_k)⟩ = U(t_k, t_0)|ψ_0⟩` on the grid under the model's constant Hamiltonian.
pub fn evolve(model: &TotalModel, psi0: &StateVector, grid: &TimeGrid) -> Result<Trajectory> {
    psi0.require_normalized()?;
    Protocol::from(model).trajectory(psi0, grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct NtcReport {
    pub labels: Vec<i64>,
    pub window: (f64, f64),
    pub times: Vec<f64>,
    /// `leakage[k][i]`: family member k at time i.
    pub leakage: Vec<Vec<f64>>,
    pub max_leakage: f64,
    pub worst_label: i64,
    pub worst_time: f64,
    pub eps_x: f64,
    pub verdict: bool,
    pub warnings: Vec<String>,
}

impl NtcReport {
    pub fn into_result(self) -> Result<Self> {
        if self.verdict {
            Ok(self)
        } else {
            Err(Error::NtcViolated {
                max_leakage: self.max_leakage,
                eps_x: self.eps_x,
                label: self.worst_label,
                time: self.worst_time,
            })
        }
    }
}

/// Leakage `‖P_μ̄ U(t, t_a) P_μ ψ_a‖ / ‖ψ_a‖` for every member and grid time,
/// with `psi` the state at `grid.t0`.
pub fn ntc_evaluate(
    protocol: &Protocol,
    psi: &StateVector,
    family: &ProjectorFamily,
    grid: &TimeGrid,
    eps_x: f64,
) -> Result<NtcReport> {
    if !(eps_x > 0.0) {
        return Err(Error::InvalidArgument("eps_x must be positive".into()));
    }
    let norm = psi.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("NTC needs a nonzero state".into()));
    }
    let mut warnings = Vec::new();
    let hn = protocol.norm_bound()?;
    if hn > 0.0 && grid.dt > 0.1 / hn {
        let w = format!("grid dt {:.3e} exceeds 0.1/‖H‖ = {:.3e}; NTC sampled coarsely", grid.dt, 0.1 / hn);
        // Every window of a tree hits this; the log gets it once, reports always.
        static COARSE: Once = Once::new();
        COARSE.call_once(|| log::warn!("{w}"));
        warnings.push(w);
    }
    let leakage: Vec<Vec<f64>> = (0..family.len())
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let start = family.apply(k, psi);
            if start.norm() == 0.0 {
                return Ok(vec![0.0; grid.len()]);
            }
            let traj = protocol.trajectory(&start, grid)?;
            Ok(traj.states.iter().map(|s| family.apply_complement(k, s).norm() / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut max_leakage = 0.0;
    let mut worst = (family.label(0), grid.t0);
    for (k, curve) in leakage.iter().enumerate() {
        for (i, &l) in curve.iter().enumerate() {
            if l > max_leakage {
                max_leakage = l;
                worst = (family.label(k), grid.time(i));
            }
        }
    }
    Ok(NtcReport {
        labels: family.labels().to_vec(),
        window: (grid.t0, grid.end()),
        times: grid.times(),
        leakage,
        max_leakage,
        worst_label: worst.0,
        worst_time: worst.1,
        eps_x,
        verdict: max_leakage <= eps_x,
        warnings,
    })
}

/// Derivative-form diagnostics per member: `(‖P_μ̄ H_R P_μ Ψ‖, ‖P_μ̄ H_I P_μ Ψ‖)`.
pub fn ntc_decompose(model: &TotalModel, psi: &StateVector, family: &ProjectorFamily) -> Vec<(f64, f64)> {
    (0..family.len())
        .map(|k| {
            let pm = family.apply(k, psi);
            let sys = qcore::apply_apparatus(model.h_r().mat(), &pm);
            let int = model.h_i().apply(&pm);
            (family.apply_complement(k, &sys).norm(), family.apply_complement(k, &int).norm())
        })
        .collect()
}

/// `H_μ = P_μ H P_μ` restricted to `range(P_μ) ⊗ H_E`, expressed in an
/// orthonormal apparatus basis `q_1..q_r` of the subspace.
#[derive(Clone, Debug)]
pub struct BlockHamiltonian {
    pub label: i64,
    pub index: usize,
    pub basis: Vec<Vec<C64>>,
    pub h: Operator,
    total_shape: SpaceShape,
}

impl BlockHamiltonian {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn total_shape(&self) -> &SpaceShape {
        &self.total_shape
    }

    /// Coordinates of `psi` in `range(P_μ) ⊗ H_E`.
    pub fn restrict(&self, psi: &StateVector) -> Vec<C64> {
        let env = self.total_shape.environment_dim();
        let n = self.total_shape.apparatus_dim();
        let x = psi.amps();
        let mut out = vec![ZERO; self.rank() * env];
        for (a, q) in self.basis.iter().enumerate() {
            for i in 0..n {
                let c = q[i].conj();
                if c == ZERO {
                    continue;
                }
                for j in 0..env {
                    out[a * env + j] += c * x[i * env + j];
                }
            }
        }
        out
    }

    pub fn embed(&self, coords: &[C64]) -> StateVector {
        let env = self.total_shape.environment_dim();
        let n = self.total_shape.apparatus_dim();
        let mut out = vec![ZERO; n * env];
        for (a, q) in self.basis.iter().enumerate() {
            for i in 0..n {
                if q[i] == ZERO {
                    continue;
                }
                for j in 0..env {
                    out[i * env + j] += q[i] * coords[a * env + j];
                }
            }
        }
        StateVector::new(self.total_shape.clone(), out).expect("shape is consistent")
    }

    /// Block operator `P_μ H P_μ` on the total space.
    pub fn embedded(&self) -> Operator {
        let d = self.total_shape.total_dim();
        let env = self.total_shape.environment_dim();
        let r = self.rank();
        let mut cols = Mat::<C64>::zeros(d, r * env);
        for c in 0..r * env {
            let mut e = vec![ZERO; r * env];
            e[c] = C64::new(1.0, 0.0);
            let v = self.embed(&e);
            for i in 0..d {
                cols[(i, c)] = v.amps()[i];
            }
        }
        let m = &cols * (self.h.mat() * cols.adjoint());
        Operator::hermitian(self.total_shape.clone(), m).expect("block is Hermitian")
    }

    /// `e^{−iH_μ(t − t_a)} ψ_μ` on the grid; `psi_mu` is given at `grid.t0`.
    pub fn evolve(&self, psi_mu: &StateVector, grid: &TimeGrid) -> Result<Trajectory> {
        let norm = psi_mu.norm();
        let coords = self.restrict(psi_mu);
        let back = self.embed(&coords);
        let outside = psi_mu.distance(&back);
        if outside > 1e-10 * norm.max(1.0) {
            return Err(Error::OutsideSubspace { weight: outside });
        }
        let spec = self.h.spectral()?;
        let c = spec.to_eigenbasis(&coords);
        let times = grid.times();
        let states = times.iter().map(|&t| self.embed(&spec.from_eigenbasis(&c, t - grid.t0))).collect();
        Ok(Trajectory { times, states })
    }
}

/// Block Hamiltonian of member `k` for any total-space Hamiltonian `h`.
pub fn block_hamiltonian(h: &Operator, family: &ProjectorFamily, k: usize) -> Result<BlockHamiltonian> {
    let shape = h.shape().clone();
    if shape.apparatus_dim() != family.apparatus_dim() {
        return Err(Error::DimensionMismatch {
            context: "block hamiltonian",
            expected: shape.apparatus_dim(),
            found: family.apparatus_dim(),
        });
    }
    let basis = family.basis_vectors(k);
    let r = basis.len();
    let env = shape.environment_dim();
    let mut m = Mat::<C64>::zeros(r * env, r * env);
    for (a, qa) in basis.iter().enumerate() {
        for (b, qb) in basis.iter().enumerate() {
            let blk = env_block(h, &shape, qa, qb)?;
            for jc in 0..env {
                for jr in 0..env {
                    m[(a * env + jr, b * env + jc)] = blk.get(jr, jc);
                }
            }
        }
    }
    let block_shape = if r == 1 { SpaceShape::single(env)? } else { SpaceShape::bipartite(r, env)? };
    Ok(BlockHamiltonian {
        label: family.label(k),
        index: k,
        basis,
        h: Operator::hermitian(block_shape, m)?,
        total_shape: shape,
    })
}

pub fn block_hamiltonians(model: &TotalModel, family: &ProjectorFamily) -> Result<Vec<BlockHamiltonian>> {
    (0..family.len()).map(|k| block_hamiltonian(model.h_total(), family, k)).collect()
}

/// Block evolution of a component confined to `range(P_μ) ⊗ H_E`.
pub fn block_evolve(block: &BlockHamiltonian, psi_mu: &StateVector, grid: &TimeGrid) -> Result<Trajectory> {
    block.evolve(psi_mu, grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct IsolationReport {
    pub isolated: bool,
    /// `max_t ‖H_I Ψ(t)‖ / ‖H_I‖_F`.
    pub interaction_residual: f64,
    /// `max_t (1 − Tr ρ_R²)`, zero while the state stays a product.
    pub factorization_residual: f64,
    /// `max_t max_ij |ρ_R(t) − e^{−iH_R t}|ψ_R⟩⟨ψ_R|e^{iH_R t}|_ij`.
    pub prediction_error: f64,
    pub times: Vec<f64>,
    /// Largest off-diagonal magnitude of ρ_R at each time.
    pub max_offdiag: Vec<f64>,
}

/// Whether the apparatus stays isolated from its environment along the
/// trajectory of a product state.
pub fn isolatable_check(model: &TotalModel, psi0: &StateVector, grid: &TimeGrid, eps_x: f64) -> Result<IsolationReport> {
    psi0.require_normalized()?;
    let rho0 = qcore::reduced_density(psi0);
    let p0 = qcore::purity(&rho0);
    if (1.0 - p0).abs() > 1e-10 {
        return Err(Error::NotProduct { purity: p0 });
    }
    let top = rho0.spectral()?;
    let n = top.dim();
    let psi_r: Vec<C64> = (0..n).map(|i| top.eigenvectors[(i, n - 1)]).collect();
    let hr_spec = model.h_r().spectral()?;

    let traj = evolve(model, psi0, grid)?;
    let hi_norm = model.h_i().frobenius_norm();
    let mut interaction_residual = 0.0f64;
    let mut factorization_residual = 0.0f64;
    let mut prediction_error = 0.0f64;
    let mut max_offdiag = Vec::with_capacity(traj.states.len());
    for (k, state) in traj.states.iter().enumerate() {
        if hi_norm > 0.0 {
            interaction_residual = interaction_residual.max(model.h_i().apply(state).norm() / hi_norm);
        }
        let rho = qcore::reduced_density(state);
        factorization_residual = factorization_residual.max((1.0 - qcore::purity(&rho)).max(0.0));
        let r_t = hr_spec.evolve(&psi_r, traj.times[k] - grid.t0);
        let pred = Mat::<C64>::from_fn(n, n, |i, j| r_t[i] * r_t[j].conj());
        let pred = Operator::new(rho.shape().clone(), pred)?;
        prediction_error = prediction_error.max(rho.max_abs_diff(&pred));
        let mut off = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off = off.max(rho.get(i, j).norm());
                }
            }
        }
        max_offdiag.push(off);
    }
    Ok(IsolationReport {
        isolated: interaction_residual <= eps_x,
        interaction_residual,
        factorization_residual,
        prediction_error,
        times: traj.times,
        max_offdiag,
    })
}
