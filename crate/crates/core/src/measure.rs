//! Measurement scheme: a measured system S adjoined to the environment side
//! (`R ⊗ S ⊗ E`), a controlled premeasurement that rotates the apparatus into
//! pointer subspaces, and Born-rule recovery from the tree.

use std::collections::BTreeMap;
use std::sync::Arc;

use faer::Mat;
use serde::Serialize;

use crate::dynamics::Protocol;
use crate::error::{Error, Result};
use crate::model::{ProjectorFamily, TotalModel};
use crate::qcore::{Operator, SpaceShape, StateVector, C64, ZERO};
use crate::robservable::Tolerance;
use crate::tree::{grow_tree, probability_of_value, ScheduleEntry, TreeOptions};

#[derive(Clone, Debug)]
pub struct MeasurementScenario {
    /// Columns are the eigenvectors `|b⟩` of the measured observable.
    pub b_basis: Mat<C64>,
    /// `C_b(t0)`.
    pub coefficients: Vec<C64>,
    /// Apparatus initial state `R0`.
    pub r0: StateVector,
    /// Environment initial state (without S).
    pub phi_e: StateVector,
    /// `pointer[b]` = index of the family member `μ(b)`.
    pub pointer: Vec<usize>,
    pub family: Arc<ProjectorFamily>,
    /// Premeasurement ends at `tau1`; interaction runs on `[0, tau1]`.
    pub tau1: f64,
    /// NTC window end `t1` (window is `[tau1, t1]`).
    pub t1: f64,
    pub tau_d: f64,
}

impl MeasurementScenario {
    /// Measured system in its computational basis.
    pub fn new(
        coefficients: Vec<C64>,
        r0: StateVector,
        phi_e: StateVector,
        pointer: Vec<usize>,
        family: Arc<ProjectorFamily>,
        tau1: f64,
        t1: f64,
        tau_d: f64,
    ) -> Self {
        let m = coefficients.len();
        Self { b_basis: Mat::identity(m, m), coefficients, r0, phi_e, pointer, family, tau1, t1, tau_d }
    }

    pub fn system_dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.system_dim();
        if m == 0 || self.b_basis.nrows() != m || self.b_basis.ncols() != m {
            return Err(Error::DimensionMismatch { context: "measured-system basis", expected: m, found: self.b_basis.nrows() });
        }
        let gram = self.b_basis.adjoint() * &self.b_basis;
        let dev = (&gram - Mat::<C64>::identity(m, m)).norm_max();
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!("measured-system basis not orthonormal (deviation {dev:.3e})")));
        }
        let total: f64 = self.coefficients.iter().map(|c| c.norm_sqr()).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::NotNormalized { norm: total.sqrt() });
        }
        if self.pointer.len() != m {
            return Err(Error::DimensionMismatch { context: "pointer map", expected: m, found: self.pointer.len() });
        }
        let mut seen = vec![false; self.family.len()];
        for &k in &self.pointer {
            if k >= self.family.len() || seen[k] {
                return Err(Error::InvalidArgument("pointer map must be injective into the family".into()));
            }
            seen[k] = true;
        }
        if self.r0.dim() != self.family.apparatus_dim() {
            return Err(Error::DimensionMismatch {
                context: "apparatus state",
                expected: self.family.apparatus_dim(),
                found: self.r0.dim(),
            });
        }
        self.r0.require_normalized()?;
        self.phi_e.require_normalized()?;
        if !(self.tau1 > 0.0) {
            return Err(Error::InvalidArgument("tau1 must be positive".into()));
        }
        if self.t1 - self.tau1 <= self.tau_d {
            return Err(Error::WindowTooShort { start: self.tau1, end: self.t1, tau_d: self.tau_d });
        }
        Ok(())
    }

    fn b_vec(&self, b: usize) -> Vec<C64> {
        (0..self.system_dim()).map(|i| self.b_basis[(i, b)]).collect()
    }

    /// Shape `n × (m·N)` of the total space.
    pub fn total_shape(&self) -> Result<SpaceShape> {
        SpaceShape::new(vec![self.r0.dim(), self.system_dim(), self.phi_e.dim()])
    }

    /// `R0 ⊗ Σ_b C_b|b⟩ ⊗ φ_E`.
    pub fn initial_state(&self) -> Result<StateVector> {
        let m = self.system_dim();
        let mut s = vec![ZERO; m];
        for (b, c) in self.coefficients.iter().enumerate() {
            for (i, v) in self.b_vec(b).into_iter().enumerate() {
                s[i] += c * v;
            }
        }
        let r = self.r0.amps();
        let e = self.phi_e.amps();
        let amps = r.iter().flat_map(|x| s.iter().flat_map(move |y| e.iter().map(move |z| x * y * z))).collect();
        StateVector::new(self.total_shape()?, amps)
    }

    /// Rotation generator `K_μ` (on R) taking `R0` into `H_μ` in time `tau1`.
    pub fn pointer_generator(&self, k: usize) -> Result<Operator> {
        let n = self.r0.dim();
        let shape = SpaceShape::single(n)?;
        let r = self.r0.amps();
        let projected = self.family.projector(k).apply(&self.r0);
        let target: Vec<C64> = if projected.norm() > 1e-12 {
            projected.normalized()?.into_amps()
        } else {
            self.family.basis_vectors(k).swap_remove(0)
        };
        // target = cos θ r + sin θ u, ⟨r|target⟩ real after the projection.
        let overlap: C64 = r.iter().zip(&target).map(|(a, b)| a.conj() * b).sum();
        let mut u: Vec<C64> = target.iter().zip(r).map(|(t, a)| t - overlap * a).collect();
        let un = u.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if un < 1e-14 {
            return Ok(Operator::zeros(shape));
        }
        u.iter_mut().for_each(|x| *x /= un);
        let phase = if overlap.norm() > 0.0 { overlap / overlap.norm() } else { C64::new(1.0, 0.0) };
        let theta = un.atan2(overlap.norm());
        // Rotate within span{r, u}, then fix the residual phase of `target`.
        let u: Vec<C64> = u.iter().map(|x| x * phase.conj()).collect();
        let w = theta / self.tau1;
        let i = C64::new(0.0, 1.0);
        Operator::hermitian_from_fn(shape, |a, b| w * i * (u[a] * r[b].conj() - r[a] * u[b].conj()))
    }

    /// `Σ_b |b⟩⟨b| ⊗ K_{μ(b)}` laid out as `R ⊗ S ⊗ E`.
    pub fn premeasurement_hamiltonian(&self) -> Result<Operator> {
        let n = self.r0.dim();
        let m = self.system_dim();
        let env = self.phi_e.dim();
        let gens = self.pointer.iter().map(|&k| self.pointer_generator(k)).collect::<Result<Vec<_>>>()?;
        let proj: Vec<Vec<C64>> = (0..m).map(|b| self.b_vec(b)).collect();
        let d = n * m * env;
        let mut mat = Mat::<C64>::zeros(d, d);
        for (b, k) in gens.iter().enumerate() {
            for r1 in 0..n {
                for r2 in 0..n {
                    let kv = k.get(r1, r2);
                    if kv == ZERO {
                        continue;
                    }
                    for s1 in 0..m {
                        for s2 in 0..m {
                            let v = kv * proj[b][s1] * proj[b][s2].conj();
                            if v == ZERO {
                                continue;
                            }
                            for e in 0..env {
                                mat[((r1 * m + s1) * env + e, (r2 * m + s2) * env + e)] += v;
                            }
                        }
                    }
                }
            }
        }
        Operator::hermitian(self.total_shape()?, mat)
    }
}

/// Embed `H` on `R ⊗ E` as `H ⊗ I_S` on `R ⊗ S ⊗ E` (S idle).
pub fn adjoin_system(h: &Operator, m: usize) -> Result<Operator> {
    let n = h.shape().apparatus_dim();
    let env = h.shape().environment_dim();
    let d = n * m * env;
    let mut mat = Mat::<C64>::zeros(d, d);
    for r1 in 0..n {
        for r2 in 0..n {
            for e1 in 0..env {
                for e2 in 0..env {
                    let v = h.get(r1 * env + e1, r2 * env + e2);
                    if v == ZERO {
                        continue;
                    }
                    for s in 0..m {
                        mat[((r1 * m + s) * env + e1, (r2 * m + s) * env + e2)] = v;
                    }
                }
            }
        }
    }
    Operator::hermitian(SpaceShape::new(vec![n, m, env])?, mat)
}

/// Per-b fidelity `‖P_{μ(b)} R_b‖²` with `R_b = ⟨b|_S Ψ` normalized. A zero
/// `R_b` (vanishing `C_b`) counts as fidelity 1.
pub fn pointer_correlation(state: &StateVector, scenario: &MeasurementScenario) -> Result<Vec<f64>> {
    let n = scenario.r0.dim();
    let m = scenario.system_dim();
    let env = scenario.phi_e.dim();
    if state.dim() != n * m * env {
        return Err(Error::DimensionMismatch { context: "measurement state", expected: n * m * env, found: state.dim() });
    }
    let shape = SpaceShape::bipartite(n, env)?;
    let a = state.amps();
    (0..m)
        .map(|b| {
            let bv = scenario.b_vec(b);
            let mut x = vec![ZERO; n * env];
            for r in 0..n {
                for s in 0..m {
                    let c = bv[s].conj();
                    if c == ZERO {
                        continue;
                    }
                    for e in 0..env {
                        x[r * env + e] += c * a[(r * m + s) * env + e];
                    }
                }
            }
            let x = StateVector::new(shape.clone(), x)?;
            let w = x.norm_sqr();
            if w <= 1e-24 {
                return Ok(1.0);
            }
            Ok(scenario.family.apply(scenario.pointer[b], &x).norm_sqr() / w)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OutcomeRow {
    pub b: usize,
    pub label: i64,
    pub probability: f64,
    pub born: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasurementOutcomeReport {
    pub outcomes: Vec<OutcomeRow>,
    pub max_deviation: f64,
    /// Pointer label → inferred eigenvalue index b.
    pub inferred: BTreeMap<i64, usize>,
    pub pointer_fidelity: Vec<f64>,
    /// Smallest `‖(P_μ(b) ⊗ |b⟩⟨b|)Ψ_α‖² / P_α` over components.
    pub factorization: f64,
    /// `max_t ‖Ψ(t) − Σ_α Ψ_α(t)‖` over the NTC window.
    pub no_collapse_residual: f64,
    pub split_time: f64,
    pub pass: bool,
}

/// Run the scenario on the apparatus-environment model `model` (`R ⊗ E`).
pub fn run_measurement(scenario: &MeasurementScenario, model: &TotalModel, tol: &Tolerance) -> Result<MeasurementOutcomeReport> {
    scenario.validate()?;
    let tol = tol.validated()?;
    if model.apparatus_dim() != scenario.r0.dim() || model.environment_dim() != scenario.phi_e.dim() {
        return Err(Error::DimensionMismatch {
            context: "measurement model",
            expected: scenario.r0.dim() * scenario.phi_e.dim(),
            found: model.shape().total_dim(),
        });
    }
    let m = scenario.system_dim();
    let psi0 = scenario.initial_state()?;
    let h_on = scenario.premeasurement_hamiltonian()?;
    let h_off = adjoin_system(model.h_total(), m)?;
    let protocol = Protocol::constant(h_on).then(scenario.tau1, h_off)?;

    let at_tau1 = protocol.propagate(&psi0, 0.0, scenario.tau1)?;
    let pointer_fidelity = pointer_correlation(&at_tau1, scenario)?;
    for (b, &f) in pointer_fidelity.iter().enumerate() {
        if f < 1.0 - tol.eps_x {
            return Err(Error::PremeasurementIncomplete { outcome: b, fidelity: f });
        }
    }

    let entry = ScheduleEntry::new((scenario.tau1, scenario.t1), Arc::clone(&scenario.family), scenario.tau_d);
    let split_time = entry.split_at();
    let opts = TreeOptions { eps_x: tol.eps_x, ..TreeOptions::default() };
    let tree = grow_tree(&protocol, &psi0, 0.0, &[entry], &opts)?;
    if let Some(rej) = tree.rejections().first() {
        return Err(match rej.reason {
            crate::tree::RejectReason::NtcViolated { max_leakage, label, time } => {
                Error::NtcViolated { max_leakage, eps_x: tol.eps_x, label, time }
            }
            crate::tree::RejectReason::WindowTooShort { .. } => {
                Error::WindowTooShort { start: scenario.tau1, end: scenario.t1, tau_d: scenario.tau_d }
            }
        });
    }
    let probs = probability_of_value(&tree, &scenario.family, split_time)?;
    let mut outcomes = Vec::with_capacity(m);
    let mut inferred = BTreeMap::new();
    for b in 0..m {
        let label = scenario.family.label(scenario.pointer[b]);
        let p = probs[&label];
        outcomes.push(OutcomeRow { b, label, probability: p, born: scenario.coefficients[b].norm_sqr() });
        inferred.insert(label, b);
    }
    let max_deviation = outcomes.iter().map(|o| (o.probability - o.born).abs()).fold(0.0, f64::max);

    let mut factorization = 1.0f64;
    for path in tree.paths_at(split_time)? {
        let Some(ev) = path.events.last() else { continue };
        let Some(b) = scenario.pointer.iter().position(|&k| k == ev.index) else {
            factorization = 0.0;
            continue;
        };
        let fid = pointer_correlation(&path.component, scenario)?;
        // Weight of |b⟩ in S, times pointer fidelity of that part.
        let sys = system_weight(&path.component, scenario, b)?;
        factorization = factorization.min(sys * fid[b]);
    }

    let mut no_collapse: f64 = 0.0;
    let steps = 8;
    for k in 0..=steps {
        let t = split_time + (scenario.t1 - split_time) * k as f64 / steps as f64;
        let full = protocol.propagate(&psi0, 0.0, t)?;
        let mut sum = StateVector::zeros(full.shape().clone());
        for p in tree.paths_at(t)? {
            sum = sum.add(&p.component);
        }
        no_collapse = no_collapse.max(full.distance(&sum));
    }
    let pass = max_deviation <= 10.0 * tol.eps_x && factorization >= 1.0 - tol.eps_x && no_collapse <= 1e-9;
    Ok(MeasurementOutcomeReport {
        outcomes,
        max_deviation,
        inferred,
        pointer_fidelity,
        factorization,
        no_collapse_residual: no_collapse,
        split_time,
        pass,
    })
}

/// `‖(I ⊗ |b⟩⟨b| ⊗ I)Ψ‖² / ‖Ψ‖²`.
fn system_weight(state: &StateVector, scenario: &MeasurementScenario, b: usize) -> Result<f64> {
    let n = scenario.r0.dim();
    let m = scenario.system_dim();
    let env = scenario.phi_e.dim();
    let bv = scenario.b_vec(b);
    let a = state.amps();
    let mut w = 0.0;
    for r in 0..n {
        for e in 0..env {
            let c: C64 = (0..m).map(|s| bv[s].conj() * a[(r * m + s) * env + e]).sum();
            w += c.norm_sqr();
        }
    }
    let total = state.norm_sqr();
    if total == 0.0 {
        return Err(Error::InvalidArgument("zero component".into()));
    }
    Ok(w / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_nlevel_model, haar_state, random_dephasing_couplings, EnsembleSpec};

    fn model(n: usize, env: usize, seed: u64) -> TotalModel {
        let h_e = EnsembleSpec::gue(env, 1.0, seed).generate().unwrap();
        let b = random_dephasing_couplings(n, env, seed + 1).unwrap();
        let levels: Vec<f64> = (0..n).map(|i| 0.5 * i as f64).collect();
        build_nlevel_model(&levels, h_e, &b, 0.6).unwrap()
    }

    fn scenario(c: &[f64], n: usize, env: usize) -> MeasurementScenario {
        let fam = Arc::new(ProjectorFamily::computational(n).unwrap());
        // R0 outside every pointer subspace except by overlap.
        let r0 = StateVector::from_real(SpaceShape::single(n).unwrap(), &vec![(1.0 / n as f64).sqrt(); n]).unwrap();
        let coeffs = c.iter().map(|&x| C64::new(x.sqrt(), 0.0)).collect();
        MeasurementScenario::new(coeffs, r0, haar_state(SpaceShape::single(env).unwrap(), 5), (0..c.len()).collect(), fam, 1.0, 3.0, 0.5)
    }

    #[test]
    fn premeasurement_rotates_into_pointer_subspaces() {
        let s = scenario(&[0.25, 0.75], 2, 8);
        let p = Protocol::constant(s.premeasurement_hamiltonian().unwrap());
        let psi0 = s.initial_state().unwrap();
        let f0 = pointer_correlation(&psi0, &s).unwrap();
        assert!(f0.iter().all(|&f| (f - 0.5).abs() < 1e-12));
        let at = p.propagate(&psi0, 0.0, s.tau1).unwrap();
        assert!(pointer_correlation(&at, &s).unwrap().iter().all(|&f| f >= 1.0 - 1e-10));
    }

    #[test]
    fn born_rule_two_outcomes() {
        let s = scenario(&[0.25, 0.75], 2, 8);
        let rep = run_measurement(&s, &model(2, 8, 3), &Tolerance::new(1e-6).unwrap()).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.outcomes[0].probability - 0.25).abs() < 1e-6);
        assert!((rep.outcomes[1].probability - 0.75).abs() < 1e-6);
        let total: f64 = rep.outcomes.iter().map(|o| o.probability).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_outcome_is_deterministic() {
        let s = scenario(&[1.0], 2, 4);
        let rep = run_measurement(&s, &model(2, 4, 9), &Tolerance::new(1e-6).unwrap()).unwrap();
        assert!((rep.outcomes[0].probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rephasing_leaves_outcomes_unchanged() {
        let s = scenario(&[1.0 / 3.0; 3], 3, 6);
        let m = model(3, 6, 7);
        let tol = Tolerance::new(1e-6).unwrap();
        let a = run_measurement(&s, &m, &tol).unwrap();
        let mut r = s.clone();
        r.coefficients = r.coefficients.iter().enumerate().map(|(k, c)| c * C64::from_polar(1.0, 0.7 * k as f64 + 0.2)).collect();
        let b = run_measurement(&r, &m, &tol).unwrap();
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert!((x.probability - y.probability).abs() < 1e-8);
            assert!((x.probability - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(a.inferred, b.inferred);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = scenario(&[0.5, 0.5], 2, 4);
        s.pointer = vec![0, 0];
        assert!(s.validate().is_err());
        let mut s = scenario(&[0.5, 0.5], 2, 4);
        s.t1 = 1.2;
        assert!(matches!(s.validate(), Err(Error::WindowTooShort { .. })));
        let mut s = scenario(&[0.5, 0.5], 2, 4);
        s.coefficients[0] = C64::new(0.1, 0.0);
        assert!(matches!(s.validate(), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn no_interaction_keeps_fidelities_constant() {
        let s = scenario(&[0.5, 0.5], 2, 4);
        let h = adjoin_system(&model(2, 4, 1).free(), 2).unwrap();
        let p = Protocol::constant(h);
        let psi0 = s.initial_state().unwrap();
        let f0 = pointer_correlation(&psi0, &s).unwrap();
        let f1 = pointer_correlation(&p.propagate(&psi0, 0.0, 2.0).unwrap(), &s).unwrap();
        for (a, b) in f0.iter().zip(&f1) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
