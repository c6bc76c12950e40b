//! Ready-made constructions shared by the CLI, tests and benches.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Protocol, TimeGrid};
use crate::echo::EchoSeries;
use crate::error::{Error, Result};
use crate::model::{
    build_nlevel_model, central_band_state, eigenprojector_family, haar_state, perturbation_stats, product_state,
    random_apparatus_state, random_dephasing_couplings, unit_gue, EnsembleSpec, PerturbationStats, ProjectorFamily, TotalModel,
};
use crate::qcore::{tensor, Operator, SpaceShape, StateVector, C64, ZERO};
use crate::tree::ScheduleEntry;

const KICK_STREAM: u64 = 200;

/// Dephasing n-level model: GUE environment (unit mean spacing), apparatus
/// levels `0, 1, …, n−1`, couplings `λ Σ_μ |μ⟩⟨μ| ⊗ B_μ`.
pub fn dephasing_model(n: usize, env: usize, lambda: f64, seed: u64) -> Result<TotalModel> {
    let h_e = EnsembleSpec::gue(env, 1.0, seed).generate()?;
    let b = random_dephasing_couplings(n, env, seed)?;
    let levels: Vec<f64> = (0..n).map(|i| i as f64).collect();
    build_nlevel_model(&levels, h_e, &b, lambda)
}

/// Random product state `R ⊗ φ` with Haar environment part.
pub fn random_product_state(model: &TotalModel, seed: u64) -> Result<StateVector> {
    product_state(
        &random_apparatus_state(model.apparatus_dim(), seed),
        &haar_state(model.shape().environment_shape(), seed),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KickSpec {
    pub splits: usize,
    /// Dephasing window length; the split sits at its midpoint.
    pub window: f64,
    pub kick_duration: f64,
    pub kick_strength: f64,
    /// Add an environment-dependent part `B ⊗ V` to each kick.
    pub env_dependent: bool,
    pub seed: u64,
}

impl Default for KickSpec {
    fn default() -> Self {
        Self { splits: 3, window: 1.0, kick_duration: 0.5, kick_strength: 1.0, env_dependent: true, seed: 0 }
    }
}

/// Protocol, shared schedule and initial state for a branching run.
#[derive(Clone, Debug)]
pub struct BranchingSetup {
    pub protocol: Protocol,
    pub schedule: Vec<ScheduleEntry>,
    pub psi0: StateVector,
    pub t_end: f64,
}

/// Kick Hamiltonian `s·(A ⊗ I + B ⊗ V/√N)` with unit-GUE `A`, `B`, `V`.
pub fn kick_operator(model: &TotalModel, strength: f64, env_dependent: bool, seed: u64, k: usize) -> Result<Operator> {
    let n = model.apparatus_dim();
    let env = model.environment_dim();
    let stream = KICK_STREAM + 3 * k as u64;
    let a = unit_gue(n, seed, stream)?;
    let mut h = tensor(&a, &Operator::identity(model.shape().environment_shape()));
    if env_dependent {
        let b = unit_gue(n, seed, stream + 1)?;
        let v = unit_gue(env, seed, stream + 2)?.scale(1.0 / (env as f64).sqrt());
        h = h.add(&tensor(&b, &v));
    }
    h.scale(strength).reshaped(model.shape().clone())
}

/// Dephasing windows separated by mixing kicks; one split per window with the
/// eigenprojector family of `H_R`. NTC holds exactly inside every window.
pub fn kicked_dephasing(model: &TotalModel, psi0: &StateVector, spec: &KickSpec) -> Result<BranchingSetup> {
    if spec.splits == 0 || !(spec.window > 0.0) || !(spec.kick_duration > 0.0) {
        return Err(Error::InvalidArgument("kick spec needs splits ≥ 1 and positive durations".into()));
    }
    let family = Arc::new(eigenprojector_family(model.h_r(), None)?);
    let base = model.h_total_shared();
    let mut protocol = Protocol::constant_shared(Arc::clone(&base));
    let mut schedule = Vec::with_capacity(spec.splits);
    let mut t = 0.0;
    for k in 0..spec.splits {
        schedule.push(ScheduleEntry::new((t, t + spec.window), Arc::clone(&family), 0.5 * spec.window));
        t += spec.window;
        if k + 1 < spec.splits {
            let kick = kick_operator(model, spec.kick_strength, spec.env_dependent, spec.seed, k)?;
            protocol = protocol.then(t, model.h_total().add(&kick))?;
            t += spec.kick_duration;
            protocol = protocol.then_shared(t, Arc::clone(&base))?;
        }
    }
    Ok(BranchingSetup { protocol, schedule, psi0: psi0.clone(), t_end: t })
}

/// Fine and coarse schedules where coarse-graining the first split keeps a
/// downstream window whose NTC then fails.
#[derive(Clone, Debug)]
pub struct CoarseGrainingTrap {
    pub protocol: Protocol,
    pub psi0: StateVector,
    pub fine: Vec<ScheduleEntry>,
    pub coarse: Vec<ScheduleEntry>,
    pub eps_x: f64,
    pub t_end: f64,
}

/// Three-level apparatus with `R0 = (|1⟩ + |2⟩)/√2`. Upstream: the
/// environment evolves alone, so both branches carry the same `φ(t)`.
/// Downstream: `H' = g(|+⟩⟨3| + h.c.) ⊗ I + I ⊗ H_E` with the family
/// `{|+⟩, |−⟩, |3⟩}`. A fine branch leaks `sin(gT)/√2`; the coherent coarse
/// branch `{1,2}` leaks `sin(gT)`. With `sin(gT) = 1.2·eps_x` only the fine
/// tree passes downstream.
pub fn coarse_graining_trap(env: usize, seed: u64, eps_x: f64) -> Result<CoarseGrainingTrap> {
    let shape = SpaceShape::bipartite(3, env)?;
    let h_e = EnsembleSpec::gue(env, 1.0, seed).generate()?;
    let id3 = Operator::identity(SpaceShape::single(3)?);
    let upstream = tensor(&id3, &h_e).reshaped(shape.clone())?;
    let t_switch = 2.0;
    let window = 1.0;
    let g = (1.2 * eps_x).asin() / window;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let plus = [C64::new(s, 0.0), C64::new(s, 0.0), ZERO];
    let minus = [C64::new(s, 0.0), C64::new(-s, 0.0), ZERO];
    let three = [ZERO, ZERO, C64::new(1.0, 0.0)];
    let coupling = Operator::hermitian_from_fn(SpaceShape::single(3)?, |i, j| {
        g * (plus[i] * three[j].conj() + three[i] * plus[j].conj())
    })?;
    let downstream = tensor(&coupling, &Operator::identity(SpaceShape::single(env)?)).reshaped(shape.clone())?.add(&upstream);
    let protocol = Protocol::constant(upstream).then(t_switch, downstream)?;

    let r0 = StateVector::new(SpaceShape::single(3)?, vec![C64::new(s, 0.0), C64::new(s, 0.0), ZERO])?;
    let psi0 = product_state(&r0, &haar_state(SpaceShape::single(env)?, seed))?;
    let fine_family = Arc::new(ProjectorFamily::computational(3)?);
    let coarse_family = Arc::new(ProjectorFamily::from_subspaces(
        3,
        &[vec![crate::model::unit_vec(3, 0), crate::model::unit_vec(3, 1)], vec![crate::model::unit_vec(3, 2)]],
    )?);
    let down_family = Arc::new(ProjectorFamily::from_subspaces(3, &[vec![plus.to_vec()], vec![minus.to_vec()], vec![three.to_vec()]])?);
    let upstream_window = (0.5, 1.5);
    let down_window = (t_switch, t_switch + window);
    let fine = vec![
        ScheduleEntry::new(upstream_window, fine_family, 0.5),
        ScheduleEntry::new(down_window, Arc::clone(&down_family), 0.25),
    ];
    let coarse = vec![ScheduleEntry::new(upstream_window, coarse_family, 0.5), ScheduleEntry::new(down_window, down_family, 0.25)];
    Ok(CoarseGrainingTrap { protocol, psi0, fine, coarse, eps_x, t_end: t_switch + window })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IvrSpec {
    pub env: usize,
    pub lambda: f64,
    /// Time allowed for the environment branches to decohere.
    pub tau_d: f64,
    /// Mixing angle of the σ_x kick.
    pub theta: f64,
    pub seed: u64,
}

impl Default for IvrSpec {
    fn default() -> Self {
        Self { env: 512, lambda: 0.3, tau_d: 6.0, theta: 0.01, seed: 11 }
    }
}

/// A two-level dephasing run with a split, a weak `e^{−iθσ_x}` kick and a
/// second split; with `reverse` a `−H` segment first undoes the dephasing so
/// the kick mixes coherent branches.
pub fn ivr_scenario(spec: &IvrSpec, reverse: bool) -> Result<(BranchingSetup, Vec<Vec<ScheduleEntry>>)> {
    let model = dephasing_model(2, spec.env, spec.lambda, spec.seed)?;
    let family = Arc::new(eigenprojector_family(model.h_r(), None)?);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let r0 = StateVector::new(SpaceShape::single(2)?, vec![C64::new(s, 0.0), C64::new(s, 0.0)])?;
    let psi0 = product_state(&r0, &haar_state(model.shape().environment_shape(), spec.seed))?;
    let td = spec.tau_d;
    let kick_len = 0.01;
    let sx = Operator::hermitian_from_fn(SpaceShape::single(2)?, |i, j| {
        if i != j { C64::new(spec.theta / kick_len, 0.0) } else { ZERO }
    })?;
    let kick = tensor(&sx, &Operator::identity(model.shape().environment_shape())).reshaped(model.shape().clone())?;
    let base = model.h_total_shared();
    let first = ScheduleEntry::new((0.0, 1.5 * td), Arc::clone(&family), td);
    let kick_at = if reverse { 3.0 * td } else { 2.0 * td };
    let mut protocol = Protocol::constant_shared(Arc::clone(&base));
    if reverse {
        protocol = protocol.then(1.5 * td, model.h_total().scale(-1.0))?;
    }
    protocol = protocol.then(kick_at, kick)?.then_shared(kick_at + kick_len, Arc::clone(&base))?;
    let w2 = (kick_at + kick_len, kick_at + kick_len + td);
    let second = ScheduleEntry::new(w2, Arc::clone(&family), 0.25 * td);
    let trivial = Arc::new(ProjectorFamily::new(vec![1], vec![Operator::identity(SpaceShape::single(2)?)])?);
    let coarse = vec![vec![first.clone(), ScheduleEntry::new(w2, trivial, 0.25 * td)]];
    Ok((BranchingSetup { protocol, schedule: vec![first, second], psi0, t_end: w2.1 }, coarse))
}

/// Environment initial vector for echo runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvState {
    /// Random-phase vector over the central fraction of the `H^E_μ` spectrum.
    CentralBand(f64),
    Haar,
}

#[derive(Clone, Debug)]
pub struct EchoSetup {
    pub model: TotalModel,
    pub family: ProjectorFamily,
    pub stats: PerturbationStats,
    pub phi0: StateVector,
}

/// Two-level dephasing model whose coupling is rescaled until `ε / ε_p`
/// equals `ratio`.
pub fn echo_setup(env: usize, ratio: f64, seed: u64, state: EnvState) -> Result<EchoSetup> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument("ε/ε_p ratio must be positive".into()));
    }
    let h_e = EnsembleSpec::gue(env, 1.0, seed).generate()?;
    let b = random_dephasing_couplings(2, env, seed)?;
    let (e0, e1) = (crate::model::unit_vec(2, 0), crate::model::unit_vec(2, 1));
    let mut lambda = 1.0;
    let mut model = build_nlevel_model(&[0.0, 1.0], h_e.clone(), &b, lambda)?;
    let mut stats = perturbation_stats(&model, &e0, &e1)?;
    // Δ and σ_v move slightly with λ; a few fixed-point passes settle the ratio.
    for _ in 0..4 {
        lambda *= ratio * stats.perturbative_border() / stats.epsilon;
        model = build_nlevel_model(&[0.0, 1.0], h_e.clone(), &b, lambda)?;
        stats = perturbation_stats(&model, &e0, &e1)?;
    }
    let phi0 = match state {
        EnvState::CentralBand(f) => central_band_state(&model.env_hamiltonian(&e0)?, f, seed)?,
        EnvState::Haar => haar_state(model.shape().environment_shape(), seed),
    };
    Ok(EchoSetup { model, family: ProjectorFamily::computational(2)?, stats, phi0 })
}

impl EchoSetup {
    /// `f_10(t)` on `[0, t_end]`.
    pub fn dephasing_factor(&self, t_end: f64, steps: usize) -> Result<EchoSeries> {
        crate::echo::dephasing_factor(&self.model, &self.family, 0, 1, &self.phi0, &TimeGrid::spanning(0.0, t_end, steps)?)
    }
}
