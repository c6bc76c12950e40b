//! R-observable checks: decoherence of the reduced apparatus state across
//! subspaces, certification over an ensemble of product states, the finest
//! common division of a set of reduced matrices, and coarse-graining.

use std::collections::BTreeMap;

use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{ntc_evaluate, Protocol, TimeGrid, DEFAULT_EPS_X};
use crate::echo::RateOptions;
use crate::error::{Error, Result};
use crate::model::{self, product_state, random_apparatus_state, ProjectorFamily};
use crate::qcore::{self, Operator, SpaceShape, StateVector, C64, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub eps_x: f64,
    pub k_accuracy: f64,
    pub degeneracy_tol: f64,
}

impl Tolerance {
    pub fn new(eps_x: f64) -> Result<Self> {
        Self { eps_x, k_accuracy: RateOptions::for_eps_x(eps_x).k_accuracy, degeneracy_tol: 1e-8 }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.eps_x > 0.0 && self.k_accuracy > 0.0 && self.degeneracy_tol > 0.0 {
            Ok(self)
        } else {
            Err(Error::InvalidArgument(format!("tolerances must be positive: {self:?}")))
        }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self::new(DEFAULT_EPS_X).expect("defaults are positive")
    }
}

/// `max_{μ≠ν} ‖P_μ ρ P_ν‖_F`.
pub fn offblock(rho: &Operator, family: &ProjectorFamily) -> f64 {
    let mut worst = 0.0f64;
    let sandw: Vec<Mat<C64>> = family.projectors().iter().map(|p| p.mat() * rho.mat()).collect();
    for (a, pr) in sandw.iter().enumerate() {
        for (b, q) in family.projectors().iter().enumerate() {
            if a != b {
                worst = worst.max((pr * q.mat()).norm_l2());
            }
        }
    }
    worst
}

/// `‖ρ − Σ_μ P_μ ρ P_μ‖_F`, the whole off-block part. Unlike [`offblock`]
/// it never grows under coarse-graining.
pub fn offblock_total(rho: &Operator, family: &ProjectorFamily) -> f64 {
    let mut diag = Mat::<C64>::zeros(rho.dim(), rho.dim());
    for p in family.projectors() {
        diag += p.mat() * rho.mat() * p.mat();
    }
    (rho.mat() - diag).norm_l2()
}

#[derive(Clone, Debug, Serialize)]
pub struct DecoherenceCheck {
    pub times: Vec<f64>,
    pub offblock: Vec<f64>,
    /// Measured from the window start; `None` when the curve never settles.
    pub tau_d: Option<f64>,
    pub pass: bool,
    pub ntc_max_leakage: f64,
}

/// First index from which every later value stays at or below `eps`.
fn settle_index(curve: &[f64], eps: f64) -> Option<usize> {
    let last_bad = curve.iter().rposition(|&v| v > eps);
    match last_bad {
        None => Some(0),
        Some(i) if i + 1 < curve.len() => Some(i + 1),
        Some(_) => None,
    }
}

/// Off-block decoherence of `ρ_R(t)` along the window, after verifying NTC.
pub fn decoherence_check(
    protocol: &Protocol,
    psi0: &StateVector,
    family: &ProjectorFamily,
    grid: &TimeGrid,
    tol: &Tolerance,
) -> Result<DecoherenceCheck> {
    let ntc = ntc_evaluate(protocol, psi0, family, grid, tol.eps_x)?.into_result()?;
    let traj = protocol.trajectory(psi0, grid)?;
    let curve: Vec<f64> = traj.states.iter().map(|s| offblock(&qcore::reduced_density(s), family)).collect();
    let settle = settle_index(&curve, tol.eps_x);
    let tau_d = settle.map(|i| traj.times[i] - grid.t0);
    Ok(DecoherenceCheck { times: traj.times, offblock: curve, tau_d, pass: tau_d.is_some(), ntc_max_leakage: ntc.max_leakage })
}

#[derive(Clone, Debug, Serialize)]
pub struct RCertificate {
    pub labels: Vec<i64>,
    pub members: usize,
    pub tau_d_per_state: Vec<Option<f64>>,
    pub pass_per_state: Vec<bool>,
    /// `τ_d({μ})`: the largest measured decoherence time.
    pub tau_d: Option<f64>,
    pub verdict: bool,
    pub times: Vec<f64>,
    /// Worst off-block magnitude over the ensemble at each time.
    pub worst_offblock: Vec<f64>,
}

pub fn certify_r_observable(
    protocol: &Protocol,
    family: &ProjectorFamily,
    ensemble: &[StateVector],
    grid: &TimeGrid,
    tol: &Tolerance,
) -> Result<RCertificate> {
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("empty initial ensemble".into()));
    }
    for psi in ensemble {
        let p = qcore::purity(&qcore::reduced_density(psi));
        if (1.0 - p).abs() > 1e-10 {
            return Err(Error::NotProduct { purity: p });
        }
    }
    // Warm the spectral caches once before fanning out.
    protocol.norm_bound()?;
    let checks: Vec<DecoherenceCheck> = ensemble
        .par_iter()
        .map(|psi| decoherence_check(protocol, psi, family, grid, tol))
        .collect::<Result<_>>()?;
    let times = checks[0].times.clone();
    let worst_offblock = (0..times.len())
        .map(|i| checks.iter().map(|c| c.offblock[i]).fold(0.0, f64::max))
        .collect();
    let verdict = checks.iter().all(|c| c.pass);
    let tau_d = if verdict { checks.iter().filter_map(|c| c.tau_d).reduce(f64::max) } else { None };
    Ok(RCertificate {
        labels: family.labels().to_vec(),
        members: ensemble.len(),
        tau_d_per_state: checks.iter().map(|c| c.tau_d).collect(),
        pass_per_state: checks.iter().map(|c| c.pass).collect(),
        tau_d,
        verdict,
        times,
        worst_offblock,
    })
}

/// `count` Haar-random apparatus states plus the equal superposition of every
/// pair of subspaces (first basis vector of each), all times `phi_e`.
pub fn default_ensemble(family: &ProjectorFamily, phi_e: &StateVector, count: usize, seed: u64) -> Result<Vec<StateVector>> {
    let n = family.apparatus_dim();
    let mut out = Vec::new();
    for k in 0..count {
        out.push(product_state(&random_apparatus_state(n, seed.wrapping_add(k as u64)), phi_e)?);
    }
    let firsts: Vec<Vec<C64>> = (0..family.len()).map(|k| family.basis_vectors(k).swap_remove(0)).collect();
    for a in 0..firsts.len() {
        for b in (a + 1)..firsts.len() {
            let v: Vec<C64> = firsts[a].iter().zip(&firsts[b]).map(|(x, y)| x + y).collect();
            out.push(product_state(&model::apparatus_state(&v)?, phi_e)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FinestDivision {
    pub family: ProjectorFamily,
    /// False when the inputs admit several finest divisions and a canonical
    /// choice was made.
    pub unique: bool,
    pub verified: bool,
    pub attempts: usize,
}

/// Finest orthogonal division of `C^n` that block-diagonalizes every input.
pub fn finest_division(set: &[Operator], tol: f64) -> Result<FinestDivision> {
    let first = set.first().ok_or_else(|| Error::InvalidArgument("empty reduced set".into()))?;
    let n = first.dim();
    for r in set {
        if r.dim() != n {
            return Err(Error::DimensionMismatch { context: "finest division", expected: n, found: r.dim() });
        }
        if !r.is_hermitian() {
            return Err(Error::NotHermitian { residual: r.hermiticity_residual() });
        }
    }
    let shape = SpaceShape::single(n)?;
    let scalar = set.iter().all(|r| {
        let mean = r.trace().re / n as f64;
        r.max_abs_diff(&Operator::identity(shape.clone()).scale(mean)) <= tol
    });
    if scalar {
        return Ok(FinestDivision { family: ProjectorFamily::computational(n)?, unique: false, verified: true, attempts: 0 });
    }

    let mut rng = model::rng_for(0x5eed, model::stream::WEIGHTS);
    let mut last = None;
    for attempt in 1..=5 {
        let mut x = Operator::zeros(shape.clone());
        for r in set {
            x = x.add(&r.scale(2.0 * model::uniform(&mut rng) - 1.0));
        }
        let x = Operator::hermitian(shape.clone(), x.mat().clone())?;
        let spec = qcore::eigh(&x)?;
        let scale = spec.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let clusters = cluster(&spec.eigenvalues, 1e-8 * scale);
        let vectors = canonical_eigvecs(&spec.eigenvectors, &clusters);

        // Connect eigenvectors coupled by any input.
        let mut uf = UnionFind::new(n);
        for r in set {
            let m = vectors.adjoint() * (r.mat() * &vectors);
            for i in 0..n {
                for j in (i + 1)..n {
                    if m[(i, j)].norm() > tol {
                        uf.union(i, j);
                    }
                }
            }
        }
        let groups = uf.groups();
        let subspaces: Vec<Vec<Vec<C64>>> = groups
            .iter()
            .map(|g| g.iter().map(|&j| (0..n).map(|i| vectors[(i, j)]).collect()).collect())
            .collect();
        let family = ProjectorFamily::from_subspaces(n, &subspaces)?;
        let verified = set.iter().all(|r| offblock(r, &family) <= tol);
        // Several finest divisions exist when a degenerate X-eigenspace is
        // split across components.
        let unique = clusters.iter().all(|c| c.iter().all(|&j| uf.find(j) == uf.find(c[0])));
        let result = FinestDivision { family, unique, verified, attempts: attempt };
        if verified {
            return Ok(result);
        }
        last = Some(result);
    }
    Ok(last.expect("at least one attempt"))
}

fn cluster(values: &[f64], gap: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (k, &v) in values.iter().enumerate() {
        match out.last_mut() {
            Some(c) if v - values[*c.last().unwrap()] < gap => c.push(k),
            _ => out.push(vec![k]),
        }
    }
    out
}

/// Inside each degenerate cluster, replace the eigenvectors by the
/// Gram–Schmidt orthonormalization of the projected canonical basis.
fn canonical_eigvecs(u: &Mat<C64>, clusters: &[Vec<usize>]) -> Mat<C64> {
    let n = u.nrows();
    let mut out = u.clone();
    for c in clusters.iter().filter(|c| c.len() > 1) {
        let mut chosen: Vec<Vec<C64>> = Vec::new();
        for e in 0..n {
            if chosen.len() == c.len() {
                break;
            }
            // P_c e = Σ_j u_j ⟨u_j|e⟩.
            let mut v = vec![ZERO; n];
            for &j in c {
                let coef = u[(e, j)].conj();
                for i in 0..n {
                    v[i] += u[(i, j)] * coef;
                }
            }
            for w in &chosen {
                let d: C64 = w.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                for (x, y) in v.iter_mut().zip(w) {
                    *x -= d * y;
                }
            }
            let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            if norm > 1e-6 {
                chosen.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        for (&j, v) in c.iter().zip(&chosen) {
            for i in 0..n {
                out[(i, j)] = v[i];
            }
        }
    }
    out
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    /// Components ordered by smallest member.
    fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.parent.len() {
            let r = self.find(i);
            map.entry(r).or_default().push(i);
        }
        map.into_values().collect()
    }
}

/// `P_η = Σ_{μ ∈ η} P_μ`; the output is labelled by the sorted η values.
pub fn coarse_grain(family: &ProjectorFamily, grouping: &BTreeMap<i64, i64>) -> Result<ProjectorFamily> {
    if grouping.len() != family.len() || family.labels().iter().any(|l| !grouping.contains_key(l)) {
        return Err(Error::InvalidFamily("grouping must map every label exactly once".into()));
    }
    let mut sums: BTreeMap<i64, Operator> = BTreeMap::new();
    for (k, &label) in family.labels().iter().enumerate() {
        let eta = grouping[&label];
        let p = family.projector(k);
        let entry = sums.entry(eta).or_insert_with(|| Operator::zeros(p.shape().clone()));
        *entry = entry.add(p);
    }
    let (labels, projectors): (Vec<i64>, Vec<Operator>) = sums.into_iter().unzip();
    ProjectorFamily::new(labels, projectors)
}

/// Whether every member of `family` is a sum of members of `finest`.
pub fn is_coarse_graining_of(family: &ProjectorFamily, finest: &ProjectorFamily, tol: f64) -> bool {
    family.projectors().iter().all(|p| {
        let mut sum = Operator::zeros(p.shape().clone());
        for f in finest.projectors() {
            let inside = p.matmul(f).max_abs_diff(f) <= tol;
            let outside = p.matmul(f).max_abs() <= tol;
            if !(inside || outside) {
                return false;
            }
            if inside {
                sum = sum.add(f);
            }
        }
        sum.max_abs_diff(p) <= tol
    })
}

/// Fidelity `Tr(P Q) / rank(P)` of the best-matching recovered projector.
pub fn subspace_fidelity(target: &Operator, family: &ProjectorFamily) -> f64 {
    let rank = target.trace().re;
    family
        .projectors()
        .iter()
        .filter(|q| (q.trace().re - rank).abs() < 0.5)
        .map(|q| target.matmul(q).trace().re / rank)
        .fold(0.0, f64::max)
}
