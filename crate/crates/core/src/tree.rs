//! Branching trees: split schedules, path components and probabilities, the
//! mixed-state description, the decoherence matrix D (total-space and
//! environment-space routes), coarse/fine compatibility and the IVR check.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{block_hamiltonian, ntc_evaluate, BlockHamiltonian, Protocol, TimeGrid, DEFAULT_EPS_X};
use crate::error::{Error, Result};
use crate::model::ProjectorFamily;
use crate::qcore::{Operator, StateVector, C64, ZERO};

/// Default cap on live paths.
pub const DEFAULT_MAX_PATHS: usize = 4096;

/// One candidate split: NTC is verified on `[window.0, window.1]` and the
/// branch splits at `window.0 + tau_d` unless `split_time` overrides it.
#[derive(Clone, Debug)]
pub struct ScheduleEntry {
    pub window: (f64, f64),
    pub family: Arc<ProjectorFamily>,
    pub tau_d: f64,
    pub split_time: Option<f64>,
}

impl ScheduleEntry {
    pub fn new(window: (f64, f64), family: Arc<ProjectorFamily>, tau_d: f64) -> Self {
        Self { window, family, tau_d, split_time: None }
    }

    pub fn with_split_time(mut self, t: f64) -> Self {
        self.split_time = Some(t);
        self
    }

    pub fn split_at(&self) -> f64 {
        self.split_time.unwrap_or(self.window.0 + self.tau_d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub entry: usize,
    pub index: usize,
    pub label: i64,
    pub time: f64,
}

#[derive(Clone, Debug)]
struct Node {
    parent: Option<usize>,
    born: f64,
    /// Component at `born`.
    state: StateVector,
    event: Option<Outcome>,
    children: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RejectReason {
    NtcViolated { max_leakage: f64, label: i64, time: f64 },
    WindowTooShort { length: f64, tau_d: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RejectedSplit {
    pub entry: usize,
    /// Outcome labels of the branch that did not split.
    pub path: Vec<i64>,
    pub reason: RejectReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TreeOptions {
    pub eps_x: f64,
    /// Grid intervals for the NTC scan of each window.
    pub ntc_steps: usize,
    pub max_paths: usize,
    /// Children with `P ≤ prune_weight` are dropped.
    pub prune_weight: f64,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self { eps_x: DEFAULT_EPS_X, ntc_steps: 32, max_paths: DEFAULT_MAX_PATHS, prune_weight: 1e-24 }
    }
}

/// A grown tree. Components are stored at their birth times and propagated on
/// demand, so queries at any `t ≥ t0` are exact.
#[derive(Debug)]
pub struct Tree {
    protocol: Protocol,
    psi0: StateVector,
    t0: f64,
    schedule: Vec<ScheduleEntry>,
    nodes: Vec<Node>,
    rejections: Vec<RejectedSplit>,
    options: TreeOptions,
    blocks: Vec<OnceLock<Vec<BlockHamiltonian>>>,
    propagators: Mutex<HashMap<(u64, u64), Arc<Mat<C64>>>>,
}

/// A path alive at a query time.
#[derive(Clone, Debug)]
pub struct PathView {
    pub node: usize,
    pub events: Vec<Outcome>,
    pub probability: f64,
    pub component: StateVector,
}

impl PathView {
    pub fn labels(&self) -> Vec<i64> {
        self.events.iter().map(|e| e.label).collect()
    }
}

fn validate_schedule(t0: f64, schedule: &[ScheduleEntry]) -> Result<()> {
    let mut prev_end = t0;
    for (i, e) in schedule.iter().enumerate() {
        let (a, b) = e.window;
        if !(a >= prev_end && b > a) {
            return Err(Error::InvalidArgument(format!(
                "schedule entry {i}: window [{a}, {b}] must be nonempty, start after {prev_end}, and not overlap"
            )));
        }
        if !(e.tau_d >= 0.0) {
            return Err(Error::InvalidArgument(format!("schedule entry {i}: tau_d must be >= 0")));
        }
        if let Some(ts) = e.split_time {
            if ts < a + e.tau_d - 1e-12 || ts > b + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "schedule entry {i}: split time {ts} outside [{}, {b}]",
                    a + e.tau_d
                )));
            }
        }
        prev_end = b;
    }
    Ok(())
}

/// Grow a tree from `psi0` at `t0` through the schedule. A branch splits at an
/// entry only when the NTC holds for its own component on the entry window.
pub fn grow_tree(
    protocol: &Protocol,
    psi0: &StateVector,
    t0: f64,
    schedule: &[ScheduleEntry],
    options: &TreeOptions,
) -> Result<Tree> {
    psi0.require_normalized()?;
    validate_schedule(t0, schedule)?;
    protocol.norm_bound()?;
    let mut nodes = vec![Node { parent: None, born: t0, state: psi0.clone(), event: None, children: Vec::new() }];
    let mut live = vec![0usize];
    let mut rejections = Vec::new();
    let tree_stub = |nodes: &Vec<Node>, id: usize| path_labels(nodes, id);

    for (e, entry) in schedule.iter().enumerate() {
        let (a, b) = entry.window;
        if b - a < entry.tau_d {
            for &id in &live {
                rejections.push(RejectedSplit {
                    entry: e,
                    path: tree_stub(&nodes, id),
                    reason: RejectReason::WindowTooShort { length: b - a, tau_d: entry.tau_d },
                });
            }
            log::warn!("schedule entry {e}: window shorter than tau_d, no branch splits");
            continue;
        }
        let ts = entry.split_at();
        let grid = TimeGrid::spanning(a, b, options.ntc_steps.max(1))?;
        let outcomes: Vec<Result<std::result::Result<Vec<(usize, StateVector)>, RejectReason>>> = live
            .par_iter()
            .map(|&id| {
                let node = &nodes[id];
                let at_a = protocol.propagate(&node.state, node.born, a)?;
                let ntc = ntc_evaluate(protocol, &at_a, &entry.family, &grid, options.eps_x)?;
                if !ntc.verdict {
                    return Ok(Err(RejectReason::NtcViolated {
                        max_leakage: ntc.max_leakage,
                        label: ntc.worst_label,
                        time: ntc.worst_time,
                    }));
                }
                let at_split = protocol.propagate(&at_a, a, ts)?;
                let children = (0..entry.family.len())
                    .map(|k| (k, entry.family.apply(k, &at_split)))
                    .filter(|(_, s)| s.norm_sqr() > options.prune_weight)
                    .collect();
                Ok(Ok(children))
            })
            .collect();
        let mut next = Vec::new();
        for (&id, out) in live.iter().zip(outcomes) {
            match out? {
                Ok(children) => {
                    for (k, state) in children {
                        let child = nodes.len();
                        nodes.push(Node {
                            parent: Some(id),
                            born: ts,
                            state,
                            event: Some(Outcome { entry: e, index: k, label: entry.family.label(k), time: ts }),
                            children: Vec::new(),
                        });
                        nodes[id].children.push(child);
                        next.push(child);
                    }
                }
                Err(reason) => {
                    rejections.push(RejectedSplit { entry: e, path: path_labels(&nodes, id), reason });
                    next.push(id);
                }
            }
        }
        if next.len() > options.max_paths {
            return Err(Error::PathOverflow { count: next.len(), cap: options.max_paths });
        }
        live = next;
    }
    Ok(Tree {
        protocol: protocol.clone(),
        psi0: psi0.clone(),
        t0,
        blocks: (0..schedule.len()).map(|_| OnceLock::new()).collect(),
        schedule: schedule.to_vec(),
        nodes,
        rejections,
        options: *options,
        propagators: Mutex::new(HashMap::new()),
    })
}

fn path_labels(nodes: &[Node], id: usize) -> Vec<i64> {
    let mut out = Vec::new();
    let mut cur = Some(id);
    while let Some(c) = cur {
        if let Some(ev) = nodes[c].event {
            out.push(ev.label);
        }
        cur = nodes[c].parent;
    }
    out.reverse();
    out
}

impl Tree {
    pub fn psi0(&self) -> &StateVector {
        &self.psi0
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn schedule(&self) -> &[ScheduleEntry] {
        &self.schedule
    }

    pub fn rejections(&self) -> &[RejectedSplit] {
        &self.rejections
    }

    pub fn options(&self) -> &TreeOptions {
        &self.options
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Distinct split times, ascending.
    pub fn split_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.nodes.iter().filter_map(|n| n.event.map(|e| e.time)).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// True when every branch split at every entry (path-independent schedule).
    pub fn is_ideal(&self) -> bool {
        self.rejections.is_empty()
    }

    fn alive_at(&self, id: usize, t: f64) -> bool {
        let n = &self.nodes[id];
        n.born <= t && n.children.first().is_none_or(|&c| self.nodes[c].born > t)
    }

    /// Node ids of paths alive at `t`, ordered by outcome-label sequence.
    pub fn live_nodes(&self, t: f64) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.alive_at(i, t)).collect();
        ids.sort_by_key(|&i| self.events(i).iter().map(|e| (e.entry, e.index)).collect::<Vec<_>>());
        ids
    }

    pub fn events(&self, id: usize) -> Vec<Outcome> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if let Some(ev) = self.nodes[c].event {
                out.push(ev);
            }
            cur = self.nodes[c].parent;
        }
        out.reverse();
        out
    }

    /// Ancestor of `id` (or itself) alive at `t`.
    pub fn ancestor_at(&self, id: usize, t: f64) -> Option<usize> {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if self.nodes[c].born <= t {
                return Some(c);
            }
            cur = self.nodes[c].parent;
        }
        None
    }

    /// Nodes created by the split at schedule entry `entry`, in label order.
    pub fn nodes_from_entry(&self, entry: usize) -> Vec<usize> {
        let mut ids: Vec<usize> =
            (0..self.nodes.len()).filter(|&i| self.nodes[i].event.is_some_and(|e| e.entry == entry)).collect();
        ids.sort_by_key(|&i| self.events(i).iter().map(|e| (e.entry, e.index)).collect::<Vec<_>>());
        ids
    }

    pub fn outcome(&self, id: usize) -> Option<Outcome> {
        self.nodes[id].event
    }

    pub fn born(&self, id: usize) -> f64 {
        self.nodes[id].born
    }

    /// `P_α`, constant between splits.
    pub fn probability(&self, id: usize) -> f64 {
        self.nodes[id].state.norm_sqr()
    }

    /// Component of node `id` at `t ≥ born`, by projector construction.
    pub fn component(&self, id: usize, t: f64) -> Result<StateVector> {
        let n = &self.nodes[id];
        if t < n.born {
            return Err(Error::InvalidArgument(format!("node born at {} queried at {t}", n.born)));
        }
        self.protocol.propagate(&n.state, n.born, t)
    }

    pub fn paths_at(&self, t: f64) -> Result<Vec<PathView>> {
        self.live_nodes(t)
            .into_par_iter()
            .map(|id| {
                Ok(PathView { node: id, events: self.events(id), probability: self.probability(id), component: self.component(id, t)? })
            })
            .collect()
    }

    fn cached_propagator(&self, from: f64, to: f64) -> Result<Arc<Mat<C64>>> {
        let key = (from.to_bits(), to.to_bits());
        if let Some(u) = self.propagators.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(u));
        }
        let u = Arc::new(self.protocol.propagator(from, to)?.mat().clone());
        self.propagators.lock().expect("cache lock").insert(key, Arc::clone(&u));
        Ok(u)
    }

    fn blocks(&self, entry: usize) -> Result<&[BlockHamiltonian]> {
        if let Some(b) = self.blocks[entry].get() {
            return Ok(b);
        }
        let e = &self.schedule[entry];
        let (a, b) = e.window;
        if self.protocol.switch_times().iter().any(|&s| s > a && s < b) {
            return Err(Error::InvalidArgument(format!("window {entry} straddles a Hamiltonian switch")));
        }
        let h = self.protocol.hamiltonian_at(0.5 * (a + b));
        let built = (0..e.family.len()).map(|k| block_hamiltonian(h, &e.family, k)).collect::<Result<Vec<_>>>()?;
        Ok(self.blocks[entry].get_or_init(|| built))
    }

    /// Component via the `W_α` factorization: full evolution between windows,
    /// block evolution `P_μ e^{−iH_μ(t−τ)} P_μ` inside each window the path
    /// split in.
    pub fn component_via_w(&self, id: usize, t: f64) -> Result<StateVector> {
        if !self.alive_at(id, t) && self.nodes[id].born > t {
            return Err(Error::InvalidArgument("path not alive at the query time".into()));
        }
        let mut state = self.psi0.clone();
        let mut cur = self.t0;
        for ev in self.events(id) {
            let (a, b) = self.schedule[ev.entry].window;
            state = self.protocol.propagate(&state, cur, a)?;
            let block = &self.blocks(ev.entry)?[ev.index];
            let projected = self.schedule[ev.entry].family.apply(ev.index, &state);
            let end = b.min(t);
            let grid = TimeGrid::new(a, end - a, 1);
            state = match grid {
                Ok(g) => block.evolve(&projected, &g)?.states.pop().expect("grid has two points"),
                Err(_) => projected,
            };
            cur = end;
        }
        self.protocol.propagate(&state, cur, t)
    }

    /// Same factorization carried out on environment vectors
    /// `φ_i = (⟨i| ⊗ I)Ψ` in the canonical apparatus basis: blocks
    /// `Y_ij = ⟨i|U|j⟩` between windows and `U^E_μ = e^{−iH^E_μ t}` inside.
    /// Requires rank-1 families.
    pub fn env_vectors(&self, id: usize, t: f64) -> Result<Vec<Vec<C64>>> {
        let shape = self.psi0.shape();
        let n = shape.apparatus_dim();
        let env = shape.environment_dim();
        let split = |amps: &[C64]| -> Vec<Vec<C64>> { (0..n).map(|i| amps[i * env..(i + 1) * env].to_vec()).collect() };
        let mut phi = split(self.psi0.amps());
        let mut cur = self.t0;
        let y_step = |phi: &Vec<Vec<C64>>, u: &Mat<C64>| -> Vec<Vec<C64>> {
            (0..n)
                .map(|i| {
                    let mut out = vec![ZERO; env];
                    for (j, pj) in phi.iter().enumerate() {
                        let y = u.as_ref().submatrix(i * env, j * env, env, env);
                        let col = y * faer::ColRef::from_slice(pj);
                        for r in 0..env {
                            out[r] += col[r];
                        }
                    }
                    out
                })
                .collect()
        };
        for ev in self.events(id) {
            let e = &self.schedule[ev.entry];
            if e.family.rank(ev.index) != 1 {
                return Err(Error::InvalidFamily("environment-space route needs rank-1 families".into()));
            }
            let (a, b) = e.window;
            if a > cur {
                phi = y_step(&phi, &*self.cached_propagator(cur, a)?);
            }
            let q = &self.blocks(ev.entry)?[ev.index].basis[0];
            let mut chi = vec![ZERO; env];
            for (i, pi) in phi.iter().enumerate() {
                let c = q[i].conj();
                for r in 0..env {
                    chi[r] += c * pi[r];
                }
            }
            let end = b.min(t);
            let he = &self.blocks(ev.entry)?[ev.index].h;
            let chi = he.spectral()?.evolve(&chi, end - a);
            phi = (0..n).map(|i| chi.iter().map(|x| q[i] * x).collect()).collect();
            cur = end;
        }
        if t > cur {
            phi = y_step(&phi, &*self.cached_propagator(cur, t)?);
        }
        Ok(phi)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DecoherenceMatrix {
    pub time: f64,
    /// Outcome-label sequence of each row.
    pub paths: Vec<Vec<i64>>,
    #[serde(skip)]
    pub entries: Mat<C64>,
}

impl DecoherenceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.entries[(i, i)].re).sum()
    }

    /// Largest `|D_αα'|`, α ≠ α', and where it occurs.
    pub fn max_offdiag(&self) -> (f64, Option<(usize, usize)>) {
        let mut best = (0.0, None);
        for i in 0..self.dim() {
            for j in (i + 1)..self.dim() {
                let v = self.entries[(i, j)].norm();
                if v > best.0 {
                    best = (v, Some((i, j)));
                }
            }
        }
        best
    }
}

fn gram(time: f64, paths: Vec<Vec<i64>>, vecs: &[Vec<C64>]) -> DecoherenceMatrix {
    let m = vecs.len();
    let entries = Mat::from_fn(m, m, |a, b| vecs[a].iter().zip(&vecs[b]).map(|(x, y)| x.conj() * y).sum());
    DecoherenceMatrix { time, paths, entries }
}

/// `D_αα' = ⟨Ψ_α(t)|Ψ_α'(t)⟩` over paths alive at `t`.
pub fn decoherence_matrix(tree: &Tree, t: f64) -> Result<DecoherenceMatrix> {
    let paths = tree.paths_at(t)?;
    let labels = paths.iter().map(|p| p.labels()).collect();
    let vecs: Vec<Vec<C64>> = paths.into_iter().map(|p| p.component.into_amps()).collect();
    Ok(gram(t, labels, &vecs))
}

/// `D_βα = Σ_μ ⟨φ^β_μ|φ^α_μ⟩` from environment vectors (rank-1 families).
pub fn decoherence_matrix_env(tree: &Tree, t: f64) -> Result<DecoherenceMatrix> {
    let ids = tree.live_nodes(t);
    let labels = ids.iter().map(|&id| path_labels(&tree.nodes, id)).collect();
    let vecs: Vec<Vec<C64>> = ids
        .par_iter()
        .map(|&id| Ok(tree.env_vectors(id, t)?.concat()))
        .collect::<Result<_>>()?;
    Ok(gram(t, labels, &vecs))
}

/// `ρ_Υ(t) = Σ_α |Ψ_α(t)⟩⟨Ψ_α(t)|`.
pub fn mixed_state(tree: &Tree, t: f64) -> Result<Operator> {
    let paths = tree.paths_at(t)?;
    let d = tree.psi0.dim();
    let mut m = Mat::<C64>::zeros(d, d);
    for p in &paths {
        let a = p.component.amps();
        for j in 0..d {
            let cj = a[j].conj();
            for i in 0..d {
                m[(i, j)] += a[i] * cj;
            }
        }
    }
    Operator::hermitian(tree.psi0.shape().clone(), m)
}

/// `S_Υ(t) = −Σ_α P_α ln P_α`.
pub fn tree_entropy(tree: &Tree, t: f64) -> f64 {
    tree.live_nodes(t)
        .iter()
        .map(|&id| tree.probability(id))
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// `P_Υ(μ, t)`: total weight of the paths whose component lies in `H_μ`.
pub fn probability_of_value(tree: &Tree, family: &ProjectorFamily, t: f64) -> Result<BTreeMap<i64, f64>> {
    let mut out: BTreeMap<i64, f64> = family.labels().iter().map(|&l| (l, 0.0)).collect();
    for p in tree.paths_at(t)? {
        match family.containing_index(&p.component, tree.options.eps_x.max(1e-10)) {
            Some(k) => *out.get_mut(&family.label(k)).expect("label present") += p.probability,
            None => {
                let weights = family.weights(&p.component);
                return Err(Error::Straddle { path: format!("{:?}", p.labels()), weights });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CoarseFineReport {
    pub time: f64,
    /// For each coarse path (by labels), the fine paths composing it.
    pub mapping: Vec<(Vec<i64>, Vec<Vec<i64>>)>,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Every fine path belongs to exactly one coarse path.
    pub disjoint: bool,
    /// Fine paths not assigned to any coarse path.
    pub unassigned: Vec<Vec<i64>>,
    /// Coarse-tree splits that were rejected where the fine tree split.
    pub invalidated: Vec<RejectedSplit>,
    /// `max_μ |Σ_{α∈s_μ} Σ_{β≠β'∈g_α} ⟨Ψ_β|Ψ_β'⟩|`, grouping coarse paths by
    /// their last outcome. Reported, not part of `pass`.
    pub cross_overlap: f64,
    pub pass: bool,
}

/// Check that each coarse component is the sum of the fine components whose
/// history lies inside its coarse subspaces.
pub fn compare_coarse_fine(fine: &Tree, coarse: &Tree, t: f64, tol: f64) -> Result<CoarseFineReport> {
    let dist = fine.psi0.distance(&coarse.psi0);
    if dist > 1e-12 {
        return Err(Error::DifferentInitialVectors { distance: dist });
    }
    let fine_ids = fine.live_nodes(t);
    let coarse_ids = coarse.live_nodes(t);
    let mut owner: Vec<Vec<usize>> = vec![Vec::new(); fine_ids.len()];
    let mut cache: HashMap<(usize, u64), StateVector> = HashMap::new();
    let mut mapping = Vec::new();
    let mut residuals = Vec::new();
    let mut by_value: BTreeMap<Option<(usize, i64)>, f64> = BTreeMap::new();
    for (ci, &cid) in coarse_ids.iter().enumerate() {
        let events = coarse.events(cid);
        let mut members = Vec::new();
        let mut parts: Vec<StateVector> = Vec::new();
        let mut sum = StateVector::zeros(fine.psi0.shape().clone());
        for (fi, &fid) in fine_ids.iter().enumerate() {
            let mut inside = true;
            for ev in &events {
                let Some(anc) = fine.ancestor_at(fid, ev.time) else {
                    inside = false;
                    break;
                };
                let key = (anc, ev.time.to_bits());
                let s = match cache.entry(key) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => e.insert(fine.component(anc, ev.time)?),
                };
                let fam = &coarse.schedule[ev.entry].family;
                if fam.apply_complement(ev.index, s).norm() > tol * s.norm().max(f64::MIN_POSITIVE) {
                    inside = false;
                    break;
                }
            }
            if inside {
                owner[fi].push(ci);
                members.push(path_labels(&fine.nodes, fid));
                let c = fine.component(fid, t)?;
                sum = sum.add(&c);
                parts.push(c);
            }
        }
        let r = coarse.component(cid, t)?.distance(&sum);
        residuals.push(r);
        let mut cross = 0.0;
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                cross += 2.0 * a.inner(b).re;
            }
        }
        let key = events.last().map(|e| (e.entry, e.label));
        *by_value.entry(key).or_insert(0.0) += cross;
        mapping.push((path_labels(&coarse.nodes, cid), members));
    }
    let disjoint = owner.iter().all(|o| o.len() <= 1);
    let unassigned: Vec<Vec<i64>> = fine_ids
        .iter()
        .zip(&owner)
        .filter(|(_, o)| o.is_empty())
        .map(|(&id, _)| path_labels(&fine.nodes, id))
        .collect();
    // Coarse rejections at entries where the fine tree did split.
    let fine_split_entries: Vec<usize> = fine.nodes.iter().filter_map(|n| n.event.map(|e| e.entry)).collect();
    let invalidated: Vec<RejectedSplit> = coarse
        .rejections
        .iter()
        .filter(|r| fine_split_entries.contains(&r.entry))
        .cloned()
        .collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    let cross_overlap = by_value.values().fold(0.0f64, |m, v| m.max(v.abs()));
    let pass = max_residual <= tol && disjoint && unassigned.is_empty() && invalidated.is_empty();
    Ok(CoarseFineReport { time: t, mapping, residuals, max_residual, disjoint, unassigned, invalidated, cross_overlap, pass })
}

#[derive(Clone, Debug, Serialize)]
pub struct IvrVerdict {
    pub pass: bool,
    pub max_offdiag: f64,
    /// Label sequences of the worst pair and the time it occurs.
    pub worst_pair: Option<(Vec<i64>, Vec<i64>)>,
    pub worst_time: f64,
    pub checkpoints: Vec<f64>,
    /// Largest cross-overlap sum over the coarse variants, measured
    /// separately from `max_offdiag`.
    pub compatibility_residual: f64,
    pub coarse_reports: Vec<CoarseFineReport>,
    pub fine_rejections: Vec<RejectedSplit>,
}

/// Initial-vector restriction check: the fine tree's D stays diagonal within
/// `eps_x` at every checkpoint and every coarse variant composes from it.
pub fn ivr_check(
    protocol: &Protocol,
    psi0: &StateVector,
    t0: f64,
    fine_schedule: &[ScheduleEntry],
    coarse_variants: &[Vec<ScheduleEntry>],
    t_end: f64,
    checkpoints: usize,
    options: &TreeOptions,
) -> Result<IvrVerdict> {
    let fine = grow_tree(protocol, psi0, t0, fine_schedule, options)?;
    let mut times: Vec<f64> = (0..=checkpoints.max(1)).map(|k| t0 + (t_end - t0) * k as f64 / checkpoints.max(1) as f64).collect();
    times.extend(fine.split_times().into_iter().filter(|&s| s <= t_end));
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut max_offdiag = 0.0;
    let mut worst_pair = None;
    let mut worst_time = t0;
    for &t in &times {
        let d = decoherence_matrix(&fine, t)?;
        let (v, pair) = d.max_offdiag();
        if v > max_offdiag {
            max_offdiag = v;
            worst_pair = pair.map(|(i, j)| (d.paths[i].clone(), d.paths[j].clone()));
            worst_time = t;
        }
    }
    let mut coarse_reports = Vec::new();
    for variant in coarse_variants {
        let coarse = grow_tree(protocol, psi0, t0, variant, options)?;
        coarse_reports.push(compare_coarse_fine(&fine, &coarse, t_end, options.eps_x)?);
    }
    let compat = coarse_reports.iter().map(|r| r.cross_overlap).fold(0.0, f64::max);
    let pass = max_offdiag <= options.eps_x && coarse_reports.iter().all(|r| r.pass);
    Ok(IvrVerdict {
        pass,
        max_offdiag,
        worst_pair,
        worst_time,
        checkpoints: times,
        compatibility_residual: compat,
        coarse_reports,
        fine_rejections: fine.rejections.clone(),
    })
}
