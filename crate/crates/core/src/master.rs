//! Ideal branching: per-step transition rates, the master-equation iteration
//! and its discrepancy from exact path sums, and the apparatus entropy.
//!
//! Step `n` (1-based) runs from the n-th split time to the (n+1)-th.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tree::{tree_entropy, Tree};

#[derive(Clone, Debug, Serialize)]
pub struct PathRates {
    pub path: Vec<i64>,
    /// `μ^α_(n)`.
    pub from: i64,
    pub probability: f64,
    /// `Γ_n(α, μ)` over the labels.
    pub rates: Vec<f64>,
    /// `δΓ_n(α, μ)`.
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransitionMatrix {
    pub step: usize,
    pub labels: Vec<i64>,
    /// `Γ_n(μ', μ)`, unweighted mean over paths; `None` when no path has `μ'`.
    pub gamma: Vec<Option<Vec<f64>>>,
    /// Probability-weighted variant, for comparison only.
    pub weighted: Vec<Option<Vec<f64>>>,
    pub raw: Vec<PathRates>,
    /// Paths per `μ'`.
    pub path_counts: Vec<usize>,
}

impl TransitionMatrix {
    pub fn total_paths(&self) -> usize {
        self.path_counts.iter().sum()
    }

    /// Largest entrywise gap between the unweighted and weighted averages.
    pub fn weighting_discrepancy(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.gamma.iter().zip(&self.weighted) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter().zip(b) {
                    d = d.max((x - y).abs());
                }
            }
        }
        d
    }

    /// Identity-like constructor, mainly for tests and dry runs.
    pub fn from_rows(step: usize, labels: Vec<i64>, rows: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let k = labels.len();
        for r in rows.iter().flatten() {
            if r.len() != k {
                return Err(Error::DimensionMismatch { context: "transition row", expected: k, found: r.len() });
            }
        }
        if rows.len() != k {
            return Err(Error::DimensionMismatch { context: "transition rows", expected: k, found: rows.len() });
        }
        Ok(Self { step, labels, weighted: rows.clone(), gamma: rows, raw: Vec::new(), path_counts: vec![0; k] })
    }
}

fn require_ideal(tree: &Tree) -> Result<Vec<i64>> {
    if !tree.is_ideal() {
        return Err(Error::NotIdealSchedule(format!("{} branch(es) did not split at a scheduled entry", tree.rejections().len())));
    }
    let sched = tree.schedule();
    let Some(first) = sched.first() else {
        return Err(Error::NotIdealSchedule("empty schedule".into()));
    };
    let labels = first.family.labels().to_vec();
    if sched.iter().any(|e| e.family.labels() != labels.as_slice()) {
        return Err(Error::NotIdealSchedule("entries use different label sets".into()));
    }
    Ok(labels)
}

/// Exact `p_μ(t_n)`: sum of `P_α` over paths created at split `n` with last
/// outcome `μ`.
pub fn exact_populations(tree: &Tree, n: usize) -> Result<Vec<f64>> {
    let labels = require_ideal(tree)?;
    if n == 0 || n > tree.schedule().len() {
        return Err(Error::InvalidArgument(format!("split index {n} outside 1..={}", tree.schedule().len())));
    }
    let mut p = vec![0.0; labels.len()];
    for id in tree.nodes_from_entry(n - 1) {
        let ev = tree.outcome(id).expect("split node has an outcome");
        p[ev.index] += tree.probability(id);
    }
    Ok(p)
}

/// `Γ_n(α, μ) = ⟨Ψ_α|U†P_μU|Ψ_α⟩ / P_α` with `U = U(t_{n+1}, t_n)`, and its
/// averages over paths sharing `μ^α_(n)`.
pub fn step_rates(tree: &Tree, n: usize) -> Result<TransitionMatrix> {
    let labels = require_ideal(tree)?;
    let k = tree.schedule().len();
    if n == 0 || n >= k {
        return Err(Error::InvalidArgument(format!("step {n} outside 1..{k}")));
    }
    let t_n = tree.schedule()[n - 1].split_at();
    let t_next = tree.schedule()[n].split_at();
    let family = &tree.schedule()[n].family;
    let ids = tree.nodes_from_entry(n - 1);
    let raw: Vec<(Vec<i64>, usize, f64, Vec<f64>)> = {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|&id| {
                let p = tree.probability(id);
                let psi = tree.component(id, t_n)?;
                let phi = tree.protocol().propagate(&psi, t_n, t_next)?;
                let rates = (0..family.len()).map(|m| family.apply(m, &phi).norm_sqr() / p).collect();
                let path = tree.events(id).iter().map(|e| e.label).collect();
                Ok((path, tree.outcome(id).expect("split node").index, p, rates))
            })
            .collect::<Result<_>>()?
    };
    let m = labels.len();
    let mut sums = vec![vec![0.0; m]; m];
    let mut wsums = vec![vec![0.0; m]; m];
    let mut counts = vec![0usize; m];
    let mut weights = vec![0.0; m];
    for (_, from, p, rates) in &raw {
        counts[*from] += 1;
        weights[*from] += p;
        for mu in 0..m {
            sums[*from][mu] += rates[mu];
            wsums[*from][mu] += p * rates[mu];
        }
    }
    let gamma: Vec<Option<Vec<f64>>> = (0..m)
        .map(|r| (counts[r] > 0).then(|| sums[r].iter().map(|s| s / counts[r] as f64).collect()))
        .collect();
    let weighted = (0..m)
        .map(|r| (counts[r] > 0 && weights[r] > 0.0).then(|| wsums[r].iter().map(|s| s / weights[r]).collect()))
        .collect();
    let raw = raw
        .into_iter()
        .map(|(path, from, probability, rates)| {
            let avg = gamma[from].as_ref().expect("row has this path");
            let delta = rates.iter().zip(avg).map(|(r, a)| r - a).collect();
            PathRates { path, from: labels[from], probability, rates, delta }
        })
        .collect();
    Ok(TransitionMatrix { step: n, labels, gamma, weighted, raw, path_counts: counts })
}

/// `p_μ(t_{n+1}) = Σ_μ' Γ_n(μ', μ) p_μ'(t_n)`.
pub fn master_step(p: &[f64], gamma: &TransitionMatrix) -> Result<Vec<f64>> {
    let m = gamma.labels.len();
    if p.len() != m {
        return Err(Error::DimensionMismatch { context: "population vector", expected: m, found: p.len() });
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("populations sum to {total}, not 1")));
    }
    let mut out = vec![0.0; m];
    for (r, &pr) in p.iter().enumerate() {
        match &gamma.gamma[r] {
            Some(row) => {
                for (o, g) in out.iter_mut().zip(row) {
                    *o += g * pr;
                }
            }
            None if pr.abs() > 1e-15 => return Err(Error::UndefinedRow { label: gamma.labels[r] }),
            None => {}
        }
    }
    Ok(out)
}

/// `S_R = −Σ_μ p_μ ln p_μ`, with `0 ln 0 = 0`.
pub fn apparatus_entropy(p: &[f64]) -> Result<f64> {
    if let Some(&bad) = p.iter().find(|&&x| x < -1e-12) {
        return Err(Error::InvalidArgument(format!("negative population {bad}")));
    }
    Ok(p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum())
}

#[derive(Clone, Debug, Serialize)]
pub struct PopulationStep {
    /// Split index `n` (populations at `t_n`).
    pub n: usize,
    pub time: f64,
    pub p_exact: Vec<f64>,
    pub p_master: Vec<f64>,
    /// One-step discrepancy `p(t_n) − Σ Γ_{n−1} p(t_{n−1})`; zero at `n = 1`.
    pub delta_p: Vec<f64>,
    /// Paths entering the step that produced these populations.
    pub paths: usize,
    pub bound: f64,
    pub within_bound: bool,
    pub entropy_r: f64,
    pub entropy_tree: f64,
    pub weighting_discrepancy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PopulationSeries {
    pub labels: Vec<i64>,
    pub steps: Vec<PopulationStep>,
    pub all_within_bound: bool,
}

impl PopulationSeries {
    /// Rows `(step, label, p_exact, p_master, Δp, S_R)`.
    pub fn rows(&self) -> Vec<(usize, i64, f64, f64, f64, f64)> {
        let mut out = Vec::new();
        for s in &self.steps {
            for (k, &l) in self.labels.iter().enumerate() {
                out.push((s.n, l, s.p_exact[k], s.p_master[k], s.delta_p[k], s.entropy_r));
            }
        }
        out
    }
}

/// Exact populations versus the iterated master equation for `steps` steps.
pub fn master_vs_exact(tree: &Tree, steps: usize) -> Result<PopulationSeries> {
    let labels = require_ideal(tree)?;
    let k = tree.schedule().len();
    if steps + 1 > k {
        return Err(Error::InvalidArgument(format!("{steps} steps need {} splits, tree has {k}", steps + 1)));
    }
    let p1 = exact_populations(tree, 1)?;
    let t1 = tree.schedule()[0].split_at();
    let mut out = vec![PopulationStep {
        n: 1,
        time: t1,
        p_exact: p1.clone(),
        p_master: p1.clone(),
        delta_p: vec![0.0; labels.len()],
        paths: 1,
        bound: 5.0,
        within_bound: true,
        entropy_r: apparatus_entropy(&p1)?,
        entropy_tree: tree_entropy(tree, t1),
        weighting_discrepancy: 0.0,
    }];
    let mut p_exact = p1.clone();
    let mut p_master = p1;
    for n in 1..=steps {
        let gamma = step_rates(tree, n)?;
        let next_exact = exact_populations(tree, n + 1)?;
        let predicted = master_step(&p_exact, &gamma)?;
        let delta_p: Vec<f64> = next_exact.iter().zip(&predicted).map(|(a, b)| a - b).collect();
        p_master = master_step(&normalize(&p_master), &gamma)?;
        let m_n = gamma.total_paths();
        let bound = 5.0 / (m_n as f64).sqrt();
        let time = tree.schedule()[n].split_at();
        out.push(PopulationStep {
            n: n + 1,
            time,
            p_exact: next_exact.clone(),
            p_master: p_master.clone(),
            within_bound: delta_p.iter().all(|d| d.abs() <= bound),
            delta_p,
            paths: m_n,
            bound,
            entropy_r: apparatus_entropy(&next_exact)?,
            entropy_tree: tree_entropy(tree, time),
            weighting_discrepancy: gamma.weighting_discrepancy(),
        });
        p_exact = next_exact;
    }
    let all_within_bound = out.iter().all(|s| s.within_bound);
    Ok(PopulationSeries { labels, steps: out, all_within_bound })
}

// Iterated populations drift from 1 only by rounding; renormalize so the
// master_step precondition stays meaningful.
fn normalize(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter().map(|x| x / s).collect()
}
