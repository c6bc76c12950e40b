//! Loschmidt echoes, dephasing factors, the generalized echo, and the
//! Gaussian / golden-rule rate analysis with saturation.

use serde::{Deserialize, Serialize};

use crate::dynamics::{block_hamiltonian, TimeGrid};
use crate::error::{Error, Result};
use crate::model::{PerturbationStats, ProjectorFamily, TotalModel};
use crate::qcore::{Operator, StateVector, C64, ZERO};

/// Complex echo amplitude `m(t)` sampled on a grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EchoSeries {
    pub times: Vec<f64>,
    pub amplitude: Vec<C64>,
}

impl EchoSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.amplitude.iter().map(|a| a.norm()).collect()
    }

    /// `M(t) = |m(t)|²`.
    pub fn echo(&self) -> Vec<f64> {
        self.amplitude.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn conj(&self) -> Self {
        Self { times: self.times.clone(), amplitude: self.amplitude.iter().map(|a| a.conj()).collect() }
    }
}

/// `m(t) = ⟨ψ|e^{iH₁t} e^{−iH₀t}|ψ⟩` at each grid time (time measured from 0).
pub fn loschmidt_echo(h0: &Operator, h1: &Operator, psi0: &StateVector, grid: &TimeGrid) -> Result<EchoSeries> {
    if h0.dim() != h1.dim() || h0.dim() != psi0.dim() {
        return Err(Error::DimensionMismatch { context: "loschmidt echo", expected: h0.dim(), found: h1.dim().max(psi0.dim()) });
    }
    psi0.require_normalized()?;
    let (s0, s1) = (h0.spectral()?, h1.spectral()?);
    let c0 = s0.to_eigenbasis(psi0.amps());
    let c1 = s1.to_eigenbasis(psi0.amps());
    let times = grid.times();
    let amplitude = times
        .iter()
        .map(|&t| {
            let a = s0.from_eigenbasis(&c0, t);
            let b = s1.from_eigenbasis(&c1, t);
            b.iter().zip(&a).map(|(x, y)| x.conj() * y).sum()
        })
        .collect();
    Ok(EchoSeries { times, amplitude })
}

/// `f_νμ(t) = ⟨φ₀|e^{iH^E_ν t} e^{−iH^E_μ t}|φ₀⟩` for rank-1 members `mu`, `nu`
/// (family indices).
pub fn dephasing_factor(
    model: &TotalModel,
    family: &ProjectorFamily,
    mu: usize,
    nu: usize,
    phi0: &StateVector,
    grid: &TimeGrid,
) -> Result<EchoSeries> {
    if family.rank(mu) != 1 || family.rank(nu) != 1 {
        return Err(Error::InvalidFamily("dephasing factor needs rank-1 members".into()));
    }
    let qm = &family.basis_vectors(mu)[0];
    let qn = &family.basis_vectors(nu)[0];
    let h_mu = model.env_hamiltonian(qm)?;
    let h_nu = model.env_hamiltonian(qn)?;
    loschmidt_echo(&h_mu, &h_nu, phi0, grid)
}

/// `L_G(t) = ⟨φ₀|V†_{nn'}(t) V_{mm'}(t)|φ₀⟩` with
/// `V_{mm'}(t) = ⟨m_μ|e^{−iH_μ t}|m'_μ⟩` acting on the environment.
#[allow(clippy::too_many_arguments)]
pub fn generalized_echo(
    model: &TotalModel,
    family: &ProjectorFamily,
    mu: usize,
    nu: usize,
    m: (&[C64], &[C64]),
    n: (&[C64], &[C64]),
    phi0: &StateVector,
    grid: &TimeGrid,
) -> Result<EchoSeries> {
    if mu == nu {
        return Err(Error::InvalidArgument("generalized echo needs μ ≠ ν".into()));
    }
    let a = block_env_evolution(model, family, mu, m, phi0, grid)?;
    let b = block_env_evolution(model, family, nu, n, phi0, grid)?;
    let amplitude = a
        .iter()
        .zip(&b)
        .map(|(x, y)| y.iter().zip(x).map(|(p, q)| p.conj() * q).sum())
        .collect();
    Ok(EchoSeries { times: grid.times(), amplitude })
}

/// `V_{ab}(t)|φ₀⟩` for every grid time.
fn block_env_evolution(
    model: &TotalModel,
    family: &ProjectorFamily,
    k: usize,
    (bra, ket): (&[C64], &[C64]),
    phi0: &StateVector,
    grid: &TimeGrid,
) -> Result<Vec<Vec<C64>>> {
    let n = family.apparatus_dim();
    let p = family.projector(k);
    for v in [bra, ket] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { context: "block basis vector", expected: n, found: v.len() });
        }
        let pv = crate::qcore::matvec(p.mat(), v);
        let outside: f64 = pv.iter().zip(v).map(|(x, y)| (y - x).norm_sqr()).sum::<f64>().sqrt();
        if outside > 1e-10 {
            return Err(Error::OutsideSubspace { weight: outside });
        }
    }
    let block = block_hamiltonian(model.h_total(), family, k)?;
    let env = model.environment_dim();
    // Coordinates of |ket⟩ ⊗ φ₀ in the block basis.
    let r = block.rank();
    let mut coords = vec![ZERO; r * env];
    let mut bra_c = vec![ZERO; r];
    for (a, q) in block.basis.iter().enumerate() {
        let ck: C64 = q.iter().zip(ket).map(|(x, y)| x.conj() * y).sum();
        bra_c[a] = q.iter().zip(bra).map(|(x, y)| x.conj() * y).sum();
        for j in 0..env {
            coords[a * env + j] = ck * phi0.amps()[j];
        }
    }
    let spec = block.h.spectral()?;
    let c = spec.to_eigenbasis(&coords);
    Ok(grid
        .times()
        .iter()
        .map(|&t| {
            let v = spec.from_eigenbasis(&c, t);
            (0..env)
                .map(|j| (0..r).map(|a| bra_c[a].conj() * v[a * env + j]).sum())
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Gaussian,
    #[serde(rename = "FGR")]
    Fgr,
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOptions {
    /// Accuracy factor `k` in the decoherence-time prediction.
    pub k_accuracy: f64,
    /// Relative half-width around `ε_p` declared indeterminate.
    pub border_band: f64,
    /// Upper bound on `|f|` for the fit window.
    pub fit_upper: f64,
    /// Lower bound on `|f|²` as a multiple of the saturation level.
    pub saturation_factor: f64,
}

impl RateOptions {
    /// `k = −ln ε_x`: the amplitude `|f| ~ e^{−Γt/2}` reaches `ε_x` at `2k/Γ`.
    pub fn for_eps_x(eps_x: f64) -> Self {
        Self { k_accuracy: -eps_x.ln(), ..Self::default() }
    }
}

impl Default for RateOptions {
    fn default() -> Self {
        Self { k_accuracy: -(crate::dynamics::DEFAULT_EPS_X.ln()), border_band: 0.1, fit_upper: 0.9, saturation_factor: 3.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EchoReport {
    pub stats: PerturbationStats,
    pub eps_p: f64,
    pub regime: Regime,
    /// Rate of the fitted law: `Γ` for `|f|² ~ e^{−Γt}`, or `ε²σ_v²` for
    /// `|f| ~ e^{−ε²σ_v²t²/2}`.
    pub fitted_rate: f64,
    pub predicted_rate: f64,
    pub predicted_tau_d: f64,
    pub saturation: f64,
    pub fit_window: (f64, f64),
    pub fit_points: usize,
    pub notes: Vec<String>,
}

impl EchoReport {
    pub fn relative_error(&self) -> f64 {
        (self.fitted_rate - self.predicted_rate).abs() / self.predicted_rate
    }
}

/// Mean of `|f|²` over the final quarter.
pub fn saturation_level(series: &EchoSeries) -> f64 {
    let m = series.echo();
    let start = m.len() - (m.len() / 4).max(1);
    m[start..].iter().sum::<f64>() / (m.len() - start) as f64
}

/// Least-squares slope and intercept of `y` against `x`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn rate_analysis(stats: &PerturbationStats, series: &EchoSeries, opts: &RateOptions) -> Result<EchoReport> {
    if series.len() < 8 {
        return Err(Error::SeriesTooShort(format!("{} samples", series.len())));
    }
    let eps_p = if stats.sigma_v == 0.0 { 0.0 } else { stats.perturbative_border() };
    let eps = stats.epsilon;
    let mut notes = Vec::new();
    let mut regime = if eps_p > 0.0 && (eps / eps_p - 1.0).abs() <= opts.border_band {
        Regime::Indeterminate
    } else if eps < eps_p {
        Regime::Gaussian
    } else {
        Regime::Fgr
    };
    let gaussian = regime == Regime::Gaussian;
    let predicted_rate = if gaussian { stats.gaussian_rate() } else { stats.fgr_rate() };
    let predicted_tau_d = if gaussian {
        (2.0 * opts.k_accuracy).sqrt() / (eps * stats.sigma_v)
    } else {
        opts.k_accuracy * stats.delta / (std::f64::consts::PI * eps * eps * stats.v_nd_sq)
    };

    let saturation = saturation_level(series);
    let mag = series.magnitude();
    let t = &series.times;
    let floor = opts.saturation_factor * saturation;
    let first = mag.iter().position(|&m| m <= opts.fit_upper);
    let first = first.ok_or_else(|| Error::SeriesTooShort("echo never drops below the fit window".into()))?;
    let last = (first..mag.len()).find(|&i| mag[i] * mag[i] < floor).unwrap_or(mag.len());
    let decay_time = if gaussian { predicted_rate.sqrt().recip() } else { predicted_rate.recip() };
    let span = t[t.len() - 1] - t[0];
    if last == mag.len() && span < 3.0 * decay_time {
        return Err(Error::SeriesTooShort(format!(
            "series spans {span:.3e}, under three decay times ({:.3e}) and never saturates",
            3.0 * decay_time
        )));
    }
    if last < first + 3 {
        return Err(Error::SeriesTooShort(format!("fit window holds {} points", last.saturating_sub(first))));
    }

    // Early decay down to |f| = 1/2 should be monotone.
    let early_end = mag.iter().position(|&m| m < 0.5).unwrap_or(mag.len());
    let mut running = f64::INFINITY;
    for &m in &mag[..early_end] {
        if m > running + 0.02 {
            notes.push("non-monotone early decay".into());
            regime = Regime::Indeterminate;
            break;
        }
        running = running.min(m);
    }
    if regime == Regime::Indeterminate && notes.is_empty() {
        notes.push(format!("ε = {eps:.4e} within {:.0}% of ε_p = {eps_p:.4e}", 100.0 * opts.border_band));
    }

    let xs: Vec<f64> = t[first..last].iter().map(|&x| if gaussian { x * x } else { x }).collect();
    let ys: Vec<f64> = mag[first..last].iter().map(|m| m.ln()).collect();
    let (slope, _) = linear_fit(&xs, &ys);
    // ln|f| = −(Γ/2) t  or  −(ε²σ_v²/2) t².
    let fitted_rate = -2.0 * slope;
    Ok(EchoReport {
        stats: *stats,
        eps_p,
        regime,
        fitted_rate,
        predicted_rate,
        predicted_tau_d,
        saturation,
        fit_window: (t[first], t[last - 1]),
        fit_points: last - first,
        notes,
    })
}
