use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use qbranch::dynamics::{isolatable_check, ntc_evaluate, Protocol, TimeGrid};
use qbranch::echo::{dephasing_factor, rate_analysis, EchoReport, EchoSeries, RateOptions, Regime};
use qbranch::master::master_vs_exact;
use qbranch::measure::{run_measurement, MeasurementScenario};
use qbranch::model::{
    apparatus_state, build_nlevel_model, central_band_state, eigenprojector_family, haar_state, perturbation_stats,
    product_state, random_apparatus_state, random_dephasing_couplings, unit_vec, EnsembleSpec, ProjectorFamily,
    TotalModel,
};
use qbranch::robservable::{certify_r_observable, default_ensemble, Tolerance};
use qbranch::scenarios::{echo_setup, ivr_scenario, kicked_dephasing, BranchingSetup, EnvState, IvrSpec, KickSpec};
use qbranch::tree::{decoherence_matrix, grow_tree, ivr_check, tree_entropy, Outcome, RejectedSplit, TreeOptions};
use qbranch::{SpaceShape, StateVector, C64};

use crate::output::{num, Artifact, Csv};
use crate::scenario::{
    ApparatusKind, ApparatusSpec, EchoParams, EnvStateSpec, Experiment, FamilyKind, FamilySpec, IsolatableParams,
    IvrParams, KickParams, MasterParams, MeasureParams, ModelSpec, NtcParams, RobsParams, Scenario, StateSpec,
    TreeParams,
};

/// Settings from the command line that override or extend the scenario.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub max_paths: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub pass: bool,
    pub summary: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

// Sub-seeds for the pieces drawn from the scenario seed.
const APPARATUS_SEED: u64 = 1;
const ENVIRONMENT_SEED: u64 = 2;
const ENSEMBLE_SEED: u64 = 3;

pub fn run(s: &Scenario, o: Overrides) -> Result<RunOutcome> {
    let opts = TreeOptions {
        eps_x: s.eps_x,
        max_paths: o.max_paths.unwrap_or(qbranch::tree::DEFAULT_MAX_PATHS),
        ..TreeOptions::default()
    };
    match &s.experiment {
        Experiment::Ntc(p) => ntc(s, p),
        Experiment::Robs(p) => robs(s, p),
        Experiment::Echo(p) => echo(s, p),
        Experiment::Tree(p) => tree(s, p, &opts),
        Experiment::Ivr(p) => ivr(s, p, &opts),
        Experiment::Measure(p) => measure(s, p),
        Experiment::Master(p) => master(s, p, &opts),
        Experiment::Isolatable(p) => isolatable(s, p),
    }
}

fn model_spec(s: &Scenario) -> &ModelSpec {
    s.model.as_ref().expect("schema check guarantees a model")
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<TotalModel> {
    let env = spec.environment.dim.get();
    let ens = EnsembleSpec {
        kind: spec.environment.ensemble,
        dim: env,
        spacing: spec.environment.spacing.0,
        seed,
        band: spec.environment.band.map_or(4, |b| b.get()),
    };
    let levels: Vec<f64> = spec.levels.iter().map(|l| l.0).collect();
    let couplings = random_dephasing_couplings(levels.len(), env, seed)?;
    Ok(build_nlevel_model(&levels, ens.generate()?, &couplings, spec.coupling.0)?)
}

fn env_state(model: &TotalModel, spec: EnvStateSpec, seed: u64) -> Result<StateVector> {
    let shape = model.shape().environment_shape();
    let seed = seed.wrapping_add(ENVIRONMENT_SEED);
    Ok(match spec {
        EnvStateSpec::Haar => haar_state(shape, seed),
        EnvStateSpec::Ground => StateVector::basis(shape, 0)?,
        EnvStateSpec::CentralBand(f) => {
            let h0 = model.env_hamiltonian(&unit_vec(model.apparatus_dim(), 0))?;
            central_band_state(&h0, f.0, seed)?
        }
    })
}

fn coefficients(c: &[crate::scenario::Coef]) -> Vec<C64> {
    c.iter().map(|c| c.0).collect()
}

fn initial_state(model: &TotalModel, spec: &StateSpec, seed: u64) -> Result<StateVector> {
    let n = model.apparatus_dim();
    let r = match &spec.apparatus {
        ApparatusSpec::Named(ApparatusKind::Random) => random_apparatus_state(n, seed.wrapping_add(APPARATUS_SEED)),
        ApparatusSpec::Named(ApparatusKind::Uniform) => apparatus_state(&vec![C64::new(1.0, 0.0); n])?,
        ApparatusSpec::Coefficients(c) => apparatus_state(&coefficients(c)).context("apparatus coefficients")?,
    };
    Ok(product_state(&r, &env_state(model, spec.environment, seed)?)?)
}

fn family(model: &TotalModel, spec: &FamilySpec) -> Result<ProjectorFamily> {
    let n = model.apparatus_dim();
    Ok(match spec {
        FamilySpec::Named(FamilyKind::Levels) => eigenprojector_family(model.h_r(), None)?,
        FamilySpec::Named(FamilyKind::Computational) => ProjectorFamily::computational(n)?,
        FamilySpec::Groups { groups } => {
            let subspaces: Vec<Vec<Vec<C64>>> =
                groups.iter().map(|g| g.iter().map(|i| unit_vec(n, i.get())).collect()).collect();
            ProjectorFamily::from_subspaces(n, &subspaces)?
        }
    })
}

fn ntc(s: &Scenario, p: &NtcParams) -> Result<RunOutcome> {
    let model = build_model(model_spec(s), s.seed)?;
    let fam = family(&model, &p.family)?;
    let psi0 = initial_state(&model, &p.state, s.seed)?;
    let protocol = Protocol::constant_shared(model.h_total_shared());
    let (a, b) = (p.window.0 .0, p.window.1 .0);
    let psi_a = protocol.propagate(&psi0, 0.0, a)?;
    let grid = TimeGrid::spanning(a, b, p.steps.get())?;
    let rep = ntc_evaluate(&protocol, &psi_a, &fam, &grid, s.eps_x)?;

    let mut header = vec!["t".to_string()];
    header.extend(rep.labels.iter().map(|l| format!("leakage_{l}")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, t) in rep.times.iter().enumerate() {
        let mut row = vec![num(*t)];
        row.extend(rep.leakage.iter().map(|c| num(c[i])));
        csv.row(&row);
    }
    let summary = vec![format!(
        "max leakage {:.3e} (label {}, t = {:.4}) vs eps_x {:.1e}: {}",
        rep.max_leakage,
        rep.worst_label,
        rep.worst_time,
        s.eps_x,
        verdict(rep.verdict)
    )];
    Ok(RunOutcome {
        pass: rep.verdict,
        summary,
        artifacts: vec![Artifact::json("ntc.json", &rep)?, Artifact::csv("ntc_leakage.csv", csv)],
    })
}

fn robs(s: &Scenario, p: &RobsParams) -> Result<RunOutcome> {
    let model = build_model(model_spec(s), s.seed)?;
    let fam = family(&model, &p.family)?;
    let phi = env_state(&model, p.environment, s.seed)?;
    let ensemble = default_ensemble(&fam, &phi, p.ensemble.get(), s.seed.wrapping_add(ENSEMBLE_SEED))?;
    let protocol = Protocol::constant_shared(model.h_total_shared());
    let grid = TimeGrid::spanning(p.window.0 .0, p.window.1 .0, p.steps.get())?;
    let cert = certify_r_observable(&protocol, &fam, &ensemble, &grid, &Tolerance::new(s.eps_x)?);
    let cert = match cert {
        Ok(c) => c,
        Err(e @ qbranch::Error::NtcViolated { .. }) => bail!("family fails the non-transition condition: {e}"),
        Err(e) => return Err(e.into()),
    };
    let mut csv = Csv::new(&["t", "worst_offblock"]);
    for (t, v) in cert.times.iter().zip(&cert.worst_offblock) {
        csv.row(&[num(*t), num(*v)]);
    }
    let passed = cert.pass_per_state.iter().filter(|&&x| x).count();
    let summary = vec![format!(
        "{} of {} ensemble states decohere within eps_x {:.1e}; tau_d = {}: {}",
        passed,
        cert.members,
        s.eps_x,
        cert.tau_d.map_or("-".into(), |t| format!("{t:.4}")),
        verdict(cert.verdict)
    )];
    Ok(RunOutcome {
        pass: cert.verdict,
        summary,
        artifacts: vec![Artifact::json("certificate.json", &cert)?, Artifact::csv("robs_offblock.csv", csv)],
    })
}

fn echo_series_csv(series: &EchoSeries) -> Csv {
    let mut csv = Csv::new(&["t", "re_m", "im_m", "abs_m", "M"]);
    for (t, m) in series.times.iter().zip(&series.amplitude) {
        csv.row(&[num(*t), num(m.re), num(m.im), num(m.norm()), num(m.norm_sqr())]);
    }
    csv
}

#[derive(Serialize)]
struct EchoSummary {
    regime: Regime,
    seeds: Vec<u64>,
    mean_fitted_rate: f64,
    mean_predicted_rate: f64,
    relative_error: f64,
    rate_tolerance: f64,
    pass: bool,
    runs: Vec<EchoReport>,
}

/// One seed of the echo experiment: report plus the sampled series.
fn echo_run(s: &Scenario, p: &EchoParams, seed: u64) -> Result<(EchoReport, EchoSeries)> {
    let spec = model_spec(s);
    let state = match p.environment {
        EnvStateSpec::Haar => EnvState::Haar,
        EnvStateSpec::CentralBand(f) => EnvState::CentralBand(f.0),
        EnvStateSpec::Ground => bail!("echo: environment `ground` is not supported; use `haar` or `central_band`"),
    };
    let (model, fam, stats, phi0, mu, nu) = match p.ratio {
        Some(r) => {
            let e = echo_setup(spec.environment.dim.get(), r.0, seed, state)?;
            (e.model, e.family, e.stats, e.phi0, 0, 1)
        }
        None => {
            let (mu, nu) = (p.mu.get(), p.nu.get());
            let model = build_model(spec, seed)?;
            let n = model.apparatus_dim();
            let stats = perturbation_stats(&model, &unit_vec(n, mu), &unit_vec(n, nu))?;
            let phi0 = match state {
                EnvState::Haar => haar_state(model.shape().environment_shape(), seed.wrapping_add(ENVIRONMENT_SEED)),
                EnvState::CentralBand(f) => central_band_state(
                    &model.env_hamiltonian(&unit_vec(n, mu))?,
                    f,
                    seed.wrapping_add(ENVIRONMENT_SEED),
                )?,
            };
            (model, ProjectorFamily::computational(n)?, stats, phi0, mu, nu)
        }
    };
    let t_end = match p.t_end {
        Some(t) => t.0,
        None if stats.epsilon >= stats.perturbative_border() => 15.0 / stats.fgr_rate(),
        None => 8.0 / stats.gaussian_rate().sqrt(),
    };
    let grid = TimeGrid::spanning(0.0, t_end, p.steps.get())?;
    let series = dephasing_factor(&model, &fam, mu, nu, &phi0, &grid)?;
    let rep = rate_analysis(&stats, &series, &RateOptions::for_eps_x(s.eps_x))?;
    Ok((rep, series))
}

fn echo(s: &Scenario, p: &EchoParams) -> Result<RunOutcome> {
    let seeds: Vec<u64> = (0..p.seeds.0).map(|k| s.seed.wrapping_add(k)).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut first_series = None;
    for &seed in &seeds {
        let (rep, series) = echo_run(s, p, seed).with_context(|| format!("seed {seed}"))?;
        first_series.get_or_insert(series);
        runs.push(rep);
    }
    let k = runs.len() as f64;
    let fitted = runs.iter().map(|r| r.fitted_rate).sum::<f64>() / k;
    let predicted = runs.iter().map(|r| r.predicted_rate).sum::<f64>() / k;
    let rel = (fitted - predicted).abs() / predicted;
    let regime = if runs.iter().all(|r| r.regime == runs[0].regime) { runs[0].regime } else { Regime::Indeterminate };
    let pass = regime != Regime::Indeterminate && rel <= p.rate_tolerance.0;
    let mut summary: Vec<String> = runs
        .iter()
        .zip(&seeds)
        .map(|(r, seed)| {
            format!(
                "seed {seed}: regime {:?}, eps/eps_p = {:.3}, fitted {:.4e}, predicted {:.4e}",
                r.regime,
                r.stats.epsilon / r.eps_p,
                r.fitted_rate,
                r.predicted_rate
            )
        })
        .collect();
    summary.push(format!(
        "mean fitted rate {fitted:.4e} vs predicted {predicted:.4e} (relative error {:.1}%, allowed {:.0}%): {}",
        100.0 * rel,
        100.0 * p.rate_tolerance.0,
        verdict(pass)
    ));
    let report = EchoSummary {
        regime,
        seeds,
        mean_fitted_rate: fitted,
        mean_predicted_rate: predicted,
        relative_error: rel,
        rate_tolerance: p.rate_tolerance.0,
        pass,
        runs,
    };
    let series = first_series.expect("at least one seed");
    Ok(RunOutcome {
        pass,
        summary,
        artifacts: vec![Artifact::json("echo.json", &report)?, Artifact::csv("echo_series.csv", echo_series_csv(&series))],
    })
}

fn kicked(model: &TotalModel, psi0: &StateVector, k: &KickParams, seed: u64) -> Result<BranchingSetup> {
    let spec = KickSpec {
        splits: k.splits.get(),
        window: k.window.0,
        kick_duration: k.kick_duration.0,
        kick_strength: k.kick_strength.0,
        env_dependent: k.env_dependent,
        seed,
    };
    Ok(kicked_dephasing(model, psi0, &spec)?)
}

#[derive(Serialize)]
struct PathRecord {
    labels: Vec<i64>,
    events: Vec<Outcome>,
    probability: f64,
}

#[derive(Serialize)]
struct TreeManifest {
    t_end: f64,
    split_times: Vec<f64>,
    node_count: usize,
    paths: Vec<PathRecord>,
    rejections: Vec<RejectedSplit>,
    max_decomposition_residual: f64,
    max_probability_error: f64,
    max_offdiag: f64,
}

fn tree(s: &Scenario, p: &TreeParams, opts: &TreeOptions) -> Result<RunOutcome> {
    let model = build_model(model_spec(s), s.seed)?;
    let psi0 = initial_state(&model, &p.state, s.seed)?;
    let setup = kicked(&model, &psi0, &p.kicks, s.seed)?;
    let tree = grow_tree(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, opts)?;

    let k = p.checkpoints.get().max(1);
    let mut checks = Csv::new(&["t", "paths", "decomposition_residual", "probability_sum", "entropy"]);
    let (mut worst_res, mut worst_p) = (0.0f64, 0.0f64);
    for i in 0..=k {
        let t = setup.t_end * i as f64 / k as f64;
        let psi = setup.protocol.propagate(&setup.psi0, 0.0, t)?;
        let paths = tree.paths_at(t)?;
        let mut sum = StateVector::zeros(psi.shape().clone());
        let mut total = 0.0;
        for v in &paths {
            sum = sum.add(&v.component);
            total += v.probability;
        }
        let res = sum.distance(&psi);
        worst_res = worst_res.max(res);
        worst_p = worst_p.max((total - 1.0).abs());
        checks.row(&[num(t), paths.len().to_string(), num(res), num(total), num(tree_entropy(&tree, t))]);
    }

    let mut paths = tree.paths_at(setup.t_end)?;
    paths.sort_by_key(|v| v.labels());
    let d = decoherence_matrix(&tree, setup.t_end)?;
    // D rows follow paths_at order; reindex to the sorted order.
    let order: Vec<usize> = paths.iter().map(|v| d.paths.iter().position(|l| *l == v.labels()).expect("same paths")).collect();
    let mut dcsv = Csv::new(&["row", "col", "re", "im"]);
    for (i, &a) in order.iter().enumerate() {
        for (j, &b) in order.iter().enumerate() {
            let z = d.entries[(a, b)];
            dcsv.row(&[i.to_string(), j.to_string(), num(z.re), num(z.im)]);
        }
    }
    let max_offdiag = d.max_offdiag().0;
    let mut artifacts = Vec::new();
    if p.dump_components {
        let mut c = Csv::new(&["path", "index", "re", "im"]);
        for (i, v) in paths.iter().enumerate() {
            for (j, z) in v.component.amps().iter().enumerate() {
                c.row(&[i.to_string(), j.to_string(), num(z.re), num(z.im)]);
            }
        }
        artifacts.push(Artifact::csv("components.csv", c));
    }
    let manifest = TreeManifest {
        t_end: setup.t_end,
        split_times: tree.split_times(),
        node_count: tree.node_count(),
        paths: paths
            .iter()
            .map(|v| PathRecord { labels: v.labels(), events: v.events.clone(), probability: v.probability })
            .collect(),
        rejections: tree.rejections().to_vec(),
        max_decomposition_residual: worst_res,
        max_probability_error: worst_p,
        max_offdiag,
    };
    let pass = worst_res <= 1e-9 && worst_p <= 1e-9;
    let summary = vec![
        format!(
            "{} paths at t = {:.3} after {} splits ({} rejected)",
            paths.len(),
            setup.t_end,
            setup.schedule.len(),
            tree.rejections().len()
        ),
        format!(
            "decomposition residual {worst_res:.2e}, |sum P - 1| {worst_p:.2e} (limit 1e-9); max |D_off| {max_offdiag:.3e}: {}",
            verdict(pass)
        ),
    ];
    artifacts.insert(0, Artifact::json("tree.json", &manifest)?);
    artifacts.push(Artifact::csv("tree_checks.csv", checks));
    artifacts.push(Artifact::csv("decoherence.csv", dcsv));
    Ok(RunOutcome { pass, summary, artifacts })
}

fn ivr(s: &Scenario, p: &IvrParams, opts: &TreeOptions) -> Result<RunOutcome> {
    let spec = IvrSpec { env: p.env.get(), lambda: p.lambda.0, tau_d: p.tau_d.0, theta: p.theta.0, seed: s.seed };
    let (setup, coarse) = ivr_scenario(&spec, p.reverse)?;
    let v = ivr_check(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, &coarse, setup.t_end, p.checkpoints.get(), opts)?;
    let summary = vec![
        format!(
            "{} scenario: max |D_off| {:.3e} at t = {:.3} vs eps_x {:.1e}",
            if p.reverse { "time-reversed" } else { "chaotic" },
            v.max_offdiag,
            v.worst_time,
            s.eps_x
        ),
        format!(
            "{} coarse variant(s), compatibility residual {:.3e}: {}",
            v.coarse_reports.len(),
            v.compatibility_residual,
            verdict(v.pass)
        ),
    ];
    Ok(RunOutcome { pass: v.pass, summary, artifacts: vec![Artifact::json("ivr.json", &v)?] })
}

fn measure(s: &Scenario, p: &MeasureParams) -> Result<RunOutcome> {
    let model = build_model(model_spec(s), s.seed)?;
    let n = model.apparatus_dim();
    let fam = Arc::new(ProjectorFamily::computational(n)?);
    let r0 = match &p.r0 {
        Some(c) => apparatus_state(&coefficients(c))?,
        None => apparatus_state(&vec![C64::new(1.0, 0.0); n])?,
    };
    let phi = env_state(&model, p.environment, s.seed)?;
    let m = p.coefficients.len();
    let pointer = p.pointer.as_ref().map_or_else(|| (0..m).collect(), |v| v.iter().map(|k| k.get()).collect());
    let scenario = MeasurementScenario::new(coefficients(&p.coefficients), r0, phi, pointer, fam, p.tau1.0, p.t1.0, p.tau_d.0);
    let rep = run_measurement(&scenario, &model, &Tolerance::new(s.eps_x)?)?;
    let mut csv = Csv::new(&["b", "label", "probability", "expected", "born"]);
    for o in &rep.outcomes {
        let expected = scenario.coefficients[o.b].norm_sqr();
        csv.row(&[o.b.to_string(), o.label.to_string(), num(o.probability), num(expected), num(o.born)]);
    }
    let summary = vec![format!(
        "{} outcomes, max |P - |C_b|^2| = {:.2e}, factorization {:.6}, no-collapse residual {:.1e}: {}",
        rep.outcomes.len(),
        rep.max_deviation,
        rep.factorization,
        rep.no_collapse_residual,
        verdict(rep.pass)
    )];
    Ok(RunOutcome {
        pass: rep.pass,
        summary,
        artifacts: vec![Artifact::json("measure.json", &rep)?, Artifact::csv("measure_outcomes.csv", csv)],
    })
}

fn master(s: &Scenario, p: &MasterParams, opts: &TreeOptions) -> Result<RunOutcome> {
    let model = build_model(model_spec(s), s.seed)?;
    let psi0 = initial_state(&model, &p.state, s.seed)?;
    let setup = kicked(&model, &psi0, &p.kicks, s.seed)?;
    let tree = grow_tree(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, opts)?;
    let series = master_vs_exact(&tree, p.steps.get())?;
    let mut csv = Csv::new(&["step", "label", "p_exact", "p_master", "delta_p", "S_R"]);
    for (step, label, pe, pm, dp, sr) in series.rows() {
        csv.row(&[step.to_string(), label.to_string(), num(pe), num(pm), num(dp), num(sr)]);
    }
    let worst = series
        .steps
        .iter()
        .map(|st| st.delta_p.iter().fold(0.0f64, |m, x| m.max(x.abs())) / st.bound)
        .fold(0.0f64, f64::max);
    let summary = vec![format!(
        "{} steps, max |delta p| / (5/sqrt(M_n)) = {:.3}: {}",
        p.steps.get(),
        worst,
        verdict(series.all_within_bound)
    )];
    Ok(RunOutcome {
        pass: series.all_within_bound,
        summary,
        artifacts: vec![Artifact::json("master.json", &series)?, Artifact::csv("master.csv", csv)],
    })
}

fn isolatable(s: &Scenario, p: &IsolatableParams) -> Result<RunOutcome> {
    let model = build_model(model_spec(s), s.seed)?;
    let psi0 = initial_state(&model, &p.state, s.seed)?;
    let grid = TimeGrid::spanning(0.0, p.t_end.0, p.steps.get())?;
    let rep = isolatable_check(&model, &psi0, &grid, s.eps_x)?;
    let mut csv = Csv::new(&["t", "max_offdiag"]);
    for (t, v) in rep.times.iter().zip(&rep.max_offdiag) {
        csv.row(&[num(*t), num(*v)]);
    }
    let pass = rep.isolated && rep.prediction_error <= 1e-10;
    let summary = vec![format!(
        "interaction residual {:.2e}, factorization residual {:.2e}, closed-form error {:.2e}: {}",
        rep.interaction_residual,
        rep.factorization_residual,
        rep.prediction_error,
        verdict(pass)
    )];
    Ok(RunOutcome {
        pass,
        summary,
        artifacts: vec![Artifact::json("isolatable.json", &rep)?, Artifact::csv("isolatable.csv", csv)],
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Shape check used by `--dry-run`: builds nothing heavier than the spaces.
pub fn dry_run(s: &Scenario) -> Result<String> {
    if let Some(m) = &s.model {
        let shape = SpaceShape::bipartite(m.levels.len(), m.environment.dim.get())?;
        return Ok(format!("{}: total dimension {}", s.experiment.name(), shape.total_dim()));
    }
    Ok(format!("{}: model built by the experiment", s.experiment.name()))
}
