use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use qbranch::dynamics::{block_hamiltonian, ntc_evaluate, Protocol, TimeGrid};
use qbranch::echo::loschmidt_echo;
use qbranch::master::{master_vs_exact, step_rates};
use qbranch::measure::{run_measurement, MeasurementScenario};
use qbranch::model::{
    apparatus_state, haar_state, product_state, random_apparatus_state, random_unitary, unit_gue,
    EnsembleSpec, ProjectorFamily, TotalModel,
};
use qbranch::qcore::{self, tensor};
use qbranch::robservable::{
    certify_r_observable, coarse_grain, finest_division, is_coarse_graining_of, offblock, offblock_total, Tolerance,
};
use qbranch::scenarios::{dephasing_model, kicked_dephasing, random_product_state, KickSpec};
use qbranch::tree::{
    decoherence_matrix, decoherence_matrix_env, grow_tree, ivr_check, probability_of_value, tree_entropy, ScheduleEntry,
    TreeOptions,
};
use qbranch::{Operator, SpaceShape, StateVector, C64};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn random_hermitian(n: usize, seed: u64) -> Operator {
    unit_gue(n, seed, 7).unwrap()
}

fn random_state(n: usize, seed: u64) -> StateVector {
    haar_state(SpaceShape::single(n).unwrap(), seed)
}

/// Reduced matrix of a random bipartite pure state.
fn random_rho(n: usize, env: usize, seed: u64) -> Operator {
    qcore::reduced_density(&haar_state(SpaceShape::bipartite(n, env).unwrap(), seed))
}

fn max_diff(a: &StateVector, b: &StateVector) -> f64 {
    a.distance(b)
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn propagator_is_unitary_and_composes(n in 2usize..12, seed in any::<u64>(), t1 in 0.0f64..5.0, t2 in 0.0f64..5.0) {
        let h = random_hermitian(n, seed);
        let u1 = qcore::propagator(&h, t1).unwrap();
        let u2 = qcore::propagator(&h, t2).unwrap();
        let u12 = qcore::propagator(&h, t1 + t2).unwrap();
        prop_assert!(qcore::unitarity_residual(&u1) < 1e-10);
        prop_assert!(u2.matmul(&u1).max_abs_diff(&u12) < 1e-10);
        // Backward propagation undoes forward.
        let p = Protocol::constant(h);
        let psi = random_state(n, seed ^ 1);
        let back = p.propagate(&p.propagate(&psi, 0.0, t1).unwrap(), t1, 0.0).unwrap();
        prop_assert!(max_diff(&back, &psi) < 1e-10);
    }

    #[test]
    fn reduced_density_is_a_density_matrix(n in 2usize..6, env in 1usize..8, seed in any::<u64>()) {
        let rho = random_rho(n, env, seed);
        prop_assert!(rho.hermiticity_residual() < 1e-12);
        prop_assert!((rho.trace().re - 1.0).abs() < 1e-12);
        let spec = qcore::eigh(&rho).unwrap();
        prop_assert!(spec.eigenvalues.iter().all(|&v| v > -1e-12));
        let p = qcore::purity(&rho);
        prop_assert!(p <= 1.0 + 1e-12 && p >= 1.0 / n as f64 - 1e-12);
    }

    #[test]
    fn projector_families_are_orthogonal_and_complete(n in 2usize..8, seed in any::<u64>(), cut in 1usize..7) {
        let fam = ProjectorFamily::from_unitary_columns(&random_unitary(n, seed).unwrap()).unwrap();
        let mut sum = Operator::zeros(SpaceShape::single(n).unwrap());
        for (a, p) in fam.projectors().iter().enumerate() {
            prop_assert!(p.matmul(p).max_abs_diff(p) < 1e-12);
            prop_assert!(p.hermiticity_residual() < 1e-12);
            for q in &fam.projectors()[a + 1..] {
                prop_assert!(p.matmul(q).max_abs() < 1e-12);
            }
            sum = sum.add(p);
        }
        prop_assert!(sum.max_abs_diff(&Operator::identity(SpaceShape::single(n).unwrap())) < 1e-12);
        // A two-group coarse-graining is again a family, refined by the original.
        let cut = cut.min(n - 1) as i64;
        let grouping: BTreeMap<i64, i64> = fam.labels().iter().enumerate().map(|(k, &l)| (l, i64::from(k as i64 >= cut))).collect();
        let coarse = coarse_grain(&fam, &grouping).unwrap();
        prop_assert_eq!(coarse.len(), 2);
        prop_assert!(fam.refines(&coarse, 1e-10));
        prop_assert!(is_coarse_graining_of(&coarse, &fam, 1e-10));
    }

    #[test]
    fn seeded_generation_is_reproducible(n in 1usize..24, seed in any::<u64>()) {
        for spec in [EnsembleSpec::gue(n, 1.0, seed), EnsembleSpec::goe(n, 0.5, seed)] {
            let a = spec.generate().unwrap();
            let b = spec.generate().unwrap();
            prop_assert_eq!(a.max_abs_diff(&b), 0.0);
        }
        let s1 = random_apparatus_state(n.max(2), seed);
        let s2 = random_apparatus_state(n.max(2), seed);
        prop_assert_eq!(s1.amps(), s2.amps());
    }

    #[test]
    fn dephasing_interaction_has_no_offdiagonal_blocks(n in 2usize..4, env in 2usize..10, seed in any::<u64>()) {
        let m = dephasing_model(n, env, 0.7, seed).unwrap();
        for mu in 0..n {
            for nu in 0..n {
                if mu == nu {
                    continue;
                }
                let e = |k: usize| (0..n).map(|i| C64::new(f64::from(u8::from(i == k)), 0.0)).collect::<Vec<_>>();
                let blk = m.env_block(m.h_i(), &e(mu), &e(nu)).unwrap();
                prop_assert_eq!(blk.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn block_evolution_stays_in_its_subspace(n in 2usize..4, env in 2usize..8, seed in any::<u64>(), delta in 0.0f64..0.5) {
        // A non-dephasing H: block evolution must still never leave range(P_μ).
        let m = dephasing_model(n, env, 0.5, seed).unwrap();
        let mix = tensor(&random_hermitian(n, seed ^ 3), &Operator::identity(SpaceShape::single(env).unwrap())).scale(delta);
        let h = m.h_total().add(&mix);
        let fam = ProjectorFamily::computational(n).unwrap();
        let psi = random_product_state(&m, seed).unwrap();
        let grid = TimeGrid::spanning(0.0, 3.0, 12).unwrap();
        for k in 0..n {
            let blk = block_hamiltonian(&h, &fam, k).unwrap();
            let start = fam.apply(k, &psi);
            let traj = blk.evolve(&start, &grid).unwrap();
            for s in &traj.states {
                prop_assert!(fam.apply_complement(k, s).norm() <= 1e-12 * start.norm().max(1.0));
                prop_assert!((s.norm() - start.norm()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn passing_ntc_bounds_the_commutation_residual(seed in any::<u64>(), delta in 0.0f64..0.01) {
        let (n, env) = (2, 6);
        let m = dephasing_model(n, env, 0.5, seed).unwrap();
        let leak = tensor(&random_hermitian(n, seed ^ 5), &Operator::identity(SpaceShape::single(env).unwrap())).scale(delta);
        let p = Protocol::constant(m.h_total().add(&leak));
        let fam = ProjectorFamily::computational(n).unwrap();
        let psi = random_product_state(&m, seed).unwrap();
        let grid = TimeGrid::spanning(0.0, 2.0, 40).unwrap();
        let eps = 0.02;
        let rep = ntc_evaluate(&p, &psi, &fam, &grid, eps).unwrap();
        prop_assume!(rep.verdict);
        let h = p.hamiltonian_at(0.0);
        let hn = p.norm_bound().unwrap();
        for k in 0..n {
            let traj = p.trajectory(&fam.apply(k, &psi), &grid).unwrap();
            for s in &traj.states {
                let full = fam.apply(k, &h.apply(s));
                let blocked = fam.apply(k, &h.apply(&fam.apply(k, s)));
                prop_assert!(full.sub(&blocked).norm() <= 2.0 * eps * hn * psi.norm() + 1e-12);
            }
        }
    }

    #[test]
    fn coarse_graining_never_adds_coherence(n in 3usize..7, env in 1usize..6, seed in any::<u64>(), cut in 1usize..6) {
        let rho = random_rho(n, env, seed);
        let fine = ProjectorFamily::from_unitary_columns(&random_unitary(n, seed ^ 9).unwrap()).unwrap();
        let cut = cut.min(n - 1) as i64;
        let grouping: BTreeMap<i64, i64> = fine.labels().iter().enumerate().map(|(k, &l)| (l, i64::from(k as i64 >= cut))).collect();
        let coarse = coarse_grain(&fine, &grouping).unwrap();
        prop_assert!(offblock_total(&rho, &coarse) <= offblock_total(&rho, &fine) + 1e-12);
        prop_assert!(offblock(&rho, &coarse) <= offblock_total(&rho, &fine) + 1e-12);
    }

    #[test]
    fn offblock_ignores_global_phase_and_environment_unitaries(n in 2usize..5, env in 2usize..6, seed in any::<u64>(), phase in 0.0f64..6.3) {
        let psi = haar_state(SpaceShape::bipartite(n, env).unwrap(), seed);
        let fam = ProjectorFamily::from_unitary_columns(&random_unitary(n, seed ^ 2).unwrap()).unwrap();
        let w = Operator::new(SpaceShape::single(env).unwrap(), random_unitary(env, seed ^ 4).unwrap()).unwrap();
        let lifted = tensor(&Operator::identity(SpaceShape::single(n).unwrap()), &w).reshaped(psi.shape().clone()).unwrap();
        let other = lifted.apply(&psi).scaled(C64::from_polar(1.0, phase));
        let a = offblock(&qcore::reduced_density(&psi), &fam);
        let b = offblock(&qcore::reduced_density(&other), &fam);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn echo_symmetries(n in 2usize..12, seed in any::<u64>(), shift in -5.0f64..5.0) {
        let h0 = random_hermitian(n, seed);
        let h1 = unit_gue(n, seed, 8).unwrap();
        let psi = random_state(n, seed ^ 6);
        let grid = TimeGrid::spanning(0.0, 4.0, 16).unwrap();
        let f = loschmidt_echo(&h0, &h1, &psi, &grid).unwrap();
        // |f| is blind to a constant shift of either Hamiltonian.
        let g = loschmidt_echo(&h0.shift(shift), &h1, &psi, &grid).unwrap();
        for (a, b) in f.magnitude().iter().zip(g.magnitude()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // f_νμ = f*_μν.
        let swapped = loschmidt_echo(&h1, &h0, &psi, &grid).unwrap();
        for (a, b) in f.amplitude.iter().zip(&swapped.amplitude) {
            prop_assert!((a - b.conj()).norm() < 1e-10);
        }
    }

    #[test]
    fn real_echo_is_time_reversal_symmetric(n in 2usize..12, seed in any::<u64>()) {
        // Real symmetric H and a real state: M(−t) = M(t).
        let h0 = EnsembleSpec::goe(n, 1.0, seed).generate().unwrap();
        let h1 = EnsembleSpec::goe(n, 1.0, seed ^ 1).generate().unwrap();
        let amps: Vec<f64> = random_state(n, seed).amps().iter().map(|a| a.re).collect();
        let psi = StateVector::from_real(SpaceShape::single(n).unwrap(), &amps).unwrap().normalized().unwrap();
        let grid = TimeGrid::spanning(0.0, 3.0, 12).unwrap();
        let fwd = loschmidt_echo(&h0, &h1, &psi, &grid).unwrap().echo();
        let rev = loschmidt_echo(&h0.scale(-1.0), &h1.scale(-1.0), &psi, &grid).unwrap().echo();
        for (a, b) in fwd.iter().zip(&rev) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn measurement_outcomes_ignore_coefficient_phases(seed in any::<u64>(), w in 0.05f64..0.95, phase in 0.0f64..6.3) {
        let m = dephasing_model(2, 6, 0.6, seed).unwrap();
        let fam = Arc::new(ProjectorFamily::computational(2).unwrap());
        let r0 = apparatus_state(&[C64::new(1.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let phi = haar_state(SpaceShape::single(6).unwrap(), seed ^ 1);
        let coeffs = vec![C64::new(w.sqrt(), 0.0), C64::new((1.0 - w).sqrt(), 0.0)];
        let s = MeasurementScenario::new(coeffs, r0, phi, vec![0, 1], fam, 1.0, 3.0, 0.5);
        let tol = Tolerance::new(1e-6).unwrap();
        let a = run_measurement(&s, &m, &tol).unwrap();
        let mut r = s.clone();
        r.coefficients[1] *= C64::from_polar(1.0, phase);
        let b = run_measurement(&r, &m, &tol).unwrap();
        prop_assert!(a.no_collapse_residual <= 1e-9);
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            prop_assert!((x.probability - y.probability).abs() < 1e-8);
        }
        prop_assert!((a.outcomes[0].probability - w).abs() < 1e-6);
    }
}

fn kicked(seed: u64, splits: usize, strength: f64) -> (qbranch::scenarios::BranchingSetup, TotalModel) {
    let m = dephasing_model(2, 8, 1.0, seed).unwrap();
    let psi = random_product_state(&m, seed).unwrap();
    let spec = KickSpec { splits, window: 1.0, kick_duration: 0.5, kick_strength: strength, env_dependent: true, seed };
    (kicked_dephasing(&m, &psi, &spec).unwrap(), m)
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn tree_components_decompose_the_state(seed in any::<u64>()) {
        let (setup, _) = kicked(seed, 3, 1.0);
        let tree = grow_tree(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, &TreeOptions::default()).unwrap();
        let mut times = vec![0.3, setup.t_end];
        times.extend(tree.split_times());
        for t in times {
            let psi = setup.protocol.propagate(&setup.psi0, 0.0, t).unwrap();
            let paths = tree.paths_at(t).unwrap();
            let mut sum = StateVector::zeros(psi.shape().clone());
            let mut total = 0.0;
            for p in &paths {
                sum = sum.add(&p.component);
                total += p.probability;
                // Weights only change at splits.
                prop_assert!((p.component.norm_sqr() - p.probability).abs() < 1e-10);
            }
            prop_assert!(max_diff(&sum, &psi) < 1e-10);
            prop_assert!((total - 1.0).abs() < 1e-10);
            let d = decoherence_matrix(&tree, t).unwrap();
            prop_assert!((d.trace() - 1.0).abs() < 1e-10);
            // Env route agrees with the full-space route.
            let de = decoherence_matrix_env(&tree, t).unwrap();
            for i in 0..d.dim() {
                for j in 0..d.dim() {
                    prop_assert!((d.entries[(i, j)] - de.entries[(i, j)]).norm() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn siblings_are_orthogonal_at_birth(seed in any::<u64>()) {
        let (setup, _) = kicked(seed, 3, 1.0);
        let tree = grow_tree(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, &TreeOptions::default()).unwrap();
        for t in tree.split_times() {
            let paths = tree.paths_at(t).unwrap();
            let d = decoherence_matrix(&tree, t).unwrap();
            for (i, a) in paths.iter().enumerate() {
                for (j, b) in paths.iter().enumerate() {
                    let siblings = i != j
                        && a.events.len() == b.events.len()
                        && a.events[..a.events.len() - 1] == b.events[..b.events.len() - 1];
                    if siblings {
                        prop_assert!(d.entries[(i, j)].norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn tree_entropy_never_decreases(seed in any::<u64>(), strength in 0.1f64..2.0) {
        let (setup, _) = kicked(seed, 4, strength);
        let tree = grow_tree(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, &TreeOptions::default()).unwrap();
        let mut times: Vec<f64> = tree.split_times().into_iter().flat_map(|s| [s - 1e-9, s]).collect();
        times.push(setup.t_end);
        let s: Vec<f64> = times.iter().map(|&t| tree_entropy(&tree, t)).collect();
        for w in s.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{s:?}");
        }
    }

    #[test]
    fn master_equation_bookkeeping(seed in any::<u64>(), strength in 0.2f64..1.5) {
        let (setup, _) = kicked(seed, 4, strength);
        let tree = grow_tree(&setup.protocol, &setup.psi0, 0.0, &setup.schedule, &TreeOptions::default()).unwrap();
        prop_assert!(tree.is_ideal());
        for n in 1..3 {
            let g = step_rates(&tree, n).unwrap();
            for row in g.gamma.iter().flatten() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&x| x >= -1e-12));
            }
            // δΓ averages to zero over the paths sharing a starting label.
            for (k, &label) in g.labels.iter().enumerate() {
                let group: Vec<_> = g.raw.iter().filter(|r| r.from == label).collect();
                if group.is_empty() {
                    continue;
                }
                prop_assert_eq!(group.len(), g.path_counts[k]);
                for j in 0..g.labels.len() {
                    let mean: f64 = group.iter().map(|r| r.delta[j]).sum::<f64>() / group.len() as f64;
                    prop_assert!(mean.abs() < 1e-12);
                }
            }
        }
        let series = master_vs_exact(&tree, 3).unwrap();
        for step in &series.steps {
            prop_assert!((step.p_exact.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((step.p_master.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(step.entropy_tree >= step.entropy_r - 1e-12);
        }
    }

    #[test]
    fn passing_ivr_fixes_coarse_probabilities(seed in any::<u64>(), strength in 0.01f64..0.1) {
        let eps = 0.05;
        let m = dephasing_model(3, 8, 1.0, seed).unwrap();
        let psi = random_product_state(&m, seed).unwrap();
        let spec = KickSpec { splits: 2, window: 1.0, kick_duration: 0.5, kick_strength: strength, env_dependent: true, seed };
        let setup = kicked_dephasing(&m, &psi, &spec).unwrap();
        let fine_fam = setup.schedule[0].family.clone();
        let grouping: BTreeMap<i64, i64> = fine_fam.labels().iter().enumerate().map(|(k, &l)| (l, i64::from(k >= 2))).collect();
        let coarse_fam = Arc::new(coarse_grain(&fine_fam, &grouping).unwrap());
        let coarse: Vec<ScheduleEntry> = setup
            .schedule
            .iter()
            .map(|e| ScheduleEntry::new(e.window, Arc::clone(&coarse_fam), e.tau_d))
            .collect();
        let opts = TreeOptions { eps_x: eps, ..TreeOptions::default() };
        let verdict = ivr_check(&setup.protocol, &psi, 0.0, &setup.schedule, std::slice::from_ref(&coarse), setup.t_end, 4, &opts).unwrap();
        prop_assume!(verdict.pass);
        let fine_tree = grow_tree(&setup.protocol, &psi, 0.0, &setup.schedule, &opts).unwrap();
        let coarse_tree = grow_tree(&setup.protocol, &psi, 0.0, &coarse, &opts).unwrap();
        let a = probability_of_value(&fine_tree, &coarse_fam, setup.t_end).unwrap();
        let b = probability_of_value(&coarse_tree, &coarse_fam, setup.t_end).unwrap();
        for (k, v) in &a {
            prop_assert!((v - b[k]).abs() <= 10.0 * eps, "{a:?} vs {b:?}");
        }
    }
}

/// A certified family is a coarse-graining of the finest division of the
/// reduced matrices it produced. The environment rotates level 2 into an
/// exactly orthogonal state at `T`, while levels 0 and 1 stay coherent.
#[test]
fn certified_family_coarse_grains_the_finest_division() {
    let t_end = 1.0;
    let env = SpaceShape::single(2).unwrap();
    let sy = Operator::new(
        env.clone(),
        faer::Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 1) => C64::new(0.0, -1.0),
            (1, 0) => C64::new(0.0, 1.0),
            _ => C64::new(0.0, 0.0),
        }),
    )
    .unwrap();
    let level2 = Operator::diagonal(SpaceShape::single(3).unwrap(), &[0.0, 0.0, 1.0]).unwrap();
    let h_i = tensor(&level2, &sy.scale(std::f64::consts::FRAC_PI_2 / t_end));
    let model = TotalModel::new(
        Operator::zeros(SpaceShape::single(3).unwrap()),
        Operator::zeros(env.clone()),
        h_i,
    )
    .unwrap();
    let e = |k: usize| (0..3).map(|i| C64::new(f64::from(u8::from(i == k)), 0.0)).collect::<Vec<_>>();
    let family = ProjectorFamily::from_subspaces(3, &[vec![e(0), e(1)], vec![e(2)]]).unwrap();
    let phi0 = StateVector::basis(env, 0).unwrap();
    let ensemble: Vec<StateVector> =
        (0..6).map(|k| product_state(&random_apparatus_state(3, 40 + k), &phi0).unwrap()).collect();
    let protocol = Protocol::constant_shared(model.h_total_shared());
    let grid = TimeGrid::spanning(0.0, t_end, 20).unwrap();
    let cert = certify_r_observable(&protocol, &family, &ensemble, &grid, &Tolerance::new(1e-6).unwrap()).unwrap();
    assert!(cert.verdict, "{cert:?}");
    let dataset: Vec<Operator> = ensemble
        .iter()
        .map(|psi| qcore::reduced_density(&protocol.propagate(psi, 0.0, t_end).unwrap()))
        .collect();
    let finest = finest_division(&dataset, 1e-9).unwrap();
    assert!(finest.verified);
    assert!(is_coarse_graining_of(&family, &finest.family, 1e-8));
}
