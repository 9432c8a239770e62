use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plp_core::chain::{sample_mode_sequence, DwellTime, ModeChain};
use plp_core::network::{actuation_matrix, NetworkTopology};
use plp_core::pattern::{PatternCollection, PatternProblem};
use plp_core::plp::{
    response_deviation, BaselineSlsController, LoggedController, ModeDesign, PlpArchitecture, PlpController, PlpEvent, PlpSettings,
    ResponseSource, RobustSlsController,
};
use plp_core::sls::{synthesize, SlsProblem, Support};
use plp_core::system::{simulate, Controller, DisturbanceModel, JumpLinearSystem};
use plp_core::Error;

fn scalar_sys(a: &[f64], bound: f64) -> Arc<JumpLinearSystem> {
    Arc::new(
        JumpLinearSystem::new(
            a.iter()
                .map(|&a| (DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, 1.0)))
                .collect(),
            bound,
        )
        .unwrap(),
    )
}

fn designs(sys: &JumpLinearSystem, h: usize) -> Vec<ModeDesign> {
    (0..sys.num_modes())
        .map(|m| ModeDesign {
            problem: SlsProblem::new(sys.a(m).clone(), sys.b(m).clone(), h).unwrap(),
            model_available: true,
        })
        .collect()
}

fn settings(sys: &JumpLinearSystem, h: usize) -> PlpSettings {
    let mut s = PlpSettings::new(designs(sys, h));
    s.wall_clock = false;
    s
}

fn v(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// Two random 2-state, 1-input modes that are easy to tell apart.
fn random_two_mode(seed: u64) -> Arc<JumpLinearSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = (0..2)
        .map(|_| {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
            (a, b)
        })
        .collect();
    Arc::new(JumpLinearSystem::new(modes, 0.0).unwrap())
}

#[test]
fn steady_mode_produces_no_events() {
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut arch = PlpArchitecture::new(sys.clone(), settings(&sys, 2)).unwrap();
    let first = arch.on_state_update(&v(1.0), &v(0.0), &v(0.5), 1).unwrap();
    assert_eq!(first, vec![PlpEvent::SegmentOpened { mode: 0 }]);
    // First visit: nothing cached yet.
    assert!(arch.memory().entry(0).cached.is_none());
    let ev = arch.on_state_update(&v(0.5), &v(0.0), &v(0.25), 2).unwrap();
    assert!(ev.is_empty(), "{ev:?}");
}

#[test]
fn residual_inconsistency_reports_switch() {
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut arch = PlpArchitecture::new(sys.clone(), settings(&sys, 2)).unwrap();
    arch.on_state_update(&v(1.0), &v(0.0), &v(0.5), 1).unwrap();
    let ev = arch.on_state_update(&v(0.5), &v(0.0), &v(-0.25), 2).unwrap();
    assert!(ev.contains(&PlpEvent::SwitchDetected { from: 0, to: 1 }), "{ev:?}");
    assert!(ev.contains(&PlpEvent::SegmentClosed { mode: 0, len: 1 }));
    assert_eq!(arch.estimate(), 1);
    assert_eq!(arch.memory().entry(0).segments.len(), 1);
}

#[test]
fn model_mismatch_propagates() {
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut arch = PlpArchitecture::new(sys.clone(), settings(&sys, 2)).unwrap();
    assert!(matches!(
        arch.on_state_update(&v(1.0), &v(0.0), &v(3.0), 1),
        Err(Error::ModelMismatch { .. })
    ));
}

#[test]
fn lookups_memoize_bit_identically() {
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut arch = PlpArchitecture::new(sys.clone(), settings(&sys, 3)).unwrap();
    let cold = arch.memory_lookup_or_synthesize(1, 0).unwrap();
    assert!(!cold.cache_hit);
    assert_eq!(cold.syntheses, 1);
    assert!(cold.events.contains(&PlpEvent::Synthesized {
        mode: 1,
        source: ResponseSource::ModelBased
    }));
    let warm = arch.memory_lookup_or_synthesize(1, 5).unwrap();
    assert!(warm.cache_hit);
    assert_eq!(warm.syntheses, 0);
    assert_eq!(warm.synth_ms, 0.0);
    assert!(Arc::ptr_eq(&cold.response, &warm.response));
    assert_eq!(arch.log().model_syntheses, 1);
}

#[test]
fn no_model_and_no_data_is_uncontrollable() {
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut s = settings(&sys, 2);
    s.designs[1].model_available = false;
    let mut arch = PlpArchitecture::new(sys, s).unwrap();
    assert_eq!(arch.memory_lookup_or_synthesize(1, 0).unwrap_err(), Error::UncontrollableMode { mode: 1 });
    assert!(arch.memory_lookup_or_synthesize(0, 0).is_ok());
}

/// Feeds noiseless exploratory transitions of `mode` through the identifier.
fn explore(arch: &mut PlpArchitecture, sys: &JumpLinearSystem, mode: usize, x: &mut DVector<f64>, steps: usize, step: &mut usize, rng: &mut ChaCha8Rng) {
    for _ in 0..steps {
        let u = DVector::from_fn(sys.input_dim(), |_, _| rng.random_range(-1.0..1.0));
        let next = sys.step(mode, x, &u, &DVector::zeros(sys.state_dim()));
        *step += 1;
        arch.on_state_update(x, &u, &next, *step).unwrap();
        *x = next;
    }
}

#[test]
fn revisited_mode_upgrades_to_matching_data_driven_response() {
    for seed in 0..5 {
        let sys = random_two_mode(seed);
        let h = 3;
        let mut arch = PlpArchitecture::new(sys.clone(), settings(&sys, h)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let mut step = 0;
        explore(&mut arch, &sys, 0, &mut x, 30, &mut step, &mut rng);
        let first = arch.memory_lookup_or_synthesize(0, step).unwrap();
        explore(&mut arch, &sys, 1, &mut x, 10, &mut step, &mut rng);
        // Back in mode 0: the closed segment is now in memory.
        explore(&mut arch, &sys, 0, &mut x, 5, &mut step, &mut rng);
        assert!(arch.memory().entry(0).windows(h) >= 2 + h, "seed {seed}");
        let second = arch.memory_lookup_or_synthesize(0, step).unwrap();
        let entry = arch.memory().entry(0);
        let cached = entry.cached.as_ref().unwrap();
        assert_eq!(cached.source, ResponseSource::DataDriven, "seed {seed}");
        assert!(response_deviation(&second.response, &first.response) <= 1e-6, "seed {seed}");
        // Upgrade happens once; later lookups are hits.
        let third = arch.memory_lookup_or_synthesize(0, step).unwrap();
        assert!(third.cache_hit && Arc::ptr_eq(&third.response, &second.response));
    }
}

#[test]
fn noisy_data_keeps_model_response() {
    let sys = random_two_mode(3);
    let noisy = Arc::new(JumpLinearSystem::new((0..2).map(|m| (sys.a(m).clone(), sys.b(m).clone())).collect(), 0.05).unwrap());
    let mut arch = PlpArchitecture::new(noisy.clone(), settings(&noisy, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = DVector::from_element(2, 1.0);
    let model = arch.memory_lookup_or_synthesize(0, 0).unwrap();
    for step in 1..60 {
        let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(2, |_, _| rng.random_range(-0.05..0.05));
        let next = noisy.step(0, &x, &u, &w);
        arch.on_state_update(&x, &u, &next, step).unwrap();
        x = next;
    }
    // Force the segment closed by a detected switch into mode 1.
    let u = DVector::zeros(1);
    let big = DVector::from_element(2, 50.0);
    let next = noisy.step(1, &big, &u, &DVector::zeros(2));
    arch.on_state_update(&big, &u, &next, 60).unwrap();
    let l = arch.memory_lookup_or_synthesize(0, 61).unwrap();
    assert!(l.events.iter().any(|e| matches!(e, PlpEvent::DataRejected { mode: 0, .. })), "{:?}", l.events);
    assert!(Arc::ptr_eq(&l.response, &model.response));
    assert_eq!(arch.memory().entry(0).cached.as_ref().unwrap().source, ResponseSource::ModelBased);
    // Rejection is not retried without new data.
    let again = arch.memory_lookup_or_synthesize(0, 62).unwrap();
    assert!(again.cache_hit);
}

fn cycle_sys() -> Arc<JumpLinearSystem> {
    scalar_sys(&[0.9, -0.9, 0.0], 0.0)
}

#[test]
fn single_pattern_forces_prediction() {
    let sys = cycle_sys();
    let mut s = settings(&sys, 2);
    s.patterns = Some(PatternCollection::new(vec![vec![2, 1, 2]], 3).unwrap());
    let mut arch = PlpArchitecture::new(sys, s).unwrap();
    let st = arch.schedule_prediction().unwrap();
    assert_eq!(st.k_star, 0);
    assert_eq!(st.queue, vec![2, 1]);
}

#[test]
fn prediction_on_deterministic_cycle_is_certain() {
    let sys = cycle_sys();
    let mut s = settings(&sys, 2);
    s.prior_weight = 0.0;
    let psi = PatternCollection::new(vec![vec![2, 0], vec![0, 1], vec![1, 2]], 3).unwrap();
    s.patterns = Some(psi.clone());
    let mut arch = PlpArchitecture::new(sys.clone(), s).unwrap();
    // Drive 0 -> 1 -> 2 -> 0 -> ... with one step per epoch (noiseless, distinguishable).
    let mut x = v(1.0);
    for step in 1..=30 {
        let mode = (step - 1) % 3;
        let u = v(1.0);
        let next = sys.step(mode, &x, &u, &v(0.0));
        arch.on_state_update(&x, &u, &next, step).unwrap();
        x = next;
    }
    let current = arch.estimate();
    let st = arch.scheduler().cloned().unwrap();
    // From the current mode the next two epochs are determined.
    let expected = psi.find(&[(current + 1) % 3, (current + 2) % 3]).unwrap();
    assert_eq!(st.k_star, expected);
    let exact = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let stats = PatternProblem::new(&exact, psi, current).unwrap().solve().unwrap();
    assert!((stats.q[expected] - 1.0).abs() < 1e-9);
    assert!((st.expected_tau - 2.0).abs() < 1e-6, "{}", st.expected_tau);
}

#[test]
fn tied_patterns_pick_lowest_index() {
    // No data: the smoothed estimate is uniform, so both patterns tie.
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut s = settings(&sys, 2);
    s.patterns = Some(PatternCollection::new(vec![vec![1, 1], vec![0, 0]], 2).unwrap());
    let mut arch = PlpArchitecture::new(sys, s).unwrap();
    let st = arch.schedule_prediction().unwrap();
    assert_eq!(st.k_star, 0);
    assert_eq!(st.queue, vec![1]);
}

#[test]
fn unreachable_patterns_downgrade_to_no_prediction() {
    // Learned chain alternates strictly, so "0 then 0" can never occur.
    let sys = scalar_sys(&[0.5, -0.5], 0.0);
    let mut s = settings(&sys, 2);
    s.prior_weight = 0.0;
    s.patterns = Some(PatternCollection::new(vec![vec![0, 0]], 2).unwrap());
    let mut arch = PlpArchitecture::new(sys.clone(), s).unwrap();
    let mut x = v(1.0);
    let mut saw_unavailable = false;
    for step in 1..=12 {
        let mode = (step - 1) % 2;
        let next = sys.step(mode, &x, &v(1.0), &v(0.0));
        let ev = arch.on_state_update(&x, &v(1.0), &next, step).unwrap();
        saw_unavailable |= ev.contains(&PlpEvent::PredictionUnavailable);
        x = next;
    }
    assert!(saw_unavailable);
    assert!(arch.schedule_prediction().is_none());
    assert!(arch.scheduler().is_none());
}

fn ring_network() -> (NetworkTopology, Arc<JumpLinearSystem>, Vec<SlsProblem>, Vec<SlsProblem>) {
    let ring: Vec<(usize, usize)> = (0..4).map(|i| (i, (i + 1) % 4)).collect();
    let cut = vec![(1, 2), (2, 3), (3, 0)];
    let topo = NetworkTopology::new(4, vec![ring, cut], 0.3).unwrap();
    let b = actuation_matrix(4, &[0, 1, 2, 3]).unwrap();
    let sys = Arc::new(JumpLinearSystem::from_topology(&topo, b.clone(), 0.05).unwrap());
    let local = (0..2)
        .map(|m| {
            let nb: Vec<_> = (0..4).map(|i| topo.hop_neighborhood(m, i, 1).unwrap()).collect();
            let sup = Support::from_neighborhoods(&nb, &[0, 1, 2, 3], 3).unwrap();
            SlsProblem::new(sys.a(m).clone(), b.clone(), 3).unwrap().with_support(sup).unwrap()
        })
        .collect();
    let nb: Vec<_> = (0..4).map(|i| topo.union_hop_neighborhood(i, 1).unwrap()).collect();
    let sup = Support::from_neighborhoods(&nb, &[0, 1, 2, 3], 3).unwrap();
    let robust = (0..2)
        .map(|m| SlsProblem::new(sys.a(m).clone(), b.clone(), 3).unwrap().with_support(sup.clone()).unwrap())
        .collect();
    (topo, sys, local, robust)
}

#[test]
fn synthesis_count_dominance() {
    let (_, sys, local, _) = ring_network();
    let chain = ModeChain::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], 0).unwrap();
    for seed in 0..3 {
        let seq = sample_mode_sequence(&chain, 200, DwellTime::Fixed(20), seed).unwrap();
        let r = seq.switch_times.len();
        let m = 2;
        let mut s = PlpSettings::new(local.iter().cloned().map(|p| ModeDesign { problem: p, model_available: true }).collect());
        s.wall_clock = false;
        s.patterns = Some(PatternCollection::new(vec![vec![0, 1], vec![1, 0]], 2).unwrap());
        let dist = DisturbanceModel::Uniform { bound: 0.05 };
        let x0 = DVector::zeros(4);

        let mut plp = PlpController::new(sys.clone(), s.clone()).unwrap().with_true_modes(seq.modes.clone());
        simulate(&sys, &seq.modes, &mut plp, &dist, &x0, 200, seed).unwrap();
        let log = plp.log();
        assert!(log.model_syntheses <= r.min(m), "{} > min({r}, {m})", log.model_syntheses);
        assert!(log.data_syntheses <= m);

        let mut base = BaselineSlsController::new(sys.clone(), local.clone(), 1.0, 0, false)
            .unwrap()
            .with_true_modes(seq.modes.clone());
        simulate(&sys, &seq.modes, &mut base, &dist, &x0, 200, seed).unwrap();
        // Initial synthesis plus one per switch.
        assert_eq!(base.log().model_syntheses, r + 1);

        // With identification instead of the true feed the bound still holds.
        let mut plp = PlpController::new(sys.clone(), s).unwrap();
        simulate(&sys, &seq.modes, &mut plp, &dist, &x0, 200, seed).unwrap();
        assert!(plp.log().model_syntheses <= m);
        assert!(plp.log().data_syntheses <= m);
    }
}

#[test]
fn true_mode_feed_applies_active_cached_response() {
    let (_, sys, local, _) = ring_network();
    let chain = ModeChain::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]], 1).unwrap();
    let seq = sample_mode_sequence(&chain, 150, DwellTime::Fixed(7), 4).unwrap();
    let mut s = PlpSettings::new(local.iter().cloned().map(|p| ModeDesign { problem: p, model_available: true }).collect());
    s.wall_clock = false;
    let mut plp = PlpController::new(sys.clone(), s).unwrap().with_true_modes(seq.modes.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = DVector::zeros(4);
    for t in 0..150 {
        let u = plp.control(t, &x).unwrap();
        let active = seq.modes[t];
        let cached = plp.architecture().memory().entry(active).cached.clone().unwrap();
        assert!(Arc::ptr_eq(plp.current_response().unwrap(), &cached.response), "step {t}");
        assert_eq!(plp.architecture().estimate(), active);
        let w = DVector::from_fn(4, |_, _| rng.random_range(-0.05..0.05));
        x = sys.step(active, &x, &u, &w);
    }
}

#[test]
fn single_mode_controllers_coincide() {
    let (topo, _, _, _) = ring_network();
    let single = NetworkTopology::new(4, vec![topo.edges(0).to_vec()], 0.3).unwrap();
    let b = actuation_matrix(4, &[0, 1, 2, 3]).unwrap();
    let sys = Arc::new(JumpLinearSystem::from_topology(&single, b.clone(), 0.05).unwrap());
    let p = SlsProblem::new(sys.a(0).clone(), b, 4).unwrap();
    let modes = vec![0; 60];
    let dist = DisturbanceModel::Uniform { bound: 0.05 };
    let x0 = DVector::from_element(4, 0.2);
    let mut s = PlpSettings::new(vec![ModeDesign {
        problem: p.clone(),
        model_available: true,
    }]);
    s.wall_clock = false;
    let mut plp = PlpController::new(sys.clone(), s).unwrap();
    let mut base = BaselineSlsController::new(sys.clone(), vec![p.clone()], 1.0, 0, false).unwrap();
    let mut robust = RobustSlsController::new(sys.clone(), std::slice::from_ref(&p), 1.0, 0, false).unwrap();
    let a = simulate(&sys, &modes, &mut plp, &dist, &x0, 60, 2).unwrap();
    let b = simulate(&sys, &modes, &mut base, &dist, &x0, 60, 2).unwrap();
    let c = simulate(&sys, &modes, &mut robust, &dist, &x0, 60, 2).unwrap();
    for t in 0..60 {
        assert!((&a.inputs[t] - &b.inputs[t]).amax() <= 1e-9);
        assert!((&a.inputs[t] - &c.inputs[t]).amax() <= 1e-9);
    }
    let model = synthesize(&p).unwrap();
    assert!(response_deviation(robust.response(), &model) <= 1e-9);
}
