mod common;

use mpcnn::eval::{self, EvalConfig, EvalError, Pairing, Source};
use mpcnn::mpc::{self, MpcConfig, MpcError};
use mpcnn::nn::MlpParams;
use mpcnn::plant::PlantError;
use mpcnn::policy::{NeuralPolicy, Policy};
use mpcnn::{Control, RegimeMix, State};
use proptest::prelude::*;

/// Full throttle until the speed passes 1, then a failure.
struct Runaway;

impl Policy for Runaway {
    fn act(&self, s: &State) -> Result<Control, MpcError> {
        if s.v > 1.0 {
            return Err(MpcError::Divergence(PlantError::Divergence { state: s.to_array() }));
        }
        Ok(Control::new(10.0, 0.0))
    }
}

fn controls(v: &[(f64, f64)]) -> Vec<Control> {
    v.iter().map(|&(a, b)| Control::new(a, b)).collect()
}

fn small_eval(n_sims: usize, steps: usize) -> EvalConfig {
    EvalConfig { n_sims, steps, seed: 42, ..EvalConfig::default() }
}

#[test]
fn rmse_hand_values() {
    let r = eval::rmse(&controls(&[(1.0, 2.0)]), &controls(&[(0.0, 0.0)])).unwrap();
    assert!((r - 2.5f64.sqrt()).abs() <= 1e-12);
    let r = eval::rmse(&controls(&[(1.0, 0.0), (0.0, 1.0)]), &controls(&[(0.0, 0.0), (0.0, 0.0)])).unwrap();
    assert!((r - 0.5f64.sqrt()).abs() <= 1e-12);
    let a = controls(&[(0.3, -0.2), (4.0, 1.0)]);
    assert_eq!(eval::rmse(&a, &a).unwrap(), 0.0);
}

#[test]
fn rmse_rejects_bad_lengths() {
    assert!(matches!(
        eval::rmse(&controls(&[(1.0, 1.0)]), &[]),
        Err(EvalError::LengthMismatch { true_len: 1, pred_len: 0 })
    ));
    assert!(matches!(eval::rmse(&[], &[]), Err(EvalError::Empty)));
}

#[test]
fn pooled_rmse_is_the_weighted_mean_of_per_simulation_squares() {
    let zero = MlpParams::zeros();
    let mpc_cfg = MpcConfig::default();
    let policy = NeuralPolicy { params: &zero, bounds: mpc_cfg.bounds };
    let report = eval::evaluate(&policy, &small_eval(6, 15), &mpc_cfg).unwrap();
    let weighted: f64 = report.per_sim.iter().map(|s| s.steps as f64 * s.rmse.unwrap().powi(2)).sum();
    let n: usize = report.per_sim.iter().map(|s| s.steps).sum();
    assert_eq!(n, report.pooled_n);
    let expected = (weighted / n as f64).sqrt();
    assert!((report.rmse_overall - expected).abs() <= 1e-12 * expected, "{} vs {expected}", report.rmse_overall);
    assert!(report.rmse_overall > 0.0);
}

#[test]
fn the_expert_scores_zero_against_itself() {
    let mpc_cfg = MpcConfig::default();
    let report = eval::evaluate(&eval::expert_policy(&mpc_cfg), &small_eval(4, 25), &mpc_cfg).unwrap();
    assert_eq!(report.rmse_overall, 0.0);
    assert_eq!(report.pooled_n, 100);
    assert!(report.per_sim.iter().all(|s| s.rmse == Some(0.0)));
}

#[test]
fn full_protocol_pools_fifty_thousand_steps() {
    let zero = MlpParams::zeros();
    let mpc_cfg = MpcConfig::default();
    let policy = NeuralPolicy { params: &zero, bounds: mpc_cfg.bounds };
    let cfg = EvalConfig { seed: 1, ..EvalConfig::default() };
    assert_eq!((cfg.n_sims, cfg.steps), (200, 250));
    let report = eval::evaluate(&policy, &cfg, &mpc_cfg).unwrap();
    assert_eq!(report.divergence_count, 0);
    assert_eq!(report.pooled_n, 50_000);
    assert_eq!(report.per_sim.len(), 200);
    let inside = report.per_sim.iter().filter(|s| s.inside_bounds).count();
    assert_eq!(inside, 100);
}

#[test]
fn evaluation_is_deterministic() {
    let zero = MlpParams::zeros();
    let mpc_cfg = MpcConfig::default();
    let policy = NeuralPolicy { params: &zero, bounds: mpc_cfg.bounds };
    let a = eval::evaluate(&policy, &small_eval(3, 10), &mpc_cfg).unwrap();
    let b = eval::evaluate(&policy, &small_eval(3, 10), &mpc_cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn paired_rollout_from_rest() {
    let mpc_cfg = MpcConfig::default();
    let r = eval::paired_rollout(&State::ORIGIN, &eval::expert_policy(&mpc_cfg), 250, &mpc_cfg).unwrap();
    assert!(!r.diverged);
    for s in r.expert.states.iter().chain(&r.neural.states) {
        assert!(s.norm() <= 1e-2);
    }
}

#[test]
fn paired_rollout_lengths_and_labels() {
    let mpc_cfg = MpcConfig::default();
    let zero = MlpParams::zeros();
    let policy = NeuralPolicy { params: &zero, bounds: mpc_cfg.bounds };
    let s0 = State::new(0.8, 0.5, -0.3, 0.2);
    let r = eval::paired_rollout(&s0, &policy, 40, &mpc_cfg).unwrap();
    assert!(!r.diverged);
    assert_eq!((r.expert.len(), r.neural.len(), r.expert_controls_on_neural_states.len()), (40, 40, 40));
    for (x, u) in r.neural.states.iter().zip(&r.expert_controls_on_neural_states) {
        assert_eq!(*u, mpc::solve(x, &mpc_cfg, None).unwrap().first_control);
    }
    let (t, p) = r.paired_controls(Pairing::OnPolicyStates);
    assert_eq!((t, p), (&r.expert_controls_on_neural_states[..], &r.neural.controls[..]));
    let (t, p) = r.paired_controls(Pairing::IndependentTrajectories);
    assert_eq!((t, p), (&r.expert.controls[..], &r.neural.controls[..]));
}

#[test]
fn divergence_truncates_both_records() {
    let mpc_cfg = MpcConfig::default();
    let r = eval::paired_rollout(&State::ORIGIN, &Runaway, 50, &mpc_cfg).unwrap();
    assert!(r.diverged);
    let n = r.neural.len();
    assert!(n > 0 && n < 50);
    assert_eq!(r.expert.len(), n);
    assert_eq!(r.expert_controls_on_neural_states.len(), n);
    assert!(r.expert.is_consistent() && r.neural.is_consistent());

    let report = eval::evaluate(&Runaway, &small_eval(2, 50), &mpc_cfg).unwrap();
    assert_eq!(report.divergence_count, 2);
    assert!(report.pooled_n > 0 && report.pooled_n < 100);
}

#[test]
fn pairings_differ_for_an_imperfect_policy() {
    let mpc_cfg = MpcConfig::default();
    let zero = MlpParams::zeros();
    let policy = NeuralPolicy { params: &zero, bounds: mpc_cfg.bounds };
    let on = eval::evaluate(&policy, &small_eval(2, 20), &mpc_cfg).unwrap();
    let cfg = EvalConfig { pairing: Pairing::IndependentTrajectories, ..small_eval(2, 20) };
    let independent = eval::evaluate(&policy, &cfg, &mpc_cfg).unwrap();
    assert_eq!(on.pooled_n, independent.pooled_n);
    assert_ne!(on.rmse_overall, independent.rmse_overall);
}

#[test]
fn eval_config_invariants() {
    assert!(EvalConfig::default().validate().is_ok());
    assert!(EvalConfig { n_sims: 0, ..EvalConfig::default() }.validate().is_err());
    assert!(EvalConfig { steps: 0, ..EvalConfig::default() }.validate().is_err());
    assert_eq!(EvalConfig::default().regime, RegimeMix::Mixed);
}

#[test]
fn exported_trajectories_round_trip() {
    let mpc_cfg = MpcConfig::default();
    let zero = MlpParams::zeros();
    let policy = NeuralPolicy { params: &zero, bounds: mpc_cfg.bounds };
    let evaluation = eval::evaluate_with_rollouts(&policy, &small_eval(1, 250), &mpc_cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest =
        eval::export_trajectories(&evaluation.rollouts, dir.path(), serde_json::json!({ "note": "test" })).unwrap();
    assert_eq!(manifest.files.len(), 2);
    let r = &evaluation.rollouts[0];
    for f in &manifest.files {
        let path = dir.path().join(&f.file);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 251);
        let (traj, source) = eval::read_trajectory_csv(&path).unwrap();
        assert_eq!(source, f.source);
        let expected = match source {
            Source::Mpc => &r.expert,
            Source::Neural => &r.neural,
        };
        assert_eq!(&traj, expected);
    }
    let listed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(eval::TRAJECTORY_MANIFEST)).unwrap()).unwrap();
    let names: Vec<&str> = listed["files"].as_array().unwrap().iter().map(|f| f["file"].as_str().unwrap()).collect();
    let mut on_disk: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    on_disk.sort();
    let mut names_sorted: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    names_sorted.sort();
    assert_eq!(names_sorted, on_disk);
    assert_eq!(listed["config"]["note"], "test");
}

#[test]
fn malformed_trajectory_files_are_reported_with_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "t,y\n").unwrap();
    match eval::read_trajectory_csv(&path) {
        Err(EvalError::Malformed { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected malformed file error, got {other:?}"),
    }
}

fn control_seq(max_len: usize) -> impl Strategy<Value = Vec<Control>> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0).prop_map(|(a, b)| Control::new(a, b)), 1..max_len)
}

proptest! {
    #[test]
    fn rmse_is_symmetric_and_nonnegative(pair in control_seq(30).prop_flat_map(|a| {
        let n = a.len();
        (Just(a), prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y)| Control::new(x, y)), n))
    })) {
        let (a, b) = pair;
        let ab = eval::rmse(&a, &b).unwrap();
        prop_assert_eq!(ab, eval::rmse(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab == 0.0, a == b);
        prop_assert_eq!(eval::rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rmse_scales_linearly(a in control_seq(30), shift in -5.0f64..5.0, k in -20.0f64..20.0) {
        let b: Vec<Control> = a.iter().map(|c| Control::new(c.u1 + shift, c.u2 - 0.5 * shift)).collect();
        let scale = |v: &[Control]| v.iter().map(|c| Control::new(k * c.u1, k * c.u2)).collect::<Vec<_>>();
        let base = eval::rmse(&a, &b).unwrap();
        let scaled = eval::rmse(&scale(&a), &scale(&b)).unwrap();
        prop_assert!((scaled - k.abs() * base).abs() <= 1e-12 * (1.0 + k.abs() * base));
    }

    #[test]
    fn pooling_identity_holds_for_arbitrary_groups(
        groups in prop::collection::vec(control_seq(20).prop_flat_map(|a| {
            let n = a.len();
            (Just(a), prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y)| Control::new(x, y)), n))
        }), 1..8),
    ) {
        let all_true: Vec<Control> = groups.iter().flat_map(|g| g.0.clone()).collect();
        let all_pred: Vec<Control> = groups.iter().flat_map(|g| g.1.clone()).collect();
        let pooled = eval::rmse(&all_true, &all_pred).unwrap();
        let weighted: f64 = groups.iter().map(|(t, p)| t.len() as f64 * eval::rmse(t, p).unwrap().powi(2)).sum();
        let expected = (weighted / all_true.len() as f64).sqrt();
        prop_assert!((pooled - expected).abs() <= 1e-12 * expected.max(f64::MIN_POSITIVE));
    }
}
