mod common;

use std::sync::OnceLock;

use common::*;
use riskgame::closed_loop::{
    empirical_game_value, estimate_failure_probability, ledger_for, run_trial, theorem3_check, BoundedAdversary,
    GameOutcome, Planner, PolicyHandle,
};
use riskgame::config::CustomConfig;
use riskgame::game::GameSpec;
use riskgame::oracle::{solve_dirichlet, Grid2D};
use riskgame::path_integral::generate_batch;
use riskgame::rng::RngStreamKey;
use riskgame::sde::ExitKind;
use riskgame::stats::{wilson_interval, Z95};
use riskgame::Error;

#[test]
fn one_step_horizon_takes_a_single_step() {
    for (x0, kind, terminal) in [([0.3, 0.3], ExitKind::HorizonEnd, 0.0), ([0.1005, 0.0], ExitKind::BoundaryExit, 0.2)] {
        let mut spec = pe_spec();
        spec.t0 = spec.horizon - 0.01;
        spec.x0 = sv(&x0);
        let p = planner(spec, desk_settings(2));
        let found = (0..200).find_map(|i| {
            let (traj, ledger) = run_trial(&p, &PolicyHandle::saddle(), &PolicyHandle::saddle(), i).unwrap();
            assert_eq!(traj.path.states.len(), 2);
            assert_eq!(ledger.exit_time, p.spec.horizon);
            (ledger.exit_kind == kind).then_some(ledger)
        });
        let ledger = found.expect("both exit kinds occur within 200 trials");
        assert_eq!(ledger.terminal, terminal);
        assert_eq!(ledger.decisions, 1);
    }
}

fn zero_play() -> &'static (Planner, GameOutcome) {
    static OUT: OnceLock<(Planner, GameOutcome)> = OnceLock::new();
    OUT.get_or_init(|| {
        let p = planner(pe_spec(), desk_settings(3));
        let out = estimate_failure_probability(&p, &PolicyHandle::zero(), &PolicyHandle::zero(), 1000, 20).unwrap();
        (p, out)
    })
}

#[test]
fn zero_policies_fail_at_the_uncontrolled_rate() {
    let (p, out) = zero_play();
    let batch = generate_batch(&p.spec, &p.spec.x0, 0.0, 0.01, 100_000, RngStreamKey::new(99, 0, 0, 0)).unwrap();
    let reference = batch.exit_fraction();
    println!("closed loop {} [{:.3}, {:.3}], direct {reference}", out.p_fail, out.ci.0, out.ci.1);
    assert!(out.ci.0 <= reference && reference <= out.ci.1);
    assert_eq!(out.decisions, 0);
}

#[test]
fn trials_are_conserved_and_ci_is_wilson() {
    let (_, out) = zero_play();
    let survivals = out.ledgers.iter().filter(|l| l.exit_kind == ExitKind::HorizonEnd).count();
    assert_eq!(out.failures + survivals, out.trials);
    let p_adversary = survivals as f64 / out.trials as f64;
    assert!((p_adversary - (1.0 - out.p_fail)).abs() <= 1e-15);
    assert_eq!(out.ci, wilson_interval(out.failures, out.trials, Z95));
}

#[test]
fn ledgers_add_up_exactly() {
    let p = planner(pe_spec(), desk_settings(4));
    let out = estimate_failure_probability(&p, &PolicyHandle::saddle(), &PolicyHandle::saddle(), 24, 24).unwrap();
    for ((i, traj), ledger) in out.recorded.iter().zip(&out.ledgers) {
        let fresh = ledger_for(&p.spec, traj);
        assert_eq!(fresh.terminal, ledger.terminal, "trial {i}");
        assert_eq!(fresh.running(), ledger.running());
        assert_eq!(ledger.total(), ledger.terminal + ledger.running());
    }
    let mean = out.ledgers.iter().map(|l| l.total()).sum::<f64>() / out.trials as f64;
    assert!((mean - out.cost_mean).abs() <= 1e-14 * mean.abs().max(1.0));
    // V ≡ 0 and ψ ≡ 0: cost = η·P_fail + net control energy.
    let decomposed = 0.2 * out.p_fail + out.control_energy_u - out.control_energy_v;
    assert!((decomposed - out.cost_mean).abs() <= 1e-12);
}

/// dx = u dt + v dt + 0.5 dw on (−1, 1) with R_u = 1, R_v = 4 (γ² = 4).
fn attenuation_lq() -> GameSpec {
    lq_spec(CustomConfig {
        drift: vec![0.0],
        sigma: vec![0.5],
        x0: vec![0.5],
        ..CustomConfig::default()
    })
}

#[test]
fn attenuation_bound_rows() {
    let p = planner(attenuation_lq(), desk_settings(5));
    assert!((p.lambda.lambda - 1.0 / 3.0).abs() <= 1e-12);
    let gamma_sq = 4.0;
    let trials = 200;
    let saddle = estimate_failure_probability(&p, &PolicyHandle::saddle(), &PolicyHandle::saddle(), trials, 0).unwrap();
    let delta_gamma = saddle.ledgers.iter().map(|l| 2.0 * l.adversary_energy / gamma_sq).sum::<f64>() / trials as f64;
    let adversaries = vec![
        BoundedAdversary {
            label: "v*".into(),
            policy: PolicyHandle::saddle(),
            delta: None,
        },
        BoundedAdversary {
            label: "zero".into(),
            policy: PolicyHandle::zero(),
            delta: Some(delta_gamma),
        },
        BoundedAdversary {
            label: "half".into(),
            policy: PolicyHandle::saddle().perturbed(riskgame::closed_loop::Perturbation::scaling(0.5, 1)),
            delta: None,
        },
    ];
    let report = theorem3_check(&p, gamma_sq, &adversaries, trials, Some(saddle)).unwrap();
    for row in &report.rows {
        println!("{}: gap {:.5} (2se {:.5})", row.label, row.gap, 2.0 * row.combined_se);
    }
    assert_eq!(report.rows[0].gap, 0.0);
    assert_eq!(report.rows[0].delta, report.delta_gamma);
    assert!(report.rows.iter().all(|r| r.holds));

    let too_small = [BoundedAdversary {
        label: "v*".into(),
        policy: PolicyHandle::saddle(),
        delta: Some(0.0),
    }];
    let err = theorem3_check(&p, gamma_sq, &too_small, 20, None);
    assert!(matches!(err, Err(Error::EnergyBoundViolated { .. })));
}

#[test]
fn empirical_value_matches_the_oracle() {
    let p = planner(pe_spec(), desk_settings(6));
    let (value, se) = empirical_game_value(&p, &p.spec.x0, p.spec.t0, 200).unwrap();
    let sol = solve_dirichlet(&p.spec, &Grid2D::square(2.0, 201, 1000, 50), p.lambda.lambda).unwrap();
    let j = sol.value_at(p.spec.x0.as_slice(), p.spec.t0).unwrap();
    // The oracle's discretization error (under 0.1% of ξ) is negligible next to the MC error.
    println!("empirical value {value:.5} +- {se:.5}, oracle J {j:.5}");
    assert!((value - j).abs() <= 3.0 * se, "value {value} vs J {j} (se {se})");
}
