mod common;

use std::fs;
use std::process::Command;

use proptest::prelude::*;

use riskgame::config::{
    AdversaryKind, AgentKind, ControlWeights, ExperimentKind, Mode, NumericsConfig, Scenario, ScenarioConfig,
};
use riskgame::experiment::{build_spec, run_experiment};
use riskgame::game::{resolve_lambda, Rect};
use riskgame::output::{csv_header, emit_outputs, summary_table, TRAJECTORIES_FILE};
use riskgame::scenarios::{attenuation_lambda, relative_noise};
use riskgame::stats::{wilson_interval, Z95};
use riskgame::Error;

fn small_pe(kind: ExperimentKind, trials: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.scenario = Scenario::PursuitEvasion;
    cfg.experiment.kind = kind;
    cfg.numerics = NumericsConfig {
        rollouts: Some(200),
        trials: Some(trials),
        ..NumericsConfig::default()
    };
    cfg
}

#[test]
fn published_scenarios_build() {
    let mut cfg = ScenarioConfig::default();
    cfg.scenario = Scenario::UnicycleDa;
    let uni = build_spec(&cfg).unwrap();
    assert!(uni.safe_set.contains(&[-0.4, -0.4, 0.0, 0.0]));
    assert_eq!(uni.partition_rows, vec![2, 3]);
    uni.validate(&uni.probe_points(100, 1)).unwrap();

    let noise = relative_noise(&cfg.pursuit_evasion);
    for s in noise {
        assert!((s - 0.2f64.sqrt()).abs() <= 1e-15);
    }
    cfg.scenario = Scenario::PursuitEvasion;
    let pe = build_spec(&cfg).unwrap();
    assert!(pe.safe_set.contains(&[0.3, 0.3]));
    assert!(!pe.safe_set.contains(&[0.06, 0.08]));
}

#[test]
fn unknown_keys_are_errors() {
    for text in ["[unicycle]\ngamma = 2.0", "[experiment]\nkinds = \"fig1\"", "seed = 4"] {
        assert!(matches!(ScenarioConfig::parse(text), Err(Error::ConfigParse(_))), "{text}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        build_spec(&cfg).unwrap();
        seen += 1;
    }
    assert!(seen >= 8);
}

fn arb_rect() -> impl Strategy<Value = Rect> {
    (-0.6f64..0.0, 0.01f64..0.5, -0.6f64..0.0, 0.01f64..0.5).prop_map(|(x, w, y, h)| Rect::new(x, x + w, y, y + h))
}

fn arb_config() -> impl Strategy<Value = ScenarioConfig> {
    (
        prop_oneof![Just(Scenario::UnicycleDa), Just(Scenario::PursuitEvasion), Just(Scenario::Custom)],
        prop_oneof![Just(Mode::Desk), Just(Mode::Full)],
        (1.01f64..20.0, 0.01f64..5.0, prop::collection::vec(arb_rect(), 0..4)),
        (1.01f64..20.0, 0.01f64..1.0, prop::option::of(0.001f64..0.1)),
        (
            prop::option::of(1e-4f64..0.1),
            prop::option::of(1usize..100_000),
            prop::option::of(1usize..20),
            prop::option::of(0..=i64::MAX as u64),
            prop::option::of(any::<bool>()),
        ),
        (
            prop_oneof![Just(ExperimentKind::Fig1), Just(ExperimentKind::Fig4), Just(ExperimentKind::Single)],
            prop::collection::vec(1.01f64..10.0, 1..6),
            prop_oneof![Just(AgentKind::Saddle), Just(AgentKind::Unaware), Just(AgentKind::Zero)],
            prop_oneof![Just(AdversaryKind::Saddle), Just(AdversaryKind::Zero)],
        ),
        prop_oneof![Just(ControlWeights::Unit), Just(ControlWeights::Normalized), Just(ControlWeights::Uncertified)],
    )
        .prop_map(|(scenario, mode, uni, pe, num, exp, weights)| {
            let mut cfg = ScenarioConfig {
                scenario,
                mode,
                ..ScenarioConfig::default()
            };
            cfg.unicycle.gamma_sq = uni.0;
            cfg.unicycle.eta = uni.1;
            cfg.unicycle.obstacles = uni.2;
            cfg.unicycle.control_weights = weights;
            cfg.pursuit_evasion.rv_sq = pe.0;
            cfg.pursuit_evasion.eta = pe.1;
            cfg.pursuit_evasion.mollifier_width = pe.2;
            cfg.numerics = NumericsConfig {
                h: num.0,
                rollouts: num.1,
                decision_steps: num.2,
                trials: None,
                master_seed: num.3,
                reproducible: num.4,
                workers: None,
            };
            cfg.experiment.kind = exp.0;
            cfg.experiment.rv_sq_values = exp.1.clone();
            cfg.experiment.gamma_sq_values = exp.1;
            cfg.experiment.agent = exp.2;
            cfg.experiment.adversary = exp.3;
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn configs_round_trip(cfg in arb_config()) {
        let text = cfg.emit().unwrap();
        prop_assert_eq!(ScenarioConfig::parse(&text).unwrap(), cfg);
    }
}

#[test]
fn empty_trial_set_writes_a_header_only_csv() {
    let cfg = small_pe(ExperimentKind::Single, 0);
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_outputs(&report, dir.path()).unwrap();
    let csv = fs::read_to_string(&files.trajectories).unwrap();
    assert_eq!(csv, format!("{}\n", csv_header(2, 2, 2)));
    let summary: toml::Table = toml::from_str(&fs::read_to_string(&files.summary).unwrap()).unwrap();
    let run = summary["runs"].as_array().unwrap()[0].as_table().unwrap();
    assert_eq!(run["trials"].as_integer(), Some(0));
    let echo = ScenarioConfig::load(&files.config).unwrap();
    assert_eq!(echo, cfg);
}

#[test]
fn fig3_exports_one_path_per_exit_kind() {
    let cfg = small_pe(ExperimentKind::Fig3, 100);
    let report = run_experiment(&cfg).unwrap();
    let run = &report.runs[0];
    assert_eq!(run.outcome.recorded.len(), 2);
    let kinds: Vec<_> = run.outcome.recorded.iter().map(|(_, t)| t.path.exit_kind.label()).collect();
    assert_eq!(kinds.len(), 2);
    assert_ne!(kinds[0], kinds[1]);

    let mut csv = Vec::new();
    riskgame::output::write_trajectories(&mut csv, &report).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut groups: Vec<(String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[1].to_string(), cols.last().unwrap().to_string())
        })
        .filter(|(_, exit)| exit != "none")
        .collect();
    groups.sort();
    groups.dedup();
    assert_eq!(groups.len(), 2);
    assert!(groups.iter().any(|g| g.1 == "boundary") && groups.iter().any(|g| g.1 == "horizon"));
}

#[test]
fn csv_rows_use_seventeen_significant_digits() {
    let cfg = small_pe(ExperimentKind::Single, 2);
    let report = run_experiment(&cfg).unwrap();
    let mut csv = Vec::new();
    riskgame::output::write_trajectories(&mut csv, &report).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let row: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
    for field in &row[3..row.len() - 1] {
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.len(), 18, "{field}");
        assert_eq!(field.parse::<f64>().unwrap().to_string().parse::<f64>().unwrap(), field.parse::<f64>().unwrap());
    }
}

#[test]
fn rerun_is_byte_identical() {
    let cfg = small_pe(ExperimentKind::Single, 6);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let report = run_experiment(&cfg).unwrap();
            emit_outputs(&report, d.path()).unwrap();
            fs::read(d.path().join(TRAJECTORIES_FILE)).unwrap()
        })
        .collect();
    assert!(!bytes[0].is_empty());
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn fig4_runs_are_sorted_by_rv_sq() {
    let mut cfg = small_pe(ExperimentKind::Fig4, 4);
    cfg.experiment.rv_sq_values = vec![5.0, 1.5, 3.0, 1.5, 2.0];
    cfg.experiment.recorded_trials = 1;
    let report = run_experiment(&cfg).unwrap();
    let keys: Vec<f64> = report.runs.iter().map(|r| r.parameter.as_ref().unwrap().1).collect();
    assert_eq!(keys, vec![1.5, 2.0, 3.0, 5.0]);
    assert!(report.runs.iter().all(|r| r.parameter.as_ref().unwrap().0 == "rv_sq"));
    for (run, r) in report.runs.iter().zip(&keys) {
        assert!((run.lambda - attenuation_lambda(*r).unwrap()).abs() <= 1e-12);
        let o = &run.outcome;
        assert!(o.trials >= 1);
        assert_eq!(o.ci, wilson_interval(o.failures, o.trials, Z95));
    }
    let summary = summary_table(&report);
    let runs = summary["runs"].as_array().unwrap();
    let listed: Vec<f64> = runs.iter().map(|r| r["rv_sq"].as_float().unwrap()).collect();
    assert_eq!(listed, keys);
}

#[test]
fn reported_lambda_is_the_closed_form() {
    for g in [2.0, 3.0, 7.0] {
        let mut cfg = ScenarioConfig::default();
        cfg.scenario = Scenario::UnicycleDa;
        cfg.unicycle.gamma_sq = g;
        for (weights, scale) in [(ControlWeights::Normalized, 1.0), (ControlWeights::Unit, 0.01)] {
            cfg.unicycle.control_weights = weights;
            let spec = build_spec(&cfg).unwrap();
            let cert = resolve_lambda(&spec, &spec.probe_points(100, 2)).unwrap();
            assert!((cert.lambda - scale * g / (g - 1.0)).abs() <= 1e-12);
        }
    }
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_riskgame")).args(args).env("RUST_LOG", "warn").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn cli_exit_codes_follow_the_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let good = write("good.toml", "scenario = \"pursuit_evasion\"\n");
    let (code, stdout) = cli(&["validate", "--config", &good]);
    assert_eq!(code, 0);
    assert!(stdout.contains("lambda = 2"), "{stdout}");

    let weak = write("weak.toml", "scenario = \"unicycle_da\"\n[unicycle]\ngamma_sq = 0.5\n");
    assert_eq!(cli(&["validate", "--config", &weak]).0, 3);

    let typo = write("typo.toml", "[pursuit_evasion]\nrv = 2.0\n");
    assert_eq!(cli(&["validate", "--config", &typo]).0, 2);

    let missing = dir.path().join("absent.toml");
    assert_eq!(cli(&["validate", "--config", &missing.to_string_lossy()]).0, 4);
}

#[test]
fn cli_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "scenario = \"pursuit_evasion\"\n[numerics]\nrollouts = 100\ntrials = 3\n[experiment]\nrecorded_trials = 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let (code, _) = cli(&["run", "--config", &cfg.to_string_lossy(), "--out", &out.to_string_lossy(), "--seed", "9"]);
    assert_eq!(code, 0);
    assert!(out.join(TRAJECTORIES_FILE).exists());
    let (code, stdout) = cli(&["report", "--out", &out.to_string_lossy()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("trials 3"), "{stdout}");
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    let mut cfg = small_pe(ExperimentKind::Single, 1);
    cfg.numerics.master_seed = Some(i64::MAX as u64);
    cfg.validate().unwrap();
    cfg.numerics.master_seed = Some(i64::MAX as u64 + 1);
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}
