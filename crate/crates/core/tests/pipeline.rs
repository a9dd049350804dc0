use std::path::{Path, PathBuf};

use mcvar_core::experiment::{solve_window, ExperimentConfig};
use mcvar_core::formulation::{
    build_nom, build_rom_rkhs, from_text, to_text, AmbiguityConfig, ModelConfig, ReturnTargetRule,
};
use mcvar_core::kernel::DEFAULT_JITTER_START;
use mcvar_core::scenarios::write_prices_long;
use mcvar_core::solver::{branch_and_bound, solve_continuous, ContinuousOptions};
use mcvar_core::synthetic::{generate, SyntheticSpec};
use mcvar_core::{
    BnbConfig, Error, ExpansionSet, KernelSpec, ScenarioMatrix, SolveStatus, StrategyKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn shipped() -> ExperimentConfig {
    ExperimentConfig::from_path(&root().join("configs/default.toml")).unwrap()
}

#[test]
fn shipped_panel_is_the_seeded_generator_output() {
    let on_disk = std::fs::read_to_string(root().join("data/synthetic_weekly.csv")).unwrap();
    let fresh = write_prices_long(&generate(&SyntheticSpec::default()).unwrap());
    assert_eq!(on_disk, fresh);
}

#[test]
fn shipped_dataset_shape() {
    let data = shipped().load_dataset().unwrap();
    assert_eq!(data.scen.n_assets(), 8);
    assert_eq!(data.scen.periods(), 119);
    assert_eq!(data.plan.len(), 17);
    assert_eq!(data.benchmark.as_ref().map(Vec::len), Some(119));
}

#[test]
fn robust_program_survives_text_round_trip() {
    let cfg = shipped();
    let data = cfg.load_dataset().unwrap();
    let window = &data.plan.windows[0];
    let in_sample = data.scen.slice_periods(window.in_range()).unwrap();
    let model = cfg.model.instantiate(&in_sample, true).unwrap();
    let program = build_rom_rkhs(&in_sample, &model).unwrap();

    let back = from_text(&to_text(&program)).unwrap();
    assert_eq!(back, program);

    let opts = ContinuousOptions::default();
    let a = solve_continuous(&program, &opts).unwrap();
    let b = solve_continuous(&back, &opts).unwrap();
    assert_eq!(a.status, SolveStatus::Optimal);
    assert_eq!(a.objective, b.objective);
}

#[test]
fn solve_window_reports_kernel_data_for_robust_model() {
    let cfg = shipped();
    let rep = solve_window(&cfg, StrategyKind::RomRkhs, 0).unwrap();
    assert_eq!(rep.status, SolveStatus::Optimal);
    let (alpha, s_bar, _) = rep.kernel.unwrap();
    assert_eq!(alpha, 0.05);
    assert!(s_bar > 0.0 && s_bar <= 1.0 + 1e-9);
    assert!((rep.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);

    let nominal = solve_window(&cfg, StrategyKind::Nominal, 0).unwrap();
    assert!(nominal.kernel.is_none());
    assert!(matches!(
        solve_window(&cfg, StrategyKind::Nominal, 17),
        Err(Error::OutOfRange { index: 17, len: 17 })
    ));
    assert!(solve_window(&cfg, StrategyKind::EqualWeight, 0).is_err());
}

/// With a zero radius the worst-case dual optimum is not attained when the
/// return requirement binds, so the conic solves stall. The search must then
/// either match the nominal optimum or say it could not certify one; it must
/// never return a wrong optimum labelled optimal.
#[test]
fn zero_radius_with_binding_target_is_never_silently_wrong() {
    let mut g = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|i| (0..20).map(|_| g.gen_range(-0.03..0.04) + 0.002 * i as f64).collect())
        .collect();
    let scen = ScenarioMatrix::from_rows(&rows, (0..5).map(|i| format!("a{i}")).collect()).unwrap();
    let mut cfg = ModelConfig::standard(5, 3, ReturnTargetRule::EqualWeightMean.target(&scen));
    cfg.gamma_chance = 1.0;

    let nom = build_nom(&scen, &cfg).unwrap();
    let n = branch_and_bound(&nom, &BnbConfig::default()).unwrap();
    let row = nom.ineq_constraints.iter().find(|r| r.label == "return").unwrap();
    assert!(row.rhs - row.lhs(&n.primal) < 1e-8, "fixture must bind");

    let exp = ExpansionSet::from_scenarios(&scen, 20).unwrap();
    cfg.ambiguity =
        Some(AmbiguityConfig::new(0.0, exp, &KernelSpec::median(), DEFAULT_JITTER_START).unwrap());
    let rom = build_rom_rkhs(&scen, &cfg).unwrap();
    let r = branch_and_bound(&rom, &BnbConfig::default()).unwrap();
    if r.status == SolveStatus::Optimal {
        assert!((r.objective - n.objective).abs() <= 1e-4);
    } else {
        assert!(r.bound <= n.objective + 1e-6);
        assert!(r.objective >= n.objective - 1e-6);
    }
}
