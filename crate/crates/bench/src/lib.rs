//! Fixtures shared by the criterion benchmarks.

use mcvar_core::formulation::{AmbiguityConfig, EllipsoidShape, ModelConfig, ReturnTargetRule};
use mcvar_core::kernel::{ExpansionSet, KernelSpec, DEFAULT_JITTER_START};
use mcvar_core::synthetic::{generate, SyntheticSpec};
use mcvar_core::{scenarios, ScenarioMatrix};

/// First `periods` weekly returns of the synthetic panel, benchmark removed.
pub fn scenarios(periods: usize) -> ScenarioMatrix {
    let prices = generate(&SyntheticSpec::default()).expect("synthetic panel");
    let all = scenarios::align_assets(&prices).expect("aligned");
    let (scen, _) = all.split_off_asset("MKT").expect("benchmark column");
    scen.slice_periods(0..periods).expect("enough periods")
}

pub fn nominal_config(scen: &ScenarioMatrix, cardinality: usize) -> ModelConfig {
    let target = ReturnTargetRule::TwiceEqualWeightMean.target(scen);
    ModelConfig::standard(scen.n_assets(), cardinality, target)
}

pub fn robust_config(scen: &ScenarioMatrix, cardinality: usize, sample_count: usize) -> ModelConfig {
    let mut cfg = nominal_config(scen, cardinality);
    cfg.ellipsoid = EllipsoidShape::Scaled(0.072);
    let exp = ExpansionSet::from_scenarios(scen, sample_count).expect("expansion set");
    cfg.ambiguity =
        Some(AmbiguityConfig::new(0.05, exp, &KernelSpec::median(), DEFAULT_JITTER_START).expect("factors"));
    cfg
}
