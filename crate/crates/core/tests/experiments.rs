use sheaf_sysid::experiments::{
    basis_table, formation_table, run_bounded_confidence, run_finite_basis, run_formation_transfer, threshold_table,
    BasisVariant, Coverage, ExperimentConfig, ExperimentId, ResidualMode,
};

fn small(id: ExperimentId) -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0, 1],
        horizon: 2.0,
        train_trajectories: 2,
        holdout_trajectories: 1,
        ..ExperimentConfig::new(id)
    }
}

fn on_threads<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn threshold_study_is_thread_count_independent() {
    let cfg = small(ExperimentId::BoundedConfidence);
    let a = on_threads(1, || run_bounded_confidence(&cfg).unwrap());
    let b = on_threads(4, || run_bounded_confidence(&cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(threshold_table(&a).to_csv(), threshold_table(&b).to_csv());
    // 2 seeds × 2 coverages × 2 residual modes.
    assert_eq!(a.len(), 8);
}

#[test]
fn basis_study_is_thread_count_independent() {
    let cfg = small(ExperimentId::FiniteBasis);
    let a = on_threads(1, || run_finite_basis(&cfg).unwrap());
    let b = on_threads(3, || run_finite_basis(&cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(basis_table(&a).to_text(), basis_table(&b).to_text());
    let augmented: Vec<_> = a.iter().filter(|r| r.basis == BasisVariant::Augmented).collect();
    assert_eq!(augmented.len(), 1);
    assert!(!augmented[0].identifiable);
}

#[test]
fn formation_study_is_repeatable() {
    let cfg = ExperimentConfig::new(ExperimentId::FormationTransfer);
    let a: Vec<_> = run_formation_transfer(&cfg)
        .unwrap()
        .into_iter()
        .map(|r| r.row)
        .collect();
    let b: Vec<_> = on_threads(1, || run_formation_transfer(&cfg).unwrap())
        .into_iter()
        .map(|r| r.row)
        .collect();
    assert_eq!(a, b);
    assert_eq!(formation_table(&a).to_csv(), formation_table(&b).to_csv());
    assert_eq!(a.len(), 4);
}

#[test]
fn selections_narrow_the_runs() {
    let cfg = ExperimentConfig {
        coverage: vec![Coverage::Broad],
        residual_modes: vec![ResidualMode::Observed],
        seeds: vec![3],
        ..small(ExperimentId::BoundedConfidence)
    };
    let runs = run_bounded_confidence(&cfg).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(
        (runs[0].seed, runs[0].coverage, runs[0].mode),
        (3, Coverage::Broad, ResidualMode::Observed)
    );
}

#[test]
fn mismatched_selections_are_config_errors() {
    let bad = ExperimentConfig {
        coverage: vec![Coverage::Limited],
        ..small(ExperimentId::BoundedConfidence)
    };
    assert!(run_bounded_confidence(&bad).is_err());
    assert!(run_finite_basis(&small(ExperimentId::BoundedConfidence)).is_err());
    let toml_text = "experiment = \"finite_basis\"\nunknown_key = 1\n";
    assert!(toml::from_str::<ExperimentConfig>(toml_text).is_err());
}
