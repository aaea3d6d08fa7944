use locprod::inference::Functional;
use locprod::{
    decomposition_table, full_fit, generate_panel, load_panel, percentile_ci, wild_bootstrap, BenchmarkRule,
    ColumnSchema, EstimationSummary, SimConfig, Sidedness,
};

fn small() -> SimConfig {
    SimConfig {
        n_firms: 60,
        periods: 6,
        seed: 41,
        ..Default::default()
    }
}

#[test]
fn canonical_csv_round_trip_gives_the_same_fit() {
    let cfg = small();
    let (panel, _) = generate_panel(&cfg).unwrap();
    let mut buf = Vec::new();
    panel.write_canonical(&mut buf).unwrap();
    let back = load_panel(buf.as_slice(), &ColumnSchema::canonical(&panel), false, b',').unwrap();
    assert_eq!(back.len(), panel.len());

    let bw = cfg.shortcut_bandwidths();
    let a = full_fit(&panel, bw, &cfg.technology()).unwrap();
    let b = full_fit(&back, bw, &cfg.technology()).unwrap();
    for (x, y) in a.productivity.omega.iter().zip(&b.productivity.omega) {
        assert!((x - y).abs() < 1e-12);
    }
    let s = EstimationSummary::new(&a, &panel);
    assert_eq!(s.n_observations, 360);
    assert!(s.nonconverged_targets.is_empty());
}

#[test]
fn fit_bootstrap_interval_and_decomposition() {
    let cfg = small();
    let (panel, _) = generate_panel(&cfg).unwrap();
    let fit = full_fit(&panel, cfg.shortcut_bandwidths(), &cfg.technology()).unwrap();

    let f = vec![Functional::Theta, Functional::ReturnsToScale { target: 0 }];
    let draws = wild_bootstrap(&panel, &fit, 60, 5, &f).unwrap();
    assert_eq!(draws.draws.len() + draws.failed.len(), 60);
    for (k, &point) in draws.point.iter().enumerate() {
        let ci = percentile_ci(&draws.column(k), point, 0.1, true, Sidedness::TwoSided).unwrap();
        assert!(ci.lower <= ci.upper);
    }
    assert_eq!(draws, wild_bootstrap(&panel, &fit, 60, 5, &f).unwrap());

    let table = decomposition_table(&panel, &fit, BenchmarkRule::MinMeanOutput, true).unwrap();
    let bench = table.benchmark.unwrap();
    for r in &table.records {
        assert!((r.delta_prod - r.delta_tech - r.delta_tfp).abs() < 1e-12);
        if r.site == bench {
            assert_eq!(r.delta_prod, 0.0);
        }
    }
}

#[test]
fn simulation_is_seed_deterministic() {
    let (a, ta) = generate_panel(&small()).unwrap();
    let (b, tb) = generate_panel(&small()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.omega, tb.omega);
    let (c, _) = generate_panel(&small().with_seed(42)).unwrap();
    assert_ne!(a, c);
}
