use ldg_core::io::{read_state, surface_vtk};
use ldg_core::scenario::{parse_energies_csv, preset, run_scenario, CurvatureSpec, MeshSpec, ScenarioConfig};

#[test]
fn cylinder_run_writes_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("cylinder").unwrap();
    config.mesh = MeshSpec::Rect { xmin: -5.0, xmax: 5.0, ymin: -2.0, ymax: 2.0, nx: 4, ny: 2 };
    config.flow.max_steps = 12;
    config.output.every = 5;
    config.output.dir = dir.path().to_path_buf();
    let outcome = run_scenario(&config).unwrap();
    assert_eq!(outcome.state.step, 12);

    let csv = std::fs::read_to_string(dir.path().join("energies.csv")).unwrap();
    let rows = parse_energies_csv(&csv).unwrap();
    assert_eq!(rows.len(), 13);
    for (row, rec) in rows.iter().zip(&outcome.state.history) {
        assert_eq!(row.step, rec.step);
        assert!((row.energy - rec.energy).abs() <= 1e-12 * rec.energy.abs().max(1.0));
    }
    for s in [0, 5, 10, 12] {
        assert!(dir.path().join(format!("snapshot_{s}.vtk")).is_file(), "snapshot {s}");
    }
    assert!(!dir.path().join("snapshot_3.vtk").exists());

    let reloaded = read_state(&dir.path().join("final_state.bin")).unwrap();
    assert_eq!(reloaded.coefficients(), outcome.state.y.coefficients());
    assert_eq!(surface_vtk(&reloaded, "t").unwrap(), surface_vtk(&outcome.state.y, "t").unwrap());

    let saved = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(ScenarioConfig::from_toml_str(&saved).unwrap().flow.max_steps, 12);
}

#[test]
fn aborted_run_leaves_the_last_accepted_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset("cylinder").unwrap();
    config.mesh = MeshSpec::Rect { xmin: -5.0, xmax: 5.0, ymin: -2.0, ymax: 2.0, nx: 4, ny: 2 };
    config.curvature = CurvatureSpec::Constant { value: [[20.0, 0.0], [0.0, 20.0]] };
    config.flow.tau = 1e3;
    config.flow.max_steps = 50;
    config.output.dir = dir.path().to_path_buf();
    assert!(run_scenario(&config).is_err());
    assert!(dir.path().join("failed_state.bin").is_file());
    assert!(!dir.path().join("final_state.bin").exists());
}
