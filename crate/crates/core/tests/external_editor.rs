use std::path::PathBuf;
use std::process::Command;

use ndarray::Array2;
use ptypnp::editors::{external_edit, EditorError};
use ptypnp::metrics::grid_artifact_score;
use ptypnp::simulation::{
    make_phantom, make_probe, make_scan_grid, perturb_probe, simulate_dataset, GridSpec, PhantomKind, PhantomSpec,
};
use ptypnp::types::wavelength_from_kev;
use ptypnp::{run_pnp, EditorSpec, Error, ObjectModel, PnpConfig, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sh(script: &str, timeout: f64) -> EditorSpec {
    EditorSpec::external(vec!["sh".into(), "-c".into(), script.into(), "editor".into()], timeout)
}

fn ramp(h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, x)| (y * w + x) as f64 / (h * w) as f64)
}

/// Smooth background, a periodic grid and a little white noise.
fn gridded(n: usize, period: f64) -> Array2<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    Array2::from_shape_fn((n, n), |(y, x)| {
        let smooth = 0.5 + 0.2 * ((y as f64 / n as f64) * 3.0).sin() * ((x as f64 / n as f64) * 2.0).cos();
        let noise = 0.01 * (rng.random::<f64>() - 0.5);
        smooth + noise + 0.05 * ((tau * y as f64 / period).cos() + (tau * x as f64 / period).cos())
    })
}

fn mock_script() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mock_editor.py")
}

fn numpy_available() -> bool {
    Command::new("python3")
        .args(["-c", "import numpy"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

#[test]
fn copy_stub_round_trips_through_float32() {
    let img = ramp(12, 20);
    let out = external_edit(&img, &sh(r#"cp "$1/input.npy" "$1/output.npy""#, 30.0)).unwrap();
    assert_eq!(out.dim(), img.dim());
    for (a, b) in out.iter().zip(img.iter()) {
        assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
    }
}

#[test]
fn request_manifest_names_the_image_shape() {
    let img = ramp(12, 20);
    let script = r#"grep -q '"height": 12' "$1/request.json" && grep -q '"width": 20' "$1/request.json" && grep -q '"mode": "remove"' "$1/request.json" && cp "$1/input.npy" "$1/output.npy""#;
    external_edit(&img, &sh(script, 30.0)).unwrap();
}

#[test]
fn nonzero_exit_reports_captured_stderr() {
    match external_edit(&ramp(4, 4), &sh("echo model exploded >&2; exit 7", 30.0)) {
        Err(EditorError::ProcessFailed { output, .. }) => assert!(output.contains("model exploded"), "{output}"),
        other => panic!("expected ProcessFailed, got {other:?}"),
    }
}

#[test]
fn slow_editor_times_out() {
    let start = std::time::Instant::now();
    match external_edit(&ramp(4, 4), &sh("sleep 30", 0.3)) {
        Err(EditorError::Timeout(t)) => assert_eq!(t, 0.3),
        other => panic!("expected Timeout, got {other:?}"),
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn missing_output_is_reported() {
    assert!(matches!(
        external_edit(&ramp(4, 4), &sh("true", 30.0)),
        Err(EditorError::MissingOutput(_))
    ));
}

#[test]
fn wrong_shape_is_reported() {
    let script = format!(r#"cp "{}" "$1/output.npy""#, {
        let dir = tempfile::tempdir().unwrap().keep();
        let p = dir.join("small.npy");
        ptypnp::npy::write_real2_f32(&p, &ramp(3, 5)).unwrap();
        p.display().to_string()
    });
    match external_edit(&ramp(4, 4), &sh(&script, 30.0)) {
        Err(EditorError::ShapeMismatch { expected, actual }) => {
            assert_eq!(expected, (4, 4));
            assert_eq!(actual, (3, 5));
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
}

#[test]
fn garbage_output_is_invalid() {
    assert!(matches!(
        external_edit(&ramp(4, 4), &sh(r#"echo nope > "$1/output.npy""#, 30.0)),
        Err(EditorError::InvalidOutput(_))
    ));
}

#[test]
fn missing_program_is_a_spawn_error() {
    let spec = EditorSpec::external(vec!["/nonexistent/editor-binary".into()], 5.0);
    assert!(matches!(
        external_edit(&ramp(4, 4), &spec),
        Err(EditorError::Spawn { .. })
    ));
}

#[test]
fn python_mock_adapter_removes_grid() {
    if !numpy_available() {
        eprintln!("skipping: python3 with numpy not available");
        return;
    }
    let img = gridded(64, 8.0);
    let spec = EditorSpec::external(
        vec!["python3".into(), mock_script().display().to_string(), "8".into()],
        60.0,
    );
    let a = external_edit(&img, &spec).unwrap();
    let b = external_edit(&img, &spec).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let before = grid_artifact_score(&img, 8.0, 8.0).unwrap();
    let after = grid_artifact_score(&a, 8.0, 8.0).unwrap();
    assert!(after < 0.2 * before, "{after} vs {before}");
}

#[test]
fn pnp_runs_end_to_end_with_the_python_mock() {
    if !numpy_available() {
        eprintln!("skipping: python3 with numpy not available");
        return;
    }
    let truth = make_phantom(&PhantomSpec::new(PhantomKind::TexturedSingleSlice, 48, 2)).unwrap();
    let probe = make_probe(12.0, 24, 1, 0.5, 0.0, wavelength_from_kev(10.0), 10.0, 3).unwrap();
    let grid = make_scan_grid(&GridSpec::rectangular(8.0, 4, 4), (24, 24), (48, 48)).unwrap();
    let data = simulate_dataset(&truth, &probe, &grid, None, 0).unwrap();
    let solver = SolverConfig {
        n_iterations: 6,
        batch_size: 4,
        rng_seed: 1,
        ..SolverConfig::default()
    };
    let editor = EditorSpec::external(
        vec!["python3".into(), mock_script().display().to_string(), "8".into()],
        60.0,
    );
    let cfg = PnpConfig::new(1e-3, 0.8, 2, 3, editor);
    let start = ObjectModel::uniform((48, 48), 1, 10.0, 0.0).unwrap();
    let out = run_pnp(&cfg, &solver, &grid, &data, start, perturb_probe(&probe, 1.05).unwrap()).unwrap();
    assert_eq!(out.final_object.shape(), (48, 48));
    assert!(out.warnings.is_empty(), "{:?}", out.warnings);
    assert!(out
        .final_object
        .slices()
        .iter()
        .all(|s| s.as_array().iter().all(|v| v.is_finite())));
}

#[test]
fn failing_editor_aborts_pnp_unless_optional() {
    let truth = make_phantom(&PhantomSpec::new(PhantomKind::TexturedSingleSlice, 32, 2)).unwrap();
    let probe = make_probe(10.0, 16, 1, 0.5, 0.0, wavelength_from_kev(10.0), 10.0, 3).unwrap();
    let grid = make_scan_grid(&GridSpec::rectangular(6.0, 3, 3), (16, 16), (32, 32)).unwrap();
    let data = simulate_dataset(&truth, &probe, &grid, None, 0).unwrap();
    let solver = SolverConfig {
        n_iterations: 2,
        batch_size: 3,
        ..SolverConfig::default()
    };
    let start = ObjectModel::uniform((32, 32), 1, 10.0, 0.0).unwrap();
    let mut cfg = PnpConfig::new(1e-3, 0.8, 1, 2, sh("exit 1", 30.0));
    let err = run_pnp(&cfg, &solver, &grid, &data, start.clone(), probe.clone()).unwrap_err();
    assert!(matches!(err, Error::Editor(_)), "{err}");

    cfg.editor_optional = true;
    let out = run_pnp(&cfg, &solver, &grid, &data, start, probe).unwrap();
    assert_eq!(out.warnings.len(), 2);
}
