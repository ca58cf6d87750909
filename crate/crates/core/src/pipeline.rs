//! End-to-end runs driven by a [`JobConfig`]: simulate, reconstruct (vanilla
//! or plug-and-play), evaluate, and write every artifact atomically.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{JobConfig, Manifest};
use crate::editors::SpectralFilterHook;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricOptions, MetricReport, Roi};
use crate::npy::{self, NpyArray};
use crate::pnp::run_pnp;
use crate::simulation::{make_phantom, make_scan_grid, perturb_probe, rod_mask, simulate_dataset_scaled, PhantomKind};
use crate::solver::{magnitude_mse, predict_dataset, reconstruct, IterationHook};
use crate::types::{ComplexImage, DiffractionDataset, ObjectModel, Position, ProbeModel, ScanGrid, C64};

pub const DATASET_FILE: &str = "dataset.npy";
pub const POSITIONS_FILE: &str = "positions.npy";
pub const TRUTH_OBJECT_FILE: &str = "truth_object.npy";
pub const TRUTH_PHASE_FILE: &str = "truth_phase.npy";
pub const PROBE_FILE: &str = "probe.npy";
pub const INITIAL_PROBE_FILE: &str = "probe_init.npy";
pub const ROD_MASK_FILE: &str = "rod_mask.npy";

/// A simulated experiment with its ground truth.
#[derive(Clone, Debug)]
pub struct Problem {
    pub truth: ObjectModel,
    pub probe: ProbeModel,
    pub initial_probe: ProbeModel,
    pub grid: ScanGrid,
    pub dataset: DiffractionDataset,
}

pub fn simulate(job: &JobConfig) -> Result<Problem> {
    job.validate()?;
    let truth = make_phantom(&job.phantom)?;
    let probe = job.probe.build(job.phantom.pixel_size)?;
    let grid_spec = job.resolved_grid(probe.shape(), truth.shape());
    let grid = make_scan_grid(&grid_spec, probe.shape(), truth.shape())?;
    let (dataset, scale) = simulate_dataset_scaled(
        &truth,
        &probe,
        &grid,
        job.simulation.photons_per_pattern,
        job.simulation.seed,
        job.solver.execution,
    )?;
    let probe = if scale != 1.0 {
        let s = C64::new(scale.sqrt(), 0.0);
        probe.with_modes(probe.modes().iter().map(|m| m.scaled(s)).collect())?
    } else {
        probe
    };
    let initial_probe = perturb_probe(&probe, job.simulation.initial_probe_magnify)?;
    Ok(Problem {
        truth,
        probe,
        initial_probe,
        grid,
        dataset,
    })
}

fn stack(images: &[ComplexImage]) -> Array3<C64> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share one shape")
}

fn stack_real(images: &[Array2<f64>]) -> Array3<f64> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share one shape")
}

fn write(dir: &Path, name: &str, array: &NpyArray, outputs: &mut Vec<String>) -> Result<()> {
    npy::write_npy(dir.join(name), array)?;
    outputs.push(name.to_string());
    Ok(())
}

fn complex_stack(images: &[ComplexImage]) -> NpyArray {
    NpyArray::C64(
        stack(images)
            .mapv(|v| num_complex::Complex32::new(v.re as f32, v.im as f32))
            .into_dyn(),
    )
}

fn real_stack(images: &[Array2<f64>]) -> NpyArray {
    NpyArray::F32(stack_real(images).mapv(|v| v as f32).into_dyn())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes dataset, positions, ground truth, true and initial probes.
pub fn write_problem(problem: &Problem, dir: &Path) -> Result<Vec<String>> {
    create_dir(dir)?;
    let mut out = Vec::new();
    write(
        dir,
        DATASET_FILE,
        &NpyArray::F64(problem.dataset.patterns().clone().into_dyn()),
        &mut out,
    )?;
    let pos = Array2::from_shape_fn((problem.grid.len(), 2), |(i, k)| {
        let p = problem.grid.positions()[i];
        if k == 0 {
            p.y
        } else {
            p.x
        }
    });
    write(dir, POSITIONS_FILE, &NpyArray::F64(pos.into_dyn()), &mut out)?;
    write(dir, TRUTH_OBJECT_FILE, &complex_stack(problem.truth.slices()), &mut out)?;
    write(dir, TRUTH_PHASE_FILE, &real_stack(&problem.truth.phases()), &mut out)?;
    write(dir, PROBE_FILE, &complex_stack(problem.probe.modes()), &mut out)?;
    write(
        dir,
        INITIAL_PROBE_FILE,
        &complex_stack(problem.initial_probe.modes()),
        &mut out,
    )?;
    Ok(out)
}

/// Simulates and writes the experiment plus its manifest into `dir`.
pub fn simulate_to_dir(job: &JobConfig, dir: &Path) -> Result<Manifest> {
    let problem = simulate(job)?;
    let mut manifest = Manifest::new("simulate", job);
    manifest.outputs = write_problem(&problem, dir)?;
    if job.phantom.kind == PhantomKind::CellsAndRodsTwoSlice {
        let mask = rod_mask(job.phantom.size, job.phantom.rod_period).mapv(|m| if m { 1.0f32 } else { 0.0 });
        write(
            dir,
            ROD_MASK_FILE,
            &NpyArray::F32(mask.into_dyn()),
            &mut manifest.outputs,
        )?;
    }
    manifest.write(dir)?;
    Ok(manifest)
}

/// Reads a 2D image or 3D stack of complex (or real) values.
pub fn read_complex_stack(path: &Path) -> Result<Vec<ComplexImage>> {
    let arr = npy::read_npy(path)?;
    let stack = match arr.shape().len() {
        2 => arr
            .to_complex()
            .into_dimensionality::<ndarray::Ix2>()
            .map(|a| a.insert_axis(Axis(0))),
        _ => arr.to_complex().into_dimensionality::<ndarray::Ix3>(),
    }
    .map_err(|_| Error::invalid(format!("{} must be a 2D or 3D array", path.display())))?;
    stack
        .axis_iter(Axis(0))
        .map(|s| ComplexImage::new(s.to_owned()))
        .collect()
}

/// Everything a reconstruction reads from disk.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub dataset: DiffractionDataset,
    pub grid: ScanGrid,
    pub initial_probe: ProbeModel,
    pub truth: Option<ObjectModel>,
}

pub fn read_inputs(job: &JobConfig, dir: &Path) -> Result<Inputs> {
    let patterns = npy::read_npy(dir.join(DATASET_FILE))?.to_real3()?;
    let dataset = DiffractionDataset::new(patterns)?;
    let pos = npy::read_npy(dir.join(POSITIONS_FILE))?.to_real2()?;
    if pos.ncols() != 2 {
        return Err(Error::invalid(format!("positions must be N x 2, got {:?}", pos.dim())));
    }
    let grid = ScanGrid::new(pos.rows().into_iter().map(|r| Position::new(r[0], r[1])).collect())?;
    let wavelength = job.probe.wavelength();
    let initial_probe = ProbeModel::new(read_complex_stack(&dir.join(INITIAL_PROBE_FILE))?, wavelength)?;
    let truth_path = dir.join(TRUTH_OBJECT_FILE);
    let truth = if truth_path.is_file() {
        let slices = read_complex_stack(&truth_path)?;
        let n = slices.len();
        Some(ObjectModel::new(
            slices,
            job.phantom.pixel_size,
            vec![job.phantom.slice_spacing; n - 1],
        )?)
    } else {
        None
    };
    Ok(Inputs {
        dataset,
        grid,
        initial_probe,
        truth,
    })
}

/// Shape and slice count of the object to reconstruct.
pub fn object_layout(job: &JobConfig, truth: Option<&ObjectModel>) -> Result<((usize, usize), usize)> {
    if let Some(t) = truth {
        return Ok((t.shape(), t.n_slices()));
    }
    match job.phantom.kind {
        PhantomKind::TexturedSingleSlice => Ok(((job.phantom.size, job.phantom.size), 1)),
        PhantomKind::CellsAndRodsTwoSlice => Ok(((job.phantom.size, job.phantom.size), 2)),
        PhantomKind::FromFiles => {
            let obj = make_phantom(&job.phantom)?;
            Ok((obj.shape(), obj.n_slices()))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Reconstruction {
    pub object: ObjectModel,
    pub probe: ProbeModel,
    pub loss_history: Vec<f64>,
    pub per_epoch_loss: Vec<f64>,
    pub consensus_history: Vec<f64>,
    #[serde(skip)]
    pub snapshots: Vec<ObjectModel>,
    pub filter_fired_at: Vec<usize>,
    pub warnings: Vec<String>,
    /// Mean magnitude error of the final estimate against the data.
    pub magnitude_mse: f64,
}

/// Vanilla (`pnp = false`, `n_iterations` epochs, optional in-loop filter)
/// or plug-and-play reconstruction from a flat unit-transmission start.
pub fn reconstruct_inputs(job: &JobConfig, inputs: &Inputs, pnp: bool) -> Result<Reconstruction> {
    let (shape, n_slices) = object_layout(job, inputs.truth.as_ref())?;
    let init = ObjectModel::uniform(shape, n_slices, job.phantom.pixel_size, job.phantom.slice_spacing)?;
    let probe = inputs.initial_probe.clone();
    let mut rec = if pnp {
        let cfg = job
            .pnp
            .as_ref()
            .ok_or_else(|| Error::invalid("--pnp requires a pnp section in the config"))?;
        let r = run_pnp(cfg, &job.solver, &inputs.grid, &inputs.dataset, init, probe)?;
        Reconstruction {
            object: r.final_object,
            probe: r.final_probe,
            loss_history: r.loss_history,
            per_epoch_loss: r.per_epoch_loss,
            consensus_history: r.consensus_history,
            snapshots: r.per_epoch_snapshots.unwrap_or_default(),
            filter_fired_at: Vec::new(),
            warnings: r.warnings,
            magnitude_mse: f64::NAN,
        }
    } else {
        let mut filter = match &job.in_loop_filter {
            Some(f) => Some(SpectralFilterHook::new(
                f.every,
                f.period_y,
                f.period_x,
                f.neighborhood,
            )?),
            None => None,
        };
        let hook = filter.as_mut().map(|f| f as &mut dyn IterationHook);
        let state = reconstruct(init, probe, &inputs.grid, &inputs.dataset, &job.solver, hook)?;
        Reconstruction {
            object: state.object,
            probe: state.probe,
            loss_history: state.loss_history,
            per_epoch_loss: Vec::new(),
            consensus_history: Vec::new(),
            snapshots: Vec::new(),
            filter_fired_at: filter.map(|f| f.fired).unwrap_or_default(),
            warnings: Vec::new(),
            magnitude_mse: f64::NAN,
        }
    };
    let predicted = predict_dataset(&rec.object, &rec.probe, &inputs.grid, job.solver.execution)?;
    rec.magnitude_mse = magnitude_mse(&inputs.dataset, &predicted)?;
    Ok(rec)
}

/// Default metric region: the scanned area trimmed by the dark probe border.
pub fn default_roi(job: &JobConfig, grid: &ScanGrid, probe_shape: (usize, usize)) -> Option<Roi> {
    let margin = ((probe_shape.0 as f64 - job.probe.diameter) / 2.0).max(0.0).ceil() as usize;
    Roi::scanned(grid.positions(), probe_shape, margin)
}

pub fn metrics_for(job: &JobConfig, inputs: &Inputs, rec: &Reconstruction) -> Result<Option<MetricReport>> {
    let Some(truth) = &inputs.truth else {
        return Ok(None);
    };
    let options = MetricOptions {
        roi: job
            .metrics
            .roi
            .or_else(|| default_roi(job, &inputs.grid, inputs.initial_probe.shape())),
        ..job.metrics.clone()
    };
    evaluate(&rec.object, truth, &options, Some(rec.magnitude_mse)).map(Some)
}

/// Writes the reconstruction, its history, snapshots and (when the truth is
/// known) a metric report.
pub fn write_reconstruction(rec: &Reconstruction, report: Option<&MetricReport>, dir: &Path) -> Result<Vec<String>> {
    create_dir(dir)?;
    let mut out = Vec::new();
    write(dir, "object.npy", &complex_stack(rec.object.slices()), &mut out)?;
    write(dir, "object_phase.npy", &real_stack(&rec.object.phases()), &mut out)?;
    let mags: Vec<_> = rec.object.slices().iter().map(|s| s.magnitude()).collect();
    write(dir, "object_magnitude.npy", &real_stack(&mags), &mut out)?;
    write(dir, "probe.npy", &complex_stack(rec.probe.modes()), &mut out)?;
    let history = serde_json::json!({
        "loss_history": rec.loss_history,
        "per_epoch_loss": rec.per_epoch_loss,
        "consensus_history": rec.consensus_history,
        "filter_fired_at": rec.filter_fired_at,
        "warnings": rec.warnings,
        "magnitude_mse": rec.magnitude_mse,
    });
    let path = dir.join("history.json");
    npy::atomic_write(&path, &serde_json::to_vec_pretty(&history)?).map_err(|e| Error::io(&path, e))?;
    out.push("history.json".into());
    if !rec.snapshots.is_empty() {
        let sdir = dir.join("snapshots");
        create_dir(&sdir)?;
        for (k, snap) in rec.snapshots.iter().enumerate() {
            let name = format!("snapshots/epoch_{k:03}.npy");
            write(dir, &name, &complex_stack(snap.slices()), &mut out)?;
        }
    }
    if let Some(report) = report {
        let path = dir.join("metrics.json");
        npy::atomic_write(&path, &serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&path, e))?;
        out.push("metrics.json".into());
    }
    Ok(out)
}

/// Reads inputs from `data_dir`, reconstructs, and writes results plus a
/// manifest into `out_dir`.
pub fn reconstruct_to_dir(job: &JobConfig, data_dir: &Path, out_dir: &Path, pnp: bool) -> Result<Manifest> {
    job.validate()?;
    let inputs = read_inputs(job, data_dir)?;
    let rec = reconstruct_inputs(job, &inputs, pnp)?;
    let report = metrics_for(job, &inputs, &rec)?;
    let mut manifest = Manifest::new("reconstruct", job);
    manifest.pnp = pnp;
    manifest.data_dir = Some(absolute(data_dir));
    manifest.outputs = write_reconstruction(&rec, report.as_ref(), out_dir)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Repeats the run a manifest describes, writing into `out_dir`.
pub fn rerun_manifest(manifest: &Manifest, out_dir: &Path) -> Result<Manifest> {
    match manifest.command.as_str() {
        "simulate" => simulate_to_dir(&manifest.config, out_dir),
        "reconstruct" => {
            let data = manifest
                .data_dir
                .as_deref()
                .ok_or_else(|| Error::invalid("manifest does not record a data directory"))?;
            reconstruct_to_dir(&manifest.config, data, out_dir, manifest.pnp)
        }
        other => Err(Error::invalid(format!("cannot rerun command {other:?}"))),
    }
}
