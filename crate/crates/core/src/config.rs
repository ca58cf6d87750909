//! Job configuration (one strict JSON document) and the run manifest that
//! echoes it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editors::{EditorKind, EditorSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricOptions;
use crate::simulation::{GridKind, GridSpec, PhantomKind, PhantomSpec, ProbeSpec};
use crate::types::{PnpConfig, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// Expected counts per pattern; noiseless when unset.
    #[serde(default)]
    pub photons_per_pattern: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Magnification applied to the true probe to form the initial guess.
    #[serde(default = "default_magnify")]
    pub initial_probe_magnify: f64,
}

fn default_magnify() -> f64 {
    1.05
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            photons_per_pattern: None,
            seed: 0,
            initial_probe_magnify: default_magnify(),
        }
    }
}

/// Spectral notch applied to the object phase inside a vanilla run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub every: usize,
    pub period_y: f64,
    pub period_x: f64,
    #[serde(default = "default_neighborhood")]
    pub neighborhood: usize,
}

fn default_neighborhood() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub phantom: PhantomSpec,
    pub probe: ProbeSpec,
    /// A rectangular grid with `rows` or `cols` of 0 is filled to the object.
    pub grid: GridSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub pnp: Option<PnpConfig>,
    #[serde(default)]
    pub in_loop_filter: Option<FilterSpec>,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl JobConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let value = match value.get("manifest_version") {
            Some(_) => value
                .get("config")
                .cloned()
                .ok_or_else(|| Error::invalid("manifest has no config"))?,
            None => value,
        };
        Ok(serde_json::from_value(value)?)
    }

    /// Reads a job config or a run manifest. Relative paths inside are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut job = JobConfig::from_json(&text)?;
        if let Some(base) = path.parent() {
            job.resolve_paths(base);
        }
        Ok(job)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.phantom.phase_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.phantom.magnitude_path.as_mut() {
            fix(p);
        }
        if let Some(pnp) = self.pnp.as_mut() {
            for spec in std::iter::once(&mut pnp.editor).chain(pnp.slice_editors.iter_mut().flatten()) {
                if let Some(p) = spec.mask_path.as_mut() {
                    fix(p);
                }
            }
        }
        fix(&mut self.output_dir);
    }

    fn editors(&self) -> impl Iterator<Item = &EditorSpec> {
        self.pnp
            .iter()
            .flat_map(|p| std::iter::once(&p.editor).chain(p.slice_editors.iter().flatten()))
    }

    /// Full semantic validation, including that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if !(self.probe.energy_kev > 0.0) {
            return Err(Error::invalid("probe.energy_kev must be positive"));
        }
        if !(self.probe.diameter > 0.0 && self.probe.diameter < self.probe.support as f64) {
            return Err(Error::invalid(format!(
                "probe.diameter {} must be positive and below probe.support {}",
                self.probe.diameter, self.probe.support
            )));
        }
        if self.probe.n_modes == 0 {
            return Err(Error::invalid("probe.n_modes must be >= 1"));
        }
        if self.phantom.kind != PhantomKind::FromFiles && self.probe.support > self.phantom.size {
            return Err(Error::invalid(format!(
                "probe support {} exceeds phantom size {}",
                self.probe.support, self.phantom.size
            )));
        }
        if !(self.grid.spacing > 0.0) {
            return Err(Error::invalid("grid.spacing must be positive"));
        }
        if self.grid.kind == GridKind::Fermat && self.grid.n_points == 0 {
            return Err(Error::invalid("grid.n_points must be >= 1 for a fermat grid"));
        }
        if !(self.simulation.initial_probe_magnify > 0.0) {
            return Err(Error::invalid("simulation.initial_probe_magnify must be positive"));
        }
        self.solver.validate()?;
        if let Some(pnp) = &self.pnp {
            pnp.validate()?;
        }
        if let Some(f) = &self.in_loop_filter {
            crate::editors::SpectralFilterHook::new(f.every, f.period_y, f.period_x, f.neighborhood)?;
            crate::editors::notch_mask((64, 64), f.period_y, f.period_x, f.neighborhood)?;
        }
        let mut files: Vec<&PathBuf> = Vec::new();
        files.extend(self.phantom.phase_path.iter());
        files.extend(self.phantom.magnitude_path.iter());
        for spec in self.editors() {
            if spec.kind == EditorKind::MaskOracle {
                files.extend(spec.mask_path.iter());
            }
        }
        for f in files {
            if !f.is_file() {
                return Err(Error::invalid(format!(
                    "referenced file {} does not exist",
                    f.display()
                )));
            }
        }
        Ok(())
    }

    /// The grid spec with an unset rectangular extent filled in.
    pub fn resolved_grid(&self, probe_shape: (usize, usize), object_shape: (usize, usize)) -> GridSpec {
        let g = &self.grid;
        if g.kind == GridKind::Rectangular && (g.rows == 0 || g.cols == 0) {
            let filled = GridSpec::fill(g.spacing, probe_shape, object_shape);
            GridSpec {
                rows: if g.rows == 0 { filled.rows } else { g.rows },
                cols: if g.cols == 0 { filled.cols } else { g.cols },
                ..g.clone()
            }
        } else {
            g.clone()
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            phantom: self.phantom.seed,
            probe: self.probe.seed,
            grid: self.grid.seed,
            simulation: self.simulation.seed,
            solver: self.solver.rng_seed,
            editor: self.pnp.as_ref().map(|p| p.editor.request.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: u64,
    pub probe: u64,
    pub grid: u64,
    pub simulation: u64,
    pub solver: u64,
    pub editor: Option<u64>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Written next to every run's outputs; loadable as a job config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Whether the plug-and-play loop was used (reconstructions only).
    #[serde(default)]
    pub pnp: bool,
    /// Directory the inputs were read from.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub config: JobConfig,
    pub seeds: Seeds,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &JobConfig) -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            pnp: false,
            data_dir: None,
            config: config.clone(),
            seeds: config.seeds(),
            outputs: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(self)?;
        crate::npy::atomic_write(&path, &json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// The grid-pathology experiment: 256² textured phase object, 50 px disk
/// probe on a 128² support, rectangular scan at 18 px (64% overlap).
pub const GRID_PATHOLOGY_CONFIG: &str = r#"{
  "phantom": {
    "kind": "textured_single_slice",
    "size": 256,
    "phase_range": [-0.5, 0.0],
    "magnitude_range": [0.9, 1.0],
    "seed": 1,
    "pixel_size": 10.0
  },
  "probe": {
    "diameter": 50.0,
    "support": 128,
    "n_modes": 3,
    "mode_power_decay": 0.3,
    "defocus": 0.0,
    "energy_kev": 10.0,
    "seed": 2
  },
  "grid": { "kind": "rectangular", "spacing": 18.0, "rows": 0, "cols": 0 },
  "simulation": { "photons_per_pattern": 1e7, "seed": 3, "initial_probe_magnify": 1.05 },
  "solver": {
    "algorithm": "rpie",
    "n_iterations": 300,
    "batch_size": 8,
    "alpha_object": 0.1,
    "alpha_probe": 0.1,
    "update_probe": true,
    "probe_update_start": 5,
    "rng_seed": 4
  },
  "pnp": {
    "tau": 1e-5,
    "gamma": 0.8,
    "n_inner": 50,
    "n_outer": 6,
    "edit_last_epoch": 5,
    "editor": { "kind": "spectral_notch", "period_y": 18.0, "period_x": 18.0, "neighborhood": 5 }
  },
  "metrics": { "grid_period_y": 18.0, "grid_period_x": 18.0 },
  "output_dir": "out"
}"#;

/// The multislice crosstalk experiment: cells over a rod lattice, 10 µm
/// apart at 10 keV and 10 nm pixels, on a jittered raster.
pub const CROSSTALK_CONFIG: &str = r#"{
  "phantom": {
    "kind": "cells_and_rods_two_slice",
    "size": 192,
    "phase_range": [-0.5, 0.0],
    "magnitude_range": [0.95, 1.0],
    "seed": 5,
    "pixel_size": 10.0,
    "slice_spacing": 10000.0,
    "rod_period": 24.0
  },
  "probe": { "diameter": 40.0, "support": 96, "n_modes": 1, "energy_kev": 10.0, "seed": 6 },
  "grid": { "kind": "rectangular", "spacing": 10.0, "rows": 0, "cols": 0, "jitter": 2.0, "seed": 7 },
  "simulation": { "photons_per_pattern": 1e7, "seed": 8, "initial_probe_magnify": 1.0 },
  "solver": {
    "algorithm": "rpie",
    "n_iterations": 200,
    "batch_size": 8,
    "alpha_object": 0.1,
    "alpha_probe": 0.1,
    "update_probe": false,
    "rng_seed": 9
  },
  "pnp": {
    "tau": 0.01,
    "gamma": 0.95,
    "n_inner": 20,
    "n_outer": 10,
    "edit_last_epoch": 10,
    "editor": { "kind": "identity" },
    "stats_match": true,
    "stats_match_slices": [0],
    "stats_mask_threshold": 0.5
  },
  "output_dir": "out"
}"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_valid() {
        let job = JobConfig::from_json(GRID_PATHOLOGY_CONFIG).unwrap();
        job.validate().unwrap();
        assert_eq!(job.pnp.as_ref().unwrap().edit_last_epoch, 5);
        let grid = job.resolved_grid((128, 128), (256, 256));
        assert_eq!((grid.rows, grid.cols), (8, 8));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(GRID_PATHOLOGY_CONFIG).unwrap();
        v["solver"]["learning_rate"] = 0.1.into();
        assert!(JobConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(GRID_PATHOLOGY_CONFIG).unwrap();
        v["extra"] = 1.into();
        assert!(JobConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn missing_files_rejected() {
        let mut job = JobConfig::from_json(GRID_PATHOLOGY_CONFIG).unwrap();
        job.phantom.kind = PhantomKind::FromFiles;
        job.phantom.phase_path = Some(PathBuf::from("/nonexistent/phase.npy"));
        let err = job.validate().unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn manifest_round_trip_and_load_as_config() {
        let job = JobConfig::from_json(GRID_PATHOLOGY_CONFIG).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("simulate", &job);
        m.outputs.push("dataset.npy".into());
        let path = m.write(dir.path()).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
        let reloaded = JobConfig::load(&path).unwrap();
        assert_eq!(reloaded.solver, job.solver);
        assert_eq!(reloaded.output_dir, dir.path().join("out"));
        assert_eq!(m.seeds.solver, 4);
    }
}
