//! Single-shot artifact removal operators that play the role of the ADMM
//! auxiliary-variable solver: classical built-ins plus a file-based protocol
//! for external programs (e.g. a diffusion editing service).
//!
//! Editors see real images in the display range `[0, 1]`; the mapping to and
//! from phase lives in the PnP engine.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::npy;
use crate::optics::{far_field, inverse_far_field};
use crate::solver::{IterationHook, SolverState};
use crate::types::{ComplexImage, EditRequest, RealImage, C64};

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("editor process failed with {status}: {output}")]
    ProcessFailed { status: String, output: String },
    #[error("editor process timed out after {0:.1} s")]
    Timeout(f64),
    #[error("could not start editor {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("editor produced no output file at {0}")]
    MissingOutput(PathBuf),
    #[error("editor output is invalid: {0}")]
    InvalidOutput(String),
    #[error("editor output shape {actual:?} does not match input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("editor I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("editor configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    Identity,
    SpectralNotch,
    SmoothDenoise,
    MaskOracle,
    External,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    #[default]
    LocalMedian,
    Constant,
}

/// Editor selection plus its kind-specific parameters. Parameters irrelevant
/// to the chosen kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorSpec {
    pub kind: EditorKind,
    #[serde(default)]
    pub period_y: Option<f64>,
    #[serde(default)]
    pub period_x: Option<f64>,
    #[serde(default = "default_neighborhood")]
    pub neighborhood: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    /// In-memory mask; takes precedence over `mask_path`.
    #[serde(skip)]
    pub mask: Option<Arc<Array2<bool>>>,
    #[serde(default)]
    pub fill: MaskFill,
    /// Display-range value for [`MaskFill::Constant`].
    #[serde(default)]
    pub fill_value: f64,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub request: EditRequest,
}

fn default_neighborhood() -> usize {
    5
}

fn default_strength() -> f64 {
    0.05
}

fn default_timeout() -> f64 {
    600.0
}

impl EditorSpec {
    fn of_kind(kind: EditorKind) -> Self {
        EditorSpec {
            kind,
            period_y: None,
            period_x: None,
            neighborhood: default_neighborhood(),
            strength: default_strength(),
            mask_path: None,
            mask: None,
            fill: MaskFill::LocalMedian,
            fill_value: 0.0,
            command: Vec::new(),
            timeout_secs: default_timeout(),
            request: EditRequest::default(),
        }
    }

    pub fn identity() -> Self {
        EditorSpec::of_kind(EditorKind::Identity)
    }

    pub fn spectral_notch(period_y: f64, period_x: f64, neighborhood: usize) -> Self {
        EditorSpec {
            period_y: Some(period_y),
            period_x: Some(period_x),
            neighborhood,
            ..EditorSpec::of_kind(EditorKind::SpectralNotch)
        }
    }

    pub fn smooth_denoise(strength: f64) -> Self {
        EditorSpec {
            strength,
            ..EditorSpec::of_kind(EditorKind::SmoothDenoise)
        }
    }

    pub fn mask_oracle(mask: Array2<bool>, fill: MaskFill) -> Self {
        EditorSpec {
            mask: Some(Arc::new(mask)),
            fill,
            ..EditorSpec::of_kind(EditorKind::MaskOracle)
        }
    }

    pub fn external(command: Vec<String>, timeout_secs: f64) -> Self {
        EditorSpec {
            command,
            timeout_secs,
            ..EditorSpec::of_kind(EditorKind::External)
        }
    }

    pub fn with_request(mut self, request: EditRequest) -> Self {
        self.request = request;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.request.validate()?;
        match self.kind {
            EditorKind::Identity => Ok(()),
            EditorKind::SpectralNotch => {
                let (py, px) = self.periods()?;
                if py < 2.0 || px < 2.0 {
                    return Err(Error::invalid("grid periods must be >= 2 px"));
                }
                if self.neighborhood.is_multiple_of(2) {
                    return Err(Error::invalid("notch neighborhood must be odd"));
                }
                Ok(())
            }
            EditorKind::SmoothDenoise => {
                if self.strength >= 0.0 && self.strength.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("denoise strength must be >= 0"))
                }
            }
            EditorKind::MaskOracle => {
                if self.mask.is_none() && self.mask_path.is_none() {
                    return Err(Error::invalid("mask_oracle editor needs a mask or mask_path"));
                }
                Ok(())
            }
            EditorKind::External => {
                if self.command.first().is_none_or(|c| c.trim().is_empty()) {
                    return Err(Error::invalid("external editor requires a non-empty command"));
                }
                if !(self.timeout_secs > 0.0) {
                    return Err(Error::invalid("external editor timeout must be positive"));
                }
                Ok(())
            }
        }
    }

    fn periods(&self) -> Result<(f64, f64)> {
        match (self.period_y, self.period_x) {
            (Some(y), Some(x)) => Ok((y, x)),
            _ => Err(Error::invalid("spectral notch needs period_y and period_x")),
        }
    }

    /// Instantiates the editor, loading any referenced files.
    pub fn build(&self) -> Result<Box<dyn Editor>> {
        self.validate()?;
        Ok(match self.kind {
            EditorKind::Identity => Box::new(IdentityEditor),
            EditorKind::SpectralNotch => {
                let (period_y, period_x) = self.periods()?;
                Box::new(SpectralNotchEditor {
                    period_y,
                    period_x,
                    neighborhood: self.neighborhood,
                })
            }
            EditorKind::SmoothDenoise => Box::new(SmoothDenoiseEditor {
                strength: self.strength,
            }),
            EditorKind::MaskOracle => {
                let mask = match (&self.mask, &self.mask_path) {
                    (Some(m), _) => m.clone(),
                    (None, Some(p)) => Arc::new(load_mask(p)?),
                    (None, None) => unreachable!("validated"),
                };
                Box::new(MaskOracleEditor {
                    mask,
                    fill: self.fill,
                    fill_value: self.fill_value,
                })
            }
            EditorKind::External => Box::new(ExternalEditor { spec: self.clone() }),
        })
    }
}

fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let arr = npy::read_npy(path)?.to_real2()?;
    Ok(arr.mapv(|v| v > 0.5))
}

/// The operator `D`: maps an `H×W` display-range image to another.
pub trait Editor: Send {
    fn edit(&mut self, image: &RealImage, request: &EditRequest) -> Result<RealImage>;

    /// Exact identity editors let the engine skip the phase round trip.
    fn is_identity(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str;
}

pub struct IdentityEditor;

impl Editor for IdentityEditor {
    fn edit(&mut self, image: &RealImage, _: &EditRequest) -> Result<RealImage> {
        Ok(image.clone())
    }

    fn is_identity(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

pub struct SpectralNotchEditor {
    pub period_y: f64,
    pub period_x: f64,
    pub neighborhood: usize,
}

impl Editor for SpectralNotchEditor {
    fn edit(&mut self, image: &RealImage, _: &EditRequest) -> Result<RealImage> {
        spectral_notch(image, self.period_y, self.period_x, self.neighborhood)
    }

    fn name(&self) -> &'static str {
        "spectral_notch"
    }
}

pub struct SmoothDenoiseEditor {
    pub strength: f64,
}

impl Editor for SmoothDenoiseEditor {
    fn edit(&mut self, image: &RealImage, _: &EditRequest) -> Result<RealImage> {
        Ok(smooth_denoise(image, self.strength))
    }

    fn name(&self) -> &'static str {
        "smooth_denoise"
    }
}

pub struct MaskOracleEditor {
    pub mask: Arc<Array2<bool>>,
    pub fill: MaskFill,
    pub fill_value: f64,
}

impl Editor for MaskOracleEditor {
    fn edit(&mut self, image: &RealImage, _: &EditRequest) -> Result<RealImage> {
        match self.fill {
            MaskFill::LocalMedian => mask_oracle_edit(image, &self.mask, MaskFill::LocalMedian),
            MaskFill::Constant => mask_fill_constant(image, &self.mask, self.fill_value),
        }
    }

    fn name(&self) -> &'static str {
        "mask_oracle"
    }
}

pub struct ExternalEditor {
    spec: EditorSpec,
}

impl Editor for ExternalEditor {
    fn edit(&mut self, image: &RealImage, request: &EditRequest) -> Result<RealImage> {
        let spec = EditorSpec {
            request: request.clone(),
            ..self.spec.clone()
        };
        Ok(external_edit(image, &spec)?)
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

/// Offsets (from the centered zero frequency) of every harmonic
/// `(k/period_y, l/period_x)` inside the Nyquist band, `(k, l) ≠ (0, 0)`,
/// rounded to the nearest sample.
pub fn harmonic_bins(shape: (usize, usize), period_y: f64, period_x: f64) -> Vec<(isize, isize)> {
    let (h, w) = shape;
    let kmax = (period_y / 2.0).floor() as isize;
    let lmax = (period_x / 2.0).floor() as isize;
    let mut bins = Vec::new();
    for k in -kmax..=kmax {
        for l in -lmax..=lmax {
            if k == 0 && l == 0 {
                continue;
            }
            let by = (k as f64 * h as f64 / period_y).round() as isize;
            let bx = (l as f64 * w as f64 / period_x).round() as isize;
            if !bins.contains(&(by, bx)) {
                bins.push((by, bx));
            }
        }
    }
    bins
}

/// Centered-layout mask of every frequency sample the notch filter zeroes.
/// Windows wrap around the spectrum edges, so the mask is symmetric under
/// `f → −f` and filtering keeps real images real.
pub fn notch_mask(shape: (usize, usize), period_y: f64, period_x: f64, neighborhood: usize) -> Result<Array2<bool>> {
    if period_y < 2.0 || period_x < 2.0 {
        return Err(Error::invalid("grid periods must be >= 2 px"));
    }
    if neighborhood.is_multiple_of(2) {
        return Err(Error::invalid("notch neighborhood must be odd"));
    }
    let (h, w) = shape;
    let half = (neighborhood / 2) as isize;
    let (cy, cx) = ((h / 2) as isize, (w / 2) as isize);
    let mut mask = Array2::from_elem(shape, false);
    for (by, bx) in harmonic_bins(shape, period_y, period_x) {
        let dc_y = (-half..=half).any(|dy| (by + dy).rem_euclid(h as isize) == 0);
        let dc_x = (-half..=half).any(|dx| (bx + dx).rem_euclid(w as isize) == 0);
        if dc_y && dc_x {
            return Err(Error::invalid(format!(
                "notch neighborhood {neighborhood} around harmonic ({by}, {bx}) covers the zero frequency"
            )));
        }
        for dy in -half..=half {
            for dx in -half..=half {
                let y = (cy + by + dy).rem_euclid(h as isize) as usize;
                let x = (cx + bx + dx).rem_euclid(w as isize) as usize;
                mask[[y, x]] = true;
            }
        }
    }
    Ok(mask)
}

/// Zeroes the `neighborhood × neighborhood` spectral regions around every grid
/// harmonic and returns the real part of the filtered image.
pub fn spectral_notch(image: &RealImage, period_y: f64, period_x: f64, neighborhood: usize) -> Result<RealImage> {
    let spectrum = notched_spectrum(image, period_y, period_x, neighborhood)?;
    Ok(inverse_far_field(&spectrum)?.as_array().mapv(|v| v.re))
}

/// Centered spectrum of `image` after notching; exposed for inspection.
pub fn notched_spectrum(image: &RealImage, period_y: f64, period_x: f64, neighborhood: usize) -> Result<ComplexImage> {
    let mask = notch_mask(image.dim(), period_y, period_x, neighborhood)?;
    let complex = ComplexImage::new(image.mapv(|v| C64::new(v, 0.0)))?;
    let mut spectrum = far_field(&complex)?.into_array();
    Zip::from(&mut spectrum).and(&mask).for_each(|s, &m| {
        if m {
            *s = C64::new(0.0, 0.0);
        }
    });
    ComplexImage::new(spectrum)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Replaces masked pixels by the median of unmasked pixels in the surrounding
/// 9×9 window (widened in steps of 2 when the window is fully masked), or by a
/// constant. Unmasked pixels are copied through untouched.
pub fn mask_oracle_edit(image: &RealImage, mask: &Array2<bool>, fill: MaskFill) -> Result<RealImage> {
    crate::error::check_shape("mask", image.dim(), mask.dim())?;
    match fill {
        MaskFill::Constant => mask_fill_constant(image, mask, 0.0),
        MaskFill::LocalMedian => {
            if mask.iter().all(|&m| m) {
                return Err(Error::invalid("local-median fill needs at least one unmasked pixel"));
            }
            let (h, w) = image.dim();
            let mut out = image.clone();
            let mut buf = Vec::with_capacity(81);
            for ((r, c), &m) in mask.indexed_iter() {
                if !m {
                    continue;
                }
                let mut half = 4usize;
                loop {
                    buf.clear();
                    for y in r.saturating_sub(half)..(r + half + 1).min(h) {
                        for x in c.saturating_sub(half)..(c + half + 1).min(w) {
                            if !mask[[y, x]] {
                                buf.push(image[[y, x]]);
                            }
                        }
                    }
                    if !buf.is_empty() {
                        break;
                    }
                    half += 1;
                }
                out[[r, c]] = median(&mut buf);
            }
            Ok(out)
        }
    }
}

fn mask_fill_constant(image: &RealImage, mask: &Array2<bool>, value: f64) -> Result<RealImage> {
    crate::error::check_shape("mask", image.dim(), mask.dim())?;
    let mut out = image.clone();
    Zip::from(&mut out).and(mask).for_each(|o, &m| {
        if m {
            *o = value;
        }
    });
    Ok(out)
}

fn forward_diff(u: &RealImage) -> (RealImage, RealImage) {
    let (h, w) = u.dim();
    let gy = RealImage::from_shape_fn((h, w), |(r, c)| if r + 1 < h { u[[r + 1, c]] - u[[r, c]] } else { 0.0 });
    let gx = RealImage::from_shape_fn((h, w), |(r, c)| if c + 1 < w { u[[r, c + 1]] - u[[r, c]] } else { 0.0 });
    (gy, gx)
}

fn divergence(py: &RealImage, px: &RealImage) -> RealImage {
    let (h, w) = py.dim();
    RealImage::from_shape_fn((h, w), |(r, c)| {
        let dy = match r {
            0 => py[[0, c]],
            _ if r + 1 == h => -py[[r - 1, c]],
            _ => py[[r, c]] - py[[r - 1, c]],
        };
        let dx = match c {
            0 => px[[r, 0]],
            _ if c + 1 == w => -px[[r, c - 1]],
            _ => px[[r, c]] - px[[r, c - 1]],
        };
        dy + dx
    })
}

/// Total-variation smoothing (Chambolle's dual projection, 50 steps).
/// `strength` is the TV weight; zero returns the input.
pub fn smooth_denoise(image: &RealImage, strength: f64) -> RealImage {
    if strength <= 0.0 || image.len() < 2 {
        return image.clone();
    }
    const STEP: f64 = 0.125;
    let mut py = RealImage::zeros(image.dim());
    let mut px = RealImage::zeros(image.dim());
    for _ in 0..50 {
        let div = divergence(&py, &px);
        let arg = &div - &image.mapv(|v| v / strength);
        let (gy, gx) = forward_diff(&arg);
        Zip::from(&mut py)
            .and(&mut px)
            .and(&gy)
            .and(&gx)
            .for_each(|py, px, &gy, &gx| {
                let norm = 1.0 + STEP * (gy * gy + gx * gx).sqrt();
                *py = (*py + STEP * gy) / norm;
                *px = (*px + STEP * gx) / norm;
            });
    }
    image - &divergence(&py, &px).mapv(|v| v * strength)
}

/// Iterations (1-based count of completed iterations) at which an every-`k`
/// in-loop filter fires over an `n`-iteration run; never after the last one.
pub fn in_loop_schedule(every: usize, n_iterations: usize) -> Vec<usize> {
    if every == 0 {
        return Vec::new();
    }
    (1..n_iterations).filter(|i| i % every == 0).collect()
}

/// Solver callback applying the spectral notch to the phase of every object
/// slice every `every` iterations, magnitudes untouched.
pub struct SpectralFilterHook {
    pub every: usize,
    pub period_y: f64,
    pub period_x: f64,
    pub neighborhood: usize,
    /// Iterations at which the filter actually ran.
    pub fired: Vec<usize>,
}

impl SpectralFilterHook {
    pub fn new(every: usize, period_y: f64, period_x: f64, neighborhood: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::invalid("filter interval must be >= 1"));
        }
        Ok(SpectralFilterHook {
            every,
            period_y,
            period_x,
            neighborhood,
            fired: Vec::new(),
        })
    }

    pub fn should_fire(&self, completed: usize, total: usize) -> bool {
        completed.is_multiple_of(self.every) && completed < total
    }

    pub fn filter_object_phase(&self, slice: &ComplexImage) -> Result<ComplexImage> {
        let phase = slice.phase();
        let filtered = spectral_notch(&phase, self.period_y, self.period_x, self.neighborhood)?;
        ComplexImage::from_polar(slice.magnitude().view(), filtered.view())
    }
}

impl IterationHook for SpectralFilterHook {
    fn after_iteration(&mut self, completed: usize, total: usize, state: &mut SolverState) -> Result<()> {
        if !self.should_fire(completed, total) {
            return Ok(());
        }
        let slices = state
            .object
            .slices()
            .iter()
            .map(|s| self.filter_object_phase(s))
            .collect::<Result<Vec<_>>>()?;
        state.object = state.object.with_slices(slices)?;
        self.fired.push(completed);
        Ok(())
    }
}

/// Request manifest written next to `input.npy` for external editors.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProtocolRequest {
    pub prompt: String,
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub mode: String,
}

fn wait_with_timeout(
    child: &mut std::process::Child,
    timeout: Duration,
) -> std::io::Result<Option<std::process::ExitStatus>> {
    let start = Instant::now();
    let mut sleep = Duration::from_millis(2);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        if start.elapsed() >= timeout {
            return Ok(None);
        }
        std::thread::sleep(sleep);
        sleep = (sleep * 2).min(Duration::from_millis(100));
    }
}

fn captured_output(dir: &Path) -> String {
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).unwrap_or_default();
    let (out, err) = (read("stdout.log"), read("stderr.log"));
    format!("stdout: {} | stderr: {}", out.trim(), err.trim())
}

/// Runs an external editor through the file protocol: `input.npy` (float32,
/// `[0, 1]`) and `request.json` go into a fresh directory, the command is run
/// with that directory as its only extra argument, and `output.npy` is read
/// back. Output values outside `[0, 1]` are clamped with a warning.
pub fn external_edit(image: &RealImage, spec: &EditorSpec) -> std::result::Result<RealImage, EditorError> {
    let program = spec
        .command
        .first()
        .filter(|c| !c.trim().is_empty())
        .ok_or_else(|| EditorError::Config("external editor requires a non-empty command".into()))?;
    let dir = tempfile::Builder::new().prefix("ptypnp-edit-").tempdir()?;
    let (h, w) = image.dim();

    let mut input = image.clone();
    if input.iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("editor input outside [0, 1]; clamping before hand-off");
        input.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    npy::write_real2_f32(dir.path().join("input.npy"), &input)
        .map_err(|e| EditorError::InvalidOutput(format!("writing input: {e}")))?;
    let request = ProtocolRequest {
        prompt: spec.request.prompt.clone(),
        guidance_scale: spec.request.guidance_scale,
        inference_steps: spec.request.inference_steps,
        seed: spec.request.seed,
        height: h,
        width: w,
        mode: "remove".into(),
    };
    let json = serde_json::to_vec_pretty(&request).map_err(|e| EditorError::Config(e.to_string()))?;
    npy::atomic_write(dir.path().join("request.json"), &json)?;

    let stdout = std::fs::File::create(dir.path().join("stdout.log"))?;
    let stderr = std::fs::File::create(dir.path().join("stderr.log"))?;
    let mut child = Command::new(program)
        .args(&spec.command[1..])
        .arg(dir.path())
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(|source| EditorError::Spawn {
            command: program.clone(),
            source,
        })?;
    let status = match wait_with_timeout(&mut child, Duration::from_secs_f64(spec.timeout_secs))? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(EditorError::Timeout(spec.timeout_secs));
        }
    };
    if !status.success() {
        return Err(EditorError::ProcessFailed {
            status: status.to_string(),
            output: captured_output(dir.path()),
        });
    }
    let out_path = dir.path().join("output.npy");
    if !out_path.exists() {
        return Err(EditorError::MissingOutput(out_path));
    }
    let out = npy::read_npy(&out_path)
        .and_then(|a| a.to_real2())
        .map_err(|e| EditorError::InvalidOutput(e.to_string()))?;
    if out.dim() != (h, w) {
        return Err(EditorError::ShapeMismatch {
            expected: (h, w),
            actual: out.dim(),
        });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(EditorError::InvalidOutput("non-finite values".into()));
    }
    if out.iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("editor output outside [0, 1]; clamping");
        return Ok(out.mapv(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}
