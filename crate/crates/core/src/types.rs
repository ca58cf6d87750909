//! Shared data model: complex images, object and probe stacks, scan geometry,
//! measured data and the solver/ADMM configuration records.
//!
//! Coordinates are `(row = y, col = x)` with the origin at the top-left of the
//! object array. A scan position is the offset of the probe window's top-left
//! corner inside the object.

use ndarray::{Array2, Array3, ArrayView2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::editors::EditorSpec;
use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type RealImage = Array2<f64>;

/// Speed of light times Planck's constant in keV·nm.
pub const HC_KEV_NM: f64 = 1.239_841_93;

/// Wavelength in nm for a photon energy in keV.
pub fn wavelength_from_kev(energy_kev: f64) -> f64 {
    HC_KEV_NM / energy_kev
}

/// Dense 2D complex field. Every value is finite and both dimensions are at
/// least one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage(Array2<C64>);

impl ComplexImage {
    pub fn new(data: Array2<C64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("complex image must be at least 1x1"));
        }
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFinite("complex image"));
        }
        Ok(ComplexImage(data))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "complex image buffer",
                expected: vec![height * width],
                actual: vec![data.len()],
            });
        }
        let arr = Array2::from_shape_vec((height, width), data).map_err(|e| Error::invalid(e.to_string()))?;
        ComplexImage::new(arr)
    }

    pub fn from_elem(height: usize, width: usize, value: C64) -> Result<Self> {
        ComplexImage::new(Array2::from_elem((height, width), value))
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        ComplexImage::from_elem(height, width, C64::new(0.0, 0.0))
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        ComplexImage::from_elem(height, width, C64::new(1.0, 0.0))
    }

    /// Builds `magnitude · exp(i·phase)` elementwise.
    pub fn from_polar(magnitude: ArrayView2<f64>, phase: ArrayView2<f64>) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            return Err(Error::ShapeMismatch {
                what: "magnitude/phase",
                expected: vec![magnitude.nrows(), magnitude.ncols()],
                actual: vec![phase.nrows(), phase.ncols()],
            });
        }
        let data = Zip::from(&magnitude)
            .and(&phase)
            .map_collect(|&m, &p| C64::from_polar(m, p));
        ComplexImage::new(data)
    }

    /// Skips validation; callers guarantee finiteness.
    pub(crate) fn from_array_unchecked(data: Array2<C64>) -> Self {
        debug_assert!(data.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        ComplexImage(data)
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, C64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<C64> {
        &self.0
    }

    pub(crate) fn array_mut(&mut self) -> &mut Array2<C64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<C64> {
        self.0
    }

    pub fn phase(&self) -> RealImage {
        self.0.mapv(|v| v.arg())
    }

    pub fn magnitude(&self) -> RealImage {
        self.0.mapv(|v| v.norm())
    }

    pub fn intensity(&self) -> RealImage {
        self.0.mapv(|v| v.norm_sqr())
    }

    /// Σ|v|².
    pub fn power(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn scaled(&self, factor: C64) -> ComplexImage {
        ComplexImage(self.0.mapv(|v| v * factor))
    }
}

#[derive(Serialize, Deserialize)]
struct ComplexImageRepr {
    height: usize,
    width: usize,
    /// Interleaved `[re, im]` pairs, row-major.
    data: Vec<[f64; 2]>,
}

impl Serialize for ComplexImage {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ComplexImageRepr {
            height: self.height(),
            width: self.width(),
            data: self.0.iter().map(|v| [v.re, v.im]).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ComplexImage {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = ComplexImageRepr::deserialize(deserializer)?;
        let data = repr.data.into_iter().map(|[re, im]| C64::new(re, im)).collect();
        ComplexImage::from_vec(repr.height, repr.width, data).map_err(serde::de::Error::custom)
    }
}

/// Stack of object slices ordered along the beam, with the spacing between
/// consecutive slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectModelRepr", into = "ObjectModelRepr")]
pub struct ObjectModel {
    slices: Vec<ComplexImage>,
    pixel_size: f64,
    slice_spacings: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ObjectModelRepr {
    slices: Vec<ComplexImage>,
    pixel_size: f64,
    slice_spacings: Vec<f64>,
}

impl TryFrom<ObjectModelRepr> for ObjectModel {
    type Error = Error;
    fn try_from(r: ObjectModelRepr) -> Result<Self> {
        ObjectModel::new(r.slices, r.pixel_size, r.slice_spacings)
    }
}

impl From<ObjectModel> for ObjectModelRepr {
    fn from(o: ObjectModel) -> Self {
        ObjectModelRepr {
            slices: o.slices,
            pixel_size: o.pixel_size,
            slice_spacings: o.slice_spacings,
        }
    }
}

impl ObjectModel {
    pub fn new(slices: Vec<ComplexImage>, pixel_size: f64, slice_spacings: Vec<f64>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("object needs at least one slice"))?;
        let shape = first.shape();
        for s in &slices[1..] {
            crate::error::check_shape("object slice", shape, s.shape())?;
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::invalid(format!("pixel size must be positive, got {pixel_size}")));
        }
        if slice_spacings.len() + 1 != slices.len() {
            return Err(Error::invalid(format!(
                "{} slices need {} spacings, got {}",
                slices.len(),
                slices.len() - 1,
                slice_spacings.len()
            )));
        }
        if let Some(d) = slice_spacings.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::invalid(format!("slice spacing must be >= 0, got {d}")));
        }
        Ok(ObjectModel {
            slices,
            pixel_size,
            slice_spacings,
        })
    }

    pub fn single(slice: ComplexImage, pixel_size: f64) -> Result<Self> {
        ObjectModel::new(vec![slice], pixel_size, Vec::new())
    }

    /// Uniform unit-transmission object, the usual starting guess.
    pub fn uniform(shape: (usize, usize), n_slices: usize, pixel_size: f64, spacing: f64) -> Result<Self> {
        if n_slices == 0 {
            return Err(Error::invalid("object needs at least one slice"));
        }
        let slices = vec![ComplexImage::ones(shape.0, shape.1)?; n_slices];
        ObjectModel::new(slices, pixel_size, vec![spacing; n_slices - 1])
    }

    pub fn slices(&self) -> &[ComplexImage] {
        &self.slices
    }

    pub(crate) fn slices_mut(&mut self) -> &mut [ComplexImage] {
        &mut self.slices
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn slice_spacings(&self) -> &[f64] {
        &self.slice_spacings
    }

    /// Same geometry, new slice data. Slice count and shapes must match.
    pub fn with_slices(&self, slices: Vec<ComplexImage>) -> Result<Self> {
        if slices.len() != self.slices.len() {
            return Err(Error::ShapeMismatch {
                what: "slice count",
                expected: vec![self.slices.len()],
                actual: vec![slices.len()],
            });
        }
        for s in &slices {
            crate::error::check_shape("object slice", self.shape(), s.shape())?;
        }
        Ok(ObjectModel {
            slices,
            pixel_size: self.pixel_size,
            slice_spacings: self.slice_spacings.clone(),
        })
    }

    pub fn zeros_like(&self) -> ObjectModel {
        let (h, w) = self.shape();
        let zero = ComplexImage::from_array_unchecked(Array2::zeros((h, w)));
        ObjectModel {
            slices: vec![zero; self.slices.len()],
            pixel_size: self.pixel_size,
            slice_spacings: self.slice_spacings.clone(),
        }
    }

    pub fn same_shape(&self, other: &ObjectModel) -> bool {
        self.n_slices() == other.n_slices() && self.shape() == other.shape()
    }

    pub fn phases(&self) -> Vec<RealImage> {
        self.slices.iter().map(ComplexImage::phase).collect()
    }
}

/// Mutually incoherent probe modes sharing one support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeModelRepr", into = "ProbeModelRepr")]
pub struct ProbeModel {
    modes: Vec<ComplexImage>,
    wavelength: f64,
}

#[derive(Serialize, Deserialize)]
struct ProbeModelRepr {
    modes: Vec<ComplexImage>,
    wavelength: f64,
}

impl TryFrom<ProbeModelRepr> for ProbeModel {
    type Error = Error;
    fn try_from(r: ProbeModelRepr) -> Result<Self> {
        ProbeModel::new(r.modes, r.wavelength)
    }
}

impl From<ProbeModel> for ProbeModelRepr {
    fn from(p: ProbeModel) -> Self {
        ProbeModelRepr {
            modes: p.modes,
            wavelength: p.wavelength,
        }
    }
}

impl ProbeModel {
    pub fn new(modes: Vec<ComplexImage>, wavelength: f64) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::invalid("probe needs at least one mode"))?;
        for m in &modes[1..] {
            crate::error::check_shape("probe mode", first.shape(), m.shape())?;
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        let probe = ProbeModel { modes, wavelength };
        if probe.total_power() <= 0.0 {
            return Err(Error::invalid("probe has zero total power"));
        }
        Ok(probe)
    }

    pub fn modes(&self) -> &[ComplexImage] {
        &self.modes
    }

    pub(crate) fn modes_mut(&mut self) -> &mut [ComplexImage] {
        &mut self.modes
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.modes[0].shape()
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn total_power(&self) -> f64 {
        self.modes.iter().map(ComplexImage::power).sum()
    }

    pub fn with_modes(&self, modes: Vec<ComplexImage>) -> Result<Self> {
        ProbeModel::new(modes, self.wavelength)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub y: f64,
    pub x: f64,
}

impl Position {
    pub fn new(y: f64, x: f64) -> Self {
        Position { y, x }
    }
}

/// True when a `window`-sized patch at `pos` lies inside `bounds`. Fractional
/// offsets need one extra row/column for bilinear interpolation.
pub fn window_fits(pos: Position, window: (usize, usize), bounds: (usize, usize)) -> bool {
    fn axis_fits(offset: f64, len: usize, bound: usize) -> bool {
        if !offset.is_finite() || offset < 0.0 {
            return false;
        }
        let base = offset.floor();
        let extra = if offset > base { 1.0 } else { 0.0 };
        base + len as f64 + extra <= bound as f64
    }
    axis_fits(pos.y, window.0, bounds.0) && axis_fits(pos.x, window.1, bounds.1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    positions: Vec<Position>,
}

impl ScanGrid {
    pub fn new(positions: Vec<Position>) -> Result<Self> {
        if let Some(p) = positions.iter().find(|p| !(p.y.is_finite() && p.x.is_finite())) {
            return Err(Error::invalid(format!("non-finite scan position ({}, {})", p.y, p.x)));
        }
        Ok(ScanGrid { positions })
    }

    /// Grid validated against object and probe extents.
    pub fn within(positions: Vec<Position>, probe_shape: (usize, usize), object_shape: (usize, usize)) -> Result<Self> {
        for p in &positions {
            if !window_fits(*p, probe_shape, object_shape) {
                return Err(Error::OutOfBounds {
                    y: p.y,
                    x: p.x,
                    height: probe_shape.0,
                    width: probe_shape.1,
                    bound_height: object_shape.0,
                    bound_width: object_shape.1,
                });
            }
        }
        ScanGrid::new(positions)
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Measured (or simulated) far-field intensities, one pattern per scan
/// position, stored in the centered layout (zero frequency at `(H/2, W/2)`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionDataset {
    patterns: Array3<f64>,
}

impl DiffractionDataset {
    pub fn new(patterns: Array3<f64>) -> Result<Self> {
        if !patterns.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("diffraction patterns"));
        }
        if patterns.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("negative intensity"));
        }
        Ok(DiffractionDataset { patterns })
    }

    /// Accepts arbitrary values; [`validate_problem`] reports the problems.
    pub fn new_unchecked(patterns: Array3<f64>) -> Self {
        DiffractionDataset { patterns }
    }

    pub fn from_patterns(patterns: &[RealImage]) -> Result<Self> {
        let first = patterns
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one pattern"))?;
        let (h, w) = first.dim();
        let mut out = Array3::zeros((patterns.len(), h, w));
        for (i, p) in patterns.iter().enumerate() {
            crate::error::check_shape("diffraction pattern", (h, w), p.dim())?;
            out.index_axis_mut(ndarray::Axis(0), i).assign(p);
        }
        DiffractionDataset::new(out)
    }

    pub fn patterns(&self) -> &Array3<f64> {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pattern_shape(&self) -> (usize, usize) {
        (self.patterns.shape()[1], self.patterns.shape()[2])
    }

    pub fn pattern(&self, i: usize) -> ArrayView2<'_, f64> {
        self.patterns.index_axis(ndarray::Axis(0), i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(alias = "ePIE")]
    Epie,
    #[serde(alias = "rPIE")]
    Rpie,
}

/// Whether per-position work inside a batch is spread over threads. Results
/// are identical either way; without the `parallel` feature both run serially.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub n_iterations: usize,
    pub batch_size: usize,
    pub alpha_object: f64,
    pub alpha_probe: f64,
    pub update_probe: bool,
    /// Probe updates begin at this iteration (0 = immediately).
    #[serde(default)]
    pub probe_update_start: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            algorithm: Algorithm::Rpie,
            n_iterations: 100,
            batch_size: 1,
            alpha_object: 0.1,
            alpha_probe: 0.1,
            update_probe: true,
            probe_update_start: 0,
            rng_seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_object", self.alpha_object), ("alpha_probe", self.alpha_probe)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1], got {a}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub prompt: String,
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub seed: u64,
    /// Phase value mapped to display 0. Both bounds unset means the range is
    /// taken from each image's own min/max.
    #[serde(default)]
    pub value_min: Option<f64>,
    #[serde(default)]
    pub value_max: Option<f64>,
}

impl Default for EditRequest {
    fn default() -> Self {
        EditRequest {
            prompt: "dot grid".to_string(),
            guidance_scale: 5.0,
            inference_steps: 100,
            seed: 0,
            value_min: None,
            value_max: None,
        }
    }
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid("guidance_scale must be > 0"));
        }
        if self.inference_steps == 0 {
            return Err(Error::invalid("inference_steps must be >= 1"));
        }
        match (self.value_min, self.value_max) {
            (None, None) => Ok(()),
            (Some(lo), Some(hi)) if lo < hi => Ok(()),
            (Some(lo), Some(hi)) => Err(Error::invalid(format!("value_min {lo} must be < value_max {hi}"))),
            _ => Err(Error::invalid("value_min and value_max must be set together")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnpConfig {
    pub tau: f64,
    pub gamma: f64,
    pub n_inner: usize,
    pub n_outer: usize,
    /// Editing runs only for epochs below this value.
    pub edit_last_epoch: usize,
    pub editor: EditorSpec,
    /// Per-slice editors, overriding `editor` when present.
    #[serde(default)]
    pub slice_editors: Option<Vec<EditorSpec>>,
    #[serde(default)]
    pub stats_match: bool,
    /// Slices that get statistics matching; all slices when unset.
    #[serde(default)]
    pub stats_match_slices: Option<Vec<usize>>,
    #[serde(default = "default_stats_threshold")]
    pub stats_mask_threshold: f64,
    /// On editor failure fall back to the unedited input instead of aborting.
    #[serde(default)]
    pub editor_optional: bool,
    #[serde(default)]
    pub save_snapshots: bool,
}

fn default_stats_threshold() -> f64 {
    0.5
}

impl PnpConfig {
    pub fn new(tau: f64, gamma: f64, n_inner: usize, n_outer: usize, editor: EditorSpec) -> Self {
        PnpConfig {
            tau,
            gamma,
            n_inner,
            n_outer,
            edit_last_epoch: n_outer,
            editor,
            slice_editors: None,
            stats_match: false,
            stats_match_slices: None,
            stats_mask_threshold: default_stats_threshold(),
            editor_optional: false,
            save_snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if self.n_inner == 0 || self.n_outer == 0 {
            return Err(Error::invalid("n_inner and n_outer must be >= 1"));
        }
        if self.edit_last_epoch > self.n_outer {
            return Err(Error::invalid(format!(
                "edit_last_epoch {} exceeds n_outer {}",
                self.edit_last_epoch, self.n_outer
            )));
        }
        self.editor.validate()?;
        if let Some(eds) = &self.slice_editors {
            for e in eds {
                e.validate()?;
            }
        }
        Ok(())
    }

    pub fn editor_for_slice(&self, slice: usize) -> &EditorSpec {
        self.slice_editors
            .as_ref()
            .and_then(|eds| eds.get(slice))
            .unwrap_or(&self.editor)
    }

    pub fn stats_match_slice(&self, slice: usize) -> bool {
        self.stats_match && self.stats_match_slices.as_ref().is_none_or(|s| s.contains(&slice))
    }
}

/// ADMM iterate: data-fidelity object `o`, auxiliary `v`, scaled dual `u`,
/// the other unknowns (the probe) and the outer epoch counter.
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub o: ObjectModel,
    pub v: ObjectModel,
    pub u: ObjectModel,
    pub theta: ProbeModel,
    pub epoch: usize,
}

impl AdmmState {
    /// `v` and `u` start at zero.
    pub fn new(object: ObjectModel, probe: ProbeModel) -> Self {
        let zeros = object.zeros_like();
        AdmmState {
            v: zeros.clone(),
            u: zeros,
            o: object,
            theta: probe,
            epoch: 0,
        }
    }

    pub fn shapes_consistent(&self) -> bool {
        self.o.same_shape(&self.v) && self.o.same_shape(&self.u)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ShapeMismatch,
    PositionOutOfBounds,
    NegativeIntensity,
    NonFiniteIntensity,
    CountMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<_> = self.violations.into_iter().map(|v| v.message).collect();
            Err(Error::invalid(msgs.join("; ")))
        }
    }
}

/// Cross-checks every piece of a reconstruction problem. Never fails; an
/// empty report means the problem is consistent.
pub fn validate_problem(
    object: &ObjectModel,
    probe: &ProbeModel,
    grid: &ScanGrid,
    data: &DiffractionDataset,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (oh, ow) = object.shape();
    let (ph, pw) = probe.shape();
    if ph > oh || pw > ow {
        report.push(
            ViolationKind::ShapeMismatch,
            format!("probe shape {ph}x{pw} exceeds object shape {oh}x{ow}"),
        );
    }
    if data.pattern_shape() != (ph, pw) {
        let (dh, dw) = data.pattern_shape();
        report.push(
            ViolationKind::ShapeMismatch,
            format!("pattern shape {dh}x{dw} does not match probe shape {ph}x{pw}"),
        );
    }
    if data.len() != grid.len() {
        report.push(
            ViolationKind::CountMismatch,
            format!(
                "dataset has {} patterns but scan grid has {} positions",
                data.len(),
                grid.len()
            ),
        );
    }
    for (i, p) in grid.positions().iter().enumerate() {
        if !window_fits(*p, (ph, pw), (oh, ow)) {
            report.push(
                ViolationKind::PositionOutOfBounds,
                format!("position out of bounds: #{i} at ({}, {})", p.y, p.x),
            );
        }
    }
    let negatives = data.patterns().iter().filter(|&&v| v < 0.0).count();
    if negatives > 0 {
        report.push(
            ViolationKind::NegativeIntensity,
            format!("negative intensity at {negatives} pixel(s)"),
        );
    }
    let non_finite = data.patterns().iter().filter(|v| !v.is_finite()).count();
    if non_finite > 0 {
        report.push(
            ViolationKind::NonFiniteIntensity,
            format!("non-finite intensity at {non_finite} pixel(s)"),
        );
    }
    report
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn object_round_trips_through_json(
            h in 1usize..5, w in 1usize..5, n in 1usize..3,
            vals in proptest::collection::vec(-1e3f64..1e3, 2 * 4 * 4 * 3),
            spacing in 0.0f64..1e4,
        ) {
            let slices: Vec<_> = (0..n)
                .map(|s| {
                    let data = (0..h * w)
                        .map(|i| C64::new(vals[2 * (s * 16 + i)], vals[2 * (s * 16 + i) + 1]))
                        .collect();
                    ComplexImage::from_vec(h, w, data).unwrap()
                })
                .collect();
            let obj = ObjectModel::new(slices, 10.0, vec![spacing; n - 1]).unwrap();
            let json = serde_json::to_string(&obj).unwrap();
            let back: ObjectModel = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, obj);
        }
    }

    #[test]
    fn deserialization_enforces_invariants() {
        let bad = r#"{"slices":[{"height":1,"width":1,"data":[[1.0,0.0]]}],"pixel_size":10.0,"slice_spacings":[1.0]}"#;
        assert!(serde_json::from_str::<ObjectModel>(bad).is_err());
        let zero_probe = r#"{"modes":[{"height":1,"width":1,"data":[[0.0,0.0]]}],"wavelength":0.1}"#;
        assert!(serde_json::from_str::<ProbeModel>(zero_probe).is_err());
    }
}
