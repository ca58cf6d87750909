//! Physical forward model: far-field transforms, Fresnel propagation, patch
//! extraction with its adjoint, multislice exit waves and diffraction
//! intensities with incoherent probe modes.
//!
//! Every Fourier transform here is orthonormal. Public functions use the
//! centered layout (zero frequency at `(H/2, W/2)`); [`Fft2`] works in the raw
//! FFT layout and leaves normalization to the caller.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::ops::{AddAssign, Mul};
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, ArrayView2, Zip};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::types::{ComplexImage, ObjectModel, Position, ProbeModel, RealImage, C64};

/// Depth-of-field prefactor in `DOF = k · pixel² / λ`.
pub const DOF_PREFACTOR: f64 = 5.4;

/// Planned forward/inverse 2D FFT for one array shape. Unnormalized.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

type PlanCache = HashMap<(usize, usize), Arc<Fft2>>;

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    /// Shared plan for a shape; plans are cached for the life of the process.
    pub fn cached(height: usize, width: usize) -> Arc<Fft2> {
        static CACHE: OnceLock<Mutex<PlanCache>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((height, width))
            .or_insert_with(|| Arc::new(Fft2::new(height, width)))
            .clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut Array2<C64>) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut Array2<C64>) {
        self.run(data, &self.row_inv, &self.col_inv);
    }

    fn run(&self, data: &mut Array2<C64>, rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.dim(), (self.height, self.width), "FFT plan shape mismatch");
        if !data.is_standard_layout() {
            *data = data.as_standard_layout().into_owned();
        }
        let buf = data.as_slice_mut().expect("standard layout");
        rows.process(buf);
        let mut t: Vec<C64> = vec![C64::new(0.0, 0.0); buf.len()];
        transpose(buf, &mut t, self.height, self.width);
        cols.process(&mut t);
        transpose(&t, buf, self.width, self.height);
    }
}

fn transpose(src: &[C64], dst: &mut [C64], rows: usize, cols: usize) {
    const BLOCK: usize = 16;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn roll<T: Clone>(a: ArrayView2<T>, shift_y: usize, shift_x: usize) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        a[[(r + h - shift_y % h) % h, (c + w - shift_x % w) % w]].clone()
    })
}

/// Moves the zero-frequency sample from index 0 to `(H/2, W/2)`.
pub fn fftshift<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    roll(a, h / 2, w / 2)
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    roll(a, h - h / 2, w - w / 2)
}

/// Signed FFT frequency index for sample `k` of an `n`-point transform.
pub fn fft_freq_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn ensure_finite(wave: &ComplexImage) -> Result<()> {
    // ComplexImage already guarantees this; kept for arrays built unchecked.
    if wave.as_array().iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("wave"))
    }
}

/// Centered orthonormal 2D DFT.
pub fn far_field(wave: &ComplexImage) -> Result<ComplexImage> {
    ensure_finite(wave)?;
    let (h, w) = wave.shape();
    let fft = Fft2::cached(h, w);
    let mut buf = ifftshift(wave.view());
    fft.forward(&mut buf);
    let norm = 1.0 / (fft.len() as f64).sqrt();
    let out = fftshift(buf.view()).mapv(|v| v * norm);
    Ok(ComplexImage::from_array_unchecked(out))
}

/// Inverse of [`far_field`].
pub fn inverse_far_field(spectrum: &ComplexImage) -> Result<ComplexImage> {
    ensure_finite(spectrum)?;
    let (h, w) = spectrum.shape();
    let fft = Fft2::cached(h, w);
    let mut buf = ifftshift(spectrum.view());
    fft.inverse(&mut buf);
    let norm = 1.0 / (fft.len() as f64).sqrt();
    let out = fftshift(buf.view()).mapv(|v| v * norm);
    Ok(ComplexImage::from_array_unchecked(out))
}

/// Paraxial angular-spectrum kernel `exp(-iπλd(fx² + fy²))` for one
/// distance, stored in raw FFT layout. Beyond the critical distance
/// `N·dx²/λ` the frequencies that would alias are zeroed.
#[derive(Clone, Debug)]
pub struct PropagatorCache {
    transfer_function: Array2<C64>,
    distance: f64,
    band_limited: bool,
}

impl PropagatorCache {
    pub fn new(shape: (usize, usize), distance: f64, wavelength: f64, pixel_size: f64) -> Result<Self> {
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::invalid(format!("pixel size must be positive, got {pixel_size}")));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        if !distance.is_finite() {
            return Err(Error::invalid("propagation distance must be finite"));
        }
        let (h, w) = shape;
        let span_y = h as f64 * pixel_size;
        let span_x = w as f64 * pixel_size;
        // Highest frequency whose chirp stays sampled: |f| <= N·dx / (2λ|d|).
        let limit = |span: f64| {
            if distance == 0.0 {
                f64::INFINITY
            } else {
                span / (2.0 * wavelength * distance.abs())
            }
        };
        let (limit_y, limit_x) = (limit(span_y), limit(span_x));
        let nyquist = 0.5 / pixel_size;
        let band_limited = limit_y < nyquist || limit_x < nyquist;
        let transfer_function = Array2::from_shape_fn((h, w), |(r, c)| {
            let fy = fft_freq_index(r, h) / span_y;
            let fx = fft_freq_index(c, w) / span_x;
            if fy.abs() > limit_y || fx.abs() > limit_x {
                C64::new(0.0, 0.0)
            } else {
                C64::from_polar(1.0, -PI * wavelength * distance * (fx * fx + fy * fy))
            }
        });
        Ok(PropagatorCache {
            transfer_function,
            distance,
            band_limited,
        })
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Whether any frequency sample was zeroed.
    pub fn is_band_limited(&self) -> bool {
        self.band_limited
    }

    /// Kernel in the centered layout.
    pub fn transfer_function(&self) -> ComplexImage {
        ComplexImage::from_array_unchecked(fftshift(self.transfer_function.view()))
    }

    /// Propagates `wave` in place.
    pub fn apply(&self, fft: &Fft2, wave: &mut Array2<C64>) {
        fft.forward(wave);
        let norm = 1.0 / fft.len() as f64;
        Zip::from(&mut *wave)
            .and(&self.transfer_function)
            .for_each(|v, &k| *v *= k * norm);
        fft.inverse(wave);
    }
}

/// Angular-spectrum Fresnel propagation over `distance` (negative distances
/// back-propagate). All lengths share one unit.
pub fn fresnel_propagate(wave: &ComplexImage, distance: f64, wavelength: f64, pixel_size: f64) -> Result<ComplexImage> {
    let prop = PropagatorCache::new(wave.shape(), distance, wavelength, pixel_size)?;
    let fft = Fft2::cached(wave.height(), wave.width());
    let mut buf = wave.as_array().clone();
    prop.apply(&fft, &mut buf);
    Ok(ComplexImage::from_array_unchecked(buf))
}

/// Integer base offset and fractional remainder of a scan position, after
/// checking the window fits.
fn split_position(pos: Position, window: (usize, usize), bounds: (usize, usize)) -> Result<(usize, usize, f64, f64)> {
    if !crate::types::window_fits(pos, window, bounds) {
        return Err(Error::OutOfBounds {
            y: pos.y,
            x: pos.x,
            height: window.0,
            width: window.1,
            bound_height: bounds.0,
            bound_width: bounds.1,
        });
    }
    let y0 = pos.y.floor();
    let x0 = pos.x.floor();
    Ok((y0 as usize, x0 as usize, pos.y - y0, pos.x - x0))
}

/// Reads a `shape` window at `pos`. Fractional offsets are resolved by
/// bilinear interpolation of real and imaginary parts.
pub fn extract_array<T>(source: ArrayView2<T>, pos: Position, shape: (usize, usize)) -> Result<Array2<T>>
where
    T: Copy + Default + Mul<f64, Output = T> + AddAssign,
{
    let (y0, x0, fy, fx) = split_position(pos, shape, source.dim())?;
    let (h, w) = shape;
    if fy == 0.0 && fx == 0.0 {
        return Ok(source.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned());
    }
    let weights = [
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ];
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = T::default();
        for &(dy, dx, wt) in &weights {
            if wt != 0.0 {
                acc += source[[y0 + r + dy, x0 + c + dx]] * wt;
            }
        }
        acc
    }))
}

/// Adjoint of [`extract_array`]: accumulates `patch` into `target` with the
/// interpolation weights used for reading.
pub fn place_adjoint<T>(target: &mut Array2<T>, patch: ArrayView2<T>, pos: Position) -> Result<()>
where
    T: Copy + Mul<f64, Output = T> + AddAssign,
{
    let shape = patch.dim();
    let (y0, x0, fy, fx) = split_position(pos, shape, target.dim())?;
    let (h, w) = shape;
    if fy == 0.0 && fx == 0.0 {
        let mut view = target.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w]);
        Zip::from(&mut view).and(&patch).for_each(|t, &p| *t += p);
        return Ok(());
    }
    let weights = [
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ];
    for ((r, c), &v) in patch.indexed_iter() {
        for &(dy, dx, wt) in &weights {
            if wt != 0.0 {
                target[[y0 + r + dy, x0 + c + dx]] += v * wt;
            }
        }
    }
    Ok(())
}

pub fn extract_patch(slice: &ComplexImage, pos: Position, shape: (usize, usize)) -> Result<ComplexImage> {
    Ok(ComplexImage::from_array_unchecked(extract_array(
        slice.view(),
        pos,
        shape,
    )?))
}

/// Waves recorded during a multislice pass for one probe mode.
#[derive(Clone, Debug)]
pub struct MultisliceWaves {
    /// Wave arriving at each slice; `incident[0]` is the probe mode.
    pub incident: Vec<Array2<C64>>,
    /// Wave leaving each slice (`slice · incident`); the last one is the exit wave.
    pub modulated: Vec<Array2<C64>>,
}

impl MultisliceWaves {
    pub fn exit(&self) -> &Array2<C64> {
        self.modulated.last().expect("at least one slice")
    }
}

/// Object geometry plus the propagators and FFT plan it needs, built once per
/// reconstruction.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    fft: Arc<Fft2>,
    forward: Vec<PropagatorCache>,
    backward: Vec<PropagatorCache>,
    window: (usize, usize),
}

impl ForwardModel {
    pub fn new(object: &ObjectModel, probe: &ProbeModel) -> Result<Self> {
        let window = probe.shape();
        let (oh, ow) = object.shape();
        if window.0 > oh || window.1 > ow {
            return Err(Error::invalid(format!(
                "probe shape {}x{} exceeds object shape {oh}x{ow}",
                window.0, window.1
            )));
        }
        let mk = |sign: f64| -> Result<Vec<PropagatorCache>> {
            object
                .slice_spacings()
                .iter()
                .map(|&d| PropagatorCache::new(window, sign * d, probe.wavelength(), object.pixel_size()))
                .collect()
        };
        Ok(ForwardModel {
            fft: Fft2::cached(window.0, window.1),
            forward: mk(1.0)?,
            backward: mk(-1.0)?,
            window,
        })
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    /// Object patches (one per slice) under the probe window at `pos`.
    pub fn patches(&self, object: &ObjectModel, pos: Position) -> Result<Vec<Array2<C64>>> {
        object
            .slices()
            .iter()
            .map(|s| extract_array(s.view(), pos, self.window))
            .collect()
    }

    /// Runs one probe mode through the slice stack.
    pub fn propagate_through(&self, patches: &[Array2<C64>], mode: ArrayView2<C64>) -> MultisliceWaves {
        let n = patches.len();
        let mut incident = Vec::with_capacity(n);
        let mut modulated = Vec::with_capacity(n);
        let mut wave = mode.to_owned();
        for (j, patch) in patches.iter().enumerate() {
            let out = &wave * patch;
            incident.push(wave);
            if j + 1 < n {
                let mut next = out.clone();
                self.forward[j].apply(&self.fft, &mut next);
                wave = next;
            } else {
                wave = Array2::zeros((0, 0));
            }
            modulated.push(out);
        }
        MultisliceWaves { incident, modulated }
    }

    /// Back-propagates a wave change from slice `j + 1` to the exit plane of slice `j`.
    pub fn back_propagate(&self, j: usize, wave: &mut Array2<C64>) {
        self.backward[j].apply(&self.fft, wave);
    }

    /// `Σ_m |FFT(exit_m)|² / N` in raw FFT layout.
    pub fn intensity_fft_layout(&self, exits: &[Array2<C64>]) -> RealImage {
        let norm = 1.0 / self.fft.len() as f64;
        let mut total = RealImage::zeros(self.window);
        for e in exits {
            let mut spec = e.clone();
            self.fft.forward(&mut spec);
            Zip::from(&mut total)
                .and(&spec)
                .for_each(|t, s| *t += s.norm_sqr() * norm);
        }
        total
    }
}

/// Exit wave of one probe mode at one scan position plus every per-slice
/// intermediate. With a single slice the exit wave is `o · p`.
pub fn exit_wave(
    object: &ObjectModel,
    probe_mode: &ComplexImage,
    wavelength: f64,
    pos: Position,
) -> Result<(ComplexImage, MultisliceWaves)> {
    let probe = ProbeModel::new(vec![probe_mode.clone()], wavelength)?;
    exit_wave_with(object, &probe, 0, pos)
}

/// Like [`exit_wave`] for mode `mode` of a full probe.
pub fn exit_wave_with(
    object: &ObjectModel,
    probe: &ProbeModel,
    mode: usize,
    pos: Position,
) -> Result<(ComplexImage, MultisliceWaves)> {
    let model = ForwardModel::new(object, probe)?;
    let patches = model.patches(object, pos)?;
    let mode = probe
        .modes()
        .get(mode)
        .ok_or_else(|| Error::invalid(format!("probe has no mode {mode}")))?;
    let waves = model.propagate_through(&patches, mode.view());
    Ok((ComplexImage::from_array_unchecked(waves.exit().clone()), waves))
}

/// Far-field intensity at one position, incoherently summed over probe modes,
/// in the centered layout.
pub fn predict_intensity(object: &ObjectModel, probe: &ProbeModel, pos: Position) -> Result<RealImage> {
    let model = ForwardModel::new(object, probe)?;
    predict_with(&model, object, probe, pos)
}

pub(crate) fn predict_with(
    model: &ForwardModel,
    object: &ObjectModel,
    probe: &ProbeModel,
    pos: Position,
) -> Result<RealImage> {
    let patches = model.patches(object, pos)?;
    let exits: Vec<_> = probe
        .modes()
        .iter()
        .map(|m| {
            model
                .propagate_through(&patches, m.view())
                .modulated
                .pop()
                .expect("non-empty")
        })
        .collect();
    Ok(fftshift(model.intensity_fft_layout(&exits).view()))
}

/// Linear overlap between neighbouring probe footprints, `1 − spacing/diameter`,
/// clamped at zero.
pub fn overlap_ratio(spacing: f64, probe_diameter: f64) -> Result<f64> {
    if !(probe_diameter > 0.0) {
        return Err(Error::invalid(format!(
            "probe diameter must be positive, got {probe_diameter}"
        )));
    }
    Ok((1.0 - spacing / probe_diameter).max(0.0))
}

/// Axial depth of field, `5.4 · pixel² / λ`, in the unit of the inputs.
pub fn depth_of_field(wavelength: f64, pixel_size: f64) -> Result<f64> {
    if !(wavelength > 0.0 && pixel_size > 0.0) {
        return Err(Error::invalid("wavelength and pixel size must be positive"));
    }
    Ok(DOF_PREFACTOR * pixel_size * pixel_size / wavelength)
}
