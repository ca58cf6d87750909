//! Desk-scale experiment generators: phantoms, probes with incoherent modes,
//! scan grids and (optionally Poisson-noisy) diffraction datasets.
//!
//! The extra probe modes are synthetic stand-ins for measured ones.

use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::optics::{fft_freq_index, fresnel_propagate, Fft2};
use crate::solver::predict_dataset;
use crate::types::{
    window_fits, ComplexImage, DiffractionDataset, Execution, ObjectModel, Position, ProbeModel, RealImage, ScanGrid,
    C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    TexturedSingleSlice,
    CellsAndRodsTwoSlice,
    FromFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Edge length in pixels (ignored for `from_files`).
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_phase_range")]
    pub phase_range: (f64, f64),
    #[serde(default = "default_magnitude_range")]
    pub magnitude_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    /// nm.
    #[serde(default = "default_pixel_size")]
    pub pixel_size: f64,
    /// nm between consecutive slices.
    #[serde(default = "default_slice_spacing")]
    pub slice_spacing: f64,
    /// Rod lattice period in pixels.
    #[serde(default = "default_rod_period")]
    pub rod_period: f64,
    /// Phase stack (2D or 3D NPY) for `from_files`.
    #[serde(default)]
    pub phase_path: Option<PathBuf>,
    /// Optional magnitude stack matching `phase_path`; unit magnitude if unset.
    #[serde(default)]
    pub magnitude_path: Option<PathBuf>,
}

fn default_size() -> usize {
    256
}

fn default_phase_range() -> (f64, f64) {
    (-0.5, 0.0)
}

fn default_magnitude_range() -> (f64, f64) {
    (0.9, 1.0)
}

fn default_pixel_size() -> f64 {
    10.0
}

fn default_slice_spacing() -> f64 {
    10_000.0
}

fn default_rod_period() -> f64 {
    24.0
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: usize, seed: u64) -> Self {
        PhantomSpec {
            kind,
            size,
            phase_range: default_phase_range(),
            magnitude_range: default_magnitude_range(),
            seed,
            pixel_size: default_pixel_size(),
            slice_spacing: default_slice_spacing(),
            rod_period: default_rod_period(),
            phase_path: None,
            magnitude_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (plo, phi) = self.phase_range;
        if !(plo <= phi && plo >= -PI && phi <= PI) {
            return Err(Error::invalid(format!(
                "phase_range ({plo}, {phi}) must be ordered within [-pi, pi]"
            )));
        }
        let (mlo, mhi) = self.magnitude_range;
        if !(mlo <= mhi && mlo > 0.0 && mhi <= 1.0) {
            return Err(Error::invalid(format!(
                "magnitude_range ({mlo}, {mhi}) must be ordered within (0, 1]"
            )));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::invalid("pixel_size must be positive"));
        }
        if !(self.slice_spacing >= 0.0) {
            return Err(Error::invalid("slice_spacing must be >= 0"));
        }
        match self.kind {
            PhantomKind::FromFiles => {
                if self.phase_path.is_none() {
                    return Err(Error::invalid("from_files phantom needs phase_path"));
                }
            }
            _ => {
                if self.size < 8 {
                    return Err(Error::invalid("phantom size must be >= 8"));
                }
                if !(self.rod_period >= 4.0) {
                    return Err(Error::invalid("rod_period must be >= 4 px"));
                }
            }
        }
        Ok(())
    }
}

/// Circular Gaussian blur applied in frequency space (periodic boundaries).
pub(crate) fn gaussian_blur(image: &RealImage, sigma: f64) -> RealImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (h, w) = image.dim();
    let fft = Fft2::cached(h, w);
    let mut buf = image.mapv(|v| C64::new(v, 0.0));
    fft.forward(&mut buf);
    let norm = 1.0 / fft.len() as f64;
    for ((r, c), v) in buf.indexed_iter_mut() {
        let fy = fft_freq_index(r, h) / h as f64;
        let fx = fft_freq_index(c, w) / w as f64;
        *v *= norm * (-2.0 * PI * PI * sigma * sigma * (fy * fy + fx * fx)).exp();
    }
    fft.inverse(&mut buf);
    buf.mapv(|v| v.re)
}

/// Affinely rescales to `[lo, hi]`; a constant image maps to `lo`.
fn rescale(image: &RealImage, lo: f64, hi: f64) -> RealImage {
    let min = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return RealImage::from_elem(image.dim(), lo);
    }
    image.mapv(|v| (lo + (v - min) / (max - min) * (hi - lo)).clamp(lo, hi))
}

fn white_noise(shape: (usize, usize), rng: &mut ChaCha8Rng) -> RealImage {
    RealImage::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Multi-scale smoothed noise in `[0, 1]`.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> RealImage {
    let mut acc = RealImage::zeros((size, size));
    for (sigma, weight) in [(1.5, 0.5), (4.0, 1.0), (10.0, 1.0)] {
        let layer = gaussian_blur(&white_noise((size, size), rng), sigma);
        let std = layer.std(0.0).max(1e-300);
        acc.scaled_add(weight / std, &layer);
    }
    rescale(&acc, 0.0, 1.0)
}

/// Field of soft elliptical blobs in `[0, 1]`, loosely resembling cells.
pub fn blob_field(size: usize, rng: &mut ChaCha8Rng) -> RealImage {
    let n_blobs = (size * size / 900).max(4);
    let mut acc = RealImage::zeros((size, size));
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.0..size as f64);
        let cx = rng.random_range(0.0..size as f64);
        let a = rng.random_range(6.0..16.0);
        let b = rng.random_range(6.0..16.0);
        let theta = rng.random_range(0.0..PI);
        let amp = rng.random_range(0.5..1.0);
        let (s, c) = theta.sin_cos();
        for ((y, x), v) in acc.indexed_iter_mut() {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (c * dx + s * dy) / a;
            let t = (-s * dx + c * dy) / b;
            let r2 = u * u + t * t;
            if r2 < 9.0 {
                *v += amp * (-r2 * 2.0).exp();
            }
        }
    }
    let texture = gaussian_blur(&white_noise((size, size), rng), 2.0);
    let std = texture.std(0.0).max(1e-300);
    acc.scaled_add(0.05 / std, &texture);
    rescale(&acc, 0.0, 1.0)
}

/// Binary lattice of short vertical rods with the given period.
pub fn rod_mask(size: usize, period: f64) -> Array2<bool> {
    let width = (period / 4.0).round().max(1.0);
    let length = (period * 0.6).round().max(2.0);
    Array2::from_shape_fn((size, size), |(y, x)| {
        let py = (y as f64 + 0.5).rem_euclid(period);
        let px = (x as f64 + 0.5).rem_euclid(period);
        py < length && px < width
    })
}

fn complex_slice(phase: &RealImage, magnitude: &RealImage) -> Result<ComplexImage> {
    ComplexImage::from_polar(magnitude.view(), phase.view())
}

fn load_stack(path: &std::path::Path) -> Result<Vec<RealImage>> {
    let arr = npy::read_npy(path)?;
    match arr.shape().len() {
        2 => Ok(vec![arr.to_real2()?]),
        3 => {
            let stack = arr.to_real3()?;
            Ok(stack.axis_iter(Axis(0)).map(|s| s.to_owned()).collect())
        }
        _ => Err(Error::invalid(format!("{} must be a 2D or 3D array", path.display()))),
    }
}

/// Builds the ground-truth object. Deterministic for a fixed spec.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ObjectModel> {
    spec.validate()?;
    let (plo, phi) = spec.phase_range;
    let (mlo, mhi) = spec.magnitude_range;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        PhantomKind::TexturedSingleSlice => {
            let base = texture(spec.size, &mut rng);
            let phase = rescale(&base, plo, phi);
            let magnitude = base.mapv(|v| mhi - v * (mhi - mlo));
            ObjectModel::single(complex_slice(&phase, &magnitude)?, spec.pixel_size)
        }
        PhantomKind::CellsAndRodsTwoSlice => {
            let cells = blob_field(spec.size, &mut rng);
            let rods = gaussian_blur(
                &rod_mask(spec.size, spec.rod_period).mapv(|m| if m { 1.0 } else { 0.0 }),
                0.7,
            );
            let rods = rescale(&rods, 0.0, 1.0);
            let slices = [cells, rods]
                .iter()
                .map(|base| {
                    let phase = base.mapv(|v| phi - v * (phi - plo));
                    let magnitude = base.mapv(|v| mhi - v * (mhi - mlo));
                    complex_slice(&phase, &magnitude)
                })
                .collect::<Result<Vec<_>>>()?;
            ObjectModel::new(slices, spec.pixel_size, vec![spec.slice_spacing])
        }
        PhantomKind::FromFiles => {
            let phases = load_stack(spec.phase_path.as_deref().expect("validated"))?;
            let mags = match &spec.magnitude_path {
                Some(p) => load_stack(p)?,
                None => phases.iter().map(|p| RealImage::ones(p.dim())).collect(),
            };
            if mags.len() != phases.len() {
                return Err(Error::invalid(format!(
                    "magnitude stack has {} slices but phase stack has {}",
                    mags.len(),
                    phases.len()
                )));
            }
            let slices = phases
                .iter()
                .zip(&mags)
                .map(|(p, m)| {
                    if p.dim() != m.dim() {
                        return Err(Error::invalid("phase and magnitude files differ in shape"));
                    }
                    complex_slice(p, m)
                })
                .collect::<Result<Vec<_>>>()?;
            let n = slices.len();
            ObjectModel::new(slices, spec.pixel_size, vec![spec.slice_spacing; n - 1])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    /// Spot diameter in pixels.
    pub diameter: f64,
    /// Square support edge in pixels.
    pub support: usize,
    #[serde(default = "default_modes")]
    pub n_modes: usize,
    /// Power ratio between consecutive modes.
    #[serde(default = "default_decay")]
    pub mode_power_decay: f64,
    /// nm; positive propagates downstream of focus.
    #[serde(default)]
    pub defocus: f64,
    #[serde(default = "default_energy")]
    pub energy_kev: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_modes() -> usize {
    1
}

fn default_decay() -> f64 {
    0.5
}

fn default_energy() -> f64 {
    10.0
}

impl ProbeSpec {
    pub fn new(diameter: f64, support: usize) -> Self {
        ProbeSpec {
            diameter,
            support,
            n_modes: default_modes(),
            mode_power_decay: default_decay(),
            defocus: 0.0,
            energy_kev: default_energy(),
            seed: 0,
        }
    }

    pub fn wavelength(&self) -> f64 {
        crate::types::wavelength_from_kev(self.energy_kev)
    }

    pub fn build(&self, pixel_size: f64) -> Result<ProbeModel> {
        if !(self.energy_kev > 0.0) {
            return Err(Error::invalid("energy_kev must be positive"));
        }
        make_probe(
            self.diameter,
            self.support,
            self.n_modes,
            self.mode_power_decay,
            self.defocus,
            self.wavelength(),
            pixel_size,
            self.seed,
        )
    }
}

fn inner(a: &Array2<C64>, b: &Array2<C64>) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn power(a: &Array2<C64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

/// Disk probe with a 2 px error-function edge, optionally defocused, plus
/// `n_modes − 1` seeded, Gram–Schmidt orthogonalized companion modes whose
/// powers fall off geometrically by `mode_power_decay`.
#[allow(clippy::too_many_arguments)]
pub fn make_probe(
    diameter: f64,
    support: usize,
    n_modes: usize,
    mode_power_decay: f64,
    defocus: f64,
    wavelength: f64,
    pixel_size: f64,
    seed: u64,
) -> Result<ProbeModel> {
    if !(diameter > 0.0 && diameter < support as f64) {
        return Err(Error::invalid(format!(
            "probe diameter {diameter} must be positive and smaller than the support {support}"
        )));
    }
    if n_modes == 0 {
        return Err(Error::invalid("n_modes must be >= 1"));
    }
    if !(mode_power_decay > 0.0 && mode_power_decay.is_finite()) {
        return Err(Error::invalid("mode_power_decay must be positive"));
    }
    const ROLLOFF: f64 = 2.0;
    let radius = diameter / 2.0;
    let center = (support / 2) as f64;
    let disk = Array2::from_shape_fn((support, support), |(y, x)| {
        let r = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
        C64::new(0.5 * libm::erfc((r - radius) / ROLLOFF), 0.0)
    });
    let mut primary = ComplexImage::new(disk)?;
    if defocus != 0.0 {
        primary = fresnel_propagate(&primary, defocus, wavelength, pixel_size)?;
    }
    let p0 = primary.power();
    let envelope = primary.magnitude();
    let mut modes = vec![primary.into_array()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 1..n_modes {
        let re = gaussian_blur(&white_noise((support, support), &mut rng), support as f64 / 16.0);
        let im = gaussian_blur(&white_noise((support, support), &mut rng), support as f64 / 16.0);
        let mut m = Array2::from_shape_fn((support, support), |(y, x)| {
            C64::new(re[[y, x]], im[[y, x]]) * envelope[[y, x]]
        });
        // Two Gram–Schmidt passes keep the residual overlap near machine precision.
        for _ in 0..2 {
            for prev in &modes {
                let c = inner(prev, &m) / power(prev);
                m.zip_mut_with(prev, |v, &p| *v -= c * p);
            }
        }
        let pm = power(&m);
        if !(pm > 0.0) {
            return Err(Error::invalid("degenerate probe mode during orthogonalization"));
        }
        let target = p0 * mode_power_decay.powi(k as i32);
        let scale = (target / pm).sqrt();
        m.mapv_inplace(|v| v * scale);
        modes.push(m);
    }
    let modes = modes.into_iter().map(ComplexImage::new).collect::<Result<Vec<_>>>()?;
    ProbeModel::new(modes, wavelength)
}

fn bilinear_sample(src: &Array2<C64>, y: f64, x: f64) -> C64 {
    let (h, w) = src.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = C64::new(0.0, 0.0);
    for (dy, dx, wgt) in [
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ] {
        let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
        if wgt != 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            acc += src[[yy as usize, xx as usize]] * wgt;
        }
    }
    acc
}

/// Spatially magnifies every mode about the support center (bilinear, zero
/// outside), keeping the support size and each mode's power.
pub fn perturb_probe(probe: &ProbeModel, magnify: f64) -> Result<ProbeModel> {
    if !(magnify > 0.0 && magnify.is_finite()) {
        return Err(Error::invalid(format!("magnification must be positive, got {magnify}")));
    }
    let (h, w) = probe.shape();
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let modes = probe
        .modes()
        .iter()
        .map(|m| {
            let src = m.as_array();
            let mut out = Array2::from_shape_fn((h, w), |(y, x)| {
                bilinear_sample(src, cy + (y as f64 - cy) / magnify, cx + (x as f64 - cx) / magnify)
            });
            let (p_in, p_out) = (m.power(), power(&out));
            if p_out > 0.0 {
                let s = (p_in / p_out).sqrt();
                out.mapv_inplace(|v| v * s);
            }
            ComplexImage::new(out)
        })
        .collect::<Result<Vec<_>>>()?;
    probe.with_modes(modes)
}

/// Full width at half maximum of a centered magnitude profile, measured along
/// the central row with linear interpolation.
pub fn fwhm(magnitude: &RealImage) -> f64 {
    let (h, w) = magnitude.dim();
    let row = magnitude.row(h / 2);
    let max = row.iter().cloned().fold(0.0, f64::max);
    let half = max / 2.0;
    let c = w / 2;
    let crossing = |dir: isize| -> f64 {
        let mut i = c as isize;
        while (i + dir) >= 0 && ((i + dir) as usize) < w && row[(i + dir) as usize] >= half {
            i += dir;
        }
        let j = i + dir;
        if j < 0 || j as usize >= w {
            return i as f64;
        }
        let (a, b) = (row[i as usize], row[j as usize]);
        i as f64 + dir as f64 * (a - half) / (a - b)
    };
    crossing(1) - crossing(-1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Rectangular,
    Fermat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: GridKind,
    /// Lattice spacing, or nominal nearest-neighbour spacing for `fermat`.
    pub spacing: f64,
    /// Rows and columns for `rectangular`.
    #[serde(default)]
    pub rows: usize,
    #[serde(default)]
    pub cols: usize,
    /// Point count for `fermat`.
    #[serde(default)]
    pub n_points: usize,
    /// Uniform jitter amplitude in pixels (each axis, ±jitter).
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GridSpec {
    pub fn rectangular(spacing: f64, rows: usize, cols: usize) -> Self {
        GridSpec {
            kind: GridKind::Rectangular,
            spacing,
            rows,
            cols,
            n_points: 0,
            jitter: 0.0,
            seed: 0,
        }
    }

    pub fn fermat(spacing: f64, n_points: usize) -> Self {
        GridSpec {
            kind: GridKind::Fermat,
            spacing,
            rows: 0,
            cols: 0,
            n_points,
            jitter: 0.0,
            seed: 0,
        }
    }

    /// Largest square rectangular grid of this spacing that fits.
    pub fn fill(spacing: f64, probe_shape: (usize, usize), object_shape: (usize, usize)) -> Self {
        let fit = |o: usize, p: usize| ((o.saturating_sub(p)) as f64 / spacing).floor() as usize + 1;
        GridSpec::rectangular(
            spacing,
            fit(object_shape.0, probe_shape.0),
            fit(object_shape.1, probe_shape.1),
        )
    }
}

/// Scan positions centered in the object. Rectangular grids start on whole
/// pixels; fermat spirals use `r = c√n`, `θ = n · 137.508°`, with
/// `c = spacing/√π` so each point covers `spacing²` of area.
pub fn make_scan_grid(spec: &GridSpec, probe_shape: (usize, usize), object_shape: (usize, usize)) -> Result<ScanGrid> {
    if !(spec.spacing > 0.0 && spec.spacing.is_finite()) {
        return Err(Error::invalid("grid spacing must be positive"));
    }
    if !(spec.jitter >= 0.0) {
        return Err(Error::invalid("jitter must be >= 0"));
    }
    let free_y = object_shape.0 as f64 - probe_shape.0 as f64;
    let free_x = object_shape.1 as f64 - probe_shape.1 as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions = Vec::new();
    match spec.kind {
        GridKind::Rectangular => {
            if spec.rows == 0 || spec.cols == 0 {
                return Err(Error::invalid("rectangular grid needs rows and cols >= 1"));
            }
            let oy = ((free_y - (spec.rows - 1) as f64 * spec.spacing) / 2.0).floor();
            let ox = ((free_x - (spec.cols - 1) as f64 * spec.spacing) / 2.0).floor();
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    positions.push(Position::new(
                        oy + r as f64 * spec.spacing,
                        ox + c as f64 * spec.spacing,
                    ));
                }
            }
        }
        GridKind::Fermat => {
            if spec.n_points == 0 {
                return Err(Error::invalid("fermat grid needs n_points >= 1"));
            }
            let c = spec.spacing / PI.sqrt();
            let golden = 137.507_764_05_f64.to_radians();
            for n in 0..spec.n_points {
                let r = c * (n as f64).sqrt();
                let theta = n as f64 * golden;
                positions.push(Position::new(
                    free_y / 2.0 + r * theta.sin(),
                    free_x / 2.0 + r * theta.cos(),
                ));
            }
        }
    }
    if spec.jitter > 0.0 {
        for p in &mut positions {
            p.y += rng.random_range(-spec.jitter..=spec.jitter);
            p.x += rng.random_range(-spec.jitter..=spec.jitter);
        }
    }
    if let Some(bad) = positions.iter().find(|p| !window_fits(**p, probe_shape, object_shape)) {
        return Err(Error::invalid(format!(
            "scan grid exceeds the object extent: position ({:.2}, {:.2}) with a {}x{} probe in a {}x{} object",
            bad.y, bad.x, probe_shape.0, probe_shape.1, object_shape.0, object_shape.1
        )));
    }
    ScanGrid::new(positions)
}

/// Noiseless intensities when `photons_per_pattern` is unset. Otherwise the
/// whole stack is scaled so the mean total per pattern equals the requested
/// count and every pixel is Poisson-sampled; the applied intensity scale is
/// returned alongside.
pub fn simulate_dataset_scaled(
    object: &ObjectModel,
    probe: &ProbeModel,
    grid: &ScanGrid,
    photons_per_pattern: Option<f64>,
    seed: u64,
    execution: Execution,
) -> Result<(DiffractionDataset, f64)> {
    let clean = predict_dataset(object, probe, grid, execution)?;
    let Some(photons) = photons_per_pattern else {
        return Ok((clean, 1.0));
    };
    if !(photons > 0.0 && photons.is_finite()) {
        return Err(Error::invalid("photons_per_pattern must be positive"));
    }
    let mean_total = clean.patterns().sum() / clean.len().max(1) as f64;
    if !(mean_total > 0.0) {
        return Err(Error::invalid("simulated patterns carry no intensity"));
    }
    let scale = photons / mean_total;
    let frames: Vec<RealImage> = crate::par::map_range(clean.len(), execution, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        clean.pattern(i).mapv(|v| {
            let lambda = v * scale;
            if lambda > 0.0 {
                Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(lambda)
            } else {
                0.0
            }
        })
    });
    Ok((DiffractionDataset::from_patterns(&frames)?, scale))
}

pub fn simulate_dataset(
    object: &ObjectModel,
    probe: &ProbeModel,
    grid: &ScanGrid,
    photons_per_pattern: Option<f64>,
    seed: u64,
) -> Result<DiffractionDataset> {
    simulate_dataset_scaled(object, probe, grid, photons_per_pattern, seed, Execution::default()).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::overlap_ratio;

    fn pearson(a: &RealImage, b: &RealImage) -> f64 {
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn phantoms_are_seeded_and_in_range() {
        let spec = PhantomSpec::new(PhantomKind::TexturedSingleSlice, 64, 3);
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a, b);
        for v in a.slices()[0].phase().iter() {
            assert!((-0.5 - 1e-12..=1e-12).contains(v));
        }
        for v in a.slices()[0].magnitude().iter() {
            assert!(*v > 0.0 && *v <= 1.0 + 1e-12);
        }
        let other = make_phantom(&PhantomSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn cells_slice_is_uncorrelated_with_rods() {
        let spec = PhantomSpec::new(PhantomKind::CellsAndRodsTwoSlice, 128, 11);
        let obj = make_phantom(&spec).unwrap();
        assert_eq!(obj.n_slices(), 2);
        assert_eq!(obj.slice_spacings(), &[10_000.0]);
        let rods = rod_mask(128, spec.rod_period).mapv(|m| if m { 1.0 } else { 0.0 });
        let r = pearson(&obj.slices()[0].phase(), &rods);
        assert!(r.abs() < 0.05, "correlation {r}");
        let r2 = pearson(&obj.slices()[1].phase(), &rods);
        assert!(r2.abs() > 0.8, "rods slice should follow the mask, got {r2}");
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut spec = PhantomSpec::new(PhantomKind::TexturedSingleSlice, 32, 0);
        spec.phase_range = (0.5, -0.5);
        assert!(make_phantom(&spec).is_err());
        spec.phase_range = (-0.5, 0.0);
        spec.magnitude_range = (0.0, 1.0);
        assert!(make_phantom(&spec).is_err());
        let files = PhantomSpec::new(PhantomKind::FromFiles, 32, 0);
        assert!(make_phantom(&files).is_err());
    }

    #[test]
    fn from_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ndarray::Array3::from_shape_fn((2, 16, 16), |(s, y, x)| 0.01 * (s + y + x) as f64);
        let path = dir.path().join("phase.npy");
        npy::write_real3_f32(&path, &stack).unwrap();
        let mut spec = PhantomSpec::new(PhantomKind::FromFiles, 0, 0);
        spec.phase_path = Some(path);
        let obj = make_phantom(&spec).unwrap();
        assert_eq!(obj.n_slices(), 2);
        assert!((obj.slices()[1].phase()[[3, 4]] - 0.08).abs() < 1e-6);
    }

    #[test]
    fn probe_disk_has_requested_width() {
        let p = make_probe(50.0, 128, 1, 0.5, 0.0, 0.124, 10.0, 0).unwrap();
        let d = fwhm(&p.modes()[0].magnitude());
        assert!((d - 50.0).abs() < 5.0, "fwhm {d}");
    }

    #[test]
    fn probe_modes_orthogonal_with_decay() {
        let p = make_probe(20.0, 48, 4, 0.5, 500.0, 0.124, 10.0, 9).unwrap();
        let modes: Vec<_> = p.modes().iter().map(|m| m.as_array().clone()).collect();
        for i in 0..modes.len() {
            for j in 0..i {
                let c = inner(&modes[i], &modes[j]).norm() / (power(&modes[i]) * power(&modes[j])).sqrt();
                assert!(c < 1e-6, "modes {i},{j} overlap {c}");
            }
        }
        for k in 0..3 {
            let ratio = power(&modes[k + 1]) / power(&modes[k]);
            assert!((ratio - 0.5).abs() < 1e-6);
        }
        assert!(make_probe(48.0, 48, 1, 0.5, 0.0, 0.124, 10.0, 0).is_err());
    }

    #[test]
    fn magnification_behaviour() {
        let p = make_probe(50.0, 128, 2, 0.5, 0.0, 0.124, 10.0, 1).unwrap();
        let same = perturb_probe(&p, 1.0).unwrap();
        for (a, b) in same.modes().iter().zip(p.modes()) {
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                assert!((x - y).norm() < 1e-6);
            }
        }
        let big = perturb_probe(&p, 1.05).unwrap();
        let grown = fwhm(&big.modes()[0].magnitude()) - fwhm(&p.modes()[0].magnitude());
        assert!((grown - 2.5).abs() <= 1.0, "grew by {grown}");
        assert!((big.total_power() - p.total_power()).abs() / p.total_power() < 1e-3);

        let back = perturb_probe(&big, 1.0 / 1.05).unwrap();
        let a = back.modes()[0].as_array();
        let b = p.modes()[0].as_array();
        let rms = (a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / power(b)).sqrt();
        assert!(rms < 0.02, "round trip rms {rms}");
        assert!(perturb_probe(&p, 0.0).is_err());
    }

    #[test]
    fn rectangular_grid_at_eighteen_pixels() {
        let grid = make_scan_grid(&GridSpec::rectangular(18.0, 5, 5), (50, 50), (160, 160)).unwrap();
        assert_eq!(grid.len(), 25);
        for pair in grid.positions()[..5].windows(2) {
            assert_eq!(pair[1].x - pair[0].x, 18.0);
        }
        assert_eq!(overlap_ratio(18.0, 50.0).unwrap(), 0.64);
        let again = make_scan_grid(&GridSpec::rectangular(18.0, 5, 5), (50, 50), (160, 160)).unwrap();
        assert_eq!(grid, again);
        assert!(make_scan_grid(&GridSpec::rectangular(18.0, 9, 9), (50, 50), (160, 160)).is_err());
    }

    #[test]
    fn fermat_points_keep_their_distance() {
        let spec = GridSpec::fermat(10.0, 200);
        let grid = make_scan_grid(&spec, (32, 32), (256, 256)).unwrap();
        let p = grid.positions();
        for i in 0..p.len() {
            for j in 0..i {
                let d = ((p[i].y - p[j].y).powi(2) + (p[i].x - p[j].x).powi(2)).sqrt();
                assert!(d >= 5.0, "points {i},{j} only {d} apart");
            }
        }
    }

    #[test]
    fn jitter_is_seeded() {
        let mut spec = GridSpec::rectangular(10.0, 3, 3);
        spec.jitter = 1.5;
        spec.seed = 5;
        let a = make_scan_grid(&spec, (16, 16), (64, 64)).unwrap();
        let b = make_scan_grid(&spec, (16, 16), (64, 64)).unwrap();
        assert_eq!(a, b);
        assert!(a.positions().iter().any(|p| p.y.fract() != 0.0));
    }

    #[test]
    fn noiseless_and_poisson_datasets() {
        let obj = make_phantom(&PhantomSpec::new(PhantomKind::TexturedSingleSlice, 48, 1)).unwrap();
        let probe = make_probe(10.0, 16, 1, 0.5, 0.0, 0.124, 10.0, 0).unwrap();
        let grid = make_scan_grid(&GridSpec::rectangular(3.0, 11, 11), (16, 16), (48, 48)).unwrap();
        let a = simulate_dataset(&obj, &probe, &grid, None, 0).unwrap();
        let b = simulate_dataset(&obj, &probe, &grid, None, 0).unwrap();
        assert_eq!(a, b);
        assert!(crate::types::validate_problem(&obj, &probe, &grid, &a).is_ok());

        let noisy = simulate_dataset(&obj, &probe, &grid, Some(1e6), 7).unwrap();
        assert!(noisy.len() >= 100);
        let mean = noisy.patterns().sum() / noisy.len() as f64;
        assert!((mean / 1e6 - 1.0).abs() < 0.01, "mean total {mean}");
        assert!(noisy.patterns().iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
        let again = simulate_dataset(&obj, &probe, &grid, Some(1e6), 7).unwrap();
        assert_eq!(noisy, again);
    }
}
