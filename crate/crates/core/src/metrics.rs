//! Reconstruction quality and artifact diagnostics: phase PSNR, magnitude
//! error, and spectral grid and crosstalk scores.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::editors::harmonic_bins;
use crate::error::{check_shape, Error, Result};
use crate::optics::far_field;
use crate::simulation::gaussian_blur;
use crate::types::{ComplexImage, ObjectModel, RealImage, C64};

/// PSNR reported for reconstructions identical to the truth.
pub const PSNR_CAP_DB: f64 = 200.0;

/// Least-squares fit of `a + b·y + c·x`, evaluated on the grid.
fn fit_plane(image: &RealImage) -> RealImage {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Centered coordinates make the normal equations diagonal.
    let (mut syy, mut sxx, mut sy, mut sx, mut s0) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((r, c), v) in image.indexed_iter() {
        let (y, x) = (r as f64 - cy, c as f64 - cx);
        syy += y * y;
        sxx += x * x;
        sy += y * v;
        sx += x * v;
        s0 += v;
    }
    let a = s0 / image.len() as f64;
    let b = if syy > 0.0 { sy / syy } else { 0.0 };
    let c = if sxx > 0.0 { sx / sxx } else { 0.0 };
    RealImage::from_shape_fn((h, w), |(r, col)| a + b * (r as f64 - cy) + c * (col as f64 - cx))
}

/// Phase PSNR after removing the mean phase difference (and optionally a
/// linear ramp). The peak is the truth's value range; capped at 200 dB.
pub fn psnr_phase(recon: &RealImage, truth: &RealImage, remove_ramp: bool) -> Result<f64> {
    check_shape("psnr images", truth.dim(), recon.dim())?;
    let max = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return Err(Error::ZeroVariance("psnr truth"));
    }
    let diff = recon - truth;
    let offset = if remove_ramp {
        fit_plane(&diff)
    } else {
        RealImage::from_elem(diff.dim(), diff.mean().unwrap_or(0.0))
    };
    let mse = (&diff - &offset).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

/// Multiplies `recon` by the unit phasor that best aligns it with `truth`,
/// removing the global phase gauge before phases are compared.
pub fn align_global_phase(recon: &ComplexImage, truth: &ComplexImage) -> Result<ComplexImage> {
    check_shape("aligned images", truth.shape(), recon.shape())?;
    let corr: C64 = recon
        .as_array()
        .iter()
        .zip(truth.as_array())
        .map(|(r, t)| t * r.conj())
        .sum();
    if corr.norm() == 0.0 {
        return Ok(recon.clone());
    }
    Ok(recon.scaled(corr / corr.norm()))
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Centered power spectrum of the mean-removed, Hann-windowed image.
pub fn power_spectrum(image: &RealImage) -> Result<RealImage> {
    let (h, w) = image.dim();
    let mean = image.mean().unwrap_or(0.0);
    let (wy, wx) = (hann(h), hann(w));
    let windowed = Array2::from_shape_fn((h, w), |(r, c)| C64::new((image[[r, c]] - mean) * wy[r] * wx[c], 0.0));
    Ok(far_field(&ComplexImage::new(windowed)?)?.intensity())
}

/// `log10(1 + |F|²)` of the mean-removed, windowed image, for visual grid
/// diagnosis.
pub fn log_spectrum(image: &RealImage) -> Result<RealImage> {
    Ok(power_spectrum(image)?.mapv(|p| (1.0 + p).log10()))
}

/// Spectral peak-to-background ratio at the grid harmonics. Each harmonic
/// contributes the mean power of its 3×3 window over the background of an
/// annulus at the same radius (harmonic windows excluded), estimated as the
/// annulus median divided by ln 2 so exponentially distributed noise power
/// scores 1. The score is the mean over harmonics whose annulus is non-empty.
pub fn grid_artifact_score(phase: &RealImage, period_y: f64, period_x: f64) -> Result<f64> {
    if period_y < 2.0 || period_x < 2.0 {
        return Err(Error::invalid("grid periods must be >= 2 px"));
    }
    let (h, w) = phase.dim();
    let spectrum = power_spectrum(phase)?;
    let bins = harmonic_bins((h, w), period_y, period_x);
    if bins.is_empty() {
        return Err(Error::invalid("no grid harmonic fits in the image"));
    }
    let (cy, cx) = ((h / 2) as isize, (w / 2) as isize);
    let wrap = |y: isize, x: isize| (y.rem_euclid(h as isize) as usize, x.rem_euclid(w as isize) as usize);
    let mut excluded = Array2::from_elem((h, w), false);
    for &(by, bx) in &bins {
        for dy in -1..=1 {
            for dx in -1..=1 {
                excluded[wrap(cy + by + dy, cx + bx + dx)] = true;
            }
        }
    }
    let radius = |y: f64, x: f64| ((y / h as f64).powi(2) + (x / w as f64).powi(2)).sqrt();
    let ring = 1.0 / h.min(w) as f64;
    let mut ratios = Vec::with_capacity(bins.len());
    for &(by, bx) in &bins {
        let mut peak = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                peak += spectrum[wrap(cy + by + dy, cx + bx + dx)];
            }
        }
        peak /= 9.0;
        let r0 = radius(by as f64, bx as f64);
        let mut annulus: Vec<f64> = spectrum
            .indexed_iter()
            .filter(|&((r, c), _)| {
                !excluded[[r, c]] && (radius(r as f64 - cy as f64, c as f64 - cx as f64) - r0).abs() <= ring
            })
            .map(|(_, &p)| p)
            .collect();
        if annulus.is_empty() {
            continue;
        }
        let floor = median(&mut annulus) / std::f64::consts::LN_2;
        ratios.push(match (peak > 0.0, floor > 0.0) {
            (false, _) => 0.0,
            (true, true) => peak / floor,
            (true, false) => f64::MAX.sqrt(),
        });
    }
    if ratios.is_empty() {
        return Err(Error::invalid("no grid harmonic has a background annulus"));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn pearson(a: &RealImage, b: &RealImage, what: &'static str) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tiny = 1e-24 * n * scale * scale;
    if saa <= tiny {
        return Err(Error::ZeroVariance(what));
    }
    if sbb <= tiny {
        return Err(Error::ZeroVariance("reference slice"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between a slice's residual and another slice's true
/// phase. The residual is `recon − own_truth`, or a high-pass of `recon`
/// (minus a σ = 4 px blur) when no truth is given.
pub fn crosstalk_score(recon: &RealImage, own_truth: Option<&RealImage>, other_truth: &RealImage) -> Result<f64> {
    check_shape("crosstalk images", other_truth.dim(), recon.dim())?;
    let residual = match own_truth {
        Some(t) => {
            check_shape("crosstalk truth", recon.dim(), t.dim())?;
            recon - t
        }
        None => recon - &gaussian_blur(recon, 4.0),
    };
    pearson(&residual, other_truth, "crosstalk residual")
}

/// Rectangular region of interest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn crop<T: Clone>(&self, image: &Array2<T>) -> Result<Array2<T>> {
        let (h, w) = image.dim();
        if self.height == 0 || self.width == 0 || self.y + self.height > h || self.x + self.width > w {
            return Err(Error::invalid(format!(
                "roi {}x{} at ({}, {}) does not fit a {h}x{w} image",
                self.height, self.width, self.y, self.x
            )));
        }
        Ok(image
            .slice(s![self.y..self.y + self.height, self.x..self.x + self.width])
            .to_owned())
    }

    /// Region covered by every probe window with a margin trimmed on all
    /// sides.
    pub fn scanned(positions: &[crate::types::Position], probe_shape: (usize, usize), margin: usize) -> Option<Roi> {
        let y0 = positions.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil() as usize + margin;
        let x0 = positions.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil() as usize + margin;
        let y1 = positions.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).floor() as usize + probe_shape.0;
        let x1 = positions.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).floor() as usize + probe_shape.1;
        let (y1, x1) = (y1.checked_sub(margin)?, x1.checked_sub(margin)?);
        (y1 > y0 && x1 > x0).then(|| Roi {
            y: y0,
            x: x0,
            height: y1 - y0,
            width: x1 - x0,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default)]
    pub remove_ramp: bool,
    #[serde(default)]
    pub grid_period_y: Option<f64>,
    #[serde(default)]
    pub grid_period_x: Option<f64>,
    #[serde(default)]
    pub roi: Option<Roi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkEntry {
    pub slice: usize,
    pub other: usize,
    pub score: f64,
    /// Set when the score could not be computed (reported as 0).
    pub flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Vec<f64>,
    pub magnitude_mse: Option<f64>,
    /// Grid score of the first slice's phase.
    pub grid_score: Option<f64>,
    pub crosstalk_score: Vec<CrosstalkEntry>,
    pub alignment_applied: String,
}

/// Compares a reconstruction with its ground truth slice by slice.
pub fn evaluate(
    recon: &ObjectModel,
    truth: &ObjectModel,
    options: &MetricOptions,
    magnitude_mse: Option<f64>,
) -> Result<MetricReport> {
    if !recon.same_shape(truth) {
        return Err(Error::ShapeMismatch {
            what: "reconstruction vs truth",
            expected: vec![truth.n_slices(), truth.shape().0, truth.shape().1],
            actual: vec![recon.n_slices(), recon.shape().0, recon.shape().1],
        });
    }
    let crop = |img: &ComplexImage| -> Result<ComplexImage> {
        match &options.roi {
            Some(roi) => ComplexImage::new(roi.crop(img.as_array())?),
            None => Ok(img.clone()),
        }
    };
    let mut rec_phase = Vec::new();
    let mut true_phase = Vec::new();
    for (r, t) in recon.slices().iter().zip(truth.slices()) {
        let (r, t) = (crop(r)?, crop(t)?);
        rec_phase.push(align_global_phase(&r, &t)?.phase());
        true_phase.push(t.phase());
    }
    let psnr_db = rec_phase
        .iter()
        .zip(&true_phase)
        .map(|(r, t)| psnr_phase(r, t, options.remove_ramp))
        .collect::<Result<Vec<_>>>()?;
    let grid_score = match (options.grid_period_y, options.grid_period_x) {
        (Some(py), Some(px)) => Some(grid_artifact_score(&rec_phase[0], py, px)?),
        _ => None,
    };
    let mut crosstalk = Vec::new();
    for i in 0..rec_phase.len() {
        for j in 0..rec_phase.len() {
            if i == j {
                continue;
            }
            let (score, flag) = match crosstalk_score(&rec_phase[i], Some(&true_phase[i]), &true_phase[j]) {
                Ok(s) => (s, None),
                Err(e) => (0.0, Some(e.to_string())),
            };
            crosstalk.push(CrosstalkEntry {
                slice: i,
                other: j,
                score,
                flag,
            });
        }
    }
    let mut alignment = "global phase offset removed".to_string();
    if options.remove_ramp {
        alignment.push_str("; linear phase ramp removed");
    }
    if let Some(roi) = &options.roi {
        alignment.push_str(&format!(
            "; cropped to {}x{} at ({}, {})",
            roi.height, roi.width, roi.y, roi.x
        ));
    }
    Ok(MetricReport {
        psnr_db,
        magnitude_mse,
        grid_score,
        crosstalk_score: crosstalk,
        alignment_applied: alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::spectral_notch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(h: usize, w: usize, sigma: f64, seed: u64) -> RealImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        RealImage::from_shape_fn((h, w), |_| d.sample(&mut rng))
    }

    #[test]
    fn psnr_cases() {
        let truth = noise(16, 16, 1.0, 1);
        assert_eq!(psnr_phase(&truth, &truth, false).unwrap(), PSNR_CAP_DB);
        assert_eq!(
            psnr_phase(&truth.mapv(|v| v + 0.3), &truth, false).unwrap(),
            PSNR_CAP_DB
        );

        let mut t = RealImage::zeros((10, 10));
        t[[0, 0]] = 1.0;
        // ±a checkerboard gives zero-mean error with MSE a².
        let a = 1e-3f64.sqrt();
        let r = &t + &RealImage::from_shape_fn((10, 10), |(y, x)| if (y + x) % 2 == 0 { a } else { -a });
        assert!((psnr_phase(&r, &t, false).unwrap() - 30.0).abs() < 1e-9);

        assert!(psnr_phase(&truth, &RealImage::zeros((16, 16)), false).is_err());
        assert!(psnr_phase(&truth, &RealImage::zeros((4, 4)), false).is_err());
    }

    #[test]
    fn psnr_drops_with_noise() {
        let truth = noise(32, 32, 1.0, 2);
        let mut last = f64::INFINITY;
        for (k, sigma) in [1e-3, 1e-2, 1e-1].into_iter().enumerate() {
            let p = psnr_phase(&(&truth + &noise(32, 32, sigma, 10 + k as u64)), &truth, false).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ramp_removal_is_optional() {
        let truth = noise(20, 20, 1.0, 3);
        let ramp = RealImage::from_shape_fn((20, 20), |(y, x)| 0.01 * y as f64 - 0.02 * x as f64 + 0.4);
        let r = &truth + &ramp;
        assert!(psnr_phase(&r, &truth, false).unwrap() < 60.0);
        assert!(psnr_phase(&r, &truth, true).unwrap() > 150.0);
    }

    #[test]
    fn global_phase_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..64)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let t = ComplexImage::from_vec(8, 8, data).unwrap();
        let r = t.scaled(C64::from_polar(2.0, 2.5));
        let aligned = align_global_phase(&r, &t).unwrap();
        for (a, b) in aligned.as_array().iter().zip(t.as_array()) {
            assert!((a - b * 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn grid_score_corridors() {
        for seed in 0..5 {
            let s = grid_artifact_score(&noise(64, 64, 1.0, seed), 8.0, 8.0).unwrap();
            assert!((0.7..=1.5).contains(&s), "white noise score {s}");
        }
        let base = noise(64, 64, 1.0, 7);
        let wave = RealImage::from_shape_fn((64, 64), |(y, _)| 10.0 * (2.0 * PI * y as f64 / 8.0).cos());
        let dirty = &base + &wave;
        let s = grid_artifact_score(&dirty, 8.0, 8.0).unwrap();
        assert!(s > 10.0, "score {s}");
        let cleaned = spectral_notch(&dirty, 8.0, 8.0, 5).unwrap();
        assert!(grid_artifact_score(&cleaned, 8.0, 8.0).unwrap() < s);
        assert!(grid_artifact_score(&base, 1.0, 8.0).is_err());
    }

    #[test]
    fn crosstalk_cases() {
        let own = noise(32, 32, 1.0, 20);
        let other = gaussian_blur(&noise(32, 32, 1.0, 21), 1.0);
        assert!(matches!(
            crosstalk_score(&own, Some(&own), &other),
            Err(Error::ZeroVariance(_))
        ));
        let mixed = &own + &other.mapv(|v| 0.5 * v);
        assert!(crosstalk_score(&mixed, Some(&own), &other).unwrap() > 0.9);
        let noisy = &own + &noise(32, 32, 0.3, 22);
        assert!(crosstalk_score(&noisy, Some(&own), &other).unwrap().abs() < 0.1);
        assert!(crosstalk_score(&mixed, None, &other).unwrap().is_finite());
    }

    #[test]
    fn report_flags_zero_variance_crosstalk() {
        let a = ComplexImage::from_polar(RealImage::ones((16, 16)).view(), noise(16, 16, 0.3, 30).view()).unwrap();
        let b = ComplexImage::from_polar(RealImage::ones((16, 16)).view(), noise(16, 16, 0.3, 31).view()).unwrap();
        let obj = ObjectModel::new(vec![a, b], 10.0, vec![100.0]).unwrap();
        let opts = MetricOptions {
            grid_period_y: Some(4.0),
            grid_period_x: Some(4.0),
            ..Default::default()
        };
        let report = evaluate(&obj, &obj, &opts, Some(0.0)).unwrap();
        assert_eq!(report.psnr_db, vec![PSNR_CAP_DB; 2]);
        assert_eq!(report.crosstalk_score.len(), 2);
        assert!(report
            .crosstalk_score
            .iter()
            .all(|c| c.score == 0.0 && c.flag.is_some()));
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("psnr_db").is_some() && json.get("grid_score").is_some());
    }

    #[test]
    fn scanned_roi() {
        let pos = [
            crate::types::Position::new(2.0, 3.0),
            crate::types::Position::new(20.0, 30.0),
        ];
        let roi = Roi::scanned(&pos, (10, 10), 1).unwrap();
        assert_eq!(
            roi,
            Roi {
                y: 3,
                x: 4,
                height: 26,
                width: 35
            }
        );
    }
}
