//! ePIE / rPIE ptychographic iterator with minibatches, incoherent probe
//! modes and multislice objects, plus the proximal step that couples it to
//! the ADMM loop.
//!
//! Within a minibatch every position is evaluated against the same object and
//! probe. Per-position contributions are reduced in batch order, so the
//! result does not depend on how many threads did the work.

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::optics::{ifftshift, place_adjoint, ForwardModel};
use crate::par;
use crate::types::{
    validate_problem, Algorithm, ComplexImage, DiffractionDataset, Execution, ObjectModel, ProbeModel, RealImage,
    ScanGrid, SolverConfig, C64,
};

/// Relative guard below which predicted intensities are left unprojected.
pub const PROJECTION_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub object: ObjectModel,
    pub probe: ProbeModel,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
}

impl SolverState {
    pub fn new(object: ObjectModel, probe: ProbeModel) -> Self {
        SolverState {
            object,
            probe,
            iteration: 0,
            loss_history: Vec::new(),
        }
    }
}

/// Called after every completed iteration; may modify the state in place.
pub trait IterationHook {
    fn after_iteration(&mut self, completed: usize, total: usize, state: &mut SolverState) -> Result<()>;
}

fn ratio_with_guard(measured_amp: f64, predicted: f64, eps: f64) -> f64 {
    if predicted >= eps && predicted > 0.0 {
        measured_amp / predicted.sqrt()
    } else {
        1.0
    }
}

/// Replaces the summed far-field modulus of the given exit waves (one per
/// probe mode) with the measured one. The same ratio `√(Î / I_pred)` scales
/// every mode; pixels with `I_pred < 1e-12 · max(I_pred)` are left alone.
pub fn modulus_projection(exit_waves: &[ComplexImage], measured: ArrayView2<f64>) -> Result<Vec<ComplexImage>> {
    let first = exit_waves
        .first()
        .ok_or_else(|| Error::invalid("modulus projection needs at least one mode"))?;
    let shape = first.shape();
    check_shape("measured intensity", shape, measured.dim())?;
    for w in exit_waves {
        check_shape("exit wave", shape, w.shape())?;
    }
    if measured.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("measured intensity must be finite and >= 0"));
    }
    let fft = crate::optics::Fft2::cached(shape.0, shape.1);
    let n = fft.len() as f64;
    let mut spectra: Vec<Array2<C64>> = exit_waves
        .iter()
        .map(|w| {
            let mut s = w.as_array().clone();
            fft.forward(&mut s);
            s
        })
        .collect();
    let mut predicted = RealImage::zeros(shape);
    for s in &spectra {
        Zip::from(&mut predicted).and(s).for_each(|p, v| *p += v.norm_sqr() / n);
    }
    let amp = ifftshift(measured).mapv(f64::sqrt);
    let eps = PROJECTION_GUARD * predicted.iter().cloned().fold(0.0, f64::max);
    let ratio = Zip::from(&amp)
        .and(&predicted)
        .map_collect(|&a, &p| ratio_with_guard(a, p, eps));
    Ok(spectra
        .iter_mut()
        .map(|s| {
            Zip::from(&mut *s).and(&ratio).for_each(|v, &r| *v *= r / n);
            fft.inverse(s);
            ComplexImage::from_array_unchecked(std::mem::take(s))
        })
        .collect())
}

fn update_denominator(weight: f64, max_weight: f64, alpha: f64, algorithm: Algorithm) -> f64 {
    match algorithm {
        Algorithm::Epie => max_weight,
        Algorithm::Rpie => (1.0 - alpha) * weight + alpha * max_weight,
    }
}

fn pie_update(
    target: &ComplexImage,
    illumination: &ComplexImage,
    psi: &ComplexImage,
    psi_prime: &ComplexImage,
    alpha: f64,
    algorithm: Algorithm,
) -> Result<ComplexImage> {
    let shape = target.shape();
    for (what, img) in [("illumination", illumination), ("psi", psi), ("psi_prime", psi_prime)] {
        check_shape(what, shape, img.shape())?;
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let weight = illumination.intensity();
    let max_w = weight.iter().cloned().fold(0.0, f64::max);
    if max_w <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let mut out = target.as_array().clone();
    Zip::from(&mut out)
        .and(illumination.as_array())
        .and(&weight)
        .and(psi.as_array())
        .and(psi_prime.as_array())
        .for_each(|o, p, &w, a, b| {
            *o += p.conj() * (b - a) / update_denominator(w, max_w, alpha, algorithm);
        });
    ComplexImage::new(out)
}

/// Single-position object update `o + conj(p)(ψ′ − ψ)/D`, where `D` is
/// `max|p|²` for ePIE and `(1−α)|p|² + α·max|p|²` for rPIE.
pub fn pie_object_update(
    patch: &ComplexImage,
    probe_mode: &ComplexImage,
    psi: &ComplexImage,
    psi_prime: &ComplexImage,
    alpha: f64,
    algorithm: Algorithm,
) -> Result<ComplexImage> {
    pie_update(patch, probe_mode, psi, psi_prime, alpha, algorithm)
}

/// Probe counterpart of [`pie_object_update`], weighted by `|o|²`.
pub fn pie_probe_update(
    probe_mode: &ComplexImage,
    patch: &ComplexImage,
    psi: &ComplexImage,
    psi_prime: &ComplexImage,
    alpha: f64,
    algorithm: Algorithm,
) -> Result<ComplexImage> {
    pie_update(probe_mode, patch, psi, psi_prime, alpha, algorithm)
}

/// Elementwise `o − τ(o − v + u)`.
pub fn proximal_step(object: &ObjectModel, v: &ObjectModel, u: &ObjectModel, tau: f64) -> Result<ObjectModel> {
    if !object.same_shape(v) || !object.same_shape(u) {
        return Err(Error::ShapeMismatch {
            what: "proximal step operands",
            expected: vec![object.n_slices(), object.shape().0, object.shape().1],
            actual: vec![v.n_slices().max(u.n_slices()), v.shape().0, v.shape().1],
        });
    }
    let slices = object
        .slices()
        .iter()
        .zip(v.slices())
        .zip(u.slices())
        .map(|((o, v), u)| {
            let out = Zip::from(o.as_array())
                .and(v.as_array())
                .and(u.as_array())
                .map_collect(|&o, &v, &u| o - (o - v + u) * tau);
            ComplexImage::new(out)
        })
        .collect::<Result<Vec<_>>>()?;
    object.with_slices(slices)
}

/// Mean over every shot and pixel of `(√Î − √I_pred)²`.
pub fn magnitude_mse(data: &DiffractionDataset, predicted: &DiffractionDataset) -> Result<f64> {
    if data.patterns().shape() != predicted.patterns().shape() {
        return Err(Error::ShapeMismatch {
            what: "diffraction stacks",
            expected: data.patterns().shape().to_vec(),
            actual: predicted.patterns().shape().to_vec(),
        });
    }
    let n = data.patterns().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = data
        .patterns()
        .iter()
        .zip(predicted.patterns())
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Far-field intensities predicted at every scan position, in position order.
pub fn predict_dataset(
    object: &ObjectModel,
    probe: &ProbeModel,
    grid: &ScanGrid,
    execution: Execution,
) -> Result<DiffractionDataset> {
    let model = ForwardModel::new(object, probe)?;
    let patterns = par::map_slice(grid.positions(), execution, |&pos| {
        crate::optics::predict_with(&model, object, probe, pos)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    DiffractionDataset::from_patterns(&patterns)
}

/// Everything one position contributes to a minibatch update.
struct PositionContribution {
    /// Per slice: Σ_m conj(incident) · Δχ, patch-sized.
    object_step: Vec<Array2<C64>>,
    /// Per slice: Σ_m |incident|².
    object_weight: Vec<Array2<f64>>,
    /// Per mode: conj(o₁) · Δχ₁.
    probe_step: Vec<Array2<C64>>,
    /// |o₁|².
    probe_weight: Array2<f64>,
    loss_sum: f64,
}

/// Reusable reconstruction context: forward model plus measured amplitudes
/// pre-arranged in raw FFT layout.
pub struct Solver<'a> {
    model: ForwardModel,
    grid: &'a ScanGrid,
    amplitudes: Vec<Array2<f64>>,
    config: SolverConfig,
}

impl<'a> Solver<'a> {
    pub fn new(
        object: &ObjectModel,
        probe: &ProbeModel,
        grid: &'a ScanGrid,
        data: &DiffractionDataset,
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        validate_problem(object, probe, grid, data).into_result()?;
        let amplitudes = (0..data.len())
            .map(|i| ifftshift(data.pattern(i)).mapv(f64::sqrt))
            .collect();
        Ok(Solver {
            model: ForwardModel::new(object, probe)?,
            grid,
            amplitudes,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn shuffled_order(&self, iteration: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        rng.set_stream(iteration as u64);
        let mut order: Vec<usize> = (0..self.grid.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn contribution(&self, state: &SolverState, index: usize, update_probe: bool) -> Result<PositionContribution> {
        let pos = self.grid.positions()[index];
        let model = &self.model;
        let fft = model.fft();
        let n = fft.len() as f64;
        let patches = model.patches(&state.object, pos)?;
        let n_slices = patches.len();
        let execution = self.config.execution;
        let modes = state.probe.modes();

        let forward = par::map_slice(modes, execution, |mode| {
            let waves = model.propagate_through(&patches, mode.view());
            let mut spectrum = waves.exit().clone();
            fft.forward(&mut spectrum);
            (waves, spectrum)
        });

        let mut predicted = RealImage::zeros(model.window());
        for (_, s) in &forward {
            Zip::from(&mut predicted).and(s).for_each(|p, v| *p += v.norm_sqr() / n);
        }
        let amp = &self.amplitudes[index];
        let loss_sum: f64 = Zip::from(amp)
            .and(&predicted)
            .fold(0.0, |acc, &a, &p| acc + (a - p.sqrt()).powi(2));
        let eps = PROJECTION_GUARD * predicted.iter().cloned().fold(0.0, f64::max);
        let ratio = Zip::from(amp)
            .and(&predicted)
            .map_collect(|&a, &p| ratio_with_guard(a, p, eps));

        // |o_j|² per slice and the matching step denominators for wave updates.
        let slice_weights: Vec<Array2<f64>> = patches.iter().map(|p| p.mapv(|v| v.norm_sqr())).collect();
        let slice_max: Vec<f64> = slice_weights
            .iter()
            .map(|w| w.iter().cloned().fold(0.0, f64::max))
            .collect();
        let alpha_p = self.config.alpha_probe;
        let algorithm = self.config.algorithm;

        let per_mode = par::map_range(forward.len(), execution, |m| {
            let (waves, spectrum) = &forward[m];
            let mut projected = spectrum.clone();
            Zip::from(&mut projected).and(&ratio).for_each(|v, &r| *v *= r / n);
            fft.inverse(&mut projected);
            let mut delta = projected - waves.exit();

            let mut object_step = vec![Array2::<C64>::zeros((0, 0)); n_slices];
            let mut probe_step = None;
            for j in (0..n_slices).rev() {
                let incident = &waves.incident[j];
                object_step[j] = Zip::from(incident).and(&delta).map_collect(|a, d| a.conj() * d);
                if j == 0 && !update_probe {
                    break;
                }
                if j == 0 {
                    probe_step = Some(Zip::from(&patches[0]).and(&delta).map_collect(|o, d| o.conj() * d));
                    break;
                }
                // Change of the wave arriving at slice j, carried back to slice j-1.
                let max_w = slice_max[j];
                let mut wave_change = if max_w > 0.0 {
                    Zip::from(&patches[j])
                        .and(&slice_weights[j])
                        .and(&delta)
                        .map_collect(|o, &w, d| o.conj() * d / update_denominator(w, max_w, alpha_p, algorithm))
                } else {
                    Array2::zeros(delta.dim())
                };
                model.back_propagate(j - 1, &mut wave_change);
                delta = wave_change;
            }
            let weights: Vec<Array2<f64>> = waves.incident.iter().map(|w| w.mapv(|v| v.norm_sqr())).collect();
            (object_step, weights, probe_step)
        });

        let mut object_step: Vec<Array2<C64>> = vec![Array2::zeros(model.window()); n_slices];
        let mut object_weight: Vec<Array2<f64>> = vec![Array2::zeros(model.window()); n_slices];
        let mut probe_step = Vec::with_capacity(per_mode.len());
        for (steps, weights, pstep) in per_mode {
            for j in 0..n_slices {
                object_step[j] += &steps[j];
                object_weight[j] += &weights[j];
            }
            if let Some(p) = pstep {
                probe_step.push(p);
            }
        }
        Ok(PositionContribution {
            object_step,
            object_weight,
            probe_step,
            probe_weight: slice_weights.into_iter().next().expect("at least one slice"),
            loss_sum,
        })
    }

    fn apply_batch(&self, state: &mut SolverState, batch: &[usize], update_probe: bool) -> Result<f64> {
        let contributions = par::map_slice(batch, self.config.execution, |&i| {
            self.contribution(state, i, update_probe)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let object_shape = state.object.shape();
        let n_slices = state.object.n_slices();
        let mut numerators = vec![Array2::<C64>::zeros(object_shape); n_slices];
        let mut weights = vec![Array2::<f64>::zeros(object_shape); n_slices];
        let n_modes = state.probe.n_modes();
        let mut probe_num = vec![Array2::<C64>::zeros(self.model.window()); n_modes];
        let mut probe_w = Array2::<f64>::zeros(self.model.window());
        let mut loss = 0.0;
        for (c, &i) in contributions.iter().zip(batch) {
            let pos = self.grid.positions()[i];
            for j in 0..n_slices {
                place_adjoint(&mut numerators[j], c.object_step[j].view(), pos)?;
                place_adjoint(&mut weights[j], c.object_weight[j].view(), pos)?;
            }
            if update_probe {
                for (acc, s) in probe_num.iter_mut().zip(&c.probe_step) {
                    *acc += s;
                }
                probe_w += &c.probe_weight;
            }
            loss += c.loss_sum;
        }

        let algorithm = self.config.algorithm;
        let alpha_o = self.config.alpha_object;
        for ((slice, num), w) in state.object.slices_mut().iter_mut().zip(&numerators).zip(&weights) {
            let max_w = w.iter().cloned().fold(0.0, f64::max);
            if max_w <= 0.0 {
                continue;
            }
            Zip::from(slice.array_mut()).and(num).and(w).for_each(|o, n, &w| {
                *o += n / update_denominator(w, max_w, alpha_o, algorithm);
            });
        }
        if update_probe {
            let alpha_p = self.config.alpha_probe;
            let max_w = probe_w.iter().cloned().fold(0.0, f64::max);
            if max_w > 0.0 {
                for (mode, num) in state.probe.modes_mut().iter_mut().zip(&probe_num) {
                    Zip::from(mode.array_mut()).and(num).and(&probe_w).for_each(|p, n, &w| {
                        *p += n / update_denominator(w, max_w, alpha_p, algorithm);
                    });
                }
            }
        }
        Ok(loss)
    }

    /// One epoch over every scan position in seeded random order.
    pub fn iterate(&self, state: &mut SolverState) -> Result<()> {
        let order = self.shuffled_order(state.iteration);
        let update_probe = self.config.update_probe && state.iteration >= self.config.probe_update_start;
        let mut loss = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            loss += self.apply_batch(state, batch, update_probe)?;
        }
        let (h, w) = self.model.window();
        let mean = loss / (self.grid.len() * h * w).max(1) as f64;
        if !mean.is_finite()
            || !state
                .object
                .slices()
                .iter()
                .all(|s| s.as_array().iter().all(|v| v.re.is_finite() && v.im.is_finite()))
        {
            return Err(Error::NonFinite("reconstruction diverged"));
        }
        state.iteration += 1;
        state.loss_history.push(mean);
        Ok(())
    }

    /// Runs `n` epochs, calling `hook` after each.
    pub fn run(&self, state: &mut SolverState, n: usize, mut hook: Option<&mut dyn IterationHook>) -> Result<()> {
        for k in 0..n {
            self.iterate(state)?;
            if let Some(h) = hook.as_deref_mut() {
                h.after_iteration(k + 1, n, state)?;
            }
        }
        Ok(())
    }
}

/// One full epoch of the configured PIE variant.
pub fn solver_iteration(
    state: &SolverState,
    grid: &ScanGrid,
    data: &DiffractionDataset,
    config: &SolverConfig,
) -> Result<SolverState> {
    let solver = Solver::new(&state.object, &state.probe, grid, data, config)?;
    let mut next = state.clone();
    solver.iterate(&mut next)?;
    Ok(next)
}

/// Vanilla reconstruction: `config.n_iterations` epochs from the given start.
pub fn reconstruct(
    object: ObjectModel,
    probe: ProbeModel,
    grid: &ScanGrid,
    data: &DiffractionDataset,
    config: &SolverConfig,
    hook: Option<&mut dyn IterationHook>,
) -> Result<SolverState> {
    let solver = Solver::new(&object, &probe, grid, data, config)?;
    let mut state = SolverState::new(object, probe);
    solver.run(&mut state, config.n_iterations, hook)?;
    Ok(state)
}
