//! Plug-and-Play ADMM: the ptychographic solver enforces data fidelity on
//! `o`, an editor supplies the auxiliary estimate `v` from the phase of
//! `o + u`, and the scaled dual `u` accumulates their disagreement.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::editors::Editor;
use crate::error::{check_shape, Error, Result};
use crate::solver::{proximal_step, Solver, SolverState};
use crate::types::{
    AdmmState, ComplexImage, DiffractionDataset, EditRequest, ObjectModel, PnpConfig, ProbeModel, RealImage, ScanGrid,
    SolverConfig,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PnpResult {
    pub final_object: ObjectModel,
    pub final_probe: ProbeModel,
    /// Solver loss at the end of each outer epoch.
    pub per_epoch_loss: Vec<f64>,
    /// `‖o − v‖` after each epoch's relaxation.
    pub consensus_history: Vec<f64>,
    pub per_epoch_snapshots: Option<Vec<ObjectModel>>,
    /// Per solver iteration.
    pub loss_history: Vec<f64>,
    pub warnings: Vec<String>,
    pub config_echo: PnpConfig,
}

/// Elementwise `u + o − v`.
pub fn dual_update(u: &ObjectModel, o: &ObjectModel, v: &ObjectModel) -> Result<ObjectModel> {
    combine(u, o, v, |u, o, v| u + o - v)
}

fn combine(
    a: &ObjectModel,
    b: &ObjectModel,
    c: &ObjectModel,
    f: impl Fn(crate::types::C64, crate::types::C64, crate::types::C64) -> crate::types::C64 + Copy,
) -> Result<ObjectModel> {
    if !a.same_shape(b) || !a.same_shape(c) {
        return Err(Error::ShapeMismatch {
            what: "ADMM operands",
            expected: vec![a.n_slices(), a.shape().0, a.shape().1],
            actual: vec![b.n_slices().max(c.n_slices()), b.shape().0, b.shape().1],
        });
    }
    let slices = a
        .slices()
        .iter()
        .zip(b.slices())
        .zip(c.slices())
        .map(|((a, b), c)| {
            ComplexImage::new(
                Zip::from(a.as_array())
                    .and(b.as_array())
                    .and(c.as_array())
                    .map_collect(|&a, &b, &c| f(a, b, c)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    a.with_slices(slices)
}

fn relax(v_prime: &ObjectModel, o: &ObjectModel, gamma: f64) -> Result<ObjectModel> {
    combine(v_prime, o, o, move |vp, o, _| vp * gamma + o * (1.0 - gamma))
}

/// Frobenius distance over every slice.
pub fn consensus_distance(a: &ObjectModel, b: &ObjectModel) -> f64 {
    a.slices()
        .iter()
        .zip(b.slices())
        .map(|(x, y)| {
            x.as_array()
                .iter()
                .zip(y.as_array())
                .map(|(p, q)| (p - q).norm_sqr())
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `post` affinely so its mean and standard deviation over the
/// pixels where `|post − pre| < threshold` equal those of `pre`.
pub fn statistics_match(pre: &RealImage, post: &RealImage, threshold: f64) -> Result<RealImage> {
    check_shape("statistics match", pre.dim(), post.dim())?;
    let mask: Vec<bool> = pre.iter().zip(post).map(|(a, b)| (b - a).abs() < threshold).collect();
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask { threshold });
    }
    let stats = |img: &RealImage| {
        let vals: Vec<f64> = img.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    let (m_pre, s_pre) = stats(pre);
    let (m_post, s_post) = stats(post);
    if !(s_post > 1e-12 * m_post.abs().max(1.0)) {
        return Err(Error::ZeroVariance("post-edit image within the statistics mask"));
    }
    let a = s_pre / s_post;
    let b = m_pre - a * m_post;
    Ok(post.mapv(|v| a * v + b))
}

/// Phase range handed to the editor: the request's bounds, or the image's own
/// extent when both are unset.
fn display_range(phase: &RealImage, request: &EditRequest) -> (f64, f64) {
    match (request.value_min, request.value_max) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => {
            let lo = phase.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = phase.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo, lo + 1.0)
            }
        }
    }
}

/// Edits the phase of one slice: map to `[0, 1]`, run the editor, optionally
/// match statistics (in display units), map back, and pair the result with
/// the slice's mean magnitude.
pub fn phase_only_edit_slice(
    slice: &ComplexImage,
    editor: &mut dyn Editor,
    request: &EditRequest,
    stats_threshold: Option<f64>,
) -> Result<ComplexImage> {
    let phase = slice.phase();
    let (lo, hi) = display_range(&phase, request);
    let span = hi - lo;
    let display = phase.mapv(|p| (p - lo) / span);
    let mut edited = editor.edit(&display, request)?;
    if edited.dim() != display.dim() {
        return Err(crate::editors::EditorError::ShapeMismatch {
            expected: display.dim(),
            actual: edited.dim(),
        }
        .into());
    }
    if edited.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("editor output"));
    }
    if let Some(threshold) = stats_threshold {
        edited = statistics_match(&display, &edited, threshold)?;
    }
    let new_phase = edited.mapv(|d| lo + d * span);
    let magnitude = slice.magnitude().mean().unwrap_or(0.0);
    ComplexImage::from_polar(RealImage::from_elem(phase.dim(), magnitude).view(), new_phase.view())
}

/// [`phase_only_edit_slice`] over a stack with one shared editor.
pub fn phase_only_edit(
    stack: &[ComplexImage],
    editor: &mut dyn Editor,
    request: &EditRequest,
) -> Result<Vec<ComplexImage>> {
    stack
        .iter()
        .map(|s| phase_only_edit_slice(s, editor, request, None))
        .collect()
}

/// Builds one editor per slice from the configuration.
pub fn build_editors(config: &PnpConfig, n_slices: usize) -> Result<Vec<Box<dyn Editor>>> {
    (0..n_slices).map(|j| config.editor_for_slice(j).build()).collect()
}

/// Runs the plug-and-play loop with editors built from `config`.
pub fn run_pnp(
    config: &PnpConfig,
    solver_config: &SolverConfig,
    grid: &ScanGrid,
    data: &DiffractionDataset,
    init_object: ObjectModel,
    init_probe: ProbeModel,
) -> Result<PnpResult> {
    config.validate()?;
    let mut editors = build_editors(config, init_object.n_slices())?;
    run_pnp_with_editors(config, solver_config, grid, data, init_object, init_probe, &mut editors)
}

/// Runs the plug-and-play loop with caller-supplied editors: either one
/// shared by every slice or one per slice.
pub fn run_pnp_with_editors(
    config: &PnpConfig,
    solver_config: &SolverConfig,
    grid: &ScanGrid,
    data: &DiffractionDataset,
    init_object: ObjectModel,
    init_probe: ProbeModel,
    editors: &mut [Box<dyn Editor>],
) -> Result<PnpResult> {
    config.validate()?;
    let n_slices = init_object.n_slices();
    if editors.len() != 1 && editors.len() != n_slices {
        return Err(Error::invalid(format!(
            "expected 1 or {n_slices} editors, got {}",
            editors.len()
        )));
    }
    let solver = Solver::new(&init_object, &init_probe, grid, data, solver_config)?;
    let mut admm = AdmmState::new(init_object, init_probe);
    let mut solver_state = SolverState::new(admm.o.clone(), admm.theta.clone());
    let mut result = PnpResult {
        final_object: admm.o.clone(),
        final_probe: admm.theta.clone(),
        per_epoch_loss: Vec::with_capacity(config.n_outer),
        consensus_history: Vec::with_capacity(config.n_outer),
        per_epoch_snapshots: config.save_snapshots.then(Vec::new),
        loss_history: Vec::new(),
        warnings: Vec::new(),
        config_echo: config.clone(),
    };

    for epoch in 0..config.n_outer {
        admm.epoch = epoch;
        if epoch > 0 {
            solver_state.object = combine(&admm.v, &admm.u, &admm.u, |v, u, _| v - u)?;
        }
        for _ in 0..config.n_inner {
            solver.iterate(&mut solver_state)?;
            if epoch > 0 && config.tau > 0.0 {
                solver_state.object = proximal_step(&solver_state.object, &admm.v, &admm.u, config.tau)?;
            }
        }
        admm.o = solver_state.object.clone();
        admm.theta = solver_state.probe.clone();

        let z = combine(&admm.o, &admm.u, &admm.u, |o, u, _| o + u)?;
        let v_prime = if epoch < config.edit_last_epoch {
            let mut slices = Vec::with_capacity(n_slices);
            for (j, zs) in z.slices().iter().enumerate() {
                let k = if editors.len() == 1 { 0 } else { j };
                let editor = editors[k].as_mut();
                if editor.is_identity() {
                    slices.push(zs.clone());
                    continue;
                }
                let request = &config.editor_for_slice(j).request;
                let threshold = config.stats_match_slice(j).then_some(config.stats_mask_threshold);
                match phase_only_edit_slice(zs, editor, request, threshold) {
                    Ok(s) => slices.push(s),
                    Err(e) if config.editor_optional => {
                        let msg = format!(
                            "epoch {epoch}, slice {j}: editor {} failed, kept unedited: {e}",
                            editor.name()
                        );
                        log::warn!("{msg}");
                        result.warnings.push(msg);
                        slices.push(zs.clone());
                    }
                    Err(e) => return Err(e),
                }
            }
            z.with_slices(slices)?
        } else {
            z
        };
        admm.v = relax(&v_prime, &admm.o, config.gamma)?;
        admm.u = dual_update(&admm.u, &admm.o, &admm.v)?;
        debug_assert!(admm.shapes_consistent());

        result
            .per_epoch_loss
            .push(solver_state.loss_history.last().copied().unwrap_or(f64::NAN));
        result.consensus_history.push(consensus_distance(&admm.o, &admm.v));
        if let Some(snaps) = result.per_epoch_snapshots.as_mut() {
            snaps.push(admm.o.clone());
        }
        log::info!(
            "epoch {epoch}: loss {:.4e}, |o - v| {:.4e}",
            result.per_epoch_loss[epoch],
            result.consensus_history[epoch]
        );
    }
    result.final_object = admm.o;
    result.final_probe = admm.theta;
    result.loss_history = solver_state.loss_history;
    Ok(result)
}
