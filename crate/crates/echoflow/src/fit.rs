//! Per-sequence optimization: integrate the current velocity field, warp
//! frame 0 and the first-frame mask to every frame time, score the
//! objective, and Adam-step the parameters. Also renders fields and hard
//! masks from fitted parameters without gradients.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, TensorId};
use crate::field::{hard_labels, warp_image, warp_mask, DeformationField, LabelMask, OneHotMask};
use crate::flow::{FlowError, TimeGrid, VelocityProvider};
use crate::loss::{
    read_breakdown, total_objective, LossBreakdown, LossError, LossWeights, ObjectiveInputs,
};
use crate::model::{
    dense_grid_params, init_params, CnnStepProvider, DenseGridParams, DenseGridStepProvider,
    ModelConfig, ModelError, ModelParams, ParamTensor,
};
use crate::sequence::ImageSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Cnn,
    DenseGrid,
}

fn default_steps() -> usize {
    1000
}
fn default_lr() -> f64 {
    0.01
}
fn default_h() -> f64 {
    0.1
}
fn default_provider() -> ProviderKind {
    ProviderKind::Cnn
}
fn default_grid_sigma() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Euler step size over normalized time.
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_provider")]
    pub provider: ProviderKind,
    /// Print a progress line every this many steps; 0 keeps the fit silent.
    #[serde(default)]
    pub log_every: usize,
    /// Stop once the best total has not improved by 1e-6 for 50 steps.
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default)]
    pub model: ModelConfig,
    /// Smoothing of the dense-grid provider's upsampled field.
    #[serde(default = "default_grid_sigma")]
    pub grid_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: default_steps(),
            lr: default_lr(),
            h: default_h(),
            seed: 0,
            weights: LossWeights::default(),
            provider: default_provider(),
            log_every: 0,
            early_stop: false,
            model: ModelConfig::default(),
            grid_sigma: default_grid_sigma(),
        }
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("{0}")]
    BadInput(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite { step: usize, breakdown: LossBreakdown },
}

/// Parameters being optimized; which variant depends on the provider kind.
#[derive(Clone, Debug)]
pub enum FittedParams {
    Cnn(ModelParams),
    Dense(DenseGridParams),
}

impl FittedParams {
    pub fn tensors(&self) -> &[ParamTensor] {
        match self {
            FittedParams::Cnn(p) => &p.tensors,
            FittedParams::Dense(d) => std::slice::from_ref(&d.tensor),
        }
    }

    fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        match self {
            FittedParams::Cnn(p) => &mut p.tensors,
            FittedParams::Dense(d) => std::slice::from_mut(&mut d.tensor),
        }
    }

    pub fn as_cnn(&self) -> Option<&ModelParams> {
        match self {
            FittedParams::Cnn(p) => Some(p),
            FittedParams::Dense(_) => None,
        }
    }
}

#[derive(Debug)]
pub struct FitResult {
    pub params: FittedParams,
    pub fields: Vec<DeformationField>,
    pub masks: Vec<LabelMask>,
    /// Pre-update loss per executed step.
    pub history: Vec<LossBreakdown>,
    pub wall: Duration,
}

/// Bias-corrected Adam moments, one buffer pair per parameter tensor.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(tensors: &[ParamTensor]) -> Self {
        AdamState {
            m: tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(tensors: &mut [ParamTensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) {
    assert_eq!(tensors.len(), grads.len());
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, tensor) in tensors.iter_mut().enumerate() {
        assert_eq!(tensor.data.len(), grads[i].len(), "grad shape for {}", tensor.name);
        for (j, p) in tensor.data.iter_mut().enumerate() {
            let g = grads[i][j];
            state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
            state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
            let mh = state.m[i][j] / bc1;
            let vh = state.v[i][j] / bc2;
            *p -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
}

fn validate_config(config: &FitConfig) -> Result<(), FitError> {
    if config.steps < 1 {
        return Err(FitError::BadConfig("steps must be at least 1".into()));
    }
    if !(config.h > 0.0 && config.h <= 1.0) {
        return Err(FitError::BadConfig(format!("h = {} outside (0, 1]", config.h)));
    }
    if !(config.lr > 0.0) {
        return Err(FitError::BadConfig(format!("lr = {} must be > 0", config.lr)));
    }
    let w = &config.weights;
    for (name, v) in [
        ("sim", w.sim),
        ("seg", w.seg),
        ("ef", w.ef),
        ("jdet", w.jdet),
        ("smt", w.smt),
        ("sigma_blur", w.sigma_blur),
        ("eps_ef", w.eps_ef),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(FitError::BadConfig(format!("weight {name} = {v} must be finite and >= 0")));
        }
    }
    Ok(())
}

fn validate_inputs(
    seq: &ImageSequence,
    m0: &LabelMask,
    m1: &LabelMask,
    config: &FitConfig,
) -> Result<(), FitError> {
    for (name, m) in [("m0", m0), ("m1", m1)] {
        if (m.h, m.w) != (seq.h, seq.w) {
            return Err(FitError::BadInput(format!(
                "{name} extent {}x{} does not match frames {}x{}",
                m.h, m.w, seq.h, seq.w
            )));
        }
        let max = m.max_label();
        if usize::from(max) >= config.model.num_classes {
            return Err(FitError::BadInput(format!(
                "{name} contains label {max}; raise model num_classes above {max} (currently {})",
                config.model.num_classes
            )));
        }
    }
    if config.provider == ProviderKind::DenseGrid && (seq.h % 4 != 0 || seq.w % 4 != 0) {
        return Err(FitError::BadConfig(format!(
            "dense-grid provider needs extents divisible by 4, got {}x{}",
            seq.h, seq.w
        )));
    }
    Ok(())
}

fn init_fitted(seq: &ImageSequence, config: &FitConfig) -> FittedParams {
    match config.provider {
        ProviderKind::Cnn => FittedParams::Cnn(init_params(config.seed, &config.model)),
        ProviderKind::DenseGrid => {
            FittedParams::Dense(dense_grid_params(seq.h / 4, seq.w / 4, config.grid_sigma))
        }
    }
}

fn make_provider(
    tape: &mut Tape,
    fitted: &FittedParams,
    seq: &ImageSequence,
    m0h: &OneHotMask,
    requires_grad: bool,
) -> Result<(Box<dyn VelocityProvider>, Vec<TensorId>), FitError> {
    match fitted {
        FittedParams::Cnn(p) => {
            let prov = CnnStepProvider::new(tape, p, seq, m0h, requires_grad)?;
            let ids = prov.leaves().ordered.clone();
            Ok((Box::new(prov), ids))
        }
        FittedParams::Dense(d) => {
            let prov = DenseGridStepProvider::new(tape, d, requires_grad);
            let ids = vec![prov.leaf()];
            Ok((Box::new(prov), ids))
        }
    }
}

fn render(
    fitted: &FittedParams,
    seq: &ImageSequence,
    m0h: &OneHotMask,
    grid: &TimeGrid,
) -> Result<(Vec<DeformationField>, Vec<LabelMask>), FitError> {
    let (h, w, k) = (seq.h, seq.w, m0h.classes);
    let mut tape = Tape::new();
    let (mut provider, _) = make_provider(&mut tape, fitted, seq, m0h, false)?;
    let ids = crate::flow::integrate_forward(provider.as_mut(), grid, &mut tape)?;
    let m0_leaf = tape.leaf(&[k, h, w], m0h.data.clone(), false);
    let mut fields = Vec::with_capacity(ids.len());
    let mut masks = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        fields.push(DeformationField::new(tape.value(id).to_vec(), h, w, seq.times[i]));
        let m_hat = warp_mask(&mut tape, m0_leaf, id)?;
        masks.push(hard_labels(tape.value(m_hat), k, h, w));
    }
    Ok((fields, masks))
}

/// Inverse deformation at every frame time, by integrating the negated
/// velocity from each frame time back to 0. Composing with the forward
/// field recovers (approximately) the identity; frame annotations warp
/// back to the first frame through these.
pub fn inverse_fields(
    params: &FittedParams,
    seq: &ImageSequence,
    m0: &LabelMask,
    config: &FitConfig,
) -> Result<Vec<DeformationField>, FitError> {
    validate_config(config)?;
    validate_inputs(seq, m0, m0, config)?;
    let (h, w) = (seq.h, seq.w);
    let m0h = OneHotMask::from_labels(m0, config.model.num_classes);
    let grid = TimeGrid::build(&seq.times, config.h)?;
    let mut tape = Tape::new();
    let (mut provider, _) = make_provider(&mut tape, params, seq, &m0h, false)?;
    let mut out = Vec::with_capacity(seq.num_frames());
    for &t in &seq.times {
        let id = crate::flow::integrate_inverse(provider.as_mut(), &grid, t, &mut tape)
            .map_err(|e| match e {
                crate::flow::FlowIntegrateError::Flow(f) => FitError::Flow(f),
                crate::flow::FlowIntegrateError::Autodiff(a) => FitError::Autodiff(a),
            })?;
        out.push(DeformationField::new(tape.value(id).to_vec(), h, w, t));
    }
    Ok(out)
}

/// Run the optimization loop and render the final fields and masks from a
/// gradient-free pass over the updated parameters. Bitwise deterministic
/// for fixed inputs, config, and seed.
pub fn fit_sequence(
    seq: &ImageSequence,
    m0: &LabelMask,
    m1: &LabelMask,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let start = Instant::now();
    validate_config(config)?;
    validate_inputs(seq, m0, m1, config)?;
    let (h, w, k) = (seq.h, seq.w, config.model.num_classes);
    let m0h = OneHotMask::from_labels(m0, k);
    let m1h = OneHotMask::from_labels(m1, k);
    let grid = TimeGrid::build(&seq.times, config.h)?;

    let mut fitted = init_fitted(seq, config);
    let mut adam = AdamState::new(fitted.tensors());
    let mut history = Vec::with_capacity(config.steps);
    let mut best = f64::INFINITY;
    let mut stall = 0usize;

    for step in 0..config.steps {
        let mut tape = Tape::new();
        let (mut provider, ordered) = make_provider(&mut tape, &fitted, seq, &m0h, true)?;
        let fields = crate::flow::integrate_forward(provider.as_mut(), &grid, &mut tape)?;
        drop(provider);

        let targets: Vec<TensorId> =
            seq.frames.iter().map(|f| tape.leaf(&[h, w], f.clone(), false)).collect();
        let warped = fields
            .iter()
            .map(|&phi| warp_image(&mut tape, targets[0], phi))
            .collect::<Result<Vec<_>, _>>()?;
        let m0_leaf = tape.leaf(&[k, h, w], m0h.data.clone(), false);
        let m1_leaf = tape.leaf(&[k, h, w], m1h.data.clone(), false);
        let m_hat1 = warp_mask(&mut tape, m0_leaf, *fields.last().unwrap())?;

        let inputs = ObjectiveInputs {
            frames: &targets,
            warped: &warped,
            m_hat1,
            m1: m1_leaf,
            fields: &fields,
        };
        let nodes = total_objective(&mut tape, &inputs, &config.weights)?;
        let breakdown = read_breakdown(&tape, &nodes);
        if !breakdown.is_finite() {
            return Err(FitError::NonFinite { step, breakdown });
        }
        history.push(breakdown);
        if config.log_every > 0 && step % config.log_every == 0 {
            eprintln!(
                "step {step:>4}  total {:.6}  sim {:.6}  seg {:.6}  ef {:.6}  jdet {:.3e}  smt {:.3e}",
                breakdown.total,
                breakdown.sim,
                breakdown.seg,
                breakdown.ef,
                breakdown.jdet,
                breakdown.smt
            );
        }

        tape.backward(nodes.total, true)?;
        let grads: Vec<Vec<f64>> = ordered
            .iter()
            .zip(fitted.tensors())
            .map(|(&id, t)| {
                tape.grad(id).map_or_else(|| vec![0.0; t.data.len()], <[f64]>::to_vec)
            })
            .collect();
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(FitError::NonFinite { step, breakdown });
        }
        drop(tape);
        adam_step(fitted.tensors_mut(), &grads, &mut adam, config.lr);

        if config.early_stop {
            if breakdown.total < best - 1e-6 {
                best = breakdown.total;
                stall = 0;
            } else {
                stall += 1;
                if stall >= 50 {
                    break;
                }
            }
        }
    }

    let (fields, masks) = render(&fitted, seq, &m0h, &grid)?;
    Ok(FitResult { params: fitted, fields, masks, history, wall: start.elapsed() })
}

/// Fields and hard masks at every frame time from existing parameters.
pub fn propagate(
    params: &FittedParams,
    seq: &ImageSequence,
    m0: &LabelMask,
    config: &FitConfig,
) -> Result<(Vec<DeformationField>, Vec<LabelMask>), FitError> {
    validate_config(config)?;
    validate_inputs(seq, m0, m0, config)?;
    let m0h = OneHotMask::from_labels(m0, config.model.num_classes);
    let grid = TimeGrid::build(&seq.times, config.h)?;
    render(params, seq, &m0h, &grid)
}

pub fn propagate_masks(
    params: &FittedParams,
    seq: &ImageSequence,
    m0: &LabelMask,
    config: &FitConfig,
) -> Result<Vec<LabelMask>, FitError> {
    propagate(params, seq, m0, config).map(|(_, masks)| masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tensor(v: f64) -> Vec<ParamTensor> {
        vec![ParamTensor { name: "x".into(), shape: vec![1], data: vec![v] }]
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut tensors = scalar_tensor(1.0);
        let mut state = AdamState::new(&tensors);
        adam_step(&mut tensors, &[vec![1.0]], &mut state, 0.01);
        let expect = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((tensors[0].data[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn adam_leaves_params_alone_for_zero_gradient() {
        let mut tensors = scalar_tensor(0.3125);
        let mut state = AdamState::new(&tensors);
        for _ in 0..10 {
            adam_step(&mut tensors, &[vec![0.0]], &mut state, 0.01);
        }
        assert_eq!(tensors[0].data[0], 0.3125);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut tensors = scalar_tensor(1.0);
        let mut state = AdamState::new(&tensors);
        for _ in 0..100 {
            let g = 2.0 * tensors[0].data[0];
            adam_step(&mut tensors, &[vec![g]], &mut state, 0.1);
        }
        assert!(tensors[0].data[0].abs() < 0.05, "x = {}", tensors[0].data[0]);
    }

    fn tiny_sequence(h: usize, w: usize, distinct: bool) -> (ImageSequence, LabelMask, LabelMask) {
        let base: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.3 + 0.4 * ((x as f64 / w as f64) * (y as f64 / h as f64))
            })
            .collect();
        let second: Vec<f64> = if distinct {
            base.iter().enumerate().map(|(i, v)| v + 0.1 * ((i % 5) as f64 / 5.0)).collect()
        } else {
            base.clone()
        };
        let seq = ImageSequence::new(
            vec![base, second],
            h,
            w,
            ImageSequence::uniform_times(2),
            None,
        )
        .unwrap();
        let labels: Vec<u8> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                let (cy, cx) = (h as isize / 2, w as isize / 2);
                let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                if d2 < 9 {
                    1
                } else if d2 < 16 {
                    2
                } else {
                    0
                }
            })
            .collect();
        let m = LabelMask::new(labels, h, w);
        (seq, m.clone(), m)
    }

    fn quick_config(steps: usize) -> FitConfig {
        FitConfig { steps, h: 0.25, ..FitConfig::default() }
    }

    #[test]
    fn static_sequence_keeps_the_first_frame_mask() {
        let (seq, m0, m1) = tiny_sequence(16, 16, false);
        let result = fit_sequence(&seq, &m0, &m1, &quick_config(40)).unwrap();
        assert_eq!(result.history.len(), 40);
        let step0 = &result.history[0];
        assert_eq!(step0.sim, 0.0);
        assert_eq!(step0.seg, 0.0);
        assert_eq!(step0.jdet, 0.0);
        assert_eq!(step0.smt, 0.0);
        assert_eq!(result.masks.len(), 2);
        for m in &result.masks {
            assert_eq!(m.labels, m0.labels);
        }
    }

    #[test]
    fn fitting_is_bitwise_deterministic() {
        let (seq, m0, m1) = tiny_sequence(16, 16, true);
        let cfg = quick_config(5);
        let a = fit_sequence(&seq, &m0, &m1, &cfg).unwrap();
        let b = fit_sequence(&seq, &m0, &m1, &cfg).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total, y.total);
            assert_eq!(x.sim, y.sim);
        }
        for (x, y) in a.masks.iter().zip(&b.masks) {
            assert_eq!(x.labels, y.labels);
        }
        for (x, y) in a.fields.iter().zip(&b.fields) {
            assert_eq!(x.phi, y.phi);
        }
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn one_step_moves_the_zero_projection() {
        let (seq, m0, m1) = tiny_sequence(16, 16, true);
        let result = fit_sequence(&seq, &m0, &m1, &quick_config(1)).unwrap();
        let params = result.params.as_cnn().unwrap();
        let proj = params.tensor("proj.w").unwrap();
        assert!(proj.data.iter().any(|&x| x != 0.0), "projection untouched");
        assert!(result.history[0].total > 0.0);
    }

    #[test]
    fn dense_grid_provider_fits_too() {
        let (seq, m0, m1) = tiny_sequence(16, 16, true);
        let cfg = FitConfig { provider: ProviderKind::DenseGrid, ..quick_config(3) };
        let result = fit_sequence(&seq, &m0, &m1, &cfg).unwrap();
        assert_eq!(result.history.len(), 3);
        assert_eq!(result.masks.len(), 2);
        assert!(matches!(result.params, FittedParams::Dense(_)));
    }

    #[test]
    fn propagation_with_fresh_params_reproduces_m0() {
        let (seq, m0, _) = tiny_sequence(16, 16, true);
        let cfg = quick_config(1);
        let params = FittedParams::Cnn(init_params(3, &cfg.model));
        let masks = propagate_masks(&params, &seq, &m0, &cfg).unwrap();
        assert_eq!(masks.len(), seq.num_frames());
        for m in &masks {
            assert_eq!(m.labels, m0.labels);
        }
    }

    #[test]
    fn inverse_fields_of_fresh_params_are_the_identity() {
        let (seq, m0, _) = tiny_sequence(16, 16, true);
        let cfg = quick_config(1);
        let params = FittedParams::Cnn(init_params(5, &cfg.model));
        let invs = inverse_fields(&params, &seq, &m0, &cfg).unwrap();
        assert_eq!(invs.len(), seq.num_frames());
        let identity = crate::field::identity_grid(16, 16);
        for inv in &invs {
            assert_eq!(inv.phi, identity);
        }
    }

    #[test]
    fn inverse_composes_with_forward_to_near_identity() {
        let (seq, m0, m1) = tiny_sequence(16, 16, true);
        let cfg = FitConfig { steps: 30, ..quick_config(1) };
        let result = fit_sequence(&seq, &m0, &m1, &cfg).unwrap();
        let invs = inverse_fields(&result.params, &seq, &m0, &cfg).unwrap();
        let fwd = result.fields.last().unwrap();
        let inv = invs.last().unwrap();
        // Compose at interior pixels with a plain bilinear read of phi.
        let mut worst = 0.0f64;
        for y in 2..14usize {
            for x in 2..14usize {
                let j = (y * 16 + x) * 2;
                let (u, v) = (inv.phi[j], inv.phi[j + 1]);
                let x0 = (u.floor().max(0.0) as usize).min(14);
                let y0 = (v.floor().max(0.0) as usize).min(14);
                let (fx, fy) = (u - x0 as f64, v - y0 as f64);
                let mut px = 0.0;
                let mut py = 0.0;
                for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                        let k = ((y0 + dy) * 16 + x0 + dx) * 2;
                        px += wy * wx * fwd.phi[k];
                        py += wy * wx * fwd.phi[k + 1];
                    }
                }
                let e = ((px - x as f64).powi(2) + (py - y as f64).powi(2)).sqrt();
                worst = worst.max(e);
            }
        }
        assert!(worst < 0.5, "round trip error {worst}");
    }

    #[test]
    fn bad_configs_and_inputs_are_rejected_upfront() {
        let (seq, m0, m1) = tiny_sequence(16, 16, true);
        let err = |cfg: FitConfig| fit_sequence(&seq, &m0, &m1, &cfg).unwrap_err().to_string();
        assert!(err(FitConfig { steps: 0, ..quick_config(1) }).contains("steps"));
        assert!(err(FitConfig { h: 0.0, ..quick_config(1) }).contains("h ="));
        assert!(err(FitConfig { h: 1.5, ..quick_config(1) }).contains("h ="));
        assert!(err(FitConfig { lr: -0.5, ..quick_config(1) }).contains("lr"));
        let bad_w = FitConfig {
            weights: LossWeights { seg: f64::NAN, ..LossWeights::default() },
            ..quick_config(1)
        };
        assert!(err(bad_w).contains("seg"));

        let mut labels = m0.labels.clone();
        labels[0] = 7;
        let high = LabelMask::new(labels, 16, 16);
        let msg =
            fit_sequence(&seq, &high, &m1, &quick_config(1)).unwrap_err().to_string();
        assert!(msg.contains("label 7"), "{msg}");

        let small = LabelMask::new(vec![0u8; 64], 8, 8);
        let msg = fit_sequence(&seq, &small, &m1, &quick_config(1)).unwrap_err().to_string();
        assert!(msg.contains("does not match"), "{msg}");
    }

    #[test]
    fn non_finite_losses_abort_with_the_breakdown() {
        let (seq, m0, m1) = tiny_sequence(16, 16, true);
        let mut frames = seq.frames.clone();
        frames[1][5] = f64::NAN;
        let seq = ImageSequence::new(frames, 16, 16, seq.times.clone(), None).unwrap();
        let err = fit_sequence(&seq, &m0, &m1, &quick_config(3)).unwrap_err();
        match err {
            FitError::NonFinite { step, .. } => assert_eq!(step, 0),
            other => panic!("unexpected error {other}"),
        }
    }
}
