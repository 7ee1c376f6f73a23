//! The fitting objective: blurred image similarity, soft Dice and
//! ejection-fraction keyframe terms, and two deformation regularizers, all
//! built on the tape so one backward pass serves every term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, TensorId};
use crate::field::identity_grid;

pub const DICE_EPS: f64 = 1e-6;
/// Foreground label of the LV cavity, the channel driving the EF term.
pub const LV_ENDO_CLASS: usize = 1;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{count} target frames but {warped} warped images")]
    LengthMismatch { count: usize, warped: usize },
    #[error("keyframe mask has no foreground pixels in {0}")]
    NoForeground(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn default_sim() -> f64 {
    1.0
}
fn default_seg() -> f64 {
    1.0
}
fn default_ef() -> f64 {
    1.0
}
fn default_jdet() -> f64 {
    2.5
}
fn default_smt() -> f64 {
    0.1
}
fn default_sigma_blur() -> f64 {
    1.0
}
fn default_eps_ef() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_sim")]
    pub sim: f64,
    #[serde(default = "default_seg")]
    pub seg: f64,
    #[serde(default = "default_ef")]
    pub ef: f64,
    #[serde(default = "default_jdet")]
    pub jdet: f64,
    #[serde(default = "default_smt")]
    pub smt: f64,
    /// Blur applied to both sides of the similarity term, px.
    #[serde(default = "default_sigma_blur")]
    pub sigma_blur: f64,
    #[serde(default = "default_eps_ef")]
    pub eps_ef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sim: default_sim(),
            seg: default_seg(),
            ef: default_ef(),
            jdet: default_jdet(),
            smt: default_smt(),
            sigma_blur: default_sigma_blur(),
            eps_ef: default_eps_ef(),
        }
    }
}

/// Tape nodes of the five terms and their weighted sum; `total` is the
/// backward root during fitting.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: TensorId,
    pub sim: TensorId,
    pub seg: TensorId,
    pub ef: TensorId,
    pub jdet: TensorId,
    pub smt: TensorId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: f64,
    pub seg: f64,
    pub ef: f64,
    pub jdet: f64,
    pub smt: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.sim.is_finite()
            && self.seg.is_finite()
            && self.ef.is_finite()
            && self.jdet.is_finite()
            && self.smt.is_finite()
    }
}

pub fn read_breakdown(tape: &Tape, nodes: &LossNodes) -> LossBreakdown {
    LossBreakdown {
        total: tape.scalar(nodes.total),
        sim: tape.scalar(nodes.sim),
        seg: tape.scalar(nodes.seg),
        ef: tape.scalar(nodes.ef),
        jdet: tape.scalar(nodes.jdet),
        smt: tape.scalar(nodes.smt),
    }
}

fn mean_of(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId, AutodiffError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / terms.len() as f64))
}

/// Mean over frames and pixels of the squared difference of sigma-blurred
/// images; frame 0 participates like any other.
pub fn sim_loss(
    tape: &mut Tape,
    frames: &[TensorId],
    warped: &[TensorId],
    sigma: f64,
) -> Result<TensorId, LossError> {
    if frames.len() != warped.len() || frames.is_empty() {
        return Err(LossError::LengthMismatch { count: frames.len(), warped: warped.len() });
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for (&f, &w) in frames.iter().zip(warped) {
        let bf = tape.gaussian_blur(f, sigma)?;
        let bw = tape.gaussian_blur(w, sigma)?;
        let d = tape.sub(bw, bf)?;
        let sq = tape.square(d);
        per_frame.push(tape.mean(sq));
    }
    Ok(mean_of(tape, &per_frame)?)
}

fn foreground_present(tape: &Tape, m1: TensorId, class: Option<usize>) -> bool {
    let s = tape.shape(m1);
    let (k, n) = (s[0], s[1] * s[2]);
    let v = tape.value(m1);
    let check = |ch: usize| v[ch * n..(ch + 1) * n].iter().any(|&x| x > 0.0);
    match class {
        Some(ch) => check(ch),
        None => (1..k).any(check),
    }
}

/// 1 minus the soft Dice coefficient, averaged over the non-background
/// channels of the keyframe mask.
pub fn seg_loss(tape: &mut Tape, m_hat1: TensorId, m1: TensorId) -> Result<TensorId, LossError> {
    let classes = tape.shape(m1)[0];
    if !foreground_present(tape, m1, None) {
        return Err(LossError::NoForeground("any foreground class"));
    }
    let mut dices = Vec::with_capacity(classes - 1);
    for k in 1..classes {
        let a = tape.slice_channel(m_hat1, k)?;
        let b = tape.slice_channel(m1, k)?;
        let ab = tape.mul(a, b)?;
        let inter = tape.sum(ab);
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let num = tape.mul_scalar(inter, 2.0);
        let num = tape.add_scalar(num, DICE_EPS);
        let den = tape.add(sa, sb)?;
        let den = tape.add_scalar(den, DICE_EPS);
        dices.push(tape.div(num, den)?);
    }
    let dice = mean_of(tape, &dices)?;
    let neg = tape.mul_scalar(dice, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Absolute relative error of the soft LV cavity area against the keyframe
/// mask's cavity area.
pub fn ef_loss(
    tape: &mut Tape,
    m_hat1: TensorId,
    m1: TensorId,
    eps: f64,
) -> Result<TensorId, LossError> {
    if !foreground_present(tape, m1, Some(LV_ENDO_CLASS)) {
        return Err(LossError::NoForeground("the LV cavity class"));
    }
    let s = tape.shape(m1);
    let n = s[1] * s[2];
    let target: f64 =
        tape.value(m1)[LV_ENDO_CLASS * n..(LV_ENDO_CLASS + 1) * n].iter().sum();
    let lv = tape.slice_channel(m_hat1, LV_ENDO_CLASS)?;
    let soft = tape.sum(lv);
    let ratio = tape.mul_scalar(soft, -1.0 / (target + eps));
    let diff = tape.add_scalar(ratio, 1.0);
    Ok(tape.abs(diff))
}

/// Mean over fields and cells of relu(-det)^2; zero exactly when no cell
/// folds.
pub fn jdet_regularizer(tape: &mut Tape, fields: &[TensorId]) -> Result<TensorId, LossError> {
    if fields.is_empty() {
        return Err(LossError::LengthMismatch { count: 0, warped: 0 });
    }
    let mut per_field = Vec::with_capacity(fields.len());
    for &f in fields {
        let det = tape.jacobian_det(f)?;
        let neg = tape.mul_scalar(det, -1.0);
        let r = tape.relu(neg);
        let sq = tape.square(r);
        per_field.push(tape.mean(sq));
    }
    Ok(mean_of(tape, &per_field)?)
}

/// Mean squared forward-difference gradient of the displacement u = phi -
/// identity over fields, cells, components, and directions.
pub fn smt_regularizer(tape: &mut Tape, fields: &[TensorId]) -> Result<TensorId, LossError> {
    if fields.is_empty() {
        return Err(LossError::LengthMismatch { count: 0, warped: 0 });
    }
    let s = tape.shape(fields[0]).to_vec();
    let id = tape.leaf(&s, identity_grid(s[0], s[1]), false);
    let mut per_field = Vec::with_capacity(fields.len());
    for &f in fields {
        let u = tape.sub(f, id)?;
        per_field.push(tape.gradsq_mean(u)?);
    }
    Ok(mean_of(tape, &per_field)?)
}

/// Everything the weighted objective consumes. `frames`/`warped` pair up
/// per frame; `fields` are the per-frame deformation fields.
pub struct ObjectiveInputs<'a> {
    pub frames: &'a [TensorId],
    pub warped: &'a [TensorId],
    pub m_hat1: TensorId,
    pub m1: TensorId,
    pub fields: &'a [TensorId],
}

/// Weighted sum in fixed fold order sim, seg, ef, jdet, smt.
pub fn total_objective(
    tape: &mut Tape,
    inputs: &ObjectiveInputs,
    weights: &LossWeights,
) -> Result<LossNodes, LossError> {
    let sim = sim_loss(tape, inputs.frames, inputs.warped, weights.sigma_blur)?;
    let seg = seg_loss(tape, inputs.m_hat1, inputs.m1)?;
    let ef = ef_loss(tape, inputs.m_hat1, inputs.m1, weights.eps_ef)?;
    let jdet = jdet_regularizer(tape, inputs.fields)?;
    let smt = smt_regularizer(tape, inputs.fields)?;
    let mut total = tape.mul_scalar(sim, weights.sim);
    for (term, w) in [(seg, weights.seg), (ef, weights.ef), (jdet, weights.jdet), (smt, weights.smt)]
    {
        let wt = tape.mul_scalar(term, w);
        total = tape.add(total, wt)?;
    }
    Ok(LossNodes { total, sim, seg, ef, jdet, smt })
}
