//! Velocity network: a strided-conv encoder, a time-encoded latent, and a
//! bilinear-upsampling decoder whose every stage output passes through
//! temporally conditioned adaptive normalization. Also provides a smoothed
//! dense-grid provider as an optimization baseline.
//!
//! The network maps (conditioning frame, first-frame mask, solver time s) to
//! a velocity field [H,W,2]. The final projection is zero-initialized, so a
//! fresh model always produces the identity flow.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, TensorId, UpsampleMode};
use crate::field::OneHotMask;
use crate::flow::{nearest_frame, VelocityProvider};
use crate::sequence::ImageSequence;

pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 32, 32];
pub const DECODER_CHANNELS: [usize; 7] = [32, 32, 32, 32, 32, 16, 16];
pub const DEFAULT_TIME_SCALE: f64 = 30.0;

/// Spatial downscale of each decoder stage relative to the input image.
const STAGE_DIV: [usize; 7] = [8, 4, 2, 1, 1, 1, 1];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("positional encoding dim must be even, got {0}")]
    OddPeDim(usize),
    #[error("image {h}x{w} is not divisible by 16; pad to {need_h}x{need_w}")]
    Indivisible { h: usize, w: usize, need_h: usize, need_w: usize },
    #[error("mask has {mask} classes but the model expects {model}")]
    ClassMismatch { mask: usize, model: usize },
    #[error("{0}")]
    BadInput(String),
    #[error("checkpoint {path}: {detail}")]
    BadCheckpoint { path: String, detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn default_num_classes() -> usize {
    3
}
fn default_pe_dim() -> usize {
    16
}
fn default_time_scale() -> f64 {
    DEFAULT_TIME_SCALE
}
fn default_lrelu_slope() -> f64 {
    0.2
}
fn default_spade_hidden() -> usize {
    32
}

/// Everything that determines parameter shapes and the forward computation.
/// The channel ladders themselves are fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// One-hot mask channels, background included.
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_pe_dim")]
    pub pe_dim: usize,
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
    #[serde(default = "default_lrelu_slope")]
    pub lrelu_slope: f64,
    #[serde(default = "default_spade_hidden")]
    pub spade_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: default_num_classes(),
            pe_dim: default_pe_dim(),
            time_scale: default_time_scale(),
            lrelu_slope: default_lrelu_slope(),
            spade_hidden: default_spade_hidden(),
        }
    }
}

/// FNV-1a over the canonical JSON encoding; stored in checkpoints so a file
/// cannot silently load under a different architecture.
pub fn config_hash(config: &ModelConfig) -> u64 {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sin/cos ladder (sin(w_k t'), cos(w_k t')) with t' = t * T_scale and
/// w_k = 10000^(-2k/dim).
pub fn positional_encoding(t: f64, dim: usize) -> Result<Vec<f64>, ModelError> {
    positional_encoding_scaled(t, dim, DEFAULT_TIME_SCALE)
}

pub fn positional_encoding_scaled(
    t: f64,
    dim: usize,
    time_scale: f64,
) -> Result<Vec<f64>, ModelError> {
    if dim % 2 != 0 {
        return Err(ModelError::OddPeDim(dim));
    }
    let tau = t * time_scale;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((omega * tau).sin());
        out.push((omega * tau).cos());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named shapes in declaration order; this order is the checkpoint layout
/// and the optimizer's parameter-vector order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let k = config.num_classes;
    let d = config.pe_dim;
    let hid = config.spade_hidden;
    let mut v = Vec::with_capacity(73);
    let enc_in = [1, ENCODER_CHANNELS[0], ENCODER_CHANNELS[1], ENCODER_CHANNELS[2]];
    for (i, (&cout, cin)) in ENCODER_CHANNELS.iter().zip(enc_in).enumerate() {
        v.push((format!("enc{}.w", i + 1), vec![cout, cin, 3, 3]));
        v.push((format!("enc{}.b", i + 1), vec![cout]));
    }
    // latent = e4 + pe channels; three skip concats, then plain stages
    let dec_in = [
        ENCODER_CHANNELS[3] + d + ENCODER_CHANNELS[2],
        DECODER_CHANNELS[0] + ENCODER_CHANNELS[1],
        DECODER_CHANNELS[1] + ENCODER_CHANNELS[0],
        DECODER_CHANNELS[2],
        DECODER_CHANNELS[3],
        DECODER_CHANNELS[4],
        DECODER_CHANNELS[5],
    ];
    for (s, (&cout, cin)) in DECODER_CHANNELS.iter().zip(dec_in).enumerate() {
        let n = s + 1;
        v.push((format!("dec{n}.w"), vec![cout, cin, 3, 3]));
        v.push((format!("dec{n}.b"), vec![cout]));
        v.push((format!("dec{n}.spade.trunk_m0.w"), vec![hid, k, 3, 3]));
        v.push((format!("dec{n}.spade.trunk_pe.w"), vec![hid, d, 3, 3]));
        v.push((format!("dec{n}.spade.trunk.b"), vec![hid]));
        v.push((format!("dec{n}.spade.gamma.w"), vec![cout, hid, 3, 3]));
        v.push((format!("dec{n}.spade.gamma.b"), vec![cout]));
        v.push((format!("dec{n}.spade.beta.w"), vec![cout, hid, 3, 3]));
        v.push((format!("dec{n}.spade.beta.b"), vec![cout]));
    }
    v.push(("proj.w".into(), vec![2, DECODER_CHANNELS[6], 1, 1]));
    v.push(("proj.b".into(), vec![2]));
    v
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor>,
}

/// He-uniform conv weights from one seeded stream, all biases zero, final
/// projection zero. Only nonzero tensors consume randomness, in declaration
/// order, so the stream layout is part of the reproducibility contract.
pub fn init_params(seed: u64, config: &ModelConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_specs(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 || name.starts_with("proj") {
                vec![0.0; n]
            } else {
                // split PE trunk keeps the fan-in of the logical joint conv
                // over (m0, pe) channels
                let fan_in = if name.contains("trunk") {
                    (config.num_classes + config.pe_dim) * 9
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0)).collect()
            };
            ParamTensor { name, shape, data }
        })
        .collect();
    ModelParams { config: config.clone(), tensors }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EODM";
const CHECKPOINT_VERSION: u8 = 1;

impl ModelParams {
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Magic, version byte, config hash, then the flat little-endian f64
    /// parameter vector in declaration order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::with_capacity(13 + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&config_hash(&self.config).to_le_bytes());
        for t in &self.tensors {
            for &x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams, ModelError> {
        let bad = |detail: String| ModelError::BadCheckpoint {
            path: path.display().to_string(),
            detail,
        };
        let buf = std::fs::read(path)?;
        if buf.len() < 13 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing EODM magic".into()));
        }
        if buf[4] != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", buf[4])));
        }
        let stored = u64::from_le_bytes(buf[5..13].try_into().unwrap());
        let expect = config_hash(config);
        if stored != expect {
            return Err(bad(format!(
                "config hash {stored:#018x} does not match the requested config ({expect:#018x})"
            )));
        }
        let specs = param_specs(config);
        let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if buf.len() != 13 + 8 * total {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * total,
                buf.len() - 13
            )));
        }
        let mut off = 13;
        let tensors = specs
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = buf[off..off + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                off += 8 * n;
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(ModelParams { config: config.clone(), tensors })
    }
}

/// Tape leaves for one SPADE stage.
#[derive(Clone, Copy, Debug)]
pub struct SpadeStage {
    pub trunk_m0_w: TensorId,
    pub trunk_pe_w: TensorId,
    pub trunk_b: TensorId,
    pub gamma_w: TensorId,
    pub gamma_b: TensorId,
    pub beta_w: TensorId,
    pub beta_b: TensorId,
}

/// All parameter leaves of one forward graph, in network order.
pub struct NetLeaves {
    pub enc_w: [TensorId; 4],
    pub enc_b: [TensorId; 4],
    pub dec_w: [TensorId; 7],
    pub dec_b: [TensorId; 7],
    pub spade: [SpadeStage; 7],
    pub proj_w: TensorId,
    pub proj_b: TensorId,
    /// Declaration-order view used to read gradients back out.
    pub ordered: Vec<TensorId>,
}

impl NetLeaves {
    /// Wire up ids that were created in declaration order.
    pub fn from_ordered(ids: Vec<TensorId>) -> NetLeaves {
        assert_eq!(ids.len(), 73, "expected one id per parameter tensor");
        let at = |i: usize| ids[i];
        let spade = std::array::from_fn(|s| {
            let b = 8 + 9 * s;
            SpadeStage {
                trunk_m0_w: at(b + 2),
                trunk_pe_w: at(b + 3),
                trunk_b: at(b + 4),
                gamma_w: at(b + 5),
                gamma_b: at(b + 6),
                beta_w: at(b + 7),
                beta_b: at(b + 8),
            }
        });
        NetLeaves {
            enc_w: std::array::from_fn(|i| at(2 * i)),
            enc_b: std::array::from_fn(|i| at(2 * i + 1)),
            dec_w: std::array::from_fn(|s| at(8 + 9 * s)),
            dec_b: std::array::from_fn(|s| at(8 + 9 * s + 1)),
            spade,
            proj_w: at(71),
            proj_b: at(72),
            ordered: ids,
        }
    }
}

pub fn param_leaves(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> NetLeaves {
    let ids: Vec<TensorId> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(&t.shape, t.data.clone(), requires_grad))
        .collect();
    NetLeaves::from_ordered(ids)
}

/// Top-left nearest resampling of `[c,h,w]` planes to `(h2,w2)`.
pub fn resize_nearest(data: &[f64], c: usize, h: usize, w: usize, h2: usize, w2: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            let sy = y * h / h2;
            for x in 0..w2 {
                out.push(plane[sy * w + x * w / w2]);
            }
        }
    }
    out
}

fn broadcast_leaf(tape: &mut Tape, vals: &[f64], h: usize, w: usize) -> TensorId {
    let mut data = Vec::with_capacity(vals.len() * h * w);
    for &v in vals {
        data.extend(std::iter::repeat(v).take(h * w));
    }
    tape.leaf(&[vals.len(), h, w], data, false)
}

/// Modulation with the per-stage trunk conv over the resized mask already
/// applied; the PE contribution folds in as a constant-channel conv.
fn spade_apply(
    tape: &mut Tape,
    f: TensorId,
    st: &SpadeStage,
    trunk_m0_feat: TensorId,
    pe: &Arc<Vec<f64>>,
    slope: f64,
) -> Result<TensorId, AutodiffError> {
    let z = tape.const_conv_add(trunk_m0_feat, st.trunk_pe_w, Some(st.trunk_b), pe.clone())?;
    let tf = tape.leaky_relu(z, slope);
    let gamma = tape.conv2d(tf, st.gamma_w, Some(st.gamma_b), 1, 1)?;
    let beta = tape.conv2d(tf, st.beta_w, Some(st.beta_b), 1, 1)?;
    let fh = tape.instance_norm(f, 1e-5)?;
    let gf = tape.mul(gamma, fh)?;
    tape.add(gf, beta)
}

/// Instance-normalize `f`, then scale and shift it with maps produced by a
/// two-layer conv over (nearest-resized first-frame mask, broadcast time
/// encoding).
pub fn spade_t_normalize(
    tape: &mut Tape,
    f: TensorId,
    st: &SpadeStage,
    m0_resized: TensorId,
    pe: &Arc<Vec<f64>>,
    slope: f64,
) -> Result<TensorId, AutodiffError> {
    let m0_feat = tape.conv2d(m0_resized, st.trunk_m0_w, None, 1, 1)?;
    spade_apply(tape, f, st, m0_feat, pe, slope)
}

fn encode(
    tape: &mut Tape,
    lv: &NetLeaves,
    image: TensorId,
    slope: f64,
) -> Result<[TensorId; 4], AutodiffError> {
    let mut x = image;
    let mut feats = [image; 4];
    for i in 0..4 {
        x = tape.conv2d(x, lv.enc_w[i], Some(lv.enc_b[i]), 2, 1)?;
        x = tape.leaky_relu(x, slope);
        feats[i] = x;
    }
    Ok(feats)
}

fn decode(
    tape: &mut Tape,
    config: &ModelConfig,
    lv: &NetLeaves,
    enc: &[TensorId; 4],
    trunk_m0: &[TensorId; 7],
    pe: &Arc<Vec<f64>>,
    h: usize,
    w: usize,
) -> Result<TensorId, AutodiffError> {
    let slope = config.lrelu_slope;
    let pe_planes = broadcast_leaf(tape, pe, h / 16, w / 16);
    let mut x = tape.concat(&[enc[3], pe_planes])?;
    for s in 0..7 {
        if s < 4 {
            x = tape.upsample2x(x, UpsampleMode::Bilinear)?;
        }
        if s < 3 {
            x = tape.concat(&[x, enc[2 - s]])?;
        }
        x = tape.conv2d(x, lv.dec_w[s], Some(lv.dec_b[s]), 1, 1)?;
        x = tape.leaky_relu(x, slope);
        x = spade_apply(tape, x, &lv.spade[s], trunk_m0[s], pe, slope)?;
    }
    let planes = tape.conv2d(x, lv.proj_w, Some(lv.proj_b), 1, 0)?;
    tape.planes_to_pairs(planes)
}

fn check_extent(h: usize, w: usize) -> Result<(), ModelError> {
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(ModelError::Indivisible {
            h,
            w,
            need_h: h.max(1).div_ceil(16) * 16,
            need_w: w.max(1).div_ceil(16) * 16,
        });
    }
    Ok(())
}

fn check_mask(m0: &OneHotMask, config: &ModelConfig, h: usize, w: usize) -> Result<(), ModelError> {
    if m0.classes != config.num_classes {
        return Err(ModelError::ClassMismatch { mask: m0.classes, model: config.num_classes });
    }
    if (m0.h, m0.w) != (h, w) {
        return Err(ModelError::BadInput(format!(
            "mask extent {}x{} does not match image {h}x{w}",
            m0.h, m0.w
        )));
    }
    Ok(())
}

fn trunk_m0_feats(
    tape: &mut Tape,
    lv: &NetLeaves,
    m0: &OneHotMask,
    h: usize,
    w: usize,
) -> Result<([TensorId; 7], [TensorId; 7]), AutodiffError> {
    // one resized-mask leaf per distinct scale, one trunk conv per stage
    let mut by_div: Vec<(usize, TensorId)> = Vec::new();
    let mut mask_ids = Vec::with_capacity(7);
    let mut feats = Vec::with_capacity(7);
    for s in 0..7 {
        let div = STAGE_DIV[s];
        let mask = match by_div.iter().find(|(d, _)| *d == div) {
            Some(&(_, id)) => id,
            None => {
                let data = resize_nearest(&m0.data, m0.classes, h, w, h / div, w / div);
                let id = tape.leaf(&[m0.classes, h / div, w / div], data, false);
                by_div.push((div, id));
                id
            }
        };
        mask_ids.push(mask);
        feats.push(tape.conv2d(mask, lv.spade[s].trunk_m0_w, None, 1, 1)?);
    }
    Ok((feats.try_into().unwrap(), mask_ids.try_into().unwrap()))
}

/// Forward through existing parameter leaves; useful when the caller
/// manages the tape (fitting, gradient checks).
pub fn net_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    lv: &NetLeaves,
    image: TensorId,
    m0: &OneHotMask,
    s: f64,
) -> Result<TensorId, ModelError> {
    let ishape = tape.shape(image).to_vec();
    if ishape.len() != 3 || ishape[0] != 1 {
        return Err(ModelError::BadInput(format!("image must be [1,h,w], got {ishape:?}")));
    }
    let (h, w) = (ishape[1], ishape[2]);
    check_extent(h, w)?;
    check_mask(m0, config, h, w)?;
    let enc = encode(tape, lv, image, config.lrelu_slope)?;
    let (trunk_m0, _) = trunk_m0_feats(tape, lv, m0, h, w)?;
    let pe = Arc::new(positional_encoding_scaled(s, config.pe_dim, config.time_scale)?);
    Ok(decode(tape, config, lv, &enc, &trunk_m0, &pe, h, w)?)
}

/// One full forward pass from raw inputs; builds fresh leaves for every
/// call. Fitting uses [`CnnStepProvider`], which shares leaves and caches
/// the per-frame encoder work across solver times.
pub fn velocity_net_forward(
    tape: &mut Tape,
    params: &ModelParams,
    image: &[f64],
    h: usize,
    w: usize,
    m0: &OneHotMask,
    s: f64,
) -> Result<TensorId, ModelError> {
    check_extent(h, w)?;
    if image.len() != h * w {
        return Err(ModelError::BadInput(format!(
            "image has {} samples, expected {h}x{w}",
            image.len()
        )));
    }
    let lv = param_leaves(tape, params, true);
    let img = tape.leaf(&[1, h, w], image.to_vec(), false);
    net_forward(tape, &params.config, &lv, img, m0, s)
}

/// Velocity provider for one fit step: parameter and frame leaves live on
/// one tape, the per-stage mask convs run once, and encoder features are
/// reused across all solver times that condition on the same frame.
pub struct CnnStepProvider {
    config: ModelConfig,
    h: usize,
    w: usize,
    frame_times: Vec<f64>,
    frames: Vec<TensorId>,
    leaves: NetLeaves,
    trunk_m0: [TensorId; 7],
    enc_cache: Vec<Option<[TensorId; 4]>>,
}

impl CnnStepProvider {
    pub fn new(
        tape: &mut Tape,
        params: &ModelParams,
        seq: &ImageSequence,
        m0: &OneHotMask,
        requires_grad: bool,
    ) -> Result<Self, ModelError> {
        let (h, w) = (seq.h, seq.w);
        check_extent(h, w)?;
        check_mask(m0, &params.config, h, w)?;
        let leaves = param_leaves(tape, params, requires_grad);
        let frames = seq
            .frames
            .iter()
            .map(|f| tape.leaf(&[1, h, w], f.clone(), false))
            .collect();
        let (trunk_m0, _) = trunk_m0_feats(tape, &leaves, m0, h, w)?;
        Ok(CnnStepProvider {
            config: params.config.clone(),
            h,
            w,
            frame_times: seq.times.clone(),
            frames,
            leaves,
            trunk_m0,
            enc_cache: vec![None; seq.num_frames()],
        })
    }

    pub fn leaves(&self) -> &NetLeaves {
        &self.leaves
    }
}

impl VelocityProvider for CnnStepProvider {
    fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn evaluate(&mut self, tape: &mut Tape, s: f64) -> Result<TensorId, AutodiffError> {
        let fi = nearest_frame(&self.frame_times, s);
        if self.enc_cache[fi].is_none() {
            let feats = encode(tape, &self.leaves, self.frames[fi], self.config.lrelu_slope)?;
            self.enc_cache[fi] = Some(feats);
        }
        let enc = self.enc_cache[fi].unwrap();
        let pe = Arc::new(
            positional_encoding_scaled(s, self.config.pe_dim, self.config.time_scale)
                .expect("dim validated at construction"),
        );
        decode(tape, &self.config, &self.leaves, &enc, &self.trunk_m0, &pe, self.h, self.w)
    }
}

/// Coarse stationary velocity: quarter-resolution control values, upsampled
/// bilinearly twice and blurred. Parameters are stored planar `[2,h/4,w/4]`.
#[derive(Clone, Debug)]
pub struct DenseGridParams {
    pub tensor: ParamTensor,
    pub sigma: f64,
    pub gh: usize,
    pub gw: usize,
}

pub fn dense_grid_params(gh: usize, gw: usize, sigma: f64) -> DenseGridParams {
    DenseGridParams {
        tensor: ParamTensor {
            name: "grid.w".into(),
            shape: vec![2, gh, gw],
            data: vec![0.0; 2 * gh * gw],
        },
        sigma,
        gh,
        gw,
    }
}

pub struct DenseGridStepProvider {
    leaf: TensorId,
    sigma: f64,
    gh: usize,
    gw: usize,
    cached: Option<TensorId>,
}

impl DenseGridStepProvider {
    pub fn new(tape: &mut Tape, params: &DenseGridParams, requires_grad: bool) -> Self {
        let leaf = tape.leaf(&params.tensor.shape, params.tensor.data.clone(), requires_grad);
        DenseGridStepProvider { leaf, sigma: params.sigma, gh: params.gh, gw: params.gw, cached: None }
    }

    pub fn leaf(&self) -> TensorId {
        self.leaf
    }
}

impl VelocityProvider for DenseGridStepProvider {
    fn extent(&self) -> (usize, usize) {
        (4 * self.gh, 4 * self.gw)
    }

    fn evaluate(&mut self, tape: &mut Tape, _s: f64) -> Result<TensorId, AutodiffError> {
        if let Some(id) = self.cached {
            return Ok(id);
        }
        let mut x = tape.upsample2x(self.leaf, UpsampleMode::Bilinear)?;
        x = tape.upsample2x(x, UpsampleMode::Bilinear)?;
        if self.sigma > 0.0 {
            x = tape.gaussian_blur(x, self.sigma)?;
        }
        let id = tape.planes_to_pairs(x)?;
        self.cached = Some(id);
        Ok(id)
    }
}

/// Stationary provider over interleaved `[gh,gw,2]` control values, for
/// inference-style use; fitting goes through [`DenseGridStepProvider`].
pub fn dense_grid_provider(
    tape: &mut Tape,
    grid: &[f64],
    gh: usize,
    gw: usize,
    sigma: f64,
) -> Result<DenseGridStepProvider, ModelError> {
    if grid.len() != gh * gw * 2 {
        return Err(ModelError::BadInput(format!(
            "grid has {} values, expected {gh}x{gw}x2",
            grid.len()
        )));
    }
    if !(sigma >= 0.0) {
        return Err(ModelError::BadInput(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut params = dense_grid_params(gh, gw, sigma);
    for i in 0..gh * gw {
        params.tensor.data[i] = grid[2 * i];
        params.tensor.data[gh * gw + i] = grid[2 * i + 1];
    }
    Ok(DenseGridStepProvider::new(tape, &params, false))
}

/// Finite-difference check of the whole network at 32x32: randomizes the
/// (normally zero) projection so gradients are visible everywhere, then
/// compares d mean(V^2)/d theta for a couple of coordinates per tensor.
/// Exhaustive per-op checks live in the autodiff gradcheck suite; this one
/// exercises their composition.
pub fn full_network_gradcheck(
    seed: u64,
) -> Result<crate::autodiff::GradCheckReport, AutodiffError> {
    use crate::autodiff::{grad_check, GradCheckOpts};
    use crate::field::LabelMask;

    let mut params = init_params(seed, &ModelConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    for name in ["proj.w", "proj.b"] {
        for x in &mut params.tensor_mut(name).unwrap().data {
            *x = 0.5 * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }
    let (h, w) = (32, 32);
    let image: Vec<f64> =
        (0..h * w).map(|i| (((i as u64 * 2654435761 + 388) % 1000) as f64) / 1000.0).collect();
    let labels: Vec<u8> = (0..h * w).map(|i| ((i * 31 + i / w) % 3) as u8).collect();
    let m0 = OneHotMask::from_labels(&LabelMask::new(labels, h, w), 3);
    let leaves: Vec<(Vec<usize>, Vec<f64>)> =
        params.tensors.iter().map(|t| (t.shape.clone(), t.data.clone())).collect();
    let config = params.config.clone();
    let opts = GradCheckOpts { step: 1e-6, max_coords_per_leaf: 2, seed: 0, kink_margin: 0.0 };
    grad_check(
        &leaves,
        |tape, ids| {
            let lv = NetLeaves::from_ordered(ids.to_vec());
            let img = tape.leaf(&[1, h, w], image.clone(), false);
            let v = net_forward(tape, &config, &lv, img, &m0, 0.37).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => AutodiffError::Invalid {
                    op: "velocity_net_forward",
                    detail: other.to_string(),
                },
            })?;
            let sq = tape.square(v);
            Ok(tape.mean(sq))
        },
        &opts,
    )
}
